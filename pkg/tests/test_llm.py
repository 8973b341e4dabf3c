import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from repal.llm import (
    ChatClient,
    ChatError,
    ChatParams,
    DialogueThread,
    EmptyCompletionError,
    LiveBackend,
    MockBackend,
    TransportError,
    UsageLedger,
    request_key,
)

PARAMS = ChatParams(model="mock", temperature=0.6)


class TestChatParams:
    def test_defaults_match_documented_values(self):
        params = ChatParams()
        assert params.temperature == 0.6
        assert params.max_tokens == 4096
        assert params.presence_penalty == 0.0

    def test_baseline_forces_temperature_zero(self):
        assert ChatParams(temperature=0.9).for_baseline().temperature == 0.0

    def test_validation(self):
        with pytest.raises(ChatError):
            ChatParams(temperature=-0.1)
        with pytest.raises(ChatError):
            ChatParams(max_tokens=0)


class TestDialogueThread:
    def test_roles_alternate(self):
        thread = DialogueThread("t")
        thread.append("user", "hi")
        with pytest.raises(ChatError):
            thread.append("user", "again")
        thread.append("assistant", "yo")
        thread.append("user", "more")

    def test_system_only_first(self):
        thread = DialogueThread("t")
        thread.append("system", "be terse")
        thread.append("user", "hi")
        with pytest.raises(ChatError):
            thread.append("system", "late")

    def test_fork_copies_history_under_new_id(self):
        thread = DialogueThread("t", "brief")
        thread.append("user", "hi")
        thread.append("assistant", "yo")
        fork = thread.fork("t:dev")
        assert [m.text for m in fork.messages] == ["hi", "yo"]
        assert fork.thread_id == "t:dev"
        fork.append("user", "extra")
        assert len(thread) == 2  # original untouched

    def test_json_roundtrip(self):
        thread = DialogueThread("t", "medium")
        thread.append("user", "hi")
        clone = DialogueThread.from_json(thread.to_json())
        assert clone.thread_id == "t" and clone.style_tag == "medium"
        assert [m.text for m in clone.messages] == ["hi"]


class TestMockBackend:
    def test_fixture_replay_deterministic(self):
        backend = MockBackend()
        key = backend.add_fixture("t", [{"role": "user", "content": "q"}], "a1")
        assert key == request_key("t", [{"role": "user", "content": "q"}])
        out1, _ = backend.complete("t", [{"role": "user", "content": "q"}], PARAMS)
        out2, _ = backend.complete("t", [{"role": "user", "content": "q"}], PARAMS)
        assert out1 == out2 == "a1"

    def test_thread_identity_is_part_of_key(self):
        backend = MockBackend(
            generator=lambda tid, msgs, params: f"reply for {tid}"
        )
        msgs = [{"role": "user", "content": "q"}]
        assert backend.complete("a", msgs, PARAMS)[0] != backend.complete("b", msgs, PARAMS)[0]

    def test_missing_fixture_raises(self):
        with pytest.raises(ChatError):
            MockBackend().complete("t", [{"role": "user", "content": "q"}], PARAMS)


class TestChatClient:
    def test_appends_turn_and_returns_reply(self):
        backend = MockBackend(generator=lambda tid, msgs, params: "reply")
        client = ChatClient(backend)
        thread = DialogueThread("t")
        assert client.chat(thread, "hello", PARAMS) == "reply"
        assert [m.role for m in thread.messages] == ["user", "assistant"]

    def test_second_call_sends_full_history(self):
        seen = []

        def generator(tid, msgs, params):
            seen.append([m["content"] for m in msgs])
            return f"r{len(seen)}"

        client = ChatClient(MockBackend(generator=generator))
        thread = DialogueThread("t")
        client.chat(thread, "first", PARAMS)
        client.chat(thread, "second", PARAMS)
        assert seen[1] == ["first", "r1", "second"]

    def test_journal_one_record_per_call(self, tmp_path):
        journal = tmp_path / "journal.jsonl"
        client = ChatClient(
            MockBackend(generator=lambda *a: "ok"), journal_path=journal
        )
        thread = DialogueThread("t")
        client.chat(thread, "one", PARAMS)
        client.chat(thread, "two", PARAMS)
        lines = [json.loads(l) for l in journal.read_text().splitlines()]
        assert [e["seq"] for e in lines] == [1, 2]
        assert lines[1]["request"]["messages"][0]["content"] == "one"
        assert lines[1]["response"]["text"] == "ok"

    def test_ledger_totals_are_sums(self):
        client = ChatClient(MockBackend(generator=lambda *a: "four"))
        thread = DialogueThread("t")
        client.chat(thread, "x" * 40, PARAMS)
        client.chat(thread, "y" * 40, PARAMS)
        ledger = client.ledger
        assert ledger.total_prompt_tokens == sum(r.prompt_tokens for r in ledger.records)
        assert ledger.total_completion_tokens == sum(
            r.completion_tokens for r in ledger.records
        )
        assert len(ledger.records) == 2

    def test_empty_completion_is_error(self):
        client = ChatClient(MockBackend(generator=lambda *a: ""))
        with pytest.raises(EmptyCompletionError):
            client.chat(DialogueThread("t"), "q", PARAMS)


class TestUsageLedger:
    def test_cost_from_price_table(self):
        ledger = UsageLedger(prices={"m": (1.0, 2.0)})
        ledger.add("t", "m", 1000, 500)
        assert ledger.total_cost == pytest.approx(1.0 + 1.0)

    def test_totals_nondecreasing(self):
        ledger = UsageLedger()
        last = 0
        for i in range(5):
            ledger.add("t", "m", i, i)
            assert ledger.total_prompt_tokens >= last
            last = ledger.total_prompt_tokens


class _FlakyHandler(BaseHTTPRequestHandler):
    failures = 2
    calls = 0

    def do_POST(self):
        cls = type(self)
        cls.calls += 1
        length = int(self.headers["Content-Length"])
        self.rfile.read(length)
        if cls.calls <= cls.failures:
            self.send_response(503)
            self.end_headers()
            return
        body = json.dumps(
            {
                "choices": [{"message": {"role": "assistant", "content": "live reply"}}],
                "usage": {"prompt_tokens": 7, "completion_tokens": 3},
            }
        ).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def flaky_server():
    _FlakyHandler.calls = 0
    server = HTTPServer(("127.0.0.1", 0), _FlakyHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/v1"
    server.shutdown()


class TestLiveBackend:
    def test_retries_then_succeeds(self, flaky_server, monkeypatch):
        monkeypatch.setattr("repal.llm.time.sleep", lambda s: None)
        backend = LiveBackend(base_url=flaky_server, api_key="k", max_attempts=5)
        client = ChatClient(backend)
        thread = DialogueThread("t")
        reply = client.chat(thread, "ping", ChatParams(model="m"))
        assert reply == "live reply"
        assert _FlakyHandler.calls == 3
        assert client.ledger.total_prompt_tokens == 7

    def test_attempts_bounded(self, flaky_server, monkeypatch):
        monkeypatch.setattr("repal.llm.time.sleep", lambda s: None)
        _FlakyHandler.failures = 99
        try:
            backend = LiveBackend(base_url=flaky_server, api_key="k", max_attempts=3)
            with pytest.raises(TransportError) as exc:
                backend.complete("t", [{"role": "user", "content": "q"}], ChatParams(model="m"))
            assert "after 3 attempts" in str(exc.value)
            assert _FlakyHandler.calls == 3
        finally:
            _FlakyHandler.failures = 2

    def test_requires_endpoint(self, monkeypatch):
        monkeypatch.delenv("REPAL_API_BASE", raising=False)
        with pytest.raises(ChatError):
            LiveBackend()


class TestJournalReplay:
    def test_replay_reproduces_threads_byte_identically(self, tmp_path):
        from repal.synthdata import ScriptedSynthesizer

        journal = tmp_path / "journal.jsonl"
        recorded = ChatClient(
            MockBackend(generator=ScriptedSynthesizer()), journal_path=journal
        )
        original = DialogueThread("replay:brief", "brief")
        recorded.chat(original, "generate 2 examples (numbered from 1 to 2) please", PARAMS)
        recorded.chat(original, "generate 1 more examples (numbered from 1 to 1)", PARAMS)

        replayer = ChatClient(MockBackend.from_journal(journal))
        replayed = DialogueThread("replay:brief", "brief")
        replayer.chat(replayed, "generate 2 examples (numbered from 1 to 2) please", PARAMS)
        replayer.chat(replayed, "generate 1 more examples (numbered from 1 to 1)", PARAMS)

        assert replayed.to_json() == original.to_json()

    def test_replay_rejects_unrecorded_requests(self, tmp_path):
        journal = tmp_path / "journal.jsonl"
        recorded = ChatClient(
            MockBackend(generator=lambda *a: "scripted"), journal_path=journal
        )
        recorded.chat(DialogueThread("t"), "recorded question", PARAMS)
        replayer = ChatClient(MockBackend.from_journal(journal))
        with pytest.raises(ChatError):
            replayer.chat(DialogueThread("t"), "novel question", PARAMS)
