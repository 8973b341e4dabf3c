"""Stdio server: one JSON request per line in, one JSON response per line out.

Commands:
    {"cmd": "ping"}                                        -> {"ok": true}
    {"cmd": "train", "train_path", "dev_path", "spec"}     -> {"ok", "model_handle", "report_path"}
    {"cmd": "score", "model_handle", "pairs_path", "out_path"} -> {"ok", "rows"}
    {"cmd": "shutdown"}                                    -> exits

The reserved handle "base" scores with the unmodified checkpoint. Errors come
back structured: {"ok": false, "error": {"code", "message"}}.
"""
from __future__ import annotations

import argparse
import json
import sys

from .nli import DEFAULT_BASE, WorkerError, WorkerSession


def serve(session: WorkerSession, stdin=None, stdout=None) -> None:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            _reply(stdout, {"ok": False, "error": {"code": "bad-json", "message": str(exc)}})
            continue
        cmd = request.get("cmd")
        try:
            if cmd == "ping":
                response = {"ok": True}
            elif cmd == "shutdown":
                _reply(stdout, {"ok": True})
                return
            elif cmd == "train":
                response = session.train(
                    request["train_path"], request["dev_path"], request.get("spec", {})
                )
            elif cmd == "score":
                rows = session.score(
                    request["model_handle"], request["pairs_path"], request["out_path"]
                )
                response = {"ok": True, "rows": rows}
            else:
                response = {
                    "ok": False,
                    "error": {"code": "unknown-cmd", "message": str(cmd)},
                }
        except WorkerError as exc:
            response = {"ok": False, "error": {"code": exc.code, "message": str(exc)}}
        except KeyError as exc:
            response = {
                "ok": False,
                "error": {"code": "bad-request", "message": f"missing field {exc}"},
            }
        except Exception as exc:  # keep the pipe alive with a structured error
            response = {
                "ok": False,
                "error": {"code": "internal", "message": f"{type(exc).__name__}: {exc}"},
            }
        _reply(stdout, response)


def _reply(stdout, payload: dict) -> None:
    stdout.write(json.dumps(payload) + "\n")
    stdout.flush()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="repal-worker", description=__doc__)
    parser.add_argument("--base", default=DEFAULT_BASE, help="base checkpoint id or path")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--models-dir", default="repal-worker-models")
    parser.add_argument("--amp", action="store_true", help="mixed-precision training")
    args = parser.parse_args(argv)
    try:
        session = WorkerSession(
            args.base, device=args.device, models_dir=args.models_dir, amp=args.amp
        )
    except WorkerError as exc:
        print(
            json.dumps({"ok": False, "error": {"code": exc.code, "message": str(exc)}}),
            flush=True,
        )
        return 2
    serve(session)
    return 0


if __name__ == "__main__":
    sys.exit(main())
