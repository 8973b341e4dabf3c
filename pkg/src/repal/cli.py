"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every run writes its
artifacts under a journaled run directory; secrets come from the environment
(REPAL_API_BASE, REPAL_API_KEY, REPAL_MODEL), never from config files.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import corpus as corpus_mod
from . import evaluation, loop, synthdata
from .classifier import ReferenceBackend, TrainSpec, train
from .core import (
    LabeledPair,
    canonical_json,
    definition_to_record,
    instance_from_record,
    instance_to_record,
    read_definitions,
    read_instances,
    write_definitions,
)
from .corpus import CorpusStore, EvalGroup
from .feedback import ScoreTable, sample_feedback, score_corpus
from .llm import ENV_MODEL, ChatClient, DialogueThread, LiveBackend, MockBackend
from .prompting import (
    PromptRequest,
    render_definition_derivation_prompt,
    render_negdef_prompt,
    render_seed_prompt,
)
from .synthdata import ScriptedSynthesizer
from .synthesis import parse_numbered_items


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(message)


def _load_config(path: str | None, overrides: dict | None = None) -> loop.RunConfig:
    raw: dict = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        raw.pop("fingerprint", None)
    for section, values in (overrides or {}).items():
        raw.setdefault(section, {})
        raw[section].update({k: v for k, v in values.items() if v is not None})
    if os.environ.get(ENV_MODEL) and "model" not in raw.get("chat", {}):
        raw.setdefault("chat", {})["model"] = os.environ[ENV_MODEL]
    return loop.RunConfig.from_dict(raw)


def _definitions_by_id(path: str) -> dict:
    return {d.id: d for d in read_definitions(path)}


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(payload))


def _read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


# --- subcommand handlers ------------------------------------------------------


def cmd_corpus_ingest(args) -> int:
    from .loaders import load_records

    store = corpus_mod.ingest(load_records(args.infile, args.format))
    store.save(args.out)
    print(f"stored {len(store)} instances ({len(store.rejected_log)} rejected) -> {args.out}")
    return 0


def cmd_corpus_downsample(args) -> int:
    store = CorpusStore.load(args.infile)
    out = corpus_mod.downsample(store, args.n, args.seed)
    out.save(args.out)
    print(f"downsampled {len(store)} -> {len(out)} instances ({args.out})")
    return 0


def cmd_synthdata(args) -> int:
    definitions, labeled, store = synthdata.make_dataset(
        seed=args.seed,
        per_relation=args.per_relation,
        corpus_size=args.corpus_size,
    )
    os.makedirs(args.out, exist_ok=True)
    write_definitions(
        os.path.join(args.out, "definitions.json"), list(definitions.values())
    )
    store.save(os.path.join(args.out, "corpus"))
    groups = corpus_mod.build_eval_groups(
        labeled, group_size=len(labeled), n_groups=1, rng_seed=args.seed
    )
    _write_json(os.path.join(args.out, "group.json"), groups[0].to_json())
    print(
        f"synthetic dataset: {len(definitions)} relations, "
        f"{sum(len(v) for v in labeled.values())} gold instances, "
        f"{len(store)}-instance corpus -> {args.out}"
    )
    return 0


def _services_for(config: loop.RunConfig, corpus_path: str | None) -> loop.Services:
    path = corpus_path or config["paths"]["corpus"]
    if not path:
        raise UsageError("a corpus store is required (--corpus or paths.corpus)")
    store = CorpusStore.load(path)
    return loop.default_services(config, store)


def cmd_loop_run(args) -> int:
    config = _load_config(args.config, {"run": {"rng_seed": args.seed, "jobs": args.jobs}})
    services = _services_for(config, args.corpus)
    definitions = _definitions_by_id(args.definitions)
    wanted = args.relations.split(",") if args.relations else sorted(definitions)
    missing = [r for r in wanted if r not in definitions]
    if missing:
        raise UsageError(f"definitions missing for relations: {missing}")
    states = loop.run_loop(
        config,
        services,
        args.out,
        [definitions[r] for r in wanted],
        iterations=args.iterations,
    )
    print(f"config fingerprint {config.fingerprint()[:16]}")
    for rel, state in sorted(states.items()):
        print(
            f"{rel}: iteration {state.iteration}, train {len(state.train_pairs)} pairs, "
            f"dev {len(state.dev_pairs)} pairs, model {state.model_handle}"
        )
    return 0


def cmd_loop_resume(args) -> int:
    persisted = loop.RunConfig.load(os.path.join(args.run, "config.json"))
    provided = _load_config(args.config) if args.config else None
    services = _services_for(persisted, args.corpus)
    states = loop.resume(args.run, services, provided)
    for rel, state in sorted(states.items()):
        print(f"{rel}: iteration {state.iteration} complete")
    return 0


def cmd_synthesize(args) -> int:
    config = _load_config(args.config)
    definitions = _definitions_by_id(args.definitions)
    if args.relation not in definitions:
        raise UsageError(f"unknown relation {args.relation}")
    definition = definitions[args.relation]
    counts = config["counts"]

    if args.dry_run:
        os.makedirs(os.path.join(args.out, "prompts"), exist_ok=True)
        rendered: dict[str, str] = {}
        if args.mode == "init":
            per_style = max(1, counts["k_pos_init"] // 3)
            for style in ("brief", "medium", "implicit"):
                rendered[f"initial-pos-{style}"] = render_seed_prompt(
                    definition, per_style, style
                )
        elif args.mode == "negatives":
            rendered["negdef-first"] = render_negdef_prompt(
                definition, [], counts["n_negdefs"]
            )
        else:
            from .prompting import UNINFORMATIVE_FEEDBACK, render_followup_positive_prompt

            rendered["followup-pos"] = render_followup_positive_prompt(
                definition,
                max(1, counts["followup_pos"] // 3),
                [UNINFORMATIVE_FEEDBACK],
            )
        for name, text in rendered.items():
            path = os.path.join(args.out, "prompts", f"{name}.txt")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
            print(f"wrote {path}")
        return 0

    services = _services_for(config, args.corpus)
    run = loop.RelationRun(definition, config, services, args.out)
    run.load_state()
    if args.mode == "init":
        steps = [(1, "synthesis")]
    else:
        iteration = args.iteration or max(run.state.iteration, 1) + 1
        step = "followup-pos" if args.mode == "followup" else "negatives"
        steps = [(iteration, "feedback"), (iteration, step)]
    for k, step in steps:
        if run.state.step_done(k, step):
            continue
        getattr(run, "_step_" + step.replace("-", "_"))(k)
        run._checkpoint(k, step)
    state = run.state
    print(
        f"{definition.id}: train {len(state.train_pairs)} pairs, "
        f"dev {len(state.dev_pairs)} pairs"
    )
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    definitions = _definitions_by_id(args.definitions)
    if args.relation not in definitions:
        raise UsageError(f"unknown relation {args.relation}")
    train_pairs = [
        LabeledPair(instance_from_record(r["instance"]), r["label"])
        for r in _read_jsonl(args.train)
    ]
    dev_pairs = [
        LabeledPair(instance_from_record(r["instance"]), r["label"])
        for r in _read_jsonl(args.dev)
    ]
    training = config["training"]
    spec = TrainSpec(
        train=train_pairs,
        dev=dev_pairs,
        definition=definitions[args.relation],
        epochs=training["epochs"],
        learning_rate=training["learning_rate"],
        batch_size=training["batch_size"],
        rng_seed=args.seed,
        checkpoint_metric=training["checkpoint_metric"],
        premise_tagging=training["premise_tagging"],
        decision_threshold=config["thresholds"]["decision"],
    )
    backend = ReferenceBackend(store_dir=args.models_dir)
    report = train(backend, spec)
    _write_json(os.path.join(args.models_dir, "report.json"), report.to_json())
    print(f"selected epoch {report.selected_epoch}, model {report.model_handle}")
    return 0


def cmd_score(args) -> int:
    config = _load_config(args.config)
    definitions = _definitions_by_id(args.definitions)
    store = CorpusStore.load(args.corpus)
    backend = ReferenceBackend(store_dir=args.models_dir)
    table = score_corpus(
        args.model,
        definitions[args.relation],
        store,
        backend,
        premise_tagging=config["training"]["premise_tagging"],
    )
    table.save(args.out, args.out + ".meta.json")
    print(f"scored {len(table.rows)} instances -> {args.out}")
    return 0


def cmd_feedback_sample(args) -> int:
    table = ScoreTable.load(args.scores, args.meta)
    store = CorpusStore.load(args.corpus)
    samples = sample_feedback(table, args.purpose, args.k, args.seed, store)
    payload = [
        {
            "purpose": s.purpose,
            "band": list(s.band),
            "rng_seed": s.rng_seed,
            "instances": [
                {"instance_id": inst.instance_id, "p_pos": p, **instance_to_record(inst)}
                for inst, p in s.instances
            ],
        }
        for s in samples
    ]
    _write_json(args.out, payload)
    print(f"sampled {[len(s.instances) for s in samples]} feedback instances -> {args.out}")
    return 0


def _group_from_file(path: str) -> EvalGroup:
    with open(path, "r", encoding="utf-8") as fh:
        return EvalGroup.from_json(json.load(fh))


def cmd_eval_run(args) -> int:
    group = _group_from_file(args.group)
    predictions_by_target: dict[str, dict] = {}
    for row in _read_jsonl(args.predictions):
        value = row["positive"] if "positive" in row else row["p_pos"]
        predictions_by_target.setdefault(row["target"], {})[row["instance_id"]] = value
    report = evaluation.run_protocol(group, predictions_by_target, threshold=args.threshold)
    _write_json(args.out, report.to_json())
    print(
        f"P {report.precision * 100:.2f} R {report.recall * 100:.2f} "
        f"F1 {report.f1 * 100:.2f} over {len(report.per_relation)} relations"
    )
    return 0


def cmd_eval_baseline(args) -> int:
    group = _group_from_file(args.group)
    if args.kind == "random":
        summary = evaluation.monte_carlo_random_guess(group, args.trials, args.seed)
        if args.out:
            _write_json(args.out, summary)
        print(
            f"random guess over {summary['trials']} trials: "
            f"P {summary['precision_mean'] * 100:.2f}±{summary['precision_sd'] * 100:.2f} "
            f"R {summary['recall_mean'] * 100:.2f}±{summary['recall_sd'] * 100:.2f} "
            f"F1 {summary['f1_mean'] * 100:.2f}"
        )
        return 0
    config = _load_config(args.config)
    definitions = _definitions_by_id(args.definitions)
    backend_kind = config["backends"]["llm"]
    if backend_kind == "scripted-mock":
        client = ChatClient(MockBackend(generator=ScriptedSynthesizer()))
    elif backend_kind == "live":
        client = ChatClient(LiveBackend())
    else:
        raise UsageError(f"llm backend {backend_kind!r} cannot answer baselines")
    report = evaluation.llm_binary_baseline(
        group,
        definitions,
        client,
        mode=args.kind,
        params=config.chat_params(),
        per_relation_downsample=args.per_relation,
        rng_seed=args.seed,
    )
    if args.out:
        _write_json(args.out, report.to_json())
    print(
        f"{args.kind}: P {report.precision * 100:.2f} R {report.recall * 100:.2f} "
        f"F1 {report.f1 * 100:.2f}"
    )
    return 0


def cmd_derive_def(args) -> int:
    config = _load_config(args.config)
    backend_kind = config["backends"]["llm"]
    if backend_kind == "scripted-mock":
        client = ChatClient(MockBackend(generator=ScriptedSynthesizer()))
    elif backend_kind == "live":
        client = ChatClient(LiveBackend())
    else:
        raise UsageError(f"llm backend {backend_kind!r} cannot derive definitions")
    shots_by_relation: dict[str, list] = {}
    for inst in read_instances(args.shots):
        if not inst.relation_id:
            raise UsageError(f"shot {inst.instance_id} lacks a relation id")
        shots_by_relation.setdefault(inst.relation_id, []).append(inst)
    derived = []
    from .core import RelationDefinition, canonical_tagged_text

    for rel in sorted(shots_by_relation):
        tagged = [canonical_tagged_text(i) for i in shots_by_relation[rel]]
        prompt = render_definition_derivation_prompt(tagged)
        thread = DialogueThread(f"derive:{rel}")
        reply = client.chat(thread, prompt, config.chat_params())
        template = _extract_definition_sentence(reply)
        if template is None:
            print(f"warning: no definition parsed for {rel}", file=sys.stderr)
            continue
        derived.append(
            RelationDefinition(
                id=rel, template=template, polarity="positive", origin="derived-from-fewshot"
            )
        )
    _write_json(args.out, [definition_to_record(d) for d in derived])
    print(f"derived {len(derived)} definitions -> {args.out}")
    return 0


def _extract_definition_sentence(reply: str) -> str | None:
    candidates = [body for _, body in parse_numbered_items(reply)]
    candidates.extend(line.strip() for line in reply.splitlines())
    for text in candidates:
        if text.count("<ENT0>") == 1 and text.count("<ENT1>") == 1:
            return text.strip().strip('"')
    return None


def cmd_report(args) -> int:
    summary: dict = {"run": args.run, "relations": {}}
    config_path = os.path.join(args.run, "config.json")
    if os.path.exists(config_path):
        summary["config_fingerprint"] = loop.RunConfig.load(config_path).fingerprint()
    for rel in sorted(os.listdir(args.run)):
        rel_dir = os.path.join(args.run, rel)
        state_path = os.path.join(rel_dir, "state.json")
        if not os.path.isfile(state_path):
            continue
        with open(state_path, "r", encoding="utf-8") as fh:
            state = json.load(fh)
        entry = {"iteration": state["iteration"], "model_handle": state["model_handle"]}
        usage_path = os.path.join(rel_dir, "usage.json")
        if os.path.exists(usage_path):
            with open(usage_path, "r", encoding="utf-8") as fh:
                entry["usage_totals"] = json.load(fh)["totals"]
        report_path = os.path.join(rel_dir, f"iter{state['iteration']}", "report.json")
        if os.path.exists(report_path):
            with open(report_path, "r", encoding="utf-8") as fh:
                entry["selected_epoch"] = json.load(fh)["selected_epoch"]
        summary["relations"][rel] = entry
        print(f"{rel}: iteration {entry['iteration']}, model {entry['model_handle']}")
    if args.out:
        _write_json(args.out, summary)
    return 0


def cmd_prompts_render(args) -> int:
    with open(args.slots, "r", encoding="utf-8") as fh:
        slots = json.load(fh)
    text = PromptRequest(args.kind, slots).render()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text)
    return 0


# --- parser ---------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="repal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    corpus_p = sub.add_parser("corpus", help="corpus ingestion and sampling")
    corpus_sub = corpus_p.add_subparsers(dest="subcommand", required=True)
    ingest_p = corpus_sub.add_parser("ingest")
    ingest_p.add_argument("--in", dest="infile", required=True)
    ingest_p.add_argument(
        "--format", choices=("interchange", "fewrel", "wiki-distant"), default="interchange"
    )
    ingest_p.add_argument("--out", required=True)
    ingest_p.set_defaults(func=cmd_corpus_ingest)
    down_p = corpus_sub.add_parser("downsample")
    down_p.add_argument("--in", dest="infile", required=True)
    down_p.add_argument("--n", type=int, default=10000)
    down_p.add_argument("--seed", type=int, default=0)
    down_p.add_argument("--out", required=True)
    down_p.set_defaults(func=cmd_corpus_downsample)

    synth_p = sub.add_parser("synthesize", help="generation steps outside the loop")
    synth_sub = synth_p.add_subparsers(dest="mode", required=True)
    for mode in ("init", "followup", "negatives"):
        mode_p = synth_sub.add_parser(mode)
        mode_p.add_argument("--config")
        mode_p.add_argument("--definitions", required=True)
        mode_p.add_argument("--relation", required=True)
        mode_p.add_argument("--corpus")
        mode_p.add_argument("--out", required=True)
        mode_p.add_argument("--iteration", type=int)
        mode_p.add_argument("--dry-run", action="store_true", dest="dry_run")
        mode_p.set_defaults(func=cmd_synthesize, mode=mode)

    train_p = sub.add_parser("train", help="train a classifier on labeled pair files")
    train_p.add_argument("--config")
    train_p.add_argument("--train", required=True)
    train_p.add_argument("--dev", required=True)
    train_p.add_argument("--definitions", required=True)
    train_p.add_argument("--relation", required=True)
    train_p.add_argument("--models-dir", required=True)
    train_p.add_argument("--seed", type=int, default=0)
    train_p.set_defaults(func=cmd_train)

    score_p = sub.add_parser("score", help="score a corpus with a trained model")
    score_p.add_argument("--config")
    score_p.add_argument("--definitions", required=True)
    score_p.add_argument("--relation", required=True)
    score_p.add_argument("--corpus", required=True)
    score_p.add_argument("--models-dir", required=True)
    score_p.add_argument("--model", required=True)
    score_p.add_argument("--out", required=True)
    score_p.set_defaults(func=cmd_score)

    feedback_p = sub.add_parser("feedback", help="feedback sampling")
    feedback_sub = feedback_p.add_subparsers(dest="subcommand", required=True)
    sample_p = feedback_sub.add_parser("sample")
    sample_p.add_argument("--scores", required=True)
    sample_p.add_argument("--meta", required=True)
    sample_p.add_argument("--purpose", choices=("followup-positive", "negdef"), required=True)
    sample_p.add_argument("--k", type=int, default=10)
    sample_p.add_argument("--seed", type=int, default=0)
    sample_p.add_argument("--corpus", required=True)
    sample_p.add_argument("--out", required=True)
    sample_p.set_defaults(func=cmd_feedback_sample)

    loop_p = sub.add_parser("loop", help="run or resume the refinement loop")
    loop_sub = loop_p.add_subparsers(dest="subcommand", required=True)
    run_p = loop_sub.add_parser("run")
    run_p.add_argument("--config")
    run_p.add_argument("--definitions", required=True)
    run_p.add_argument("--relations")
    run_p.add_argument("--corpus")
    run_p.add_argument("--iterations", type=int)
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--jobs", type=int)
    run_p.add_argument("--out", required=True)
    run_p.set_defaults(func=cmd_loop_run)
    resume_p = loop_sub.add_parser("resume")
    resume_p.add_argument("--run", required=True)
    resume_p.add_argument("--config")
    resume_p.add_argument("--corpus")
    resume_p.set_defaults(func=cmd_loop_resume)

    eval_p = sub.add_parser("eval", help="protocol evaluation and baselines")
    eval_sub = eval_p.add_subparsers(dest="subcommand", required=True)
    eval_run_p = eval_sub.add_parser("run")
    eval_run_p.add_argument("--group", required=True)
    eval_run_p.add_argument("--predictions", required=True)
    eval_run_p.add_argument("--threshold", type=float, default=0.5)
    eval_run_p.add_argument("--out", required=True)
    eval_run_p.set_defaults(func=cmd_eval_run)
    eval_base_p = eval_sub.add_parser("baseline")
    eval_base_p.add_argument(
        "--kind", choices=("random", "binary-choice", "qa-binary"), required=True
    )
    eval_base_p.add_argument("--group", required=True)
    eval_base_p.add_argument("--trials", type=int, default=1000)
    eval_base_p.add_argument("--seed", type=int, default=0)
    eval_base_p.add_argument("--config")
    eval_base_p.add_argument("--definitions")
    eval_base_p.add_argument("--per-relation", type=int, default=30, dest="per_relation")
    eval_base_p.add_argument("--out")
    eval_base_p.set_defaults(func=cmd_eval_baseline)

    derive_p = sub.add_parser("derive-def", help="derive definitions from few-shot instances")
    derive_p.add_argument("--shots", required=True)
    derive_p.add_argument("--out", required=True)
    derive_p.add_argument("--config")
    derive_p.set_defaults(func=cmd_derive_def)

    report_p = sub.add_parser("report", help="summarize a run directory")
    report_p.add_argument("--run", required=True)
    report_p.add_argument("--out")
    report_p.set_defaults(func=cmd_report)

    prompts_p = sub.add_parser("prompts", help="render prompt templates")
    prompts_sub = prompts_p.add_subparsers(dest="subcommand", required=True)
    render_p = prompts_sub.add_parser("render")
    render_p.add_argument("--kind", required=True)
    render_p.add_argument("--slots", required=True)
    render_p.add_argument("--out")
    render_p.set_defaults(func=cmd_prompts_render)

    synthdata_p = sub.add_parser("synthdata", help="write the bundled synthetic dataset")
    synthdata_p.add_argument("--out", required=True)
    synthdata_p.add_argument("--seed", type=int, default=0)
    synthdata_p.add_argument("--per-relation", type=int, default=40, dest="per_relation")
    synthdata_p.add_argument("--corpus-size", type=int, default=2000, dest="corpus_size")
    synthdata_p.set_defaults(func=cmd_synthdata)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures are exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
