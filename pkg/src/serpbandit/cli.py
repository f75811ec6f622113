"""Command-line entry points for the full pipeline.

Every subcommand prints a one-line summary to stdout and writes full
reports to files. Output files are written atomically (temp + rename).
Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from serpbandit import hsmm as hsmm_mod
from serpbandit.bandits import POLICY_NAMES, save_checkpoint
from serpbandit.clicklog import MalformedLine, ParseStats, iter_records, load_sessions
from serpbandit.errors import SerpBanditError
from serpbandit.replay import (
    ReplayConfig,
    assign_topic_rows,
    build_warm_artifacts,
    compare,
    replay_with_policy,
    sweep_clusters,
    train_topic_experts,
    train_topic_model,
    write_trace_csv,
)
from serpbandit.synth import SynthConfig, generate_files
from serpbandit.topics import TopicModel, build_session_docs, gibbs_train


def _write_atomic_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _move_atomic(tmp_path: str, path: str) -> None:
    os.replace(tmp_path, path)


def _dump_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_parse_check(args) -> int:
    stats = ParseStats()
    try:
        for _ in iter_records(args.log, strict=args.strict, stats=stats):
            pass
    except MalformedLine as exc:
        print(f"parse-check: aborted: {exc}", file=sys.stderr)
        return 1
    print(f"parse-check: {stats.summary()}")
    for line_no, reason in stats.errors:
        print(f"  line {line_no}: {reason}", file=sys.stderr)
    return 0


def cmd_label(args) -> int:
    sessions, stats = load_sessions(args.log, strict=args.strict)
    grade_hist = [0, 0, 0]
    lines = []
    n_serps = 0
    n_clicks = 0
    for session in sessions:
        serps = []
        for serp in session.serps:
            clicks = []
            for click in serp.clicks:
                clicks.append(
                    {
                        "url_id": click.url_id,
                        "time_passed": click.time_passed,
                        "dwell": click.dwell,
                        "grade": click.grade,
                    }
                )
                grade_hist[click.grade] += 1
                n_clicks += 1
            serps.append(
                {
                    "serp_id": serp.serp_id,
                    "query_id": serp.query_id,
                    "time_passed": serp.time_passed,
                    "terms": list(serp.terms),
                    "results": [list(pair) for pair in serp.results],
                    "clicks": clicks,
                }
            )
            n_serps += 1
        lines.append(
            json.dumps(
                {
                    "session_id": session.session_id,
                    "day": session.day,
                    "user_id": session.user_id,
                    "serps": serps,
                },
                sort_keys=True,
            )
        )
    _write_atomic_text(args.out, "\n".join(lines) + ("\n" if lines else ""))
    print(
        f"label: {len(sessions)} sessions, {n_serps} serps, {n_clicks} clicks "
        f"(grades {grade_hist[0]}/{grade_hist[1]}/{grade_hist[2]}) "
        f"[{stats.malformed} malformed lines skipped]"
    )
    return 0


def cmd_synth(args) -> int:
    if args.config:
        config = SynthConfig.from_file(args.config)
        overrides = dict(kv.split("=", 1) for kv in args.set or [])
        if overrides or args.seed is not None:
            values = {k: str(v) for k, v in config.to_dict().items()}
            values.update(overrides)
            if args.seed is not None:
                values["seed"] = str(args.seed)
            config = SynthConfig.from_mapping(values)
    else:
        values = dict(kv.split("=", 1) for kv in args.set or [])
        if args.seed is not None:
            values["seed"] = str(args.seed)
        config = SynthConfig.from_mapping(values)
    tmp_log = f"{args.out}.tmp.{os.getpid()}"
    tmp_truth = f"{args.truth}.tmp.{os.getpid()}"
    counts = generate_files(config, tmp_log, tmp_truth)
    _move_atomic(tmp_log, args.out)
    _move_atomic(tmp_truth, args.truth)
    print(
        f"synth: {counts.sessions} sessions, {counts.serps} serps, "
        f"{counts.clicks} clicks, {counts.lines} lines -> {args.out}"
    )
    return 0


def cmd_topics(args) -> int:
    sessions, _stats = load_sessions(args.log)
    docs = build_session_docs(sessions)
    model = gibbs_train(
        docs,
        args.clusters,
        iterations=args.iterations,
        seed=args.seed,
        track_likelihood=False,
    )
    tmp = f"{args.out}.tmp.{os.getpid()}"
    model.save(tmp)
    _move_atomic(tmp, args.out)
    if args.export:
        header = f"clusters {model.n_topics}\nvocab {len(model.vocab)}\n"
        rows = []
        inv = {v: k for k, v in model.vocab.items()}
        for k in range(model.n_topics):
            top = np.argsort(model.phi[k])[::-1][:10]
            rows.append(
                f"topic {k}: " + " ".join(f"{inv[int(i)]}:{model.phi[k][i]:.4f}" for i in top)
            )
        _write_atomic_text(args.export, header + "\n".join(rows) + "\n")
    print(
        f"topics: {len(docs)} session docs, vocab {len(model.vocab)}, "
        f"{model.n_topics} clusters -> {args.out}"
    )
    return 0


def cmd_train_experts(args) -> int:
    sessions, _stats = load_sessions(args.log)
    topic_model = TopicModel.load(args.topics_model)
    config = ReplayConfig(
        seed=args.seed,
        clusters=topic_model.n_topics,
        expert_epochs=args.epochs,
        expert_learning_rate=args.learning_rate,
        expert_l2=args.l2,
        lda_infer_sweeps=args.infer_sweeps,
    )
    warm = build_warm_artifacts(sessions, collect_rows=True)
    per_topic = assign_topic_rows(topic_model, warm.session_rows, config)
    experts = train_topic_experts(per_topic, config)
    os.makedirs(args.out_dir, exist_ok=True)
    for expert in experts:
        path = os.path.join(args.out_dir, f"expert_{expert.topic_id:03d}.bin")
        tmp = f"{path}.tmp.{os.getpid()}"
        expert.save(tmp)
        _move_atomic(tmp, path)
    sizes = ", ".join(str(e.training_pairs) for e in experts)
    print(f"train-experts: {len(experts)} experts (pairs per topic: {sizes}) -> {args.out_dir}")
    return 0


def _replay_config_from(args) -> ReplayConfig:
    config = ReplayConfig(seed=args.seed)
    for name in (
        "warm_days", "clusters", "gamma", "eta", "v", "alpha_explore",
        "lda_iterations", "lda_max_docs", "lda_infer_sweeps",
        "expert_epochs", "expert_learning_rate", "expert_l2",
        "expert_max_pairs", "trace_every",
    ):
        value = getattr(args, name, None)
        if value is not None:
            config = dataclasses.replace(config, **{name: value})
    if getattr(args, "no_retrain", False):
        config = dataclasses.replace(config, retrain_each_day=False)
    if getattr(args, "strict", False):
        config = dataclasses.replace(config, strict_parse=True)
    return config


def cmd_replay(args) -> int:
    config = _replay_config_from(args)
    report, policy, rng = replay_with_policy(
        args.log, args.policy, config, truth_path=args.truth
    )
    _write_atomic_text(args.out, _dump_json(report))
    if args.trace:
        tmp = f"{args.trace}.tmp.{os.getpid()}"
        write_trace_csv(report, tmp, trace_every=config.trace_every)
        _move_atomic(tmp, args.trace)
    if args.checkpoint_out:
        tmp = f"{args.checkpoint_out}.tmp.{os.getpid()}"
        save_checkpoint(tmp, policy, rng)
        _move_atomic(tmp, args.checkpoint_out)
    print(
        f"replay: policy={args.policy} events={report['events']} "
        f"ctr@1={report['ctr_at_1']:.4f} -> {args.out}"
    )
    return 0


def cmd_compare(args) -> int:
    config = _replay_config_from(args)
    if args.sweep_clusters:
        ks = [int(k) for k in args.sweep_clusters.split(",")]
        report = sweep_clusters(args.log, ks, config, truth_path=args.truth)
        _write_atomic_text(args.out, _dump_json(report))
        curve = " ".join(f"K={p['clusters']}:{p['ctr_at_1']:.4f}" for p in report["curve"])
        print(f"compare: sweep {curve} (random {report['random']['ctr_at_1']:.4f}) -> {args.out}")
        return 0
    policies = args.policies.split(",")
    report = compare(args.log, policies, config, truth_path=args.truth)
    _write_atomic_text(args.out, _dump_json(report))
    summary = " ".join(
        f"{name}:{rep['ctr_at_1']:.4f}" for name, rep in report["policies"].items()
    )
    print(f"compare: {summary} -> {args.out}")
    return 0


def _read_sequences(path: str) -> list[list[int]]:
    sequences = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                sequences.append([int(tok) for tok in line.split()])
            except ValueError as exc:
                raise SerpBanditError(f"{path}:{line_no}: {exc}") from exc
    if not sequences:
        raise SerpBanditError(f"{path}: no observation sequences")
    return sequences


def cmd_hsmm(args) -> int:
    if args.action == "train":
        corpus = _read_sequences(args.data)
        n_symbols = args.vocab_size or max(max(seq) for seq in corpus) + 1
        model = hsmm_mod.HsmmModel.random(args.states, args.max_duration, n_symbols, seed=args.seed)
        model, history = hsmm_mod.fit(model, corpus, args.iterations)
        tmp = f"{args.out}.tmp.{os.getpid()}"
        model.save(tmp)
        _move_atomic(tmp, args.out)
        print(
            f"hsmm train: states={args.states} max_duration={args.max_duration} "
            f"symbols={n_symbols} sequences={len(corpus)} "
            f"loglik {history[0]:.4f} -> {history[-1]:.4f} -> {args.out}"
        )
        return 0
    if args.action == "eval":
        model = hsmm_mod.HsmmModel.load(args.model)
        corpus = _read_sequences(args.data)
        per_seq = [hsmm_mod.forward(model, seq)[1] for seq in corpus]
        total = sum(per_seq)
        if args.out:
            _write_atomic_text(
                args.out,
                _dump_json({"total_loglik": total, "per_sequence": per_seq}),
            )
        print(f"hsmm eval: {len(corpus)} sequences, total loglik {total:.4f}")
        return 0
    if args.action == "predict":
        model = hsmm_mod.HsmmModel.load(args.model)
        corpus = _read_sequences(args.data)
        out = []
        for seq in corpus:
            la, loglik = hsmm_mod.forward(model, seq)
            prediction = hsmm_mod.predict_next(model, la, len(seq))
            entries = [
                {"state": j, "duration": d + 1, "prob": float(prediction[j, d])}
                for j in range(model.n_states)
                for d in range(model.max_duration)
            ]
            out.append({"loglik": loglik, "next_segment": entries})
        if args.out:
            _write_atomic_text(args.out, _dump_json({"sequences": out}))
        print(f"hsmm predict: {len(corpus)} sequences")
        return 0
    raise SerpBanditError(f"unknown hsmm action {args.action!r}")


def cmd_report(args) -> int:
    with open(args.input, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    if "policies" in report:
        if not args.policy:
            names = ", ".join(report["policies"])
            raise SerpBanditError(f"comparison report: pick one of --policy {names}")
        source = report["policies"][args.policy]
        trace_every = report.get("config", {}).get("trace_every", 1000)
    else:
        source = report
        trace_every = report.get("config", {}).get("trace_every", 1000)
    if args.csv:
        tmp = f"{args.csv}.tmp.{os.getpid()}"
        write_trace_csv(source, tmp, trace_every=trace_every)
        _move_atomic(tmp, args.csv)
    print(
        f"report: policy={source.get('policy', '?')} events={source.get('events', 0)} "
        f"ctr@1={source.get('ctr_at_1', 0.0):.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_replay_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=0, help="master seed")
    sub.add_argument("--warm-days", dest="warm_days", type=int, default=None,
                     help="training-period days before scoring starts")
    sub.add_argument("--clusters", type=int, default=None, help="session topic count")
    sub.add_argument("--gamma", type=float, default=None, help="ensemble smoothing")
    sub.add_argument("--eta", type=float, default=None, help="ensemble learning rate")
    sub.add_argument("--v", type=float, default=None, help="posterior scale of the linear sampler")
    sub.add_argument("--alpha-explore", dest="alpha_explore", type=float, default=None,
                     help="ucb exploration width")
    sub.add_argument("--lda-iterations", dest="lda_iterations", type=int, default=None)
    sub.add_argument("--lda-max-docs", dest="lda_max_docs", type=int, default=None)
    sub.add_argument("--lda-infer-sweeps", dest="lda_infer_sweeps", type=int, default=None)
    sub.add_argument("--expert-epochs", dest="expert_epochs", type=int, default=None)
    sub.add_argument("--expert-learning-rate", dest="expert_learning_rate", type=float, default=None)
    sub.add_argument("--expert-l2", dest="expert_l2", type=float, default=None)
    sub.add_argument("--expert-max-pairs", dest="expert_max_pairs", type=int, default=None)
    sub.add_argument("--trace-every", dest="trace_every", type=int, default=None)
    sub.add_argument("--no-retrain", action="store_true", help="disable day-boundary retraining")
    sub.add_argument("--strict", action="store_true", help="abort on the first malformed line")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="serpbandit",
        description="Contextual-bandit re-ranking over click logs with offline replay evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse-check", help="validate a log file against the grammar")
    p.add_argument("--log", required=True)
    p.add_argument("--strict", action="store_true", help="abort on the first malformed line")
    p.set_defaults(func=cmd_parse_check)

    p = sub.add_parser("label", help="parse, assemble sessions and write labeled JSONL")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("synth", help="generate a synthetic log with a truth sidecar")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="log output path")
    p.add_argument("--truth", required=True, help="truth sidecar output path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("topics", help="cluster sessions with LDA and save the model")
    p.add_argument("--log", required=True)
    p.add_argument("--clusters", type=int, default=7)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--export", help="optional text export of the top terms")
    p.set_defaults(func=cmd_topics)

    p = sub.add_parser("train-experts", help="train one ranker per session topic")
    p.add_argument("--log", required=True)
    p.add_argument("--topics-model", dest="topics_model", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=0.1)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--infer-sweeps", dest="infer_sweeps", type=int, default=20)
    p.set_defaults(func=cmd_train_experts)

    p = sub.add_parser("replay", help="replay one policy over a log and report CTR@1")
    p.add_argument("--log", required=True)
    p.add_argument("--policy", required=True, choices=POLICY_NAMES)
    p.add_argument("--truth", help="truth sidecar for regret accounting")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--trace", help="optional CTR trace CSV path")
    p.add_argument("--checkpoint-out", dest="checkpoint_out",
                   help="save the final policy state (stateful policies only)")
    _add_replay_flags(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("compare", help="replay several policies on identical streams")
    p.add_argument("--log", required=True)
    p.add_argument("--truth", help="truth sidecar for regret accounting")
    p.add_argument("--policies", default="default,random,linucb,ts-linear,gts",
                   help="comma-separated policy list")
    p.add_argument("--sweep-clusters", dest="sweep_clusters",
                   help="comma-separated cluster counts; runs the ensemble per count instead")
    p.add_argument("--out", required=True)
    _add_replay_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("hsmm", help="explicit-duration sequence model tools")
    hsub = p.add_subparsers(dest="action", required=True)
    ptrain = hsub.add_parser("train", help="fit a model with EM on observation sequences")
    ptrain.add_argument("--data", required=True, help="one space-separated sequence per line")
    ptrain.add_argument("--states", type=int, required=True)
    ptrain.add_argument("--max-duration", dest="max_duration", type=int, required=True)
    ptrain.add_argument("--vocab-size", dest="vocab_size", type=int, default=None)
    ptrain.add_argument("--iterations", type=int, default=10)
    ptrain.add_argument("--seed", type=int, default=0)
    ptrain.add_argument("--out", required=True)
    ptrain.set_defaults(func=cmd_hsmm)
    peval = hsub.add_parser("eval", help="log-likelihood of sequences under a model")
    peval.add_argument("--model", required=True)
    peval.add_argument("--data", required=True)
    peval.add_argument("--out")
    peval.set_defaults(func=cmd_hsmm)
    ppred = hsub.add_parser("predict", help="next-segment distribution after each sequence")
    ppred.add_argument("--model", required=True)
    ppred.add_argument("--data", required=True)
    ppred.add_argument("--out")
    ppred.set_defaults(func=cmd_hsmm)

    p = sub.add_parser("report", help="convert a JSON report to a plottable CSV trace")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--policy", help="policy name inside a comparison report")
    p.add_argument("--csv", help="trace CSV output path")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SerpBanditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
