"""Offline replay: stream labeled sessions through a policy and score CTR@1.

The replay loop walks sessions in time order. Days before the warm
boundary only build state: count stores accumulate, and (for ensemble
policies) per-session feature rows are kept for topic clustering and
ranker training. On scored days each serp becomes one decision: features
are extracted from history strictly before the serp, the policy promotes
one of the ten logged results to rank 1, the reward is 1 iff that url was
clicked anywhere in the logged serp, and only then do the policy and the
count stores update. That extract-before-update order is what keeps the
evaluation leakage-free; ``leak_post_update_features`` flips it on purpose
so a canary test can prove the inflation is detectable.

Rewards come from logged clicks at any position, so position bias is not
corrected; reports carry a note saying so. When the log has a truth
sidecar (synthetic data), the loop also accounts expected reward and
oracle reward per event, giving an exact regret trace.

Determinism: every random stream is seeded by blake2b(master_seed, role),
so a policy replays identically inside ``compare`` and standalone.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional, Sequence

import numpy as np

from serpbandit import __version__
from serpbandit.bandits import (
    POLICY_NAMES,
    DefaultPolicy,
    GtsPolicy,
    GtsTsPolicy,
    LinUcbPolicy,
    OraclePolicy,
    RandomPolicy,
    TsLinearPolicy,
)
from serpbandit.clicklog import Session, load_sessions
from serpbandit.errors import MissingTruth, SerpBanditError
from serpbandit.features import FEATURE_DIM, CountStores
from serpbandit.ranksvm import ExpertModel, TrainConfig, train_on_serps
from serpbandit.topics import SessionDoc, TopicModel, build_session_docs, gibbs_train


@dataclass
class ReplayConfig:
    seed: int = 0
    warm_days: int = 24
    clusters: int = 7
    gamma: float = 0.05
    eta: float = 1.0
    v: float = 0.5
    alpha_explore: float = 1.0
    lda_iterations: int = 200
    # session documents are short (a handful of terms); the sampler's own
    # 50/K default prior swamps them and topics stop separating
    lda_alpha: Optional[float] = 1.0
    lda_beta: float = 0.01
    lda_max_docs: int = 2000
    lda_infer_sweeps: int = 20
    expert_epochs: int = 20
    expert_learning_rate: float = 0.1
    # mild shrinkage keeps ranker scores out of the logistic's saturated
    # band, where one miscalibrated expert can dominate the ensemble loss
    expert_l2: float = 1e-3
    expert_max_pairs: Optional[int] = None
    retrain_each_day: bool = True
    trace_every: int = 1000
    strict_parse: bool = False
    # diagnostic only: swaps the extract/update order to demonstrate leakage
    leak_post_update_features: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RegretLedger:
    """Expected-value bookkeeping against planted click probabilities."""

    expected_reward: float = 0.0
    oracle_reward: float = 0.0

    @property
    def regret(self) -> float:
        return self.oracle_reward - self.expected_reward


def derive_seed(master: int, role: str) -> int:
    """Stable per-role seed so streams never cross-contaminate."""
    digest = hashlib.blake2b(f"{master}:{role}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def load_truth(path: str) -> list[tuple[np.ndarray, int]]:
    """Truth sidecar rows: (ten click probabilities, intent id) per serp."""
    rows: list[tuple[np.ndarray, int]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "serp_index":
            raise MissingTruth(f"{path}: not a truth sidecar")
        for row in reader:
            if len(row) != 12:
                raise MissingTruth(f"{path}: truth row needs 12 columns, got {len(row)}")
            rows.append((np.array([float(x) for x in row[1:11]]), int(row[11])))
    return rows


def make_policy(name: str, config: ReplayConfig, experts: Optional[Sequence[ExpertModel]] = None,
                dim: int = FEATURE_DIM):
    if name == "default":
        return DefaultPolicy()
    if name == "random":
        return RandomPolicy()
    if name == "oracle":
        return OraclePolicy()
    if name == "linucb":
        return LinUcbPolicy(dim, config.alpha_explore)
    if name == "ts-linear":
        return TsLinearPolicy(dim, config.v)
    if name == "gts":
        if not experts:
            raise SerpBanditError("gts needs trained experts")
        return GtsPolicy(experts, config.gamma, config.eta)
    if name == "gts+ts":
        if not experts:
            raise SerpBanditError("gts+ts needs trained experts")
        return GtsTsPolicy(experts, config.gamma, config.eta, dim, config.v)
    raise SerpBanditError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}")


def _needs_experts(name: str) -> bool:
    return name in ("gts", "gts+ts")


# ---------------------------------------------------------------------------
# Warm phase and expert training
# ---------------------------------------------------------------------------


@dataclass
class SessionRows:
    """Training-ready view of one session: its topic document terms and,
    per serp, the pre-serp feature matrix with the relevance grades."""

    terms: tuple[int, ...]
    rows: list[tuple[np.ndarray, list[int]]] = field(default_factory=list)


@dataclass
class WarmArtifacts:
    stores: CountStores
    session_rows: Optional[list[SessionRows]]
    n_serps: int


def split_by_day(sessions: list[Session], warm_days: int) -> tuple[list[Session], list[Session]]:
    if not sessions:
        return [], []
    boundary = min(s.day for s in sessions) + warm_days
    warm = [s for s in sessions if s.day < boundary]
    scored = [s for s in sessions if s.day >= boundary]
    return warm, scored


def build_warm_artifacts(sessions: list[Session], collect_rows: bool) -> WarmArtifacts:
    stores = CountStores()
    session_rows: Optional[list[SessionRows]] = [] if collect_rows else None
    n_serps = 0
    for session in sessions:
        collected = SessionRows(terms=()) if collect_rows else None
        for serp in session.serps:
            if collected is not None:
                features = stores.candidate_features(
                    session.session_id, session.user_id, serp.url_ids()
                )
                collected.rows.append((features, serp.grades_by_rank()))
            stores.update_counts(serp, session.session_id, session.user_id)
            n_serps += 1
        stores.evict_session(session.session_id)
        if collected is not None:
            collected.terms = build_session_docs([session])[0].terms
            session_rows.append(collected)
    return WarmArtifacts(stores=stores, session_rows=session_rows, n_serps=n_serps)


def train_topic_model(session_rows: list[SessionRows], config: ReplayConfig) -> TopicModel:
    docs = [SessionDoc(i, sr.terms) for i, sr in enumerate(session_rows)]
    if config.lda_max_docs and len(docs) > config.lda_max_docs:
        rng = np.random.default_rng(derive_seed(config.seed, "lda-subsample"))
        keep = rng.choice(len(docs), size=config.lda_max_docs, replace=False)
        keep.sort()
        docs = [docs[i] for i in keep]
    return gibbs_train(
        docs,
        config.clusters,
        alpha=config.lda_alpha,
        beta=config.lda_beta,
        iterations=config.lda_iterations,
        seed=derive_seed(config.seed, "lda"),
    )


def assign_topic_rows(
    topic_model: TopicModel, session_rows: list[SessionRows], config: ReplayConfig
) -> list[list[tuple[np.ndarray, list[int]]]]:
    """Hard-assign every session to its argmax topic and pool the serp rows."""
    per_topic: list[list[tuple[np.ndarray, list[int]]]] = [
        [] for _ in range(topic_model.n_topics)
    ]
    for sr in session_rows:
        k = topic_model.assign(sr.terms, sweeps=config.lda_infer_sweeps)
        per_topic[k].extend(sr.rows)
    return per_topic


def train_topic_experts(
    per_topic_rows: list[list[tuple[np.ndarray, list[int]]]], config: ReplayConfig
) -> list[ExpertModel]:
    experts = []
    for k, rows in enumerate(per_topic_rows):
        train_config = TrainConfig(
            epochs=config.expert_epochs,
            learning_rate=config.expert_learning_rate,
            l2=config.expert_l2,
            seed=derive_seed(config.seed, f"expert-{k}"),
        )
        experts.append(
            train_on_serps(rows, train_config, topic_id=k, max_pairs=config.expert_max_pairs)
        )
    return experts


# ---------------------------------------------------------------------------
# Scored phase
# ---------------------------------------------------------------------------


@dataclass
class _RetrainContext:
    topic_model: TopicModel
    warm_topic_rows: list[list[tuple[np.ndarray, list[int]]]]


def _score_pass(
    scored: list[Session],
    stores: CountStores,
    policy,
    policy_rng: np.random.Generator,
    config: ReplayConfig,
    truth: Optional[list[tuple[np.ndarray, int]]],
    serp_offset: int,
    retrain_ctx: Optional[_RetrainContext],
) -> dict:
    events = 0
    reward_sum = 0
    ctr_trace: list[float] = []
    ledger = RegretLedger() if truth is not None else None
    regret_trace: list[float] = []
    serp_index = serp_offset
    current_day: Optional[int] = None
    local_rows: Optional[list[list[tuple[np.ndarray, list[int]]]]] = None
    if retrain_ctx is not None:
        local_rows = [[] for _ in retrain_ctx.warm_topic_rows]

    for session in scored:
        if (
            retrain_ctx is not None
            and config.retrain_each_day
            and current_day is not None
            and session.day != current_day
        ):
            combined = [
                warm + local
                for warm, local in zip(retrain_ctx.warm_topic_rows, local_rows)
            ]
            policy.set_experts(train_topic_experts(combined, config))
        current_day = session.day

        session_rows = [] if retrain_ctx is not None else None
        for serp in session.serps:
            urls = serp.url_ids()
            if config.leak_post_update_features:
                stores.update_counts(serp, session.session_id, session.user_id)
            features = stores.candidate_features(session.session_id, session.user_id, urls)
            clicked_urls = serp.clicked_urls()
            clicked_ranks = [i for i, u in enumerate(urls) if u in clicked_urls]
            chosen, _prob = policy.select(features, policy_rng, clicked=clicked_ranks)
            reward = 1 if urls[chosen] in clicked_urls else 0
            policy.update(features[chosen], reward)
            if not config.leak_post_update_features:
                stores.update_counts(serp, session.session_id, session.user_id)
            events += 1
            reward_sum += reward
            if ledger is not None:
                probs, _intent = truth[serp_index]
                ledger.oracle_reward += float(probs.max())
                ledger.expected_reward += float(probs[chosen])
            if session_rows is not None:
                session_rows.append((features, serp.grades_by_rank()))
            if events % config.trace_every == 0:
                ctr_trace.append(reward_sum / events)
                if ledger is not None:
                    regret_trace.append(ledger.regret)
            serp_index += 1
        stores.evict_session(session.session_id)
        if session_rows is not None:
            terms = build_session_docs([session])[0].terms
            k = retrain_ctx.topic_model.assign(terms, sweeps=config.lda_infer_sweeps)
            local_rows[k].extend(session_rows)

    report = {
        "policy": policy.name,
        "events": events,
        "cumulative_reward": reward_sum,
        "ctr_at_1": reward_sum / events if events else 0.0,
        "ctr_trace": ctr_trace,
    }
    if ledger is not None:
        report["regret"] = {
            "oracle_reward": ledger.oracle_reward,
            "expected_reward": ledger.expected_reward,
            "regret": ledger.regret,
            "regret_trace": regret_trace,
        }
    return report


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

_POSITION_BIAS_NOTE = (
    "rewards credit a logged click at any position of the impression; "
    "position bias is uncorrected"
)


def _finalize(report: dict) -> dict:
    """Stamp version and a config hash (timestamp excluded from the hash)."""
    report["version"] = __version__
    canonical = json.dumps(report, sort_keys=True)
    report["config_hash"] = hashlib.sha256(canonical.encode()).hexdigest()
    report["created_at"] = datetime.now(timezone.utc).isoformat()
    return report


def _load_log(log_path: str, config: ReplayConfig):
    return load_sessions(log_path, strict=config.strict_parse)


def _check_truth(truth, sessions) -> None:
    n_serps = sum(len(s.serps) for s in sessions)
    if len(truth) != n_serps:
        raise MissingTruth(
            f"truth sidecar has {len(truth)} rows but the log has {n_serps} serps"
        )


def _prepare(
    sessions: list[Session], policy_names: Sequence[str], config: ReplayConfig
):
    warm_sessions, scored_sessions = split_by_day(sessions, config.warm_days)
    need = any(_needs_experts(n) for n in policy_names)
    warm = build_warm_artifacts(warm_sessions, collect_rows=need)
    topic_model = None
    warm_topic_rows = None
    experts = None
    if need:
        topic_model = train_topic_model(warm.session_rows, config)
        warm_topic_rows = assign_topic_rows(topic_model, warm.session_rows, config)
        experts = train_topic_experts(warm_topic_rows, config)
    return warm, scored_sessions, topic_model, warm_topic_rows, experts


def _run_one(
    name: str,
    scored_sessions: list[Session],
    stores: CountStores,
    config: ReplayConfig,
    truth,
    serp_offset: int,
    topic_model,
    warm_topic_rows,
    experts,
):
    policy = make_policy(name, config, experts=experts)
    policy_seed = derive_seed(config.seed, f"policy:{name}")
    policy_rng = np.random.default_rng(policy_seed)
    retrain_ctx = None
    if _needs_experts(name) and config.retrain_each_day:
        retrain_ctx = _RetrainContext(topic_model, warm_topic_rows)
    report = _score_pass(
        scored_sessions, stores, policy, policy_rng, config, truth, serp_offset, retrain_ctx
    )
    report["policy_seed"] = policy_seed
    return policy, policy_rng, report


def replay_with_policy(
    log_path: str,
    policy_name: str,
    config: ReplayConfig,
    truth_path: Optional[str] = None,
):
    """Replay one policy over a log.

    Returns (report, policy, policy_rng) so the caller can checkpoint the
    final state; :func:`replay` keeps just the report.
    """
    sessions, stats = _load_log(log_path, config)
    truth = load_truth(truth_path) if truth_path else None
    if truth is not None:
        _check_truth(truth, sessions)
    warm, scored_sessions, topic_model, warm_topic_rows, experts = _prepare(
        sessions, [policy_name], config
    )
    policy, policy_rng, report = _run_one(
        policy_name,
        scored_sessions,
        warm.stores,
        config,
        truth,
        warm.n_serps,
        topic_model,
        warm_topic_rows,
        experts,
    )
    report["lift_vs_default"] = None  # no baseline in a standalone replay
    report["seed"] = config.seed
    report["warm_sessions"] = len(sessions) - len(scored_sessions)
    report["scored_sessions"] = len(scored_sessions)
    report["config"] = config.to_dict()
    report["parse"] = {"lines": stats.lines, "records": stats.records, "malformed": stats.malformed}
    report["notes"] = [_POSITION_BIAS_NOTE]
    return _finalize(report), policy, policy_rng


def replay(
    log_path: str,
    policy_name: str,
    config: ReplayConfig,
    truth_path: Optional[str] = None,
) -> dict:
    """Replay one policy over a log; returns the JSON-ready report."""
    report, _policy, _rng = replay_with_policy(log_path, policy_name, config, truth_path)
    return report


def compare(
    log_path: str,
    policy_names: Sequence[str],
    config: ReplayConfig,
    truth_path: Optional[str] = None,
) -> dict:
    """Replay several policies over identical event streams.

    The warm phase, topic model and experts are computed once; every policy
    then runs over its own copy of the count stores with a seed derived
    from (master seed, policy name), so results match standalone replays.
    """
    sessions, stats = _load_log(log_path, config)
    truth = load_truth(truth_path) if truth_path else None
    if truth is not None:
        _check_truth(truth, sessions)
    warm, scored_sessions, topic_model, warm_topic_rows, experts = _prepare(
        sessions, policy_names, config
    )
    reports = {}
    for name in policy_names:
        _policy, _rng, report = _run_one(
            name,
            scored_sessions,
            warm.stores.copy(),
            config,
            truth,
            warm.n_serps,
            topic_model,
            warm_topic_rows,
            experts,
        )
        reports[name] = report
    lifts = {}
    baseline = reports.get("default")
    if baseline is not None and baseline["ctr_at_1"] > 0:
        for name, report in reports.items():
            lifts[name] = (report["ctr_at_1"] - baseline["ctr_at_1"]) / baseline["ctr_at_1"]
    for name, report in reports.items():
        report["lift_vs_default"] = lifts.get(name)
    out = {
        "policies": reports,
        "lifts_vs_default": lifts,
        "seed": config.seed,
        "warm_sessions": len(sessions) - len(scored_sessions),
        "scored_sessions": len(scored_sessions),
        "config": config.to_dict(),
        "parse": {"lines": stats.lines, "records": stats.records, "malformed": stats.malformed},
        "notes": [_POSITION_BIAS_NOTE],
    }
    return _finalize(out)


def sweep_clusters(
    log_path: str,
    cluster_counts: Sequence[int],
    config: ReplayConfig,
    truth_path: Optional[str] = None,
) -> dict:
    """CTR-vs-cluster-count curve for the ensemble policy, plus the random
    baseline on the same streams."""
    sessions, stats = _load_log(log_path, config)
    truth = load_truth(truth_path) if truth_path else None
    if truth is not None:
        _check_truth(truth, sessions)
    warm_sessions, scored_sessions = split_by_day(sessions, config.warm_days)
    warm = build_warm_artifacts(warm_sessions, collect_rows=True)

    _policy, _rng, random_report = _run_one(
        "random", scored_sessions, warm.stores.copy(), config, truth, warm.n_serps,
        None, None, None,
    )
    curve = []
    for k in cluster_counts:
        config_k = dataclasses.replace(config, clusters=k)
        topic_model = train_topic_model(warm.session_rows, config_k)
        warm_topic_rows = assign_topic_rows(topic_model, warm.session_rows, config_k)
        experts = train_topic_experts(warm_topic_rows, config_k)
        _policy, _rng, report = _run_one(
            "gts", scored_sessions, warm.stores.copy(), config_k, truth, warm.n_serps,
            topic_model, warm_topic_rows, experts,
        )
        curve.append({"clusters": k, "ctr_at_1": report["ctr_at_1"], "events": report["events"]})
    out = {
        "curve": curve,
        "random": random_report,
        "seed": config.seed,
        "config": config.to_dict(),
        "parse": {"lines": stats.lines, "records": stats.records, "malformed": stats.malformed},
        "notes": [_POSITION_BIAS_NOTE],
    }
    return _finalize(out)


def write_trace_csv(report: dict, path: str, trace_every: Optional[int] = None) -> None:
    """CTR trace rows (event_index, cumulative_ctr) for external plotting."""
    if trace_every is None:
        trace_every = report.get("config", {}).get("trace_every", 1000)
    trace = report.get("ctr_trace", [])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["event_index", "cumulative_ctr"])
        for i, ctr in enumerate(trace, start=1):
            writer.writerow([i * trace_every, repr(ctr)])
