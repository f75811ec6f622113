"""Seeded synthetic click-log generator with planted ground truth.

Each planted intent owns a disjoint term vocabulary and a url pool with
three click-probability tiers: an anchor url that always sits at rank 1,
one high-probability "best" url placed at a random lower rank, and a pool
of distractors filling the remaining slots. Sessions draw an intent, their
queries draw terms from the intent vocabulary, and clicks are independent
Bernoulli draws per shown url. Dwell times are sampled inside the grade
thresholds so labeling recovers the intended grade distribution.

Alongside the log the generator writes a truth sidecar CSV
``serp_index,p1,...,p10,intent_id`` with the ten planted click
probabilities of every serp, which is what makes regret bookkeeping
possible offline. Given the same config and seed the emitted files are
byte-identical.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, TextIO

import numpy as np

from serpbandit.clicklog import (
    RESULTS_PER_SERP,
    ClickAction,
    LogRecord,
    QueryAction,
    SessionMeta,
    serialize_record,
)
from serpbandit.errors import ConfigInvalid

_TERM_BASE = 100
_URL_BASE = 10_000


@dataclass
class SynthConfig:
    seed: int
    users: int = 10
    days: int = 4
    intents: int = 7
    sessions_per_user_day: int = 10
    queries_per_session: int = 3
    terms_per_query: int = 3
    vocab_per_intent: int = 40
    urls_per_intent: int = 40
    best_url_prob: float = 0.5
    anchor_url_prob: float = 0.2
    distractor_prob: float = 0.02
    grade0_frac: float = 0.2
    grade1_frac: float = 0.4
    grade2_frac: float = 0.4
    dwell0_min: int = 1
    dwell0_max: int = 49
    dwell1_min: int = 50
    dwell1_max: int = 399
    dwell2_min: int = 400
    dwell2_max: int = 800

    def validate(self) -> None:
        positive = (
            "users", "days", "intents", "sessions_per_user_day",
            "queries_per_session", "terms_per_query", "vocab_per_intent",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} must be >= 1")
        if self.vocab_per_intent < self.terms_per_query:
            raise ConfigInvalid("vocab_per_intent must cover terms_per_query distinct draws")
        # pool must fill a serp: anchor + best + 8 distractors
        if self.urls_per_intent < RESULTS_PER_SERP:
            raise ConfigInvalid(f"urls_per_intent must be >= {RESULTS_PER_SERP}")
        for name in ("best_url_prob", "anchor_url_prob", "distractor_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigInvalid(f"{name} must lie in [0, 1]")
        fracs = (self.grade0_frac, self.grade1_frac, self.grade2_frac)
        if any(f < 0 for f in fracs) or sum(fracs) <= 0:
            raise ConfigInvalid("grade fractions must be non-negative with positive sum")
        bounds = (
            ("dwell0", self.dwell0_min, self.dwell0_max, 0, 49),
            ("dwell1", self.dwell1_min, self.dwell1_max, 50, 399),
            ("dwell2", self.dwell2_min, self.dwell2_max, 400, None),
        )
        for name, lo, hi, floor, ceil in bounds:
            if lo > hi:
                raise ConfigInvalid(f"{name} range is empty")
            if lo < floor or (ceil is not None and hi > ceil):
                raise ConfigInvalid(f"{name} range must stay inside its grade thresholds")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_file(cls, path: str) -> "SynthConfig":
        """Flat key=value text config; '#' starts a comment."""
        values: dict[str, str] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigInvalid(f"{path}:{line_no}: expected key=value")
                key, value = (part.strip() for part in line.split("=", 1))
                values[key] = value
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "SynthConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in fields:
                raise ConfigInvalid(f"unknown config key {key!r}")
            kind = fields[key].type
            try:
                kwargs[key] = int(value) if kind == "int" else float(value)
            except ValueError as exc:
                raise ConfigInvalid(f"config key {key!r}: {exc}") from exc
        if "seed" not in kwargs:
            raise ConfigInvalid("seed is mandatory")
        config = cls(**kwargs)
        config.validate()
        return config


@dataclass
class GenerationCounts:
    sessions: int = 0
    serps: int = 0
    clicks: int = 0
    lines: int = 0


class _IntentPools:
    def __init__(self, config: SynthConfig):
        self.vocab = []
        self.anchor = []
        self.best = []
        self.distractors = []
        for i in range(config.intents):
            term_lo = _TERM_BASE + i * config.vocab_per_intent
            self.vocab.append(np.arange(term_lo, term_lo + config.vocab_per_intent))
            url_lo = _URL_BASE + i * config.urls_per_intent
            self.anchor.append(url_lo)
            self.best.append(url_lo + 1)
            self.distractors.append(
                np.arange(url_lo + 2, url_lo + config.urls_per_intent)
            )


def _emit_session(
    config: SynthConfig,
    pools: _IntentPools,
    rng: np.random.Generator,
    session_id: int,
    day: int,
    user_id: int,
    query_id_start: int,
) -> tuple[list[LogRecord], list[tuple[list[float], int]], int]:
    """Records of one session plus its truth rows (p vector, intent)."""
    intent = int(rng.integers(config.intents))
    records: list[LogRecord] = [SessionMeta(session_id, day, user_id)]
    truth_rows: list[tuple[list[float], int]] = []
    grade_cuts = np.cumsum((config.grade0_frac, config.grade1_frac, config.grade2_frac))
    grade_cuts = grade_cuts / grade_cuts[-1]
    dwell_ranges = (
        (config.dwell0_min, config.dwell0_max),
        (config.dwell1_min, config.dwell1_max),
        (config.dwell2_min, config.dwell2_max),
    )

    t = 0
    query_id = query_id_start
    for serp_id in range(config.queries_per_session):
        terms = tuple(
            int(v) for v in rng.choice(pools.vocab[intent], config.terms_per_query, replace=False)
        )
        best_pos = int(rng.integers(1, RESULTS_PER_SERP))
        picks = rng.choice(
            pools.distractors[intent], RESULTS_PER_SERP - 2, replace=False
        )
        urls: list[int] = []
        probs: list[float] = []
        d = 0
        for pos in range(RESULTS_PER_SERP):
            if pos == 0:
                urls.append(pools.anchor[intent])
                probs.append(config.anchor_url_prob)
            elif pos == best_pos:
                urls.append(pools.best[intent])
                probs.append(config.best_url_prob)
            else:
                urls.append(int(picks[d]))
                probs.append(config.distractor_prob)
                d += 1
        records.append(
            QueryAction(
                session_id=session_id,
                time_passed=t,
                serp_id=serp_id,
                query_id=query_id,
                terms=terms,
                results=tuple((u, u) for u in urls),  # domains mirror url ids
            )
        )
        truth_rows.append((probs, intent))
        query_id += 1

        clicked: list[tuple[int, int]] = []  # (url, dwell)
        for pos in range(RESULTS_PER_SERP):
            if rng.random() < probs[pos]:
                grade = int(np.searchsorted(grade_cuts, rng.random(), side="right"))
                grade = min(grade, 2)
                lo, hi = dwell_ranges[grade]
                clicked.append((urls[pos], int(rng.integers(lo, hi + 1))))
        if clicked:
            click_t = t + 10
            for url, dwell in clicked:
                records.append(ClickAction(session_id, click_t, serp_id, url))
                click_t += dwell
            t = click_t
        else:
            t += 30
    return records, truth_rows, query_id


def generate(config: SynthConfig) -> Iterator[tuple[list[LogRecord], list[tuple[list[float], int]]]]:
    """Yield (records, truth rows) per session, in time order."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    pools = _IntentPools(config)
    session_id = 1
    query_id = 1
    for day in range(config.days):
        for user_id in range(1, config.users + 1):
            for _ in range(config.sessions_per_user_day):
                records, truth_rows, query_id = _emit_session(
                    config, pools, rng, session_id, day, user_id, query_id
                )
                session_id += 1
                yield records, truth_rows


def write_log(config: SynthConfig, log_fh: TextIO, truth_fh: TextIO) -> GenerationCounts:
    counts = GenerationCounts()
    truth_fh.write("serp_index," + ",".join(f"p{i}" for i in range(1, 11)) + ",intent_id\n")
    serp_index = 0
    for records, truth_rows in generate(config):
        counts.sessions += 1
        for record in records:
            log_fh.write(serialize_record(record) + "\n")
            counts.lines += 1
            if isinstance(record, QueryAction):
                counts.serps += 1
            elif isinstance(record, ClickAction):
                counts.clicks += 1
        for probs, intent in truth_rows:
            row = ",".join([str(serp_index)] + [repr(p) for p in probs] + [str(intent)])
            truth_fh.write(row + "\n")
            serp_index += 1
    return counts


def generate_files(config: SynthConfig, log_path: str, truth_path: str) -> GenerationCounts:
    with open(log_path, "w", encoding="utf-8", newline="\n") as log_fh:
        with open(truth_path, "w", encoding="utf-8", newline="\n") as truth_fh:
            return write_log(config, log_fh, truth_fh)
