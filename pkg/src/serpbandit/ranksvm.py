"""Pairwise linear ranker trained per session topic.

Training minimizes a grade-weighted pairwise hinge loss

    sum_p  m_p * max(0, 1 - w . (x_pref - x_other))  +  (l2 / 2) ||w||^2

by subgradient descent with step size lr / (1 + t * l2) over seed-shuffled
pair order, so runs are bit-for-bit reproducible. The margin weight m_p is
the grade difference of the pair. Scores are plain dot products; the vote
of a model over a serp is the argmax candidate with ties broken toward the
lowest original rank.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from serpbandit.clicklog import LabeledSerp
from serpbandit.errors import DimensionMismatch, SerpBanditError
from serpbandit.features import FEATURE_DIM

# predicted rewards are clamped into (PROB_CLAMP, 1 - PROB_CLAMP) so the
# ensemble's logarithmic loss stays finite
PROB_CLAMP = 1e-6

_MODEL_MAGIC = b"XPRT"
_MODEL_VERSION = 1


class NonFiniteLoss(SerpBanditError):
    """Training diverged (learning rate too large)."""


@dataclass(frozen=True)
class PreferencePair:
    preferred: np.ndarray
    other: np.ndarray
    margin_weight: float = 1.0


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.1
    l2: float = 0.0
    seed: int = 0


@dataclass
class ExpertModel:
    weights: np.ndarray
    topic_id: int = 0
    training_pairs: int = 0

    def score(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.weights.shape:
            raise DimensionMismatch(
                f"feature dim {x.shape} != model dim {self.weights.shape}"
            )
        return float(self.weights @ x)

    def score_all(self, candidates: np.ndarray) -> np.ndarray:
        candidates = np.asarray(candidates, dtype=np.float64)
        if candidates.shape[1] != self.weights.shape[0]:
            raise DimensionMismatch(
                f"feature dim {candidates.shape[1]} != model dim {self.weights.shape[0]}"
            )
        return candidates @ self.weights

    def vote(self, candidates: np.ndarray) -> int:
        """Index of the best-scoring candidate; argmax keeps the first
        (lowest original rank) on ties."""
        return int(np.argmax(self.score_all(candidates)))

    def predict_reward(self, x: np.ndarray) -> float:
        """Click-probability estimate: logistic of the score, clamped away
        from 0 and 1."""
        s = self.score(x)
        if s >= 0:
            p = 1.0 / (1.0 + math.exp(-s))
        else:
            e = math.exp(s)
            p = e / (1.0 + e)
        return min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(_MODEL_MAGIC)
            fh.write(
                struct.pack(
                    "<BqIQ",
                    _MODEL_VERSION,
                    self.topic_id,
                    self.weights.shape[0],
                    self.training_pairs,
                )
            )
            fh.write(self.weights.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "ExpertModel":
        with open(path, "rb") as fh:
            if fh.read(4) != _MODEL_MAGIC:
                raise SerpBanditError(f"{path}: not a ranker model file")
            version, topic_id, dim, pairs = struct.unpack("<BqIQ", fh.read(21))
            if version != _MODEL_VERSION:
                raise SerpBanditError(f"{path}: unsupported model version {version}")
            weights = np.frombuffer(fh.read(8 * dim), dtype="<f8").astype(np.float64)
        return cls(weights=weights, topic_id=topic_id, training_pairs=pairs)

    def export_text(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"topic_id {self.topic_id}\n")
            fh.write(f"training_pairs {self.training_pairs}\n")
            fh.write("weights " + " ".join(repr(w) for w in self.weights) + "\n")


def generate_pairs(serp: LabeledSerp, features: np.ndarray) -> list[PreferencePair]:
    """One pair per (u, v) on the serp with grade(u) > grade(v), weighted by
    the grade difference. Features must be the pre-serp vectors, rank order."""
    grades = serp.grades_by_rank()
    pairs = []
    for i, gi in enumerate(grades):
        for j, gj in enumerate(grades):
            if gi > gj:
                pairs.append(PreferencePair(features[i], features[j], float(gi - gj)))
    return pairs


def _sgd(diffs: np.ndarray, margins: np.ndarray, config: TrainConfig) -> np.ndarray:
    dim = diffs.shape[1]
    w = np.zeros(dim)
    rng = np.random.default_rng(config.seed)
    order = np.arange(len(diffs))
    t = 0
    with np.errstate(over="ignore", invalid="ignore"):  # divergence raises below
        for epoch in range(config.epochs):
            rng.shuffle(order)
            for idx in order:
                eta = config.learning_rate / (1.0 + t * config.l2)
                t += 1
                d = diffs[idx]
                if w @ d < 1.0:
                    w += (eta * margins[idx]) * d
                if config.l2:
                    w -= (eta * config.l2) * w
            if not np.all(np.isfinite(w)):
                raise NonFiniteLoss(
                    f"weights diverged after epoch {epoch}; lower the learning rate"
                )
    return w


def train(
    pairs: list[PreferencePair],
    config: TrainConfig,
    topic_id: int = 0,
    dim: int = FEATURE_DIM,
) -> ExpertModel:
    """Fit a ranker on preference pairs; an empty pair set yields zero weights."""
    if not pairs:
        return ExpertModel(weights=np.zeros(dim), topic_id=topic_id, training_pairs=0)
    diffs = np.array([p.preferred - p.other for p in pairs], dtype=np.float64)
    margins = np.array([p.margin_weight for p in pairs], dtype=np.float64)
    w = _sgd(diffs, margins, config)
    return ExpertModel(weights=w, topic_id=topic_id, training_pairs=len(pairs))


def train_on_serps(
    rows: list[tuple[np.ndarray, list[int]]],
    config: TrainConfig,
    topic_id: int = 0,
    max_pairs: int | None = None,
    dim: int = FEATURE_DIM,
) -> ExpertModel:
    """Fit a ranker from (feature matrix, grades) rows of many serps.

    Builds the pair differences in place; ``max_pairs`` subsamples them with
    the training seed when a topic has more evidence than needed.
    """
    diffs = []
    margins = []
    for features, grades in rows:
        for i, gi in enumerate(grades):
            for j, gj in enumerate(grades):
                if gi > gj:
                    diffs.append(features[i] - features[j])
                    margins.append(float(gi - gj))
    if not diffs:
        return ExpertModel(weights=np.zeros(dim), topic_id=topic_id, training_pairs=0)
    diffs_arr = np.asarray(diffs)
    margins_arr = np.asarray(margins)
    if max_pairs is not None and len(diffs_arr) > max_pairs:
        keep = np.random.default_rng(config.seed).choice(
            len(diffs_arr), size=max_pairs, replace=False
        )
        keep.sort()
        diffs_arr = diffs_arr[keep]
        margins_arr = margins_arr[keep]
    w = _sgd(diffs_arr, margins_arr, config)
    return ExpertModel(weights=w, topic_id=topic_id, training_pairs=len(diffs_arr))


def pairwise_accuracy(model: ExpertModel, pairs: list[PreferencePair]) -> float:
    if not pairs:
        return 1.0
    correct = sum(
        1 for p in pairs if model.score(p.preferred) > model.score(p.other)
    )
    return correct / len(pairs)
