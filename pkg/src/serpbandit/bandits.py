"""Bandit policies for rank-1 re-ranking.

Three learners choose one of a serp's ten candidates from its feature
vectors:

``LinUcbState``
    Ridge regression with an upper-confidence exploration bonus,
    score(x) = x . theta + alpha * sqrt(x' A^-1 x) with theta = A^-1 b.
    A single (A, b) is shared across candidates: urls rarely repeat, so a
    per-url model would never accumulate data.

``TsLinearState``
    Thompson sampling with linear payoffs. The reward model is linear with
    Gaussian noise; the posterior over the coefficient vector is
    N(mu_hat, v^2 B^-1) with B = I + sum x x' and mu_hat = B^-1 f,
    f = sum r x. Each decision draws one coefficient sample and plays the
    argmax candidate, which realizes probability-of-optimality selection by
    sampling rather than integration.

``GtsState``
    An exponentially weighted ensemble over pre-trained rankers
    ("experts"). Each expert votes one candidate; the arm is drawn from

        P(a) = (1 - gamma) * sum_i w_i * [vote_i == a] / W  +  gamma / K

    and after observing the click feedback every expert's weight is scaled
    by exp(-eta * logloss(prediction_i, reward)).

All matrix work keeps an explicit Cholesky factor (recomputed per update;
d = 18 keeps that cheap) and uses triangular solves, never an explicit
inverse. Every source of randomness is an injected numpy Generator.
"""

from __future__ import annotations

import struct
from typing import Protocol, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from serpbandit.errors import DimensionMismatch, PolicyStateCorruption, SerpBanditError
from serpbandit.features import FEATURE_DIM
from serpbandit.ranksvm import PROB_CLAMP, ExpertModel

POLICY_NAMES = ("default", "random", "linucb", "ts-linear", "gts", "gts+ts")

_CKPT_MAGIC = b"BNDT"
_CKPT_VERSION = 1
_KIND_LINUCB, _KIND_TS, _KIND_GTS, _KIND_GTS_TS = 1, 2, 3, 4

# relative weight floor applied after each ensemble update so a written-off
# expert can recover and the selection distribution stays valid
WEIGHT_FLOOR = 1e-12


class CholeskyFailure(SerpBanditError):
    """A design matrix stopped being positive definite."""


class ZeroWeightMass(SerpBanditError):
    """All ensemble weights collapsed to zero."""


def _cholesky(matrix: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure(f"{what} is not positive definite") from exc


def _check_dim(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {x.shape[-1]}")
    return x


class LinUcbState:
    def __init__(self, dim: int = FEATURE_DIM, alpha_explore: float = 1.0):
        self.dim = dim
        self.alpha_explore = alpha_explore
        self.A = np.eye(dim)
        self.b = np.zeros(dim)
        self._chol = np.eye(dim)  # lower Cholesky factor of A

    def scores(self, candidates: np.ndarray) -> np.ndarray:
        X = _check_dim(candidates, self.dim)
        theta = cho_solve((self._chol, True), self.b, check_finite=False)
        # x' A^-1 x == ||L^-1 x||^2
        Y = solve_triangular(self._chol, X.T, lower=True, check_finite=False)
        bonus = np.sqrt(np.einsum("ij,ij->j", Y, Y))
        return X @ theta + self.alpha_explore * bonus

    def select(self, candidates: np.ndarray) -> int:
        return int(np.argmax(self.scores(candidates)))

    def update(self, x: np.ndarray, reward: float) -> None:
        x = _check_dim(x, self.dim)
        self.A += np.outer(x, x)
        self.b += reward * x
        self._chol = _cholesky(self.A, "LinUCB design matrix")


class TsLinearState:
    def __init__(self, dim: int = FEATURE_DIM, v: float = 0.5):
        self.dim = dim
        self.v = v
        self.B = np.eye(dim)
        self.f = np.zeros(dim)
        self.mu_hat = np.zeros(dim)
        self._chol = np.eye(dim)  # lower Cholesky factor of B

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One posterior draw, mu_hat + v * L^-T z with z ~ N(0, I), whose
        covariance is exactly v^2 B^-1."""
        z = rng.standard_normal(self.dim)
        u = solve_triangular(self._chol, z, lower=True, trans="T", check_finite=False)
        return self.mu_hat + self.v * u

    def select(self, candidates: np.ndarray, rng: np.random.Generator) -> int:
        X = _check_dim(candidates, self.dim)
        mu_tilde = self.sample(rng)
        return int(np.argmax(X @ mu_tilde))

    def update(self, x: np.ndarray, reward: float) -> None:
        x = _check_dim(x, self.dim)
        self.B += np.outer(x, x)
        self.f += reward * x
        self._chol = _cholesky(self.B, "posterior precision matrix")
        self.mu_hat = cho_solve((self._chol, True), self.f, check_finite=False)


class Expert(Protocol):
    """Anything that can vote a candidate and predict its click probability."""

    def vote(self, candidates: np.ndarray) -> int: ...

    def predict_reward(self, x: np.ndarray) -> float: ...


def log_loss(prediction: float, reward: int) -> float:
    """ln(1/p) when clicked, ln(1/(1-p)) when not; finite for p in (0, 1)."""
    return -np.log(prediction) if reward == 1 else -np.log(1.0 - prediction)


class GtsState:
    def __init__(
        self,
        experts: Sequence[Expert],
        gamma: float = 0.05,
        eta: float = 1.0,
        weight_floor: float = WEIGHT_FLOOR,
    ):
        if not experts:
            raise ValueError("ensemble needs at least one expert")
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        self.experts = list(experts)
        self.gamma = gamma
        self.eta = eta
        self.weight_floor = weight_floor
        self.weights = np.ones(len(self.experts))

    @property
    def weight_sum(self) -> float:
        return float(self.weights.sum())

    def normalized_weights(self) -> np.ndarray:
        return self.weights / self.weight_sum

    def selection_probabilities(
        self, votes: Sequence[int], n_candidates: int
    ) -> np.ndarray:
        total = self.weight_sum
        if not total > 0.0:
            raise ZeroWeightMass("all expert weights are zero")
        p = np.full(n_candidates, self.gamma / n_candidates)
        scale = (1.0 - self.gamma) / total
        for w, a in zip(self.weights, votes):
            p[a] += scale * w
        if abs(p.sum() - 1.0) > 1e-12 or not np.all(p >= self.gamma / n_candidates - 1e-15):
            raise PolicyStateCorruption("ensemble selection probabilities are not a distribution")
        return p

    def select(
        self, candidates: np.ndarray, rng: np.random.Generator
    ) -> tuple[int, float]:
        """Sample a candidate from the vote mixture; returns (index, probability)."""
        votes = [expert.vote(candidates) for expert in self.experts]
        p = self.selection_probabilities(votes, len(candidates))
        idx = int(rng.choice(len(p), p=p))
        return idx, float(p[idx])

    def update(self, chosen_x: np.ndarray, reward: int) -> None:
        predictions = np.array(
            [expert.predict_reward(chosen_x) for expert in self.experts]
        )
        losses = np.where(
            reward == 1, -np.log(predictions), -np.log(1.0 - predictions)
        )
        self.weights *= np.exp(-self.eta * losses)
        total = self.weights.sum()
        if not np.isfinite(total) or total <= 0.0:
            raise ZeroWeightMass("expert weights left (0, inf) after update")
        np.maximum(self.weights, self.weight_floor * total, out=self.weights)
        # losses are strictly positive, so unchecked the weights decay toward
        # underflow on long horizons; probabilities are scale invariant, so
        # rescale once the mass drifts far from 1
        total = self.weights.sum()
        if total < 1e-100 or total > 1e100:
            self.weights /= total


class TsGreedyExpert:
    """Pseudo-expert voting the greedy choice of a linear-payoff sampler.

    Lets the long-term model participate in the ensemble: the vote is
    argmax x . mu_hat and the predicted reward is the (clipped) linear
    click-rate estimate.
    """

    def __init__(self, state: TsLinearState):
        self.state = state

    def vote(self, candidates: np.ndarray) -> int:
        X = _check_dim(candidates, self.state.dim)
        return int(np.argmax(X @ self.state.mu_hat))

    def predict_reward(self, x: np.ndarray) -> float:
        estimate = float(_check_dim(x, self.state.dim) @ self.state.mu_hat)
        return min(max(estimate, PROB_CLAMP), 1.0 - PROB_CLAMP)


# ---------------------------------------------------------------------------
# Replay-facing policy adapters
# ---------------------------------------------------------------------------


class DefaultPolicy:
    """Keep the logged rank-1 result."""

    name = "default"

    def select(self, candidates, rng, clicked=None):
        return 0, None

    def update(self, x, reward):
        pass


class RandomPolicy:
    name = "random"

    def select(self, candidates, rng, clicked=None):
        return int(rng.integers(len(candidates))), None

    def update(self, x, reward):
        pass


class OraclePolicy:
    """Picks a logged-clicked candidate whenever one exists (test harness)."""

    name = "oracle"

    def select(self, candidates, rng, clicked=None):
        if clicked:
            return min(clicked), None
        return 0, None

    def update(self, x, reward):
        pass


class LinUcbPolicy:
    name = "linucb"

    def __init__(self, dim: int = FEATURE_DIM, alpha_explore: float = 1.0):
        self.state = LinUcbState(dim, alpha_explore)

    def select(self, candidates, rng, clicked=None):
        return self.state.select(candidates), None

    def update(self, x, reward):
        self.state.update(x, reward)


class TsLinearPolicy:
    name = "ts-linear"

    def __init__(self, dim: int = FEATURE_DIM, v: float = 0.5):
        self.state = TsLinearState(dim, v)

    def select(self, candidates, rng, clicked=None):
        return self.state.select(candidates, rng), None

    def update(self, x, reward):
        self.state.update(x, reward)


class GtsPolicy:
    name = "gts"

    def __init__(self, experts: Sequence[Expert], gamma: float = 0.05, eta: float = 1.0):
        self.state = GtsState(experts, gamma=gamma, eta=eta)

    def select(self, candidates, rng, clicked=None):
        return self.state.select(candidates, rng)

    def update(self, x, reward):
        self.state.update(x, reward)

    def set_experts(self, experts: Sequence[Expert]) -> None:
        """Swap in retrained experts, keeping the learned weights."""
        if len(experts) != len(self.state.experts):
            raise ValueError("retrained expert count must match the ensemble size")
        self.state.experts = list(experts)


class GtsTsPolicy(GtsPolicy):
    """Ensemble of the per-topic rankers plus the linear-payoff pseudo-expert."""

    name = "gts+ts"

    def __init__(
        self,
        experts: Sequence[Expert],
        gamma: float = 0.05,
        eta: float = 1.0,
        dim: int = FEATURE_DIM,
        v: float = 0.5,
    ):
        self.ts_state = TsLinearState(dim, v)
        super().__init__(list(experts) + [TsGreedyExpert(self.ts_state)], gamma, eta)

    def update(self, x, reward):
        super().update(x, reward)
        self.ts_state.update(x, reward)

    def set_experts(self, experts: Sequence[Expert]) -> None:
        if len(experts) + 1 != len(self.state.experts):
            raise ValueError("retrained expert count must match the ensemble size")
        self.state.experts = list(experts) + [self.state.experts[-1]]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _pack_rng(rng: np.random.Generator) -> bytes:
    state = rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise SerpBanditError("only PCG64 generators can be checkpointed")
    s = state["state"]["state"]
    inc = state["state"]["inc"]
    mask = (1 << 64) - 1
    return struct.pack(
        "<6Q",
        s & mask,
        (s >> 64) & mask,
        inc & mask,
        (inc >> 64) & mask,
        int(state["has_uint32"]),
        int(state["uinteger"]),
    )


def _unpack_rng(blob: bytes) -> np.random.Generator:
    s_lo, s_hi, inc_lo, inc_hi, has_uint32, uinteger = struct.unpack("<6Q", blob)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (s_hi << 64) | s_lo, "inc": (inc_hi << 64) | inc_lo},
        "has_uint32": int(has_uint32),
        "uinteger": int(uinteger),
    }
    return rng


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(arr.astype("<f8").tobytes())


def _read_array(fh, shape) -> np.ndarray:
    n = int(np.prod(shape))
    return np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()


def _write_weights(fh, weights: np.ndarray) -> None:
    fh.write(struct.pack("<I", len(weights)))
    _write_array(fh, weights)


def _read_weights(fh) -> np.ndarray:
    (n,) = struct.unpack("<I", fh.read(4))
    return _read_array(fh, (n,))


def _write_experts(fh, experts: Sequence[ExpertModel]) -> None:
    fh.write(struct.pack("<I", len(experts)))
    for e in experts:
        fh.write(struct.pack("<qIQ", e.topic_id, e.weights.shape[0], e.training_pairs))
        _write_array(fh, e.weights)


def _read_experts(fh) -> list[ExpertModel]:
    (n,) = struct.unpack("<I", fh.read(4))
    experts = []
    for _ in range(n):
        topic_id, dim, pairs = struct.unpack("<qIQ", fh.read(20))
        experts.append(
            ExpertModel(weights=_read_array(fh, (dim,)), topic_id=topic_id, training_pairs=pairs)
        )
    return experts


def save_checkpoint(path: str, policy, rng: np.random.Generator) -> None:
    """Serialize a stateful policy plus its rng stream to a tagged binary file."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        if isinstance(policy, LinUcbPolicy):
            st = policy.state
            fh.write(struct.pack("<BBI", _CKPT_VERSION, _KIND_LINUCB, st.dim))
            fh.write(struct.pack("<d", st.alpha_explore))
            _write_array(fh, st.A)
            _write_array(fh, st.b)
        elif isinstance(policy, TsLinearPolicy):
            st = policy.state
            fh.write(struct.pack("<BBI", _CKPT_VERSION, _KIND_TS, st.dim))
            fh.write(struct.pack("<d", st.v))
            _write_array(fh, st.B)
            _write_array(fh, st.f)
        elif isinstance(policy, GtsTsPolicy):
            st = policy.state
            ts = policy.ts_state
            fh.write(struct.pack("<BBI", _CKPT_VERSION, _KIND_GTS_TS, ts.dim))
            fh.write(struct.pack("<3d", st.gamma, st.eta, ts.v))
            _write_weights(fh, st.weights)
            _write_experts(fh, st.experts[:-1])
            _write_array(fh, ts.B)
            _write_array(fh, ts.f)
        elif isinstance(policy, GtsPolicy):
            st = policy.state
            fh.write(struct.pack("<BBI", _CKPT_VERSION, _KIND_GTS, 0))
            fh.write(struct.pack("<2d", st.gamma, st.eta))
            _write_weights(fh, st.weights)
            _write_experts(fh, st.experts)
        else:
            raise SerpBanditError(f"policy {policy.name!r} has no persistent state")
        fh.write(_pack_rng(rng))


def load_checkpoint(path: str):
    """Inverse of :func:`save_checkpoint`; returns (policy, rng)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise SerpBanditError(f"{path}: not a policy checkpoint")
        version, kind, dim = struct.unpack("<BBI", fh.read(6))
        if version != _CKPT_VERSION:
            raise SerpBanditError(f"{path}: unsupported checkpoint version {version}")
        if kind == _KIND_LINUCB:
            (alpha_explore,) = struct.unpack("<d", fh.read(8))
            policy = LinUcbPolicy(dim, alpha_explore)
            policy.state.A = _read_array(fh, (dim, dim))
            policy.state.b = _read_array(fh, (dim,))
            policy.state._chol = _cholesky(policy.state.A, "LinUCB design matrix")
        elif kind == _KIND_TS:
            (v,) = struct.unpack("<d", fh.read(8))
            policy = TsLinearPolicy(dim, v)
            st = policy.state
            st.B = _read_array(fh, (dim, dim))
            st.f = _read_array(fh, (dim,))
            st._chol = _cholesky(st.B, "posterior precision matrix")
            st.mu_hat = cho_solve((st._chol, True), st.f, check_finite=False)
        elif kind == _KIND_GTS_TS:
            gamma, eta, v = struct.unpack("<3d", fh.read(24))
            weights = _read_weights(fh)
            experts = _read_experts(fh)
            policy = GtsTsPolicy(experts, gamma, eta, dim, v)
            ts = policy.ts_state
            ts.B = _read_array(fh, (dim, dim))
            ts.f = _read_array(fh, (dim,))
            ts._chol = _cholesky(ts.B, "posterior precision matrix")
            ts.mu_hat = cho_solve((ts._chol, True), ts.f, check_finite=False)
            policy.state.weights = weights
        elif kind == _KIND_GTS:
            gamma, eta = struct.unpack("<2d", fh.read(16))
            weights = _read_weights(fh)
            experts = _read_experts(fh)
            policy = GtsPolicy(experts, gamma, eta)
            policy.state.weights = weights
        else:
            raise SerpBanditError(f"{path}: unknown policy kind {kind}")
        rng = _unpack_rng(fh.read(48))
    return policy, rng
