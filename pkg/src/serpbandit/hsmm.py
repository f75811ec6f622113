"""Explicit-duration hidden semi-Markov model over discrete observations.

A hidden state occupies a segment of d consecutive time steps, d in
{1..D}; consecutive segments must have different states (no
self-transitions). A segment (j, d) emits d symbols, each drawn
independently from the state's categorical emission distribution, so the
block probability factorizes as b_{j,d}(o_1..o_d) = prod_s e_j(o_s). The
per-step categorical is shared across durations, which keeps the emission
table learnable from short sequences.

Parameters of a model with M states, maximum duration D and V symbols:

    init[j, d]          first segment is state j with duration d
    trans[i, d', j, d]  segment (j, d) follows segment (i, d');
                        trans[i, :, i, :] == 0 and every (i, d') row sums
                        to one over the remaining (j, d)
    emit[j, v]          per-step emission probability

Inference runs over segment-end variables

    alpha[t, j, d] = P(segment (j, d) ends at t, o[1..t])
    beta[t, j, d]  = P(o[t+1..T] | segment (j, d) ends at t)

with the recursions

    alpha[t, j, d] = sum_{i != j, d'} alpha[t-d, i, d'] * trans[i,d',j,d]
                     * b_{j,d}(o[t-d+1..t])          (init when t == d)
    beta[t, j, d]  = sum_{i != j, d'} trans[j,d,i,d'] * b_{i,d'}(o[t+1..t+d'])
                     * beta[t+d', i, d']             (1 when t == T)

computed in log domain by default; ``forward_scaled`` is a linear-domain
variant with per-step renormalization kept as a numerical cross-check.
One EM iteration re-estimates the transition tensor and the emission table
from the posterior segment statistics; rows that receive zero expected
mass keep their previous values, and the initial distribution is left
untouched.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from serpbandit.errors import SerpBanditError

_MODEL_MAGIC = b"HSMM"
_MODEL_VERSION = 1

_NORM_TOL = 1e-12


class ZeroLikelihood(SerpBanditError):
    """No segmentation of the observations has positive probability."""


@dataclass
class HsmmModel:
    n_states: int
    max_duration: int
    n_symbols: int
    init: np.ndarray  # (M, D)
    trans: np.ndarray  # (M, D, M, D)
    emit: np.ndarray  # (M, V)

    def validate(self) -> None:
        M, D, V = self.n_states, self.max_duration, self.n_symbols
        if self.init.shape != (M, D) or self.trans.shape != (M, D, M, D) or self.emit.shape != (M, V):
            raise SerpBanditError("model tensor shapes are inconsistent")
        if abs(self.init.sum() - 1.0) > _NORM_TOL:
            raise SerpBanditError("initial distribution does not sum to 1")
        for i in range(M):
            if np.any(self.trans[i, :, i, :] != 0.0):
                raise SerpBanditError(f"state {i} has a self-transition")
            for d in range(D):
                if abs(self.trans[i, d].sum() - 1.0) > _NORM_TOL:
                    raise SerpBanditError(f"transition row ({i}, {d + 1}) does not sum to 1")
        for j in range(M):
            if abs(self.emit[j].sum() - 1.0) > _NORM_TOL:
                raise SerpBanditError(f"emission row {j} does not sum to 1")

    @classmethod
    def random(cls, n_states: int, max_duration: int, n_symbols: int, seed: int = 0) -> "HsmmModel":
        """A fully-supported random model; single-state models are rejected
        because every transition must change state."""
        if n_states < 2:
            raise SerpBanditError("need at least two states without self-transitions")
        rng = np.random.default_rng(seed)
        M, D, V = n_states, max_duration, n_symbols
        init = rng.random((M, D)) + 0.1
        init /= init.sum()
        trans = rng.random((M, D, M, D)) + 0.1
        for i in range(M):
            trans[i, :, i, :] = 0.0
            for d in range(D):
                trans[i, d] /= trans[i, d].sum()
        emit = rng.random((M, V)) + 0.1
        emit /= emit.sum(axis=1, keepdims=True)
        model = cls(M, D, V, init, trans, emit)
        model.validate()
        return model

    # -- persistence ---------------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(_MODEL_MAGIC)
            fh.write(struct.pack("<BIII", _MODEL_VERSION, self.n_states, self.max_duration, self.n_symbols))
            for tensor in (self.init, self.trans, self.emit):
                fh.write(tensor.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "HsmmModel":
        with open(path, "rb") as fh:
            if fh.read(4) != _MODEL_MAGIC:
                raise SerpBanditError(f"{path}: not an hsmm model file")
            version, M, D, V = struct.unpack("<BIII", fh.read(13))
            if version != _MODEL_VERSION:
                raise SerpBanditError(f"{path}: unsupported model version {version}")

            def read(shape):
                n = int(np.prod(shape))
                return np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()

            init = read((M, D))
            trans = read((M, D, M, D))
            emit = read((M, V))
        return cls(M, D, V, init, trans, emit)


def _check_obs(model: HsmmModel, obs: Sequence[int]) -> np.ndarray:
    o = np.asarray(obs, dtype=np.int64)
    if o.ndim != 1 or len(o) < 1:
        raise SerpBanditError("observation sequence must be non-empty and 1-d")
    if o.min() < 0 or o.max() >= model.n_symbols:
        raise SerpBanditError("observation symbol outside the model vocabulary")
    return o


class _BlockEmissions:
    """Log block-emission lookups via cumulative sums.

    Zero-probability steps are counted separately instead of summing -inf,
    because differences of -inf cumulative sums are NaN.
    """

    def __init__(self, model: HsmmModel, obs: np.ndarray):
        with np.errstate(divide="ignore"):
            le = np.log(model.emit[:, obs])  # (M, T)
        impossible = np.isinf(le)
        zeros = np.zeros((model.n_states, 1))
        self._cum = np.concatenate(
            [zeros, np.cumsum(np.where(impossible, 0.0, le), axis=1)], axis=1
        )
        self._bad = np.concatenate(
            [zeros, np.cumsum(impossible.astype(float), axis=1)], axis=1
        )

    def log(self, t1: int, t2: int) -> np.ndarray:
        """log b_{j,.}(o[t1..t2]) per state (1-based inclusive bounds)."""
        out = self._cum[:, t2] - self._cum[:, t1 - 1]
        out[(self._bad[:, t2] - self._bad[:, t1 - 1]) > 0] = -np.inf
        return out


def forward(model: HsmmModel, obs: Sequence[int]) -> tuple[np.ndarray, float]:
    """Log-domain forward pass.

    Returns (log_alpha, log_likelihood) where log_alpha has shape
    (T + 1, M, D) and log_alpha[t, j, d-1] covers segments ending at t.
    """
    o = _check_obs(model, obs)
    T = len(o)
    M, D = model.n_states, model.max_duration
    blocks = _BlockEmissions(model, o)
    with np.errstate(divide="ignore"):
        log_init = np.log(model.init)
        log_trans = np.log(model.trans)

    la = np.full((T + 1, M, D), -np.inf)
    for t in range(1, T + 1):
        for d in range(1, min(D, t) + 1):
            block = blocks.log(t - d + 1, t)  # (M,) over the segment state
            if t == d:
                la[t, :, d - 1] = log_init[:, d - 1] + block
            else:
                # logsumexp over previous segments (i, d') into state j
                contrib = la[t - d][:, :, None] + log_trans[:, :, :, d - 1]
                la[t, :, d - 1] = logsumexp(contrib, axis=(0, 1)) + block
    loglik = float(logsumexp(la[T]))
    if loglik == -np.inf:
        raise ZeroLikelihood("no valid segmentation of the observations")
    return la, loglik


def backward(model: HsmmModel, obs: Sequence[int]) -> np.ndarray:
    """Log-domain backward pass; log_beta[T] is 0 everywhere."""
    o = _check_obs(model, obs)
    T = len(o)
    M, D = model.n_states, model.max_duration
    blocks = _BlockEmissions(model, o)
    with np.errstate(divide="ignore"):
        log_trans = np.log(model.trans)

    lb = np.full((T + 1, M, D), -np.inf)
    lb[T] = 0.0
    for t in range(T - 1, 0, -1):
        horizon = min(D, T - t)
        # nxt[i, d'-1]: next segment (i, d') emits o[t+1..t+d'] then continues
        nxt = np.full((M, D), -np.inf)
        for d2 in range(1, horizon + 1):
            nxt[:, d2 - 1] = blocks.log(t + 1, t + d2) + lb[t + d2, :, d2 - 1]
        lb[t] = logsumexp(log_trans + nxt[None, None, :, :], axis=(2, 3))
    return lb


def forward_scaled(model: HsmmModel, obs: Sequence[int]) -> tuple[np.ndarray, np.ndarray, float]:
    """Linear-domain forward with per-step renormalization (cross-check).

    Entries at time t all carry the common scale S_t = prod_{s<=t} c_s, so
    ratios within one time slice match the unscaled alphas and the
    log-likelihood is sum_t log c_t.
    """
    o = _check_obs(model, obs)
    T = len(o)
    M, D = model.n_states, model.max_duration
    blocks = _BlockEmissions(model, o)

    alpha_s = np.zeros((T + 1, M, D))
    log_c = np.zeros(T + 1)
    for t in range(1, T + 1):
        raw = np.zeros((M, D))  # alpha[t] / S_{t-1}
        for d in range(1, min(D, t) + 1):
            block = np.exp(blocks.log(t - d + 1, t))
            if t == d:
                raw[:, d - 1] = np.exp(-log_c[1:t].sum()) * model.init[:, d - 1] * block
            else:
                # alpha[t-d] is scaled by S_{t-d}; bring it to the S_{t-1}
                # convention of this slice before accumulating
                correction = np.exp(-log_c[t - d + 1 : t].sum())
                raw[:, d - 1] = (
                    correction
                    * np.einsum("ie,iej->j", alpha_s[t - d], model.trans[:, :, :, d - 1])
                    * block
                )
        total = raw.sum()
        if total <= 0.0:
            raise ZeroLikelihood(f"no segment can end at t={t}")
        alpha_s[t] = raw / total
        log_c[t] = np.log(total)
    return alpha_s, log_c, float(log_c[1:].sum())


def filter_posterior(model: HsmmModel, log_alpha: np.ndarray, t: int) -> np.ndarray:
    """P(segment (j, d) ends at t | o[1..t]) as an (M, D) matrix."""
    slice_t = log_alpha[t]
    z = logsumexp(slice_t)
    if z == -np.inf:
        raise ZeroLikelihood(f"no segment can end at t={t}")
    return np.exp(slice_t - z)


def predict_next(model: HsmmModel, log_alpha: np.ndarray, t: int) -> np.ndarray:
    """P(next segment is (j, d) starting at t+1 | o[1..t]) as (M, D)."""
    slice_t = log_alpha[t]
    z = logsumexp(slice_t)
    if z == -np.inf:
        raise ZeroLikelihood(f"no segment can end at t={t}")
    with np.errstate(divide="ignore"):
        log_trans = np.log(model.trans)
    num = logsumexp(slice_t[:, :, None, None] + log_trans, axis=(0, 1))
    return np.exp(num - z)


def log_likelihood(model: HsmmModel, corpus: Sequence[Sequence[int]]) -> float:
    return sum(forward(model, obs)[1] for obs in corpus)


def reestimate(model: HsmmModel, corpus: Sequence[Sequence[int]]) -> HsmmModel:
    """One EM iteration over a corpus of observation sequences.

    E-step: posterior segment weights eta[t, j, d] ~ alpha * beta and
    transition posteriors alpha[t, i, d'] * trans * block * beta[t+d, j, d].
    M-step: normalize the expected counts per (i, d') transition row and
    per emission row; rows with zero expected mass keep their old values.
    """
    if not corpus:
        raise SerpBanditError("re-estimation needs a non-empty corpus")
    M, D, V = model.n_states, model.max_duration, model.n_symbols
    with np.errstate(divide="ignore"):
        log_trans = np.log(model.trans)

    exp_trans = np.zeros((M, D, M, D))
    exp_emit = np.zeros((M, V))
    for obs in corpus:
        o = _check_obs(model, obs)
        T = len(o)
        la, ll = forward(model, o)
        lb = backward(model, o)
        blocks = _BlockEmissions(model, o)
        for t in range(1, T):
            src = la[t]  # (M, D) segments ending at t
            if np.all(src == -np.inf):
                continue
            for d in range(1, min(D, T - t) + 1):
                tail = blocks.log(t + 1, t + d) + lb[t + d, :, d - 1]  # (M,)
                w = src[:, :, None] + log_trans[:, :, :, d - 1] + tail[None, None, :] - ll
                exp_trans[:, :, :, d - 1] += np.exp(w)
        for t in range(1, T + 1):
            for d in range(1, min(D, t) + 1):
                w = np.exp(la[t, :, d - 1] + lb[t, :, d - 1] - ll)  # (M,)
                for s in range(t - d, t):
                    exp_emit[:, o[s]] += w

    new_trans = model.trans.copy()
    for i in range(M):
        for d in range(D):
            mass = exp_trans[i, d].sum()
            if mass > 0.0:
                new_trans[i, d] = exp_trans[i, d] / mass
    new_emit = model.emit.copy()
    for j in range(M):
        mass = exp_emit[j].sum()
        if mass > 0.0:
            new_emit[j] = exp_emit[j] / mass
    return replace(model, trans=new_trans, emit=new_emit)


def fit(
    model: HsmmModel, corpus: Sequence[Sequence[int]], iterations: int
) -> tuple[HsmmModel, list[float]]:
    """Run EM for a fixed number of iterations; returns the final model and
    the log-likelihood before each iteration plus after the last."""
    history = [log_likelihood(model, corpus)]
    for _ in range(iterations):
        model = reestimate(model, corpus)
        history.append(log_likelihood(model, corpus))
    return model, history
