"""Session clustering: session documents, collapsed-Gibbs LDA, topic inference.

A session document holds the query terms of every query in the session
that received a click (sessions without clicks fall back to all of their
query terms, so every session can be assigned a topic). Documents feed a
standard collapsed Gibbs sampler; topic inference on a trained model is
fixed-phi folding-in. Both are deterministic given their seeds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from serpbandit.clicklog import Session
from serpbandit.errors import SerpBanditError

DEFAULT_BETA = 0.01
DEFAULT_ITERATIONS = 200
DEFAULT_INFER_SWEEPS = 20

_MODEL_MAGIC = b"LDAM"
_MODEL_VERSION = 1


class EmptyVocabulary(SerpBanditError):
    """The corpus has no terms at all."""


@dataclass(frozen=True)
class SessionDoc:
    session_id: int
    terms: tuple[int, ...]


def build_session_docs(sessions: Iterable[Session]) -> list[SessionDoc]:
    """One document per session from the terms of its clicked queries."""
    docs = []
    for session in sessions:
        terms: list[int] = []
        for serp in session.serps:
            if serp.clicks:
                terms.extend(serp.terms)
        if not terms:
            for serp in session.serps:
                terms.extend(serp.terms)
        docs.append(SessionDoc(session.session_id, tuple(terms)))
    return docs


@dataclass
class TopicModel:
    n_topics: int
    phi: np.ndarray  # (K, V) per-topic term distributions, rows sum to 1
    alpha: float
    beta: float
    vocab: dict[int, int]  # term id -> column index
    ll_trace: list[float] = field(default_factory=list)

    def infer(
        self,
        terms: Sequence[int],
        sweeps: int = DEFAULT_INFER_SWEEPS,
        seed: int = 0,
    ) -> np.ndarray:
        """Topic proportions of a document by fixed-phi Gibbs folding-in.

        Unknown terms are ignored; a document with no known terms gets the
        prior-only (uniform) distribution.
        """
        K = self.n_topics
        cols = [self.vocab[t] for t in terms if t in self.vocab]
        n = len(cols)
        if n == 0:
            return np.full(K, 1.0 / K)
        rng = np.random.default_rng(seed)
        z = rng.integers(0, K, size=n)
        m = np.bincount(z, minlength=K).astype(np.float64)
        for _ in range(sweeps):
            for i in range(n):
                k = z[i]
                m[k] -= 1.0
                p = self.phi[:, cols[i]] * (m + self.alpha)
                cp = np.cumsum(p)
                k = int(np.searchsorted(cp, rng.random() * cp[-1], side="right"))
                if k >= K:  # guard the fp edge of searchsorted
                    k = K - 1
                z[i] = k
                m[k] += 1.0
        return (m + self.alpha) / (n + K * self.alpha)

    def assign(
        self,
        terms: Sequence[int],
        sweeps: int = DEFAULT_INFER_SWEEPS,
        seed: int = 0,
    ) -> int:
        """Hard topic assignment: argmax with lowest-index tie-break."""
        return int(np.argmax(self.infer(terms, sweeps=sweeps, seed=seed)))

    # -- persistence ---------------------------------------------------------

    def save(self, path: str) -> None:
        V = self.phi.shape[1]
        with open(path, "wb") as fh:
            fh.write(_MODEL_MAGIC)
            fh.write(
                struct.pack("<BIIdd", _MODEL_VERSION, self.n_topics, V, self.alpha, self.beta)
            )
            for term in sorted(self.vocab):
                fh.write(struct.pack("<qI", term, self.vocab[term]))
            fh.write(self.phi.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "TopicModel":
        with open(path, "rb") as fh:
            if fh.read(4) != _MODEL_MAGIC:
                raise SerpBanditError(f"{path}: not a topic model file")
            version, K, V, alpha, beta = struct.unpack("<BIIdd", fh.read(25))
            if version != _MODEL_VERSION:
                raise SerpBanditError(f"{path}: unsupported model version {version}")
            vocab = {}
            for _ in range(V):
                term, idx = struct.unpack("<qI", fh.read(12))
                vocab[term] = idx
            phi = np.frombuffer(fh.read(8 * K * V), dtype="<f8").reshape(K, V).copy()
        return cls(n_topics=K, phi=phi, alpha=alpha, beta=beta, vocab=vocab)


def _corpus_log_likelihood(
    doc_of: np.ndarray,
    word_of: np.ndarray,
    n_dk: np.ndarray,
    n_kv: np.ndarray,
    n_k: np.ndarray,
    doc_len: np.ndarray,
    alpha: float,
    beta: float,
) -> float:
    K = n_kv.shape[0]
    V = n_kv.shape[1]
    theta = (n_dk + alpha) / (doc_len[:, None] + K * alpha)  # (D, K)
    phi = (n_kv + beta) / (n_k[:, None] + V * beta)  # (K, V)
    per_token = np.einsum("nk,kn->n", theta[doc_of], phi[:, word_of])
    return float(np.log(per_token).sum())


def gibbs_train(
    docs: Sequence[SessionDoc],
    n_topics: int,
    alpha: float | None = None,
    beta: float = DEFAULT_BETA,
    iterations: int = DEFAULT_ITERATIONS,
    seed: int = 0,
    track_likelihood: bool = False,
) -> TopicModel:
    """Collapsed Gibbs sampling over session documents.

    alpha defaults to 50 / K. phi comes from the final-iteration counts with
    beta smoothing; iterations=0 keeps the seeded random initialization.
    """
    if n_topics < 1:
        raise ValueError("n_topics must be >= 1")
    if alpha is None:
        alpha = 50.0 / n_topics
    term_ids = sorted({t for doc in docs for t in doc.terms})
    if not term_ids:
        raise EmptyVocabulary("no terms in any document")
    vocab = {t: i for i, t in enumerate(term_ids)}
    V = len(vocab)
    K = n_topics

    doc_of = np.array(
        [d for d, doc in enumerate(docs) for _ in doc.terms], dtype=np.int64
    )
    word_of = np.array(
        [vocab[t] for doc in docs for t in doc.terms], dtype=np.int64
    )
    n_tokens = len(word_of)
    n_docs = len(docs)

    rng = np.random.default_rng(seed)
    z = rng.integers(0, K, size=n_tokens)

    # count bookkeeping: topic-term, topic totals, doc-topic, doc lengths
    n_kv = np.zeros((K, V), dtype=np.float64)
    np.add.at(n_kv, (z, word_of), 1.0)
    n_k = np.bincount(z, minlength=K).astype(np.float64)
    n_dk = np.zeros((n_docs, K), dtype=np.float64)
    np.add.at(n_dk, (doc_of, z), 1.0)
    doc_len = np.bincount(doc_of, minlength=n_docs).astype(np.float64)

    ll_trace: list[float] = []
    v_beta = V * beta
    for _it in range(iterations):
        for n in range(n_tokens):
            k = z[n]
            d = doc_of[n]
            v = word_of[n]
            n_kv[k, v] -= 1.0
            n_k[k] -= 1.0
            n_dk[d, k] -= 1.0
            p = (n_kv[:, v] + beta) / (n_k + v_beta) * (n_dk[d] + alpha)
            cp = np.cumsum(p)
            k = int(np.searchsorted(cp, rng.random() * cp[-1], side="right"))
            if k >= K:
                k = K - 1
            z[n] = k
            n_kv[k, v] += 1.0
            n_k[k] += 1.0
            n_dk[d, k] += 1.0
        if track_likelihood:
            ll_trace.append(
                _corpus_log_likelihood(doc_of, word_of, n_dk, n_kv, n_k, doc_len, alpha, beta)
            )

    phi = (n_kv + beta) / (n_k[:, None] + v_beta)
    return TopicModel(
        n_topics=K, phi=phi, alpha=alpha, beta=beta, vocab=vocab, ll_trace=ll_trace
    )
