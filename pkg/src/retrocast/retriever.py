"""Dual-encoder dense retriever over a knowledge base.

Queries and candidates are instance-normalized, embedded by two separate MLPs,
and scored by dot product. The retriever is trained by distilling a target
distribution built from the forecaster's per-candidate error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import fileformat
from .numkit import ActivationCache, ConfigError, Mlp, kl_divergence, softmax
from .tsdata import instance_normalize

log = logging.getLogger(__name__)


@dataclass
class RetrieverHyper:
    k: int = 8
    tau_m: float = 0.1
    tau_s: float = 1.0
    rho: float = 0.2

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not (self.tau_m > 0 and self.tau_s > 0):
            raise ConfigError("temperatures must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")


@dataclass
class RetrievalResult:
    indices: np.ndarray
    scores: np.ndarray
    augmented: np.ndarray
    target: np.ndarray | None = None

    @property
    def k(self):
        return len(self.indices)


@dataclass
class EncodeCache:
    query: ActivationCache = field(default_factory=ActivationCache)
    cand: ActivationCache = field(default_factory=ActivationCache)


class Retriever:
    """Query and candidate encoders, ``sl -> hidden -> e`` with tanh on both layers."""

    def __init__(self, query_encoder, cand_encoder):
        if query_encoder.out_dim != cand_encoder.out_dim:
            raise ConfigError("both encoders must share the output dimension")
        if query_encoder.in_dim != cand_encoder.in_dim:
            raise ConfigError("both encoders must read windows of the same length")
        if query_encoder is cand_encoder:
            raise ConfigError("encoders must be independent parameter sets")
        self.query_encoder = query_encoder
        self.cand_encoder = cand_encoder

    @classmethod
    def init(cls, sl, rng, e=64, hidden=None):
        # Both towers start from the same weights and then train independently.
        hidden = 4 * sl if hidden is None else hidden
        q = Mlp.init([sl, hidden, e], rng, tanh_output=True)
        return cls(q, q.copy())

    @property
    def sl(self):
        return self.query_encoder.in_dim

    @property
    def e(self):
        return self.query_encoder.out_dim

    @property
    def mlps(self):
        return (self.query_encoder, self.cand_encoder)

    def encode_query(self, xn, cache=None):
        return self.query_encoder.forward(xn, cache)

    def encode_candidates(self, tn, cache=None):
        return self.cand_encoder.forward(tn, cache)

    def candidate_table(self, kb):
        """Candidate embeddings for the whole base, ``(n_kb, e)``."""
        return self.encode_candidates(kb.normalized)

    def score_all(self, query, kb, eligible, cand_table=None):
        """Dot-product scores of ``query`` (raw lookback) against ``kb[eligible]``."""
        eligible = np.asarray(eligible)
        if eligible.size == 0:
            raise ConfigError("no eligible candidates to score")
        q = self.encode_query(instance_normalize(query)[0])
        enc = cand_table[eligible] if cand_table is not None else self.encode_candidates(kb.normalized[eligible])
        return enc @ q

    def save(self, path, meta=None):
        arrays = fileformat.mlp_arrays("query", self.query_encoder) + fileformat.mlp_arrays(
            "cand", self.cand_encoder
        )
        info = {"kind": "retriever"}
        info.update(meta or {})
        fileformat.write_tsck(path, arrays, info)

    @classmethod
    def load(cls, path):
        arrays, meta = fileformat.read_tsck(path)
        if meta.get("kind") != "retriever":
            raise fileformat.FormatError(f"{path} is not a retriever checkpoint")
        return cls(
            fileformat.mlp_from_arrays("query", arrays, tanh_output=True),
            fileformat.mlp_from_arrays("cand", arrays, tanh_output=True),
        )


def top_k(scores, k):
    """Positions of the ``k`` largest scores, best first; ties go to the lower position."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < k:
        raise ConfigError(f"cannot take top {k} of {len(scores)} scores")
    return np.argsort(-scores, kind="stable")[:k]


def target_distribution(metric_values, tau_m):
    """Softmax of higher-is-better metric values at temperature ``tau_m``."""
    if not tau_m > 0:
        raise ConfigError("tau_m must be positive")
    return softmax(metric_values, tau_m)


def retrieval_loss(scores, target, tau_s):
    """``KL(target || softmax(scores / tau_s))`` and its gradient wrt ``scores``."""
    q = softmax(scores, tau_s)
    loss = kl_divergence(target, q)
    return loss, (q - np.asarray(target, dtype=np.float64)) / tau_s


def augment(result, eligible, eligible_scores, rho, rng):
    """Swap each slot, with probability ``rho``, for a fresh random eligible entry.

    Replacements never collide with entries already in the result. The score
    of a swapped slot is looked up from ``eligible_scores`` (aligned with
    ``eligible``), i.e. it is the dot product with the new candidate.
    """
    if not 0.0 <= rho <= 1.0:
        raise ConfigError("rho must lie in [0, 1]")
    eligible = np.asarray(eligible)
    position = {int(e): j for j, e in enumerate(eligible)}
    taken = set(int(i) for i in result.indices)
    if len(eligible) <= len(taken):
        if rho > 0:
            log.debug("no spare candidates for augmentation; keeping retrieval as is")
        return replace(result, augmented=np.zeros(result.k, dtype=bool))
    indices = np.array(result.indices, copy=True)
    scores = np.array(result.scores, dtype=np.float64, copy=True)
    flags = np.zeros(result.k, dtype=bool)
    for slot in range(result.k):
        if rng.random() >= rho:
            continue
        pool = [int(e) for e in eligible if int(e) not in taken]
        if not pool:
            break
        new = pool[int(rng.integers(len(pool)))]
        taken.discard(int(indices[slot]))
        taken.add(new)
        indices[slot] = new
        scores[slot] = eligible_scores[position[new]]
        flags[slot] = True
    return RetrievalResult(indices, scores, flags, None)


def cosine_top_k(query, kb, eligible, k):
    """Baseline: top-k by cosine similarity of normalized raw windows."""
    eligible = np.asarray(eligible)
    xn = instance_normalize(query)[0]
    tn = kb.normalized[eligible]
    norms = np.linalg.norm(tn, axis=1) * np.linalg.norm(xn)
    sims = (tn @ xn) / np.maximum(norms, 1e-12)
    return eligible[top_k(sims, k)], sims


def random_k(eligible, k, rng):
    """Baseline: a uniform k-subset of the eligible entries."""
    eligible = np.asarray(eligible)
    if len(eligible) < k:
        raise ConfigError(f"cannot draw {k} of {len(eligible)} candidates")
    return eligible[np.sort(rng.choice(len(eligible), size=k, replace=False))]
