"""Retrieval knowledge base: fixed-length raw windows with provenance.

Entries are stored un-normalized. Values are rounded to float32 when the base
is built so that a save/load round trip through the TSKB file is exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import fileformat
from .numkit import ConfigError
from .tsdata import normalize_rows

SIZE_SWEEP = (1.0, 0.5, 0.3, 0.1, 0.01)


class KnowledgeBaseError(ValueError):
    pass


@dataclass(frozen=True)
class KbEntry:
    t: np.ndarray
    domain: str
    dataset_id: str
    origin: tuple  # (channel_id, start_index)


class KnowledgeBase:
    """Immutable table of candidate windows.

    ``values`` is ``(n_kb, sl)``; ``domains``, ``dataset_ids`` and ``origins``
    are parallel per-entry lists.
    """

    def __init__(self, values, domains, dataset_ids, origins, sl=None, manifest_digest=""):
        values = np.asarray(values, dtype=np.float32).astype(np.float64)
        if values.ndim != 2:
            if values.size == 0 and sl is not None:
                values = values.reshape(0, sl)
            else:
                raise ConfigError("knowledge base values must be (n_kb, sl)")
        n = values.shape[0]
        if not (len(domains) == len(dataset_ids) == len(origins) == n):
            raise ConfigError("per-entry metadata length does not match value rows")
        if not np.all(np.isfinite(values)):
            raise KnowledgeBaseError("knowledge base values must be finite")
        self.values = values
        self.values.flags.writeable = False
        self.sl = int(values.shape[1] if sl is None else sl)
        self.domains = list(domains)
        self.dataset_ids = list(dataset_ids)
        self.origins = [(str(c), int(s)) for c, s in origins]
        self.manifest_digest = manifest_digest
        self.domain_index = {}
        for i, d in enumerate(self.domains):
            self.domain_index.setdefault(d, []).append(i)
        self._dataset_array = np.array(self.dataset_ids, dtype=object)
        self._normalized = None

    @property
    def n_kb(self):
        return self.values.shape[0]

    def __len__(self):
        return self.n_kb

    def __getitem__(self, i):
        return KbEntry(self.values[i], self.domains[i], self.dataset_ids[i], self.origins[i])

    @property
    def entries(self):
        return [self[i] for i in range(self.n_kb)]

    @property
    def normalized(self):
        """Row-wise instance-normalized values, computed on first use."""
        if self._normalized is None:
            self._normalized = normalize_rows(self.values)
            self._normalized.flags.writeable = False
        return self._normalized

    def domain_counts(self):
        return {d: len(ix) for d, ix in sorted(self.domain_index.items())}

    def select(self, indices):
        """Sub-base of the given entry indices, in the given order."""
        idx = [int(i) for i in indices]
        return KnowledgeBase(
            self.values[idx].reshape(len(idx), self.sl),
            [self.domains[i] for i in idx],
            [self.dataset_ids[i] for i in idx],
            [self.origins[i] for i in idx],
            sl=self.sl,
            manifest_digest=self.manifest_digest,
        )

    def metadata(self):
        return {
            "sl": self.sl,
            "domains": self.domains,
            "dataset_ids": self.dataset_ids,
            "origins": [list(o) for o in self.origins],
            "manifest_digest": self.manifest_digest,
        }

    def __eq__(self, other):
        if not isinstance(other, KnowledgeBase):
            return NotImplemented
        return (
            self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
            and self.metadata() == other.metadata()
        )


def provenance_digest(series_list):
    rows = sorted([s.dataset_id, s.channel_id, s.domain, len(s)] for s in series_list)
    return hashlib.blake2b(json.dumps(rows).encode(), digest_size=8).hexdigest()


def window_grid(series_list, sl):
    """Non-overlapping ``[start, start + sl)`` slots of every series, deterministic order."""
    grid = []
    for s in sorted(series_list, key=lambda s: (s.dataset_id, s.channel_id)):
        for start in range(0, len(s) - sl + 1, sl):
            grid.append((s, start))
    return grid


def _assemble(picks, sl, digest):
    if not picks:
        return KnowledgeBase(np.zeros((0, sl)), [], [], [], sl=sl, manifest_digest=digest)
    return KnowledgeBase(
        np.stack([s.values[a : a + sl] for s, a in picks]),
        [s.domain for s, _ in picks],
        [s.dataset_id for s, _ in picks],
        [(s.channel_id, a) for s, a in picks],
        sl=sl,
        manifest_digest=digest,
    )


def build(series_list, sl, per_domain_quota, seed):
    """Domain-balanced base: ``per_domain_quota`` windows from every domain.

    Windows are drawn uniformly without replacement from each domain's
    non-overlapping grid, so no two entries of one channel intersect.
    """
    if per_domain_quota < 1:
        raise ConfigError("per_domain_quota must be >= 1")
    rng = np.random.default_rng(seed)
    by_domain = {}
    for slot in window_grid(series_list, sl):
        by_domain.setdefault(slot[0].domain, []).append(slot)
    short = {d: len(g) for d, g in sorted(by_domain.items()) if len(g) < per_domain_quota}
    if short:
        detail = ", ".join(f"{d}: {n} of {per_domain_quota}" for d, n in short.items())
        raise KnowledgeBaseError(f"not enough non-overlapping windows ({detail})")
    picks = []
    for domain in sorted(by_domain):
        grid = by_domain[domain]
        chosen = np.sort(rng.choice(len(grid), size=per_domain_quota, replace=False))
        picks.extend(grid[i] for i in chosen)
    return _assemble(picks, sl, provenance_digest(series_list))


def build_pooled(series_list, sl, n_total, seed):
    """Unbalanced base: uniform draw over the pooled grid of all domains."""
    rng = np.random.default_rng(seed)
    grid = window_grid(series_list, sl)
    if n_total > len(grid):
        raise KnowledgeBaseError(f"pooled grid has {len(grid)} windows, {n_total} requested")
    chosen = np.sort(rng.choice(len(grid), size=n_total, replace=False))
    return _assemble([grid[i] for i in chosen], sl, provenance_digest(series_list))


def save(kb, path, extra=None):
    """Write ``kb`` as TSKB; ``extra`` (e.g. provenance) is stored alongside the metadata."""
    meta = kb.metadata()
    meta.update(extra or {})
    fileformat.write_tskb(path, kb.values.astype(np.float32), meta)


def load(path):
    values, meta = fileformat.read_tskb(path)
    return KnowledgeBase(
        values,
        meta["domains"],
        meta["dataset_ids"],
        [tuple(o) for o in meta["origins"]],
        sl=meta["sl"],
        manifest_digest=meta.get("manifest_digest", ""),
    )


def eligible_candidates(kb, query_source, training, k=1):
    """Entry indices a query may retrieve.

    While training, entries from the query's own dataset are excluded so the
    retriever cannot read the query's future.
    """
    if kb.n_kb == 0:
        raise KnowledgeBaseError("knowledge base is empty")
    if training:
        idx = np.flatnonzero(kb._dataset_array != query_source)
    else:
        idx = np.arange(kb.n_kb)
    if len(idx) < k:
        raise KnowledgeBaseError(
            f"only {len(idx)} eligible candidates for k={k}; use a larger knowledge base or a smaller k"
        )
    return idx


def subsample(kb, fraction, seed):
    """Stratified per-domain subsample keeping ``round(fraction * count)`` of each domain."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return kb.select(range(kb.n_kb))
    rng = np.random.default_rng(seed)
    keep = []
    for domain in sorted(kb.domain_index):
        ix = kb.domain_index[domain]
        m = int(round(fraction * len(ix)))
        if m < 1:
            raise KnowledgeBaseError(f"fraction {fraction} leaves no entries for domain {domain!r}")
        keep.extend(np.asarray(ix)[rng.choice(len(ix), size=m, replace=False)].tolist())
    return kb.select(sorted(keep))


def overlapping_pairs(kb):
    """Brute-force list of entry pairs sharing a channel with intersecting spans."""
    bad = []
    for i in range(kb.n_kb):
        for j in range(i + 1, kb.n_kb):
            if kb.dataset_ids[i] != kb.dataset_ids[j] or kb.origins[i][0] != kb.origins[j][0]:
                continue
            a, b = kb.origins[i][1], kb.origins[j][1]
            if a < b + kb.sl and b < a + kb.sl:
                bad.append((i, j))
    return bad
