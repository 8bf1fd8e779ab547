"""Injecting retrieved candidate embeddings into the input embedding.

All three fusers share one interface::

    fused = fuser.forward(x_emb, cand_embs, cache)        # (n, d)
    dx, dc = fuser.backward(cache, d_fused, grads)         # (n, d), (k, n, d)

``ChannelPrompt`` is the full method; ``TokenConcat`` and ``Average`` are the
ablation baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileformat
from .numkit import ActivationCache, ConfigError, Grads, Mlp


@dataclass
class FusionCache:
    mlp: ActivationCache = field(default_factory=ActivationCache)
    k: int = 0


def _check_shapes(x_emb, cand_embs):
    x_emb = np.asarray(x_emb, dtype=np.float64)
    cand_embs = np.asarray(cand_embs, dtype=np.float64)
    if x_emb.ndim != 2:
        raise ConfigError(f"input embedding must be (n, d), got {x_emb.shape}")
    if cand_embs.ndim != 3 or cand_embs.shape[1:] != x_emb.shape:
        raise ConfigError(f"candidate embeddings {cand_embs.shape} do not match input {x_emb.shape}")
    if cand_embs.shape[0] == 0:
        raise ConfigError("at least one candidate is required")
    return x_emb, cand_embs


class ChannelPrompt:
    """``x* = x + mean_i MLP(concat(flat(x), flat(c_i)))``, reshaped to ``(n, d)``."""

    name = "channel_prompt"

    def __init__(self, mlp, n, d):
        if mlp.in_dim != 2 * n * d or mlp.out_dim != n * d:
            raise ConfigError(f"channel prompt MLP must map {2 * n * d} -> {n * d}")
        self.mlp = mlp
        self.n = n
        self.d = d

    @classmethod
    def init(cls, n, d, rng):
        nd = n * d
        return cls(Mlp.init([2 * nd, 2 * nd, 2 * nd, nd, nd], rng, zero_last=True), n, d)

    @property
    def mlps(self):
        return (self.mlp,)

    def _z(self, x_emb, cand_embs):
        k = cand_embs.shape[0]
        flat_x = np.broadcast_to(x_emb.reshape(1, -1), (k, self.n * self.d))
        return np.concatenate([flat_x, cand_embs.reshape(k, -1)], axis=1)

    def forward(self, x_emb, cand_embs, cache=None):
        x_emb, cand_embs = _check_shapes(x_emb, cand_embs)
        out = self.mlp.forward(self._z(x_emb, cand_embs), cache.mlp if cache else None)
        if cache is not None:
            cache.k = cand_embs.shape[0]
        return x_emb + out.mean(axis=0).reshape(self.n, self.d)

    def forward_each(self, x_emb, cand_embs):
        """Fused embedding using one candidate at a time, ``(k, n, d)``."""
        x_emb, cand_embs = _check_shapes(x_emb, cand_embs)
        out = self.mlp.forward(self._z(x_emb, cand_embs))
        return x_emb[None] + out.reshape(-1, self.n, self.d)

    def backward(self, cache, d_fused, grads=None):
        k = cache.k
        nd = self.n * self.d
        d_fused = np.asarray(d_fused, dtype=np.float64).reshape(nd)
        d_out = np.broadcast_to(d_fused / k, (k, nd))
        d_z = self.mlp.backward(cache.mlp, d_out, grads[0] if grads else None)
        d_x = d_fused + d_z[:, :nd].sum(axis=0)
        return d_x.reshape(self.n, self.d), d_z[:, nd:].reshape(k, self.n, self.d)


class TokenConcat:
    """Per-position fusion: ``x*[j] = x[j] + MLP(concat(x[j], mean_i c_i[j]))``."""

    name = "token_concat"

    def __init__(self, mlp, n, d):
        if mlp.in_dim != 2 * d or mlp.out_dim != d:
            raise ConfigError(f"token MLP must map {2 * d} -> {d}")
        self.mlp = mlp
        self.n = n
        self.d = d

    @classmethod
    def init(cls, n, d, rng):
        return cls(Mlp.init([2 * d, 2 * d, 2 * d, d, d], rng, zero_last=True), n, d)

    @property
    def mlps(self):
        return (self.mlp,)

    def forward(self, x_emb, cand_embs, cache=None):
        x_emb, cand_embs = _check_shapes(x_emb, cand_embs)
        tokens = np.concatenate([x_emb, cand_embs.mean(axis=0)], axis=1)
        if cache is not None:
            cache.k = cand_embs.shape[0]
        return x_emb + self.mlp.forward(tokens, cache.mlp if cache else None)

    def forward_each(self, x_emb, cand_embs):
        x_emb, cand_embs = _check_shapes(x_emb, cand_embs)
        tokens = np.concatenate([np.broadcast_to(x_emb, cand_embs.shape), cand_embs], axis=2)
        return x_emb[None] + self.mlp.forward(tokens)

    def backward(self, cache, d_fused, grads=None):
        k = cache.k
        d_fused = np.asarray(d_fused, dtype=np.float64)
        d_tok = self.mlp.backward(cache.mlp, d_fused, grads[0] if grads else None)
        d_c = np.broadcast_to(d_tok[:, self.d :] / k, (k, self.n, self.d)).copy()
        return d_fused + d_tok[:, : self.d], d_c


class Average:
    """Parameter-free mean of the input and candidate embeddings."""

    name = "average"
    mlps = ()

    def __init__(self, n=None, d=None):
        self.n = n
        self.d = d

    @classmethod
    def init(cls, n, d, rng=None):
        return cls(n, d)

    def forward(self, x_emb, cand_embs, cache=None):
        x_emb, cand_embs = _check_shapes(x_emb, cand_embs)
        if cache is not None:
            cache.k = cand_embs.shape[0]
        return average_baseline(x_emb, cand_embs)

    def forward_each(self, x_emb, cand_embs):
        x_emb, cand_embs = _check_shapes(x_emb, cand_embs)
        return (x_emb[None] + cand_embs) / 2.0

    def backward(self, cache, d_fused, grads=None):
        k = cache.k
        d = np.asarray(d_fused, dtype=np.float64) / (k + 1)
        return d, np.broadcast_to(d, (k,) + d.shape).copy()


def average_baseline(x_emb, cand_embs):
    x_emb, cand_embs = _check_shapes(x_emb, cand_embs)
    return np.concatenate([x_emb[None], cand_embs], axis=0).mean(axis=0)


def channel_prompt(params, x_emb, cand_embs):
    """Functional form of ``ChannelPrompt.forward``."""
    return params.forward(x_emb, cand_embs)


def token_concat_baseline(x_emb, cand_embs, params_tc):
    return params_tc.forward(x_emb, cand_embs)


FUSERS = {cls.name: cls for cls in (ChannelPrompt, TokenConcat, Average)}


def make_fuser(policy, n, d, rng):
    if policy not in FUSERS:
        raise ConfigError(f"unknown fusion policy {policy!r}")
    return FUSERS[policy].init(n, d, rng)


def new_grads(fuser):
    return [Grads.like(m) for m in fuser.mlps]


def save_fuser(fuser, path, meta=None):
    arrays = fileformat.mlp_arrays("fusion", fuser.mlp) if fuser.mlps else []
    info = {"kind": "fusion", "policy": fuser.name, "n": fuser.n, "d": fuser.d}
    info.update(meta or {})
    fileformat.write_tsck(path, arrays, info)


def load_fuser(path):
    arrays, meta = fileformat.read_tsck(path)
    if meta.get("kind") != "fusion":
        raise fileformat.FormatError(f"{path} is not a fusion checkpoint")
    cls = FUSERS[meta["policy"]]
    if cls is Average:
        return Average(meta["n"], meta["d"])
    return cls(fileformat.mlp_from_arrays("fusion", arrays), meta["n"], meta["d"])
