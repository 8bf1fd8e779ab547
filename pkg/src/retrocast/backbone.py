"""Small patch-based forecaster used as the frozen foundation model.

Layout: a shared linear projection ``patch_len -> d`` per patch, a tanh trunk
over the flattened ``n * d`` embedding (two hidden layers of width ``2 n d``)
and a linear head to ``fl`` steps. All forecasting happens in the
instance-normalized space of the lookback window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileformat
from .numkit import ActivationCache, Adam, ConfigError, Grads, Mlp, param_hash
from .tsdata import denormalize, instance_normalize, normalize_rows, num_patches, patchify


class PretrainError(RuntimeError):
    pass


class PretrainDiverged(PretrainError, FloatingPointError):
    """Pretraining produced a non-finite loss."""


@dataclass(frozen=True)
class BackboneDims:
    sl: int = 512
    fl: int = 96
    patch_len: int = 64
    d: int = 16

    @property
    def n(self):
        return num_patches(self.sl, self.patch_len)

    @property
    def flat(self):
        return self.n * self.d


@dataclass
class PretrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0


@dataclass
class PretrainReport:
    initial_loss: float
    epoch_losses: list = field(default_factory=list)


@dataclass
class ForecastCache:
    proj: ActivationCache = field(default_factory=ActivationCache)
    trunk: ActivationCache = field(default_factory=ActivationCache)
    head: ActivationCache = field(default_factory=ActivationCache)


class Backbone:
    def __init__(self, dims, proj, trunk, head):
        if proj.in_dim != dims.patch_len or proj.out_dim != dims.d:
            raise ConfigError(f"projection must map {dims.patch_len} -> {dims.d}")
        if trunk.in_dim != dims.flat:
            raise ConfigError(f"trunk must take {dims.flat} inputs")
        if head.in_dim != trunk.out_dim or head.out_dim != dims.fl:
            raise ConfigError(f"head must map {trunk.out_dim} -> {dims.fl}")
        self.dims = dims
        self.proj = proj
        self.trunk = trunk
        self.head = head

    @classmethod
    def init(cls, dims, rng, hidden=None):
        hidden = 2 * dims.flat if hidden is None else hidden
        return cls(
            dims,
            Mlp.init([dims.patch_len, dims.d], rng),
            Mlp.init([dims.flat, hidden, hidden], rng, tanh_output=True),
            Mlp.init([hidden, dims.fl], rng),
        )

    @property
    def mlps(self):
        return (self.proj, self.trunk, self.head)

    @property
    def frozen(self):
        return all(m.frozen for m in self.mlps)

    def freeze(self):
        for m in self.mlps:
            m.frozen = True

    def param_hash(self):
        return param_hash(*self.mlps)

    # -- forward pieces ---------------------------------------------------

    def embed_patches(self, patches, cache=None):
        """Project each patch row to ``d``; works on ``(n, p)`` or ``(B, n, p)``."""
        patches = np.asarray(patches, dtype=np.float64)
        if patches.shape[-1] != self.dims.patch_len:
            raise ConfigError(f"patch width {patches.shape[-1]} != {self.dims.patch_len}")
        return self.proj.forward(patches, cache)

    def embed_normalized(self, xn, cache=None):
        return self.embed_patches(patchify(xn, self.dims.patch_len), cache)

    def embed_windows(self, windows):
        """Embeddings ``(B, n, d)`` of raw windows, each normalized on its own."""
        return self.embed_patches(patchify(normalize_rows(windows), self.dims.patch_len))

    def forecast_normalized(self, emb, cache=None):
        """Normalized forecast from ``(n, d)`` or ``(B, n, d)`` embeddings."""
        emb = np.asarray(emb, dtype=np.float64)
        n, d = self.dims.n, self.dims.d
        if emb.shape[-2:] != (n, d):
            raise ConfigError(f"embedding shape {emb.shape[-2:]} != {(n, d)}")
        flat = emb.reshape(*emb.shape[:-2], n * d)
        h = self.trunk.forward(flat, cache.trunk if cache else None)
        return self.head.forward(h, cache.head if cache else None)

    def forecast_backward(self, cache, grad_yn, grads=None):
        """Gradient wrt the embedding given the gradient wrt the normalized forecast.

        ``grads`` is a ``(trunk_grads, head_grads)`` pair or None (frozen).
        """
        tg, hg = grads if grads is not None else (None, None)
        g = self.head.backward(cache.head, grad_yn, hg)
        g = self.trunk.backward(cache.trunk, g, tg)
        return g.reshape(*g.shape[:-1], self.dims.n, self.dims.d)

    def forecast_from_embedding(self, emb, stats):
        y = denormalize(self.forecast_normalized(emb), stats)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError("backbone produced a non-finite forecast")
        return y

    def predict_normalized(self, xn):
        return self.forecast_normalized(self.embed_normalized(xn))

    def predict(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dims.sl,):
            raise ConfigError(f"lookback length {x.shape} != ({self.dims.sl},)")
        xn, stats = instance_normalize(x)
        return self.forecast_from_embedding(self.embed_normalized(xn), stats)

    def predict_batch(self, windows):
        windows = np.asarray(windows, dtype=np.float64)
        xn = normalize_rows(windows)
        mean = windows.mean(axis=1, keepdims=True)
        std = np.maximum(np.sqrt(np.mean((windows - mean) ** 2, axis=1, keepdims=True)), 1e-8)
        emb = self.embed_patches(patchify(xn, self.dims.patch_len))
        return self.forecast_normalized(emb) * std + mean

    # -- pretraining ------------------------------------------------------

    def _batch_loss_and_grads(self, xn, yn, grads):
        cache = ForecastCache()
        emb = self.embed_patches(patchify(xn, self.dims.patch_len), cache.proj)
        pred = self.forecast_normalized(emb, cache)
        diff = pred - yn
        loss = float(np.mean(diff * diff))
        g = 2.0 * diff / diff.size
        g_emb = self.forecast_backward(cache, g, (grads[1], grads[2]))
        self.proj.backward(cache.proj, g_emb, grads[0])
        return loss

    def mse_normalized(self, xn, yn):
        emb = self.embed_patches(patchify(xn, self.dims.patch_len))
        d = self.forecast_normalized(emb) - yn
        return float(np.mean(d * d))

    def pretrain(self, pairs, config=None):
        """Fit all three parts on normalized-space MSE, then freeze."""
        config = config or PretrainConfig()
        if self.frozen:
            raise PretrainError("backbone is already frozen")
        if not pairs:
            raise PretrainError("no training pairs")
        xn, yn = stack_normalized(pairs)
        rng = np.random.default_rng(config.seed)
        grads = [Grads.like(m) for m in self.mlps]
        opts = [Adam(config.lr) for _ in self.mlps]
        report = PretrainReport(initial_loss=self.mse_normalized(xn, yn))
        for epoch in range(config.epochs):
            order = rng.permutation(len(xn))
            for lo in range(0, len(order), config.batch_size):
                ix = order[lo : lo + config.batch_size]
                loss = self._batch_loss_and_grads(xn[ix], yn[ix], grads)
                if not np.isfinite(loss):
                    raise PretrainDiverged(f"non-finite loss at epoch {epoch}, batch starting {lo}")
                for m, g, opt in zip(self.mlps, grads, opts):
                    opt.step(m, g)
            report.epoch_losses.append(self.mse_normalized(xn, yn))
        self.freeze()
        return report

    # -- persistence ------------------------------------------------------

    def save(self, path, meta=None):
        arrays = []
        for name, m in zip(("proj", "trunk", "head"), self.mlps):
            arrays += fileformat.mlp_arrays(name, m)
        info = {"kind": "backbone", "dims": vars(self.dims).copy(), "frozen": self.frozen}
        info.update(meta or {})
        fileformat.write_tsck(path, arrays, info)

    @classmethod
    def load(cls, path):
        arrays, meta = fileformat.read_tsck(path)
        if meta.get("kind") != "backbone":
            raise fileformat.FormatError(f"{path} is not a backbone checkpoint")
        frozen = bool(meta.get("frozen", True))
        return cls(
            BackboneDims(**meta["dims"]),
            fileformat.mlp_from_arrays("proj", arrays, frozen=frozen),
            fileformat.mlp_from_arrays("trunk", arrays, tanh_output=True, frozen=frozen),
            fileformat.mlp_from_arrays("head", arrays, frozen=frozen),
        )


def stack_normalized(pairs):
    """``(xn, yn)`` matrices with each horizon scaled by its own lookback statistics."""
    x = np.stack([p.x for p in pairs])
    y = np.stack([p.y for p in pairs])
    mean = np.array([p.norm_stats.mean for p in pairs])[:, None]
    std = np.array([p.norm_stats.std for p in pairs])[:, None]
    return (x - mean) / std, (y - mean) / std
