"""Joint retriever + fusion training against a frozen backbone, and evaluation.

Per training window the step is:

1. score the eligible knowledge-base entries and take the top ``k``;
2. randomly swap slots for other eligible entries (probability ``rho``);
3. forecast with each candidate alone to get per-candidate errors, and turn
   ``-mse / tau_m`` into the target distribution ``P`` (no gradient);
4. ``L = L_pred + lam * KL(P || softmax(scores / tau_s))``, backprop, update
   the retriever and the fuser. The backbone is never touched.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import fusion as fusion_mod
from .kbase import KnowledgeBaseError, eligible_candidates
from .numkit import SGD, ActivationCache, Adam, ConfigError, Grads, mse
from .backbone import ForecastCache
from .fusion import FusionCache
from .retriever import (
    RetrievalResult,
    Retriever,
    augment,
    cosine_top_k,
    random_k,
    retrieval_loss,
    target_distribution,
    top_k,
)
from .tsdata import instance_normalize

log = logging.getLogger(__name__)

RETRIEVAL_POLICIES = ("learned", "random", "cosine")
FUSION_POLICIES = ("channel_prompt", "token_concat", "average", "none")


class NumericalError(FloatingPointError):
    pass


class TrainingDiverged(NumericalError):
    pass


@dataclass
class TrainConfig:
    k: int = 8
    tau_m: float = 0.1
    tau_s: float = 1.0
    rho: float = 0.2
    lam: float = 1.0
    lr_retriever: float = 1e-3
    lr_fusion: float = 1e-5
    epochs: int = 2
    seed: int = 0
    retrieval_policy: str = "learned"
    fusion_policy: str = "channel_prompt"
    optimizer: str = "adam"
    retrieval_dim: int = 64
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if not (self.tau_m > 0 and self.tau_s > 0):
            raise ConfigError("temperatures must be positive")
        if not 0 <= self.rho <= 1:
            raise ConfigError("rho must lie in [0, 1]")
        if self.retrieval_policy not in RETRIEVAL_POLICIES:
            raise ConfigError(f"retrieval_policy must be one of {RETRIEVAL_POLICIES}")
        if self.fusion_policy not in FUSION_POLICIES:
            raise ConfigError(f"fusion_policy must be one of {FUSION_POLICIES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)


@dataclass
class StepStats:
    loss: float
    pred_loss: float
    retrieval_loss: float
    indices: np.ndarray
    augmented: np.ndarray
    target: np.ndarray | None = None


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    retrieved: list = field(default_factory=list)  # (query dataset_id, kb indices)
    skipped: int = 0

    def epoch_means(self, key="pred_loss"):
        by_epoch = {}
        for r in self.rows:
            by_epoch.setdefault(r["epoch"], []).append(r[key])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]

    def write_csv(self, path, comment=None):
        """Per-step losses; ``comment`` becomes a leading ``#`` line."""
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "L", "L_Pred", "L_R_aug"])
            for r in self.rows:
                w.writerow([r["step"], r["epoch"], repr(r["loss"]), repr(r["pred_loss"]), repr(r["retrieval_loss"])])


def _optimizer(cfg, lr):
    return Adam(lr) if cfg.optimizer == "adam" else SGD(lr)


class JointTrainer:
    """Owns the trainable parts, their optimizers and the seeded RNG streams."""

    def __init__(self, kb, backbone, cfg, retriever=None, fuser=None):
        if not backbone.frozen:
            raise ConfigError("backbone must be pretrained and frozen before joint training")
        if kb.sl != backbone.dims.sl:
            raise ConfigError(f"knowledge base windows ({kb.sl}) != backbone lookback ({backbone.dims.sl})")
        self.kb = kb
        self.backbone = backbone
        self.cfg = cfg
        init_rng = np.random.default_rng([cfg.seed, 0])
        self.order_rng = np.random.default_rng([cfg.seed, 1])
        self.aug_rng = np.random.default_rng([cfg.seed, 2])
        self.pick_rng = np.random.default_rng([cfg.seed, 3])
        dims = backbone.dims
        self.retriever = retriever or Retriever.init(dims.sl, init_rng, e=cfg.retrieval_dim)
        if fuser is None and cfg.fusion_policy != "none":
            fuser = fusion_mod.make_fuser(cfg.fusion_policy, dims.n, dims.d, init_rng)
        self.fuser = fuser
        self.cand_embs = backbone.embed_windows(kb.values)
        self.retriever_grads = [Grads.like(m) for m in self.retriever.mlps]
        self.retriever_opts = [_optimizer(cfg, cfg.lr_retriever) for _ in self.retriever.mlps]
        self.fusion_grads = fusion_mod.new_grads(fuser) if fuser is not None else []
        self.fusion_opts = [_optimizer(cfg, cfg.lr_fusion) for _ in self.fusion_grads]
        # Divergence is judged on smoothed losses: single windows differ by
        # orders of magnitude in difficulty.
        self.initial_loss = None
        self.loss_ema = None
        self._warmup = []
        self.step_count = 0

    @property
    def learns_retrieval(self):
        return self.cfg.retrieval_policy == "learned"

    # -- candidate selection ----------------------------------------------

    def select(self, x, xn, query_source, training=True):
        cfg = self.cfg
        eligible = eligible_candidates(self.kb, query_source, training, cfg.k)
        if cfg.retrieval_policy == "learned":
            q = self.retriever.encode_query(xn)
            scores = self.retriever.encode_candidates(self.kb.normalized[eligible]) @ q
            pos = top_k(scores, cfg.k)
            res = RetrievalResult(eligible[pos], scores[pos], np.zeros(cfg.k, dtype=bool))
            if training:
                res = augment(res, eligible, scores, cfg.rho, self.aug_rng)
            return res
        if cfg.retrieval_policy == "cosine":
            idx, sims = cosine_top_k(x, self.kb, eligible, cfg.k)
            pos = np.searchsorted(eligible, idx)
            return RetrievalResult(idx, sims[pos], np.zeros(cfg.k, dtype=bool))
        idx = random_k(eligible, cfg.k, self.pick_rng)
        return RetrievalResult(idx, np.zeros(cfg.k), np.zeros(cfg.k, dtype=bool))

    def feedback_target(self, xn, yn, indices):
        """Target distribution from each candidate's solo forecast error (detached)."""
        x_emb = self.backbone.embed_normalized(xn)
        fused = self.fuser.forward_each(x_emb, self.cand_embs[indices])
        preds = self.backbone.forecast_normalized(fused)
        errors = np.mean((preds - yn[None]) ** 2, axis=1)
        return target_distribution(-errors, self.cfg.tau_m)

    # -- loss -------------------------------------------------------------

    def joint_loss_and_grads(self, xn, yn, indices, target):
        """Total loss for fixed candidates and target; accumulates gradients.

        Returns ``(L, L_pred, L_R)``. The retriever term is only present for
        the learned policy.
        """
        cfg = self.cfg
        bb = self.backbone
        x_emb = bb.embed_normalized(xn)
        fcache = FusionCache()
        fused = self.fuser.forward(x_emb, self.cand_embs[indices], fcache)
        bcache = ForecastCache()
        pred = bb.forecast_normalized(fused, bcache)
        pred_loss = mse(pred, yn)
        d_pred = 2.0 * (pred - yn) / pred.size
        d_fused = bb.forecast_backward(bcache, d_pred)
        self.fuser.backward(fcache, d_fused, self.fusion_grads or None)

        r_loss = 0.0
        if self.learns_retrieval:
            qe, ce = self.retriever.mlps
            qcache, ccache = ActivationCache(), ActivationCache()
            qv = qe.forward(xn, qcache)
            cv = ce.forward(self.kb.normalized[indices], ccache)
            scores = cv @ qv
            r_loss, d_scores = retrieval_loss(scores, target, cfg.tau_s)
            d_scores = cfg.lam * d_scores
            qe.backward(qcache, d_scores @ cv, self.retriever_grads[0])
            ce.backward(ccache, d_scores[:, None] * qv[None, :], self.retriever_grads[1])
        return pred_loss + cfg.lam * r_loss, pred_loss, r_loss

    def zero_grads(self):
        for g in self.retriever_grads + self.fusion_grads:
            g.zero()

    # -- step -------------------------------------------------------------

    def train_step(self, pair):
        cfg = self.cfg
        if self.fuser is None:
            raise ConfigError("fusion policy 'none' has nothing to train")
        xn, stats = instance_normalize(pair.x)
        yn = (np.asarray(pair.y, dtype=np.float64) - stats.mean) / stats.std
        res = self.select(pair.x, xn, pair.dataset_id, training=True)
        target = self.feedback_target(xn, yn, res.indices) if self.learns_retrieval else None
        self.zero_grads()
        loss, pred_loss, r_loss = self.joint_loss_and_grads(xn, yn, res.indices, target)
        if not np.isfinite(loss):
            raise NumericalError(
                f"non-finite loss at step {self.step_count} (source {pair.source}): "
                f"L={loss}, L_pred={pred_loss}, L_R={r_loss}, candidates={res.indices.tolist()}"
            )
        self._check_divergence(loss)
        for m, g, opt in zip(self.fuser.mlps, self.fusion_grads, self.fusion_opts):
            opt.step(m, g)
        if self.learns_retrieval:
            for m, g, opt in zip(self.retriever.mlps, self.retriever_grads, self.retriever_opts):
                opt.step(m, g)
        self.step_count += 1
        return StepStats(loss, pred_loss, r_loss, res.indices, res.augmented, target)

    def _check_divergence(self, loss, warmup=16, decay=0.9):
        self.loss_ema = loss if self.loss_ema is None else decay * self.loss_ema + (1 - decay) * loss
        if self.initial_loss is None:
            self._warmup.append(loss)
            if len(self._warmup) == warmup:
                self.initial_loss = max(float(np.mean(self._warmup)), 1e-12)
            return
        if self.loss_ema > self.cfg.divergence_factor * self.initial_loss:
            raise TrainingDiverged(
                f"smoothed loss {self.loss_ema:.4g} exceeds {self.cfg.divergence_factor:g}x "
                f"initial {self.initial_loss:.4g} at step {self.step_count}"
            )

    def fit(self, pairs, out_dir=None, meta=None):
        cfg = self.cfg
        log_ = TrainingLog()
        if self.fuser is None or not pairs:
            return log_
        out_dir = Path(out_dir) if out_dir else None
        for epoch in range(cfg.epochs):
            for i in self.order_rng.permutation(len(pairs)):
                pair = pairs[i]
                try:
                    st = self.train_step(pair)
                except KnowledgeBaseError as exc:
                    log_.skipped += 1
                    log.debug("skipping window %s: %s", pair.source, exc)
                    continue
                log_.rows.append(
                    {
                        "step": self.step_count,
                        "epoch": epoch,
                        "loss": st.loss,
                        "pred_loss": st.pred_loss,
                        "retrieval_loss": st.retrieval_loss,
                    }
                )
                log_.retrieved.append((pair.dataset_id, st.indices.tolist()))
            if out_dir:
                self.save(out_dir, suffix=f"_epoch{epoch + 1}", meta=meta)
        return log_

    def save(self, out_dir, suffix="", meta=None):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        meta = {"config": self.cfg.to_dict(), **(meta or {})}
        self.retriever.save(out_dir / f"retriever{suffix}.tsck", meta)
        if self.fuser is not None:
            fusion_mod.save_fuser(self.fuser, out_dir / f"fusion{suffix}.tsck", meta)


def train(pairs, kb, backbone, cfg, out_dir=None):
    """Joint training; returns ``(retriever, fuser, TrainingLog)``."""
    trainer = JointTrainer(kb, backbone, cfg)
    log_ = trainer.fit(pairs, out_dir)
    return trainer.retriever, trainer.fuser, log_


class RafPredictor:
    """Inference-time forecaster; candidate encodings are computed once."""

    def __init__(self, kb, retriever, fuser, backbone, cfg):
        if cfg.fusion_policy != "none" and kb.n_kb < cfg.k:
            raise KnowledgeBaseError(f"knowledge base has {kb.n_kb} entries, k={cfg.k}")
        self.kb = kb
        self.retriever = retriever
        self.fuser = fuser
        self.backbone = backbone
        self.cfg = cfg
        self.pick_rng = np.random.default_rng([cfg.seed, 4])
        self._table = None
        self._cand_embs = None

    @property
    def cand_table(self):
        if self._table is None:
            self._table = self.retriever.candidate_table(self.kb)
        return self._table

    @property
    def cand_embs(self):
        if self._cand_embs is None:
            self._cand_embs = self.backbone.embed_windows(self.kb.values)
        return self._cand_embs

    def retrieve(self, x):
        cfg = self.cfg
        eligible = np.arange(self.kb.n_kb)
        flags = np.zeros(cfg.k, dtype=bool)
        if cfg.retrieval_policy == "learned":
            q = self.retriever.encode_query(instance_normalize(x)[0])
            scores = self.cand_table @ q
            pos = top_k(scores, cfg.k)
            return RetrievalResult(pos, scores[pos], flags)
        if cfg.retrieval_policy == "cosine":
            idx, sims = cosine_top_k(x, self.kb, eligible, cfg.k)
            return RetrievalResult(idx, sims[idx], flags)
        idx = random_k(eligible, cfg.k, self.pick_rng)
        return RetrievalResult(idx, np.zeros(cfg.k), flags)

    def predict_with(self, x, indices):
        xn, stats = instance_normalize(x)
        x_emb = self.backbone.embed_normalized(xn)
        fused = self.fuser.forward(x_emb, self.cand_embs[indices])
        return self.backbone.forecast_from_embedding(fused, stats)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.fuser is None or self.cfg.fusion_policy == "none":
            return self.backbone.predict(x)
        return self.predict_with(x, self.retrieve(x).indices)


def predict_raf(x, kb, retriever, fuser, backbone, cfg):
    return RafPredictor(kb, retriever, fuser, backbone, cfg)(x)


@dataclass
class EvalReport:
    mse: float
    n_windows: int
    datasets: dict
    config: dict
    seed: int
    residuals: list | None = None
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self):
        # Wall-clock time is left out so that reports are reproducible byte for byte.
        out = {
            "mse": self.mse,
            "n_windows": self.n_windows,
            "datasets": self.datasets,
            "config": self.config,
            "seed": self.seed,
        }
        if self.residuals is not None:
            out["residuals"] = self.residuals
        return out

    def write_json(self, path, extra=None):
        payload = self.to_dict()
        payload.update(extra or {})
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def evaluate(pairs, predictor, config=None, seed=0, keep_residuals=False):
    """Mean MSE in the original scale over all windows, plus a per-dataset breakdown."""
    if not pairs:
        raise ConfigError("no evaluation windows")
    t0 = time.perf_counter()
    errors = np.empty(len(pairs))
    residuals = [] if keep_residuals else None
    per_ds = {}
    for i, p in enumerate(pairs):
        pred = predictor(p.x)
        errors[i] = mse(pred, p.y)
        per_ds.setdefault(p.dataset_id, []).append(errors[i])
        if keep_residuals:
            residuals.append((np.asarray(p.y) - pred).tolist())
    datasets = {k: {"mse": float(np.mean(v)), "windows": len(v)} for k, v in sorted(per_ds.items())}
    return EvalReport(
        mse=float(np.mean(errors)),
        n_windows=len(pairs),
        datasets=datasets,
        config=dict(config or {}),
        seed=seed,
        residuals=residuals,
        wall_clock=time.perf_counter() - t0,
    )
