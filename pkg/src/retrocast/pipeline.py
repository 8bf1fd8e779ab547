"""End-to-end zero-shot benchmark: data, backbone, knowledge base, training, evaluation.

One ``PipelineConfig`` (a nested JSON document) drives every stage. The same
functions back the command line and the acceptance tests, so a CLI run and a
test run with equal configs produce equal numbers.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, kbase, synthetic
from .backbone import Backbone, BackboneDims, PretrainConfig
from .numkit import ConfigError
from .synthetic import DomainRecipe, SyntheticSpec
from .trainer import JointTrainer, RafPredictor, TrainConfig, evaluate
from .tsdata import sliding_windows

log = logging.getLogger(__name__)


def benchmark_spec():
    """Three domains; C is a family-structured mixture used as the zero-shot target.

    Every domain-C series belongs to one of six families that share both
    frequencies. The slow component has a period longer than a lookback
    window, so windows of sibling series carry shape the query cannot see.
    """
    return SyntheticSpec(
        [
            DomainRecipe("A", freq=(1 / 200, 1 / 120), trend=(-2e-3, 2e-3), n_series=8, length=20000),
            DomainRecipe("B", freq=(1 / 40, 1 / 24), n_series=8, length=20000),
            DomainRecipe(
                "C",
                freq=(1 / 900, 1 / 600),
                freq2=(1 / 250, 1 / 150),
                amplitude2=(0.5, 1.0),
                families=6,
                n_series=30,
                length=20000,
            ),
        ]
    )


def _strict(cls, data, where):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    return cls(**data)


@dataclass
class HoldoutConfig:
    """The last ``count`` datasets of ``domain`` (sorted by id) are the test set."""

    domain: str = "C"
    count: int = 6
    pretrain_domains: list = field(default_factory=lambda: ["A", "B"])


@dataclass
class BackboneStage:
    sl: int = 512
    fl: int = 96
    patch_len: int = 64
    d: int = 16
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 32
    stride: int = 97

    @property
    def dims(self):
        return BackboneDims(self.sl, self.fl, self.patch_len, self.d)


@dataclass
class KbStage:
    """``size_mode`` chooses how the KB-size axis is run: ``evaluate`` trains once
    on the full KB and forecasts with each subsample, ``retrain`` fits a fresh
    model per fraction."""

    per_domain_quota: int = 300
    source: str = "curated"  # curated | pooled | domain
    size_mode: str = "evaluate"  # evaluate | retrain


@dataclass
class PairStage:
    n_train: int = 400
    train_stride: int = 211
    test_stride: int = 384


@dataclass
class PipelineConfig:
    seed: int = 0
    data: dict = field(default_factory=lambda: benchmark_spec().to_dict())
    holdout: HoldoutConfig = field(default_factory=HoldoutConfig)
    backbone: BackboneStage = field(default_factory=BackboneStage)
    kb: KbStage = field(default_factory=KbStage)
    pairs: PairStage = field(default_factory=PairStage)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr_fusion=1e-4, lr_retriever=1e-5))

    def __post_init__(self):
        if self.kb.source not in ("curated", "pooled", "domain"):
            raise ConfigError(f"kb.source must be curated, pooled or domain, got {self.kb.source!r}")
        if self.kb.size_mode not in ("evaluate", "retrain"):
            raise ConfigError(f"kb.size_mode must be evaluate or retrain, got {self.kb.size_mode!r}")
        # Validate, then keep the JSON form so configs compare equal after a file round trip.
        self.data = json.loads(json.dumps(SyntheticSpec(self.data["domains"]).to_dict()))

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {unknown}")
        base = cls()
        train = asdict(base.train)
        train.update(data.get("train") or {})
        return cls(
            seed=int(data.get("seed", base.seed)),
            data=data.get("data", base.data),
            holdout=_strict(HoldoutConfig, data.get("holdout"), "holdout"),
            backbone=_strict(BackboneStage, data.get("backbone"), "backbone"),
            kb=_strict(KbStage, data.get("kb"), "kb"),
            pairs=_strict(PairStage, data.get("pairs"), "pairs"),
            train=TrainConfig.from_dict(train),
        )

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise ConfigError(f"no such config file: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None

    def to_dict(self):
        return {
            "seed": self.seed,
            "data": copy.deepcopy(self.data),
            "holdout": asdict(self.holdout),
            "backbone": asdict(self.backbone),
            "kb": asdict(self.kb),
            "pairs": asdict(self.pairs),
            "train": self.train.to_dict(),
        }

    def with_seed(self, seed):
        out = copy.deepcopy(self)
        out.seed = seed
        out.train = TrainConfig.from_dict({**self.train.to_dict(), "seed": seed})
        return out

    def with_train(self, **overrides):
        out = copy.deepcopy(self)
        out.train = TrainConfig.from_dict({**self.train.to_dict(), **overrides})
        return out


def provenance(cfg, **extra):
    """Block embedded in every artifact: package version, seed and full config."""
    out = {"version": __version__, "seed": cfg.seed, "config": cfg.to_dict()}
    out.update(extra)
    return out


# -- data roles ----------------------------------------------------------------


def split_roles(series, holdout):
    """``(source, test)`` series lists according to the holdout rule."""
    ids = sorted({s.dataset_id for s in series if s.domain == holdout.domain})
    if holdout.count < 1 or holdout.count >= len(ids):
        raise ConfigError(
            f"holdout.count={holdout.count} must leave at least one {holdout.domain!r} dataset "
            f"of {len(ids)} for the knowledge base"
        )
    held = set(ids[-holdout.count :])
    source = [s for s in series if s.dataset_id not in held]
    test = [s for s in series if s.dataset_id in held]
    return source, test


def pretrain_pairs(source, cfg):
    b = cfg.backbone
    domains = set(cfg.holdout.pretrain_domains)
    pairs = []
    for s in source:
        if s.domain in domains:
            pairs += sliding_windows(s, b.sl, b.fl, stride=b.stride)
    return pairs


def train_pairs(source, cfg):
    """A seeded subset of size ``pairs.n_train`` of all source windows."""
    b = cfg.backbone
    pool = []
    for s in source:
        pool += sliding_windows(s, b.sl, b.fl, stride=cfg.pairs.train_stride)
    n = min(cfg.pairs.n_train, len(pool))
    rng = np.random.default_rng([cfg.seed, 10])
    return [pool[i] for i in np.sort(rng.choice(len(pool), n, replace=False))]


def eval_pairs(test, cfg):
    b = cfg.backbone
    pairs = []
    for s in test:
        pairs += sliding_windows(s, b.sl, b.fl, stride=cfg.pairs.test_stride)
    if not pairs:
        raise ConfigError("held-out series yield no evaluation windows")
    return pairs


def build_kb(source, cfg, source_kind=None):
    """Knowledge base from the source series.

    ``curated`` is domain-balanced; ``pooled`` draws the same total uniformly
    from the pooled grid; ``domain`` keeps only the holdout domain.
    """
    kind = source_kind or cfg.kb.source
    sl = cfg.backbone.sl
    quota = cfg.kb.per_domain_quota
    seed = [cfg.seed, 11]
    if kind == "curated":
        return kbase.build(source, sl, quota, seed)
    n_domains = len({s.domain for s in source})
    if kind == "pooled":
        return kbase.build_pooled(source, sl, quota * n_domains, seed)
    if kind == "domain":
        target = [s for s in source if s.domain == cfg.holdout.domain]
        return kbase.build(target, sl, quota, seed)
    raise ConfigError(f"unknown knowledge-base source {kind!r}")


def pretrain_backbone(source, cfg):
    b = cfg.backbone
    bb = Backbone.init(b.dims, np.random.default_rng([cfg.seed, 12]))
    report = bb.pretrain(
        pretrain_pairs(source, cfg),
        PretrainConfig(epochs=b.epochs, lr=b.lr, batch_size=b.batch_size, seed=cfg.seed),
    )
    return bb, report


# -- benchmark -----------------------------------------------------------------


@dataclass
class Benchmark:
    cfg: PipelineConfig
    series: list
    source: list
    test: list
    backbone: Backbone
    kb: kbase.KnowledgeBase
    train_pairs: list
    test_pairs: list
    trained: dict = field(default_factory=dict, repr=False, compare=False)

    def bare_report(self):
        return evaluate(self.test_pairs, self.backbone.predict, {"policy": "w/o RAF"}, self.cfg.seed)

    def fit(self, train_cfg=None, kb=None, out_dir=None, meta=None):
        """Train retriever and fuser; returns ``(trainer, log)``."""
        train_cfg = train_cfg or self.cfg.train
        tr = JointTrainer(kb or self.kb, self.backbone, train_cfg)
        log_ = tr.fit(self.train_pairs, out_dir, meta)
        return tr, log_

    def predictor(self, trainer, kb=None):
        return RafPredictor(kb or trainer.kb, trainer.retriever, trainer.fuser, self.backbone, trainer.cfg)

    def evaluate(self, trainer, kb=None):
        return evaluate(self.test_pairs, self.predictor(trainer, kb), trainer.cfg.to_dict(), trainer.cfg.seed)


def prepare(cfg, series=None, backbone=None, kb=None):
    """Generate data, pretrain and freeze the backbone, build the KB and window sets.

    Stages given as arguments (series from a manifest, a loaded backbone or
    knowledge base) are used as they are.
    """
    if series is None:
        series = generate_series(cfg)
    source, test = split_roles(series, cfg.holdout)
    if backbone is None:
        backbone, _ = pretrain_backbone(source, cfg)
    elif backbone.dims != cfg.backbone.dims:
        raise ConfigError(f"backbone dims {backbone.dims} do not match config {cfg.backbone.dims}")
    return Benchmark(
        cfg=cfg,
        series=series,
        source=source,
        test=test,
        backbone=backbone,
        kb=kb if kb is not None else build_kb(source, cfg),
        train_pairs=train_pairs(source, cfg),
        test_pairs=eval_pairs(test, cfg),
    )


def generate_series(cfg):
    return synthetic.generate(SyntheticSpec(cfg.data["domains"]), cfg.seed)


# -- ablation grid ---------------------------------------------------------------

POLICY_GRID = tuple(
    (r, f) for r in ("learned", "cosine", "random") for f in ("channel_prompt", "token_concat", "average")
)
KB_SOURCES = ("none", "pooled", "curated", "domain")
AXES = ("policy", "source", "size")


@dataclass(frozen=True)
class Cell:
    """One ablation cell. ``kb_source == "none"`` is the bare backbone."""

    retrieval_policy: str
    fusion_policy: str
    kb_source: str = "curated"
    kb_fraction: float = 1.0

    @property
    def key(self):
        return f"{self.retrieval_policy}/{self.fusion_policy}/{self.kb_source}/{self.kb_fraction:g}"


def ablation_cells(cfg, axes=AXES):
    """Cells of the requested axes, deduplicated, in a fixed order.

    The source and size axes vary the knowledge base around the configured
    retrieval and fusion policies.
    """
    base_r, base_f = cfg.train.retrieval_policy, cfg.train.fusion_policy
    cells = []
    for axis in axes:
        if axis == "policy":
            cells += [Cell(r, f) for r, f in POLICY_GRID]
        elif axis == "source":
            cells += [Cell(base_r, "none" if s == "none" else base_f, s) for s in KB_SOURCES]
        elif axis == "size":
            cells += [Cell(base_r, base_f, "curated", frac) for frac in kbase.SIZE_SWEEP]
        else:
            raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    return list(dict.fromkeys(cells))


def cell_kb(bench, cell):
    """Knowledge base of a cell, or ``None`` for the bare backbone."""
    if cell.kb_source == "none":
        return None
    kb = bench.kb if cell.kb_source == bench.cfg.kb.source else build_kb(bench.source, bench.cfg, cell.kb_source)
    if cell.kb_fraction < 1.0:
        kb = kbase.subsample(kb, cell.kb_fraction, [bench.cfg.seed, 13])
    return kb


def _cell_train_config(bench, cell):
    return TrainConfig.from_dict(
        {**bench.cfg.train.to_dict(), "retrieval_policy": cell.retrieval_policy, "fusion_policy": cell.fusion_policy}
    )


def trained_for(bench, cell):
    """Trainer of the full-KB cell, trained once per benchmark and reused."""
    key = (cell.retrieval_policy, cell.fusion_policy, cell.kb_source)
    if key not in bench.trained:
        full = Cell(cell.retrieval_policy, cell.fusion_policy, cell.kb_source)
        bench.trained[key] = bench.fit(_cell_train_config(bench, cell), kb=cell_kb(bench, full))
    return bench.trained[key]


def run_cell(bench, cell):
    """Train (or reuse) and evaluate one cell; infeasible cells come back skipped with a reason."""
    train_cfg = _cell_train_config(bench, cell)
    row = {"cell": cell.key, **asdict(cell), "seed": bench.cfg.seed, "config": train_cfg.to_dict()}
    retrain = bench.cfg.kb.size_mode == "retrain" and cell.kb_fraction < 1.0
    row["size_mode"] = bench.cfg.kb.size_mode if cell.kb_fraction < 1.0 else ""
    try:
        kb = cell_kb(bench, cell)
        if kb is None:
            report = bench.bare_report()
            row.update(status="ok", reason="", mse=report.mse, n_windows=report.n_windows, kb_size=0)
            return row
        if kb.n_kb < train_cfg.k:
            raise kbase.KnowledgeBaseError(f"knowledge base has {kb.n_kb} entries, fewer than k={train_cfg.k}")
        if retrain:
            trainer, log_ = bench.fit(train_cfg, kb=kb)
        else:
            trainer, log_ = trained_for(bench, cell)
        report = bench.evaluate(trainer, kb)
    except kbase.KnowledgeBaseError as exc:
        row.update(status="skipped", reason=str(exc), mse=None, n_windows=0, kb_size=None)
        return row
    row.update(
        status="ok",
        reason="",
        mse=report.mse,
        n_windows=report.n_windows,
        kb_size=kb.n_kb,
        train_steps=len(log_.rows),
        skipped_windows=log_.skipped,
    )
    return row


_WORKER_BENCH = {}


def _cell_worker(cfg_dict, cell):
    key = json.dumps(cfg_dict, sort_keys=True)
    if key not in _WORKER_BENCH:
        _WORKER_BENCH.clear()
        _WORKER_BENCH[key] = prepare(PipelineConfig.from_dict(cfg_dict))
    return run_cell(_WORKER_BENCH[key], cell)


def run_ablation(bench, cells, jobs=1):
    """Rows for ``cells`` in order. ``jobs > 1`` runs cells in worker processes.

    Each cell is seeded from the config alone, so both modes give equal rows.
    """
    if jobs <= 1:
        return [run_cell(bench, c) for c in cells]
    from concurrent.futures import ProcessPoolExecutor

    cfg_dict = bench.cfg.to_dict()
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_cell_worker, [cfg_dict] * len(cells), cells))


ABLATION_COLUMNS = (
    "cell",
    "retrieval_policy",
    "fusion_policy",
    "kb_source",
    "kb_fraction",
    "size_mode",
    "seed",
    "status",
    "mse",
    "n_windows",
    "kb_size",
    "reason",
)
