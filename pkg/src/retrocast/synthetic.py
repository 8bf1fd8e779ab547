"""Seeded multi-domain sinusoid generator and CSV/manifest writer."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numkit import ConfigError
from .tsdata import MANIFEST_VERSION, Series


@dataclass
class DomainRecipe:
    """One synthetic domain.

    ``freq`` is in cycles per step. A second sinusoid is added when ``freq2``
    is given; independently drawn frequencies are incommensurate almost surely.
    With ``families > 0`` the frequencies and amplitude ratio are drawn once
    per family and shared by every series of that family (series ``i`` joins
    family ``i % families``); phases, scale, trend, offset and noise stay per
    series.
    """

    name: str
    freq: tuple
    amplitude: tuple = (1.0, 2.0)
    trend: tuple = (0.0, 0.0)
    noise: float = 0.05
    freq2: tuple | None = None
    amplitude2: tuple | None = None
    offset: tuple = (-1.0, 1.0)
    families: int = 0
    n_series: int = 5
    length: int = 2000
    frequency_tag: str = "synthetic"


@dataclass
class SyntheticSpec:
    domains: list = field(default_factory=list)

    def __post_init__(self):
        self.domains = [d if isinstance(d, DomainRecipe) else DomainRecipe(**d) for d in self.domains]
        if len(self.domains) < 2:
            raise ConfigError("a synthetic spec needs at least two domains")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate domain names in {names}")

    def to_dict(self):
        return {"domains": [asdict(d) for d in self.domains]}


def default_spec(n_series=5, length=2000):
    """Domains A (slow sinusoid + trend), B (fast sinusoid), C (two incommensurate sinusoids)."""
    return SyntheticSpec(
        [
            DomainRecipe("A", freq=(1 / 200, 1 / 120), trend=(-2e-3, 2e-3), n_series=n_series, length=length),
            DomainRecipe("B", freq=(1 / 40, 1 / 24), n_series=n_series, length=length),
            DomainRecipe(
                "C",
                freq=(1 / 90, 1 / 60),
                freq2=(1 / 22, 1 / 15),
                amplitude2=(0.5, 1.0),
                n_series=n_series,
                length=length,
            ),
        ]
    )


def _u(rng, band):
    lo, hi = band
    return lo if lo == hi else rng.uniform(lo, hi)


def draw_shape(recipe, rng):
    """Frequencies and amplitude ratio ``(f1, f2, a2 / a1)``; ``f2`` is None for one sinusoid."""
    f1 = _u(rng, recipe.freq)
    if recipe.freq2 is None:
        return f1, None, 0.0
    return f1, _u(rng, recipe.freq2), _u(rng, recipe.amplitude2 or recipe.amplitude)


def generate_series(recipe, rng, dataset_id, shape=None):
    t = np.arange(recipe.length, dtype=np.float64)
    f1, f2, ratio = shape if shape is not None else draw_shape(recipe, rng)
    amp = _u(rng, recipe.amplitude)
    v = amp * np.sin(2 * np.pi * f1 * t + rng.uniform(0, 2 * np.pi))
    if f2 is not None:
        v += amp * ratio * np.sin(2 * np.pi * f2 * t + rng.uniform(0, 2 * np.pi))
    v += _u(rng, recipe.trend) * t + _u(rng, recipe.offset)
    v += recipe.noise * rng.standard_normal(recipe.length)
    return Series(v, "value", dataset_id, recipe.name, recipe.frequency_tag)


def generate(spec, seed):
    """All series of ``spec``; dataset ids are ``<domain><index:02d>``."""
    out = []
    for j, recipe in enumerate(spec.domains):
        rng = np.random.default_rng([seed, j])
        shapes = [draw_shape(recipe, rng) for _ in range(recipe.families)]
        for i in range(recipe.n_series):
            shape = shapes[i % recipe.families] if shapes else None
            out.append(generate_series(recipe, rng, f"{recipe.name}{i:02d}", shape))
    return out


def write_dataset(series_list, out_dir, extra=None):
    """One CSV per series plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = []
    for s in series_list:
        fname = f"{s.dataset_id}.csv"
        lines = ["t,value"] + [f"{i},{v!r}" for i, v in enumerate(s.values.tolist())]
        (out_dir / fname).write_text("\n".join(lines) + "\n", encoding="utf-8")
        datasets.append(
            {
                "dataset_id": s.dataset_id,
                "domain": s.domain,
                "frequency": s.frequency,
                "files": [fname],
                "value_columns": ["value"],
                "timestamp_column": "t",
            }
        )
    manifest = {"version": MANIFEST_VERSION, "datasets": datasets}
    manifest.update(extra or {})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def zero_crossing_frequency(values, hysteresis=0.3):
    """Crude dominant frequency: zero crossings of the detrended series / (2 * length).

    A crossing counts only once the signal leaves the band
    ``±hysteresis * std`` on the other side, so noise near zero is ignored.
    """
    v = np.asarray(values, dtype=np.float64)
    t = np.arange(len(v))
    v = v - np.polyval(np.polyfit(t, v, 1), t)
    h = hysteresis * v.std()
    side = np.where(v > h, 1, np.where(v < -h, -1, 0))
    side = side[side != 0]
    crossings = np.count_nonzero(side[1:] != side[:-1])
    return crossings / (2.0 * len(v))
