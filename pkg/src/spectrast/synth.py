"""Synthetic spectra and map generator with known ground truth.

Lorentzian line shapes on a linear baseline plus i.i.d. Gaussian noise.
Ships a 15-class default configuration (12 bacterial, 3 background) in which
all bacterial classes share the 1004 cm^-1 peak, so the task is non-trivially
separable. Mixed map cells are plain superpositions of a scaled class
signature and the substrate signature, so train-time NoiseMix matches the
test-time generative process by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .core import (
    ClassKind,
    ClassRegistry,
    HyperMap,
    LabeledDataset,
    Spectrum,
    WavenumberAxis,
)
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ClassSignature:
    """Lorentzian peaks (center, width, amplitude) plus a linear baseline."""

    peaks: tuple = ()
    baseline: tuple = (0.0, 0.0)  # (slope per cm^-1, offset)

    def __post_init__(self):
        object.__setattr__(
            self, "peaks", tuple((float(c), float(w), float(a)) for c, w, a in self.peaks)
        )
        for c, w, a in self.peaks:
            if w <= 0:
                raise ConfigError(f"peak at {c} cm^-1 has non-positive width")
            if a < 0:
                raise ConfigError(f"peak at {c} cm^-1 has negative amplitude")

    def signal(self, axis: WavenumberAxis):
        """Noiseless signature evaluated on the axis grid."""
        nu = axis.grid()
        slope, offset = self.baseline
        out = offset + slope * (nu - axis.start_cm1)
        for c, w, a in self.peaks:
            out = out + a * w * w / ((nu - c) ** 2 + w * w)
        return out


@dataclass(frozen=True)
class SynthConfig:
    registry: ClassRegistry
    signatures: tuple  # one ClassSignature per registry class
    noise_sigma_range: tuple = (0.01, 0.2)
    seed: int = 0
    axis: WavenumberAxis = field(default_factory=WavenumberAxis)

    def __post_init__(self):
        object.__setattr__(self, "signatures", tuple(self.signatures))
        if len(self.signatures) != len(self.registry):
            raise ConfigError("need exactly one signature per class")
        lo, hi = self.noise_sigma_range
        if not 0 < lo <= hi:
            raise ConfigError("noise sigma range must be positive and ordered")

    @property
    def n_classes(self):
        return len(self.registry)


# 15-class default: distinct combinations of pool peaks per bacterial class,
# all sharing the 1004 cm^-1 ring-breathing line.
_PEAK_POOL = (
    730.0, 785.0, 830.0, 875.0, 935.0, 1060.0, 1100.0, 1155.0,
    1215.0, 1275.0, 1335.0, 1395.0, 1450.0, 1515.0, 1575.0,
)

_BACTERIAL_NAMES = (
    "ecoli_a", "ecoli_b", "mrse", "msse", "mrsa", "mssa",
    "kpneu", "paeru", "efaec", "saga", "lmono", "bsubt",
)
_BACKGROUND_NAMES = ("CaF2", "agar", "blank")


def default_registry() -> ClassRegistry:
    classes = [(n, ClassKind.BACTERIAL) for n in _BACTERIAL_NAMES]
    classes += [(n, ClassKind.BACKGROUND) for n in _BACKGROUND_NAMES]
    return ClassRegistry(tuple(classes))


def default_signatures():
    sigs = []
    for i in range(len(_BACTERIAL_NAMES)):
        # distinct peak positions AND distinct relative intensities per class,
        # mirroring how real strains differ in both band location and height
        peaks = (
            (1004.0, 8.0, 0.9),
            (_PEAK_POOL[i], 7.0 + 0.5 * i, 0.5 + 0.05 * i),
            (_PEAK_POOL[(i + 5) % 15], 9.0, 1.0 - 0.045 * i),
            (_PEAK_POOL[(i + 9) % 15], 11.0, 0.35 + 0.04 * i),
        )
        sigs.append(ClassSignature(peaks=peaks, baseline=(1.5e-4, 0.05)))
    sigs.append(  # CaF2 substrate: weak broad bump, sloping baseline
        ClassSignature(peaks=((1100.0, 150.0, 0.12),), baseline=(2.0e-4, 0.22))
    )
    sigs.append(  # agar: two broad carbohydrate-like bumps
        ClassSignature(
            peaks=((850.0, 60.0, 0.3), (1080.0, 60.0, 0.25)), baseline=(1.0e-4, 0.1)
        )
    )
    sigs.append(ClassSignature(peaks=(), baseline=(5.0e-5, 0.04)))  # blank
    return tuple(sigs)


def default_synth_config(noise_sigma_range=(0.01, 0.2), seed=0) -> SynthConfig:
    return SynthConfig(
        registry=default_registry(),
        signatures=default_signatures(),
        noise_sigma_range=noise_sigma_range,
        seed=seed,
    )


def gen_spectrum(class_idx, cfg: SynthConfig, noise_sigma, rng) -> Spectrum:
    if not 0 <= class_idx < cfg.n_classes:
        raise ConfigError(f"class index {class_idx} outside registry")
    if noise_sigma <= 0:
        raise ConfigError("noise sigma must be positive")
    clean = cfg.signatures[class_idx].signal(cfg.axis)
    return Spectrum(clean + rng.normal(0.0, noise_sigma, cfg.axis.n_points), cfg.axis)


def gen_dataset(cfg: SynthConfig, per_class, sigma_range=None, seed=None) -> LabeledDataset:
    """Balanced dataset; noise sigmas drawn uniformly from the range."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    lo, hi = sigma_range if sigma_range is not None else cfg.noise_sigma_range
    spectra, labels = [], []
    for c in range(cfg.n_classes):
        for _ in range(per_class):
            sigma = rng.uniform(lo, hi)
            spectra.append(gen_spectrum(c, cfg, sigma, rng))
            labels.append(c)
    return LabeledDataset(tuple(spectra), np.array(labels), cfg.registry)


def half_map_region(rows, cols, class_idx, bg_class_idx):
    """Left half planted with one class, right half background."""
    region = np.full((rows, cols), bg_class_idx, dtype=np.int64)
    region[:, : cols // 2] = class_idx
    return region


def coverage_from_region(region, registry, edge_decay_cells):
    """Per-cell coverage in [0, 1], declining toward non-bacterial cells."""
    bacterial = np.isin(
        region, np.asarray(registry.bacterial_indices(), dtype=np.int64)
    )
    cov = np.zeros(region.shape)
    if bacterial.any():
        if bacterial.all():
            dist = np.full(region.shape, np.inf)
        else:
            dist = distance_transform_edt(bacterial)
        if edge_decay_cells > 0:
            cov[bacterial] = np.minimum(1.0, dist[bacterial] / edge_decay_cells)
        else:
            cov[bacterial] = 1.0
    return cov


def gen_map(cfg: SynthConfig, rows, cols, region_spec, noise_sigma,
            edge_decay_cells=0.0, substrate_class=None, spacing_um=1.0, seed=None):
    """Planted raster map.

    Bacterial cells carry their class signature scaled by a coverage factor
    that decays toward region edges, on top of the substrate signature.
    Returns (HyperMap, planted label grid, coverage grid).
    """
    region = np.asarray(region_spec, dtype=np.int64)
    if region.shape != (rows, cols):
        raise ShapeError(f"region spec shape {region.shape} != ({rows}, {cols})")
    if region.min() < 0 or region.max() >= cfg.n_classes:
        raise ConfigError("region spec contains invalid class indices")
    if substrate_class is None:
        substrate_class = cfg.registry.background_indices()[0]
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    substrate = cfg.signatures[substrate_class].signal(cfg.axis)
    signals = [sig.signal(cfg.axis) for sig in cfg.signatures]
    cov = coverage_from_region(region, cfg.registry, edge_decay_cells)
    grid = []
    for r in range(rows):
        row = []
        for c in range(cols):
            cls = region[r, c]
            if cfg.registry.is_bacterial(cls):
                clean = cov[r, c] * signals[cls] + substrate
            else:
                clean = signals[cls]
            noisy = clean + rng.normal(0.0, noise_sigma, cfg.axis.n_points)
            row.append(Spectrum(noisy, cfg.axis))
        grid.append(tuple(row))
    return HyperMap(tuple(grid), spacing_um), region, cov


# ---------------------------------------------------------------------------
# Signature file format: JSON list of {"peaks":[[c,w,a],...],"baseline":[s,o]}


def save_signatures(signatures, path):
    import json

    doc = [
        {"peaks": [list(p) for p in sig.peaks], "baseline": list(sig.baseline)}
        for sig in signatures
    ]
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_signatures(path):
    import json

    with open(path) as f:
        doc = json.load(f)
    return tuple(
        ClassSignature(
            peaks=tuple(tuple(p) for p in d["peaks"]),
            baseline=tuple(d["baseline"]),
        )
        for d in doc
    )
