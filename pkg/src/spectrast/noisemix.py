"""NoiseMix augmentation and the class-balanced epoch sampler.

A bacterial training example is replaced by the convex combination
(1 - alpha) * bacterial + alpha * background with alpha ~ Uniform[0, alpha_max],
then renormalized to [0, 1] so every model input obeys the same contract.
Background-class examples pass through unmixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassKind, LabeledDataset, Spectrum
from .errors import ConfigError, DomainError, ShapeError
from .preprocess import normalize01


@dataclass(frozen=True)
class NoiseMixConfig:
    alpha_max: float = 0.9
    background_sources: tuple = ()
    per_epoch_per_class: int = 300
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha_max < 1.0:
            raise ConfigError("alpha_max must lie strictly between 0 and 1")
        if self.per_epoch_per_class < 1:
            raise ConfigError("per_epoch_per_class must be >= 1")
        object.__setattr__(
            self, "background_sources", tuple(int(i) for i in self.background_sources)
        )


def mix(s_bacteria: Spectrum, s_bg: Spectrum, alpha: float, alpha_max: float = 1.0) -> Spectrum:
    """(1 - alpha) * bacterial + alpha * background, pointwise."""
    if s_bacteria.axis != s_bg.axis:
        raise ShapeError("mixing inputs must share one wavenumber axis")
    if not 0.0 <= alpha <= alpha_max:
        raise DomainError(f"alpha {alpha} outside [0, {alpha_max}]")
    out = (1.0 - alpha) * s_bacteria.intensities + alpha * s_bg.intensities
    return Spectrum(out, s_bacteria.axis)


def sample_alpha(cfg: NoiseMixConfig, rng: np.random.Generator) -> float:
    return float(rng.uniform(0.0, cfg.alpha_max))


def resolve_background_sources(cfg: NoiseMixConfig, registry):
    """Configured background-source classes, defaulting to all Background kind."""
    sources = cfg.background_sources or tuple(registry.background_indices())
    if not sources:
        raise ConfigError("no background-source classes available for NoiseMix")
    for idx in sources:
        if registry.kind_of(idx) is not ClassKind.BACKGROUND:
            raise ConfigError(
                f"background source {registry.name_of(idx)!r} is not Background kind"
            )
    return sources


def balanced_epoch(ds: LabeledDataset, cfg: NoiseMixConfig, rng: np.random.Generator) -> LabeledDataset:
    """One training epoch with exactly per_epoch_per_class examples per class.

    Bacterial examples are NoiseMix-augmented and renormalized; background
    examples are drawn with replacement unmixed.
    """
    registry = ds.registry
    sources = resolve_background_sources(cfg, registry)
    by_class = [ds.indices_of_class(c) for c in range(len(registry))]
    for c, idx in enumerate(by_class):
        if len(idx) == 0:
            raise ConfigError(f"class {registry.name_of(c)!r} has no spectra")
    bg_pool = np.concatenate([by_class[c] for c in sources])

    spectra, labels = [], []
    m = cfg.per_epoch_per_class
    for c in range(len(registry)):
        picks = rng.choice(by_class[c], size=m, replace=True)
        if registry.is_bacterial(c):
            bg_picks = rng.choice(bg_pool, size=m, replace=True)
            for i, j in zip(picks, bg_picks):
                alpha = sample_alpha(cfg, rng)
                spectra.append(
                    normalize01(mix(ds.spectra[i], ds.spectra[j], alpha, cfg.alpha_max))
                )
        else:
            spectra.extend(ds.spectra[i] for i in picks)
        labels.extend([c] * m)
    return LabeledDataset(tuple(spectra), np.array(labels), registry)
