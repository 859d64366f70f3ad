"""Per-spectrum cleaning: spike removal, linear slope removal, 0-1 scaling.

All functions are pure and total on valid spectra. The default configuration
matches the test-data regime (spikes, slope removal, then normalization);
training data that should only be normalized can disable the slope stage.
Non-linear baseline correction is deliberately not offered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Spectrum
from .errors import ConfigError

# MAD to standard-deviation scale factor for Gaussian noise
_MAD_SCALE = 1.4826


@dataclass(frozen=True)
class PreprocessConfig:
    spike_window: int = 5
    spike_threshold_sigma: float = 6.0
    do_slope_removal: bool = True
    do_normalize: bool = True

    def __post_init__(self):
        if self.spike_window < 3 or self.spike_window % 2 == 0:
            raise ConfigError("spike_window must be odd and >= 3")
        if self.spike_threshold_sigma <= 0:
            raise ConfigError("spike_threshold_sigma must be positive")


def running_median(x, window):
    """Center-excluded running median over the interior points.

    Returns (medians, interior_slice): medians has length n - window + 1 and
    covers indices [half, n - half). Excluding the center keeps the residual
    distribution non-degenerate, so the MAD scale estimate stays honest.
    """
    x = np.asarray(x, dtype=np.float64)
    half = window // 2
    windows = sliding_window_view(x, window)
    neighbors = np.concatenate(
        [windows[:, :half], windows[:, half + 1 :]], axis=1
    )
    return np.median(neighbors, axis=-1), slice(half, len(x) - half)


def remove_spikes(s: Spectrum, cfg: PreprocessConfig = PreprocessConfig()) -> Spectrum:
    """Replace narrow cosmetic spikes by the local neighbor median.

    A point is a spike when its residual against the center-excluded running
    median exceeds spike_threshold_sigma times the MAD-based robust scale of
    the residuals. Detection runs twice: a large spike biases the neighbor
    median of the points next to it, so candidates from the first pass are
    patched out before the medians are recomputed for the final decision.
    The half-window of points at each edge has no symmetric neighborhood and
    is never modified.
    """
    x = s.intensities
    if len(x) < cfg.spike_window:
        return s
    half = cfg.spike_window // 2
    med, interior = running_median(x, cfg.spike_window)
    resid = x[interior] - med
    scale = _MAD_SCALE * np.median(np.abs(resid - np.median(resid)))
    # absolute floor so rounding noise on e.g. a pure ramp (where the scale
    # collapses to ~0) is never mistaken for a spike
    floor = 64.0 * np.finfo(np.float64).eps * np.abs(x).max()
    threshold = max(cfg.spike_threshold_sigma * scale, floor)
    candidates = np.abs(resid) > threshold
    if not candidates.any():
        return s
    cand_idx = np.flatnonzero(candidates) + half
    keep = np.setdiff1d(np.arange(len(x)), cand_idx)
    patched = x.copy()
    patched[cand_idx] = np.interp(cand_idx, keep, x[keep])
    med2, _ = running_median(patched, cfg.spike_window)
    spikes = np.abs(x[interior] - med2) > threshold
    if not spikes.any():
        return s
    out = x.copy()
    out[np.flatnonzero(spikes) + half] = med[spikes]
    return s.with_values(out)


def remove_slope(s: Spectrum) -> Spectrum:
    """Subtract the line through the first and last point; endpoints become 0."""
    x = s.intensities
    n = len(x)
    line = x[0] + (x[-1] - x[0]) * np.arange(n) / (n - 1)
    out = x - line
    # snap rounding residue to zero so an exactly linear input comes back as
    # exactly zero instead of eps-scale noise that normalization would amplify
    out[np.abs(out) <= 64.0 * np.finfo(np.float64).eps * np.abs(x).max()] = 0.0
    out[0] = 0.0
    out[-1] = 0.0
    return s.with_values(out)


def normalize01(s: Spectrum) -> Spectrum:
    """Rescale to [0, 1]; constant spectra map to all zeros."""
    x = s.intensities
    lo, hi = x.min(), x.max()
    if hi == lo:
        return s.with_values(np.zeros_like(x))
    return s.with_values((x - lo) / (hi - lo))


def preprocess(s: Spectrum, cfg: PreprocessConfig = PreprocessConfig()) -> Spectrum:
    out = remove_spikes(s, cfg)
    if cfg.do_slope_removal:
        out = remove_slope(out)
    if cfg.do_normalize:
        out = normalize01(out)
    return out


def preprocess_dataset(ds, cfg: PreprocessConfig = PreprocessConfig()):
    from .core import LabeledDataset

    return LabeledDataset(
        tuple(preprocess(s, cfg) for s in ds.spectra), ds.labels, ds.registry
    )
