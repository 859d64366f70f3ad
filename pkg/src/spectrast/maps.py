"""Hyperspectral map classification and map exports.

Each cell is preprocessed and scored independently (no spatial smoothing);
intensity maps use nearest-point lookup on the wavenumber axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import ClassRegistry, HyperMap
from .errors import ConfigError, ParseError, ShapeError
from .model import predict_proba
from .preprocess import PreprocessConfig, preprocess


@dataclass(frozen=True)
class PredictionMap:
    probabilities: np.ndarray  # [rows, cols, n_classes]
    registry: ClassRegistry
    spacing_um: float

    def __post_init__(self):
        probs = np.ascontiguousarray(self.probabilities, dtype=np.float64)
        probs.flags.writeable = False
        object.__setattr__(self, "probabilities", probs)
        if probs.ndim != 3 or probs.shape[-1] != len(self.registry):
            raise ShapeError(
                f"probability grid shape {probs.shape} does not match registry"
            )
        if not np.allclose(probs.sum(axis=-1), 1.0, atol=1e-9):
            raise ShapeError("cell probability vectors must sum to 1")

    @property
    def rows(self):
        return self.probabilities.shape[0]

    @property
    def cols(self):
        return self.probabilities.shape[1]

    def argmax_grid(self):
        return self.probabilities.argmax(axis=-1)


def classify_map(hm: HyperMap, params, st_cfg, pre_cfg: PreprocessConfig,
                 registry: ClassRegistry, chunk=64) -> PredictionMap:
    if hm.axis.n_points != st_cfg.seq_len:
        raise ShapeError(
            f"map spectra have {hm.axis.n_points} points, model expects "
            f"{st_cfg.seq_len}"
        )
    if len(registry) != st_cfg.n_classes:
        raise ConfigError(
            f"registry has {len(registry)} classes, model outputs {st_cfg.n_classes}"
        )
    cleaned = np.stack(
        [preprocess(s, pre_cfg).intensities for row in hm.grid for s in row]
    )
    probs = predict_proba(cleaned, params, st_cfg, chunk=chunk)
    return PredictionMap(
        probs.reshape(hm.rows, hm.cols, -1), registry, hm.spacing_um
    )


def intensity_map(hm: HyperMap, shift_cm1: float):
    """Per-cell intensity at the axis point nearest to the requested shift."""
    idx = hm.axis.nearest_index(shift_cm1)
    return np.array([[s.intensities[idx] for s in row] for row in hm.grid])


def summarize(pm: PredictionMap, threshold=0.5):
    """Per-class coverage: argmax fractions plus threshold-based fractions."""
    n_cells = pm.rows * pm.cols
    flat = pm.probabilities.reshape(n_cells, -1)
    argmax = flat.argmax(axis=1)
    above = flat > threshold
    undetermined = int((~above.any(axis=1)).sum())
    report = {"cells": n_cells, "threshold": threshold,
              "undetermined": undetermined, "classes": {}}
    for i, name in enumerate(pm.registry.names):
        report["classes"][name] = {
            "argmax_fraction": float((argmax == i).mean()),
            "threshold_fraction": float(above[:, i].mean()),
        }
    return report


def export_map(obj, path, format="json"):
    """Write a PredictionMap or a 2-D matrix; json is lossless, pgm is 16-bit."""
    if format == "json":
        if isinstance(obj, PredictionMap):
            doc = {
                "rows": obj.rows,
                "cols": obj.cols,
                "spacing_um": obj.spacing_um,
                "classes": [
                    {"name": n, "kind": k.value} for n, k in obj.registry.classes
                ],
                "probabilities": obj.probabilities.tolist(),
            }
        else:
            doc = {"matrix": np.asarray(obj).tolist()}
        with open(path, "w") as f:
            json.dump(doc, f)
            f.write("\n")
    elif format == "csv":
        mat = _require_matrix(obj, format)
        with open(path, "w") as f:
            for row in mat:
                f.write(",".join("%.17g" % v for v in row) + "\n")
    elif format == "pgm":
        mat = _require_matrix(obj, format)
        lo, hi = mat.min(), mat.max()
        scaled = np.zeros_like(mat) if hi == lo else (mat - lo) / (hi - lo)
        pixels = np.round(scaled * 65535).astype(">u2")
        with open(path, "wb") as f:
            f.write(f"P5\n{mat.shape[1]} {mat.shape[0]}\n65535\n".encode())
            f.write(pixels.tobytes())
    else:
        raise ConfigError(f"unknown export format {format!r}")


def load_prediction_map(path) -> PredictionMap:
    from .core import ClassKind

    with open(path) as f:
        doc = json.load(f)
    try:
        registry = ClassRegistry(
            tuple((c["name"], ClassKind(c["kind"])) for c in doc["classes"])
        )
        probs = np.asarray(doc["probabilities"], dtype=np.float64)
        return PredictionMap(probs, registry, float(doc["spacing_um"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad prediction map {path}: {e}") from e


def _require_matrix(obj, format):
    if isinstance(obj, PredictionMap):
        raise ConfigError(f"{format} export needs a 2-D matrix, not a PredictionMap")
    mat = np.asarray(obj, dtype=np.float64)
    if mat.ndim != 2:
        raise ConfigError(f"{format} export needs a 2-D matrix")
    return mat
