"""Domain types and file I/O shared by the whole pipeline.

All container types are immutable after construction (ndarrays are marked
read-only), so they can be shared freely across workers.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, ShapeError


def _readonly(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class WavenumberAxis:
    """Uniform wavenumber grid; 480 points over 700-1600 cm^-1 by default."""

    start_cm1: float = 700.0
    end_cm1: float = 1600.0
    n_points: int = 480

    def __post_init__(self):
        if not self.start_cm1 < self.end_cm1:
            raise ConfigError("axis start must be below end")
        if self.n_points < 2:
            raise ConfigError("axis needs at least 2 points")

    def grid(self):
        return np.linspace(self.start_cm1, self.end_cm1, self.n_points)

    def nearest_index(self, shift_cm1):
        from .errors import DomainError

        if not (self.start_cm1 <= shift_cm1 <= self.end_cm1):
            raise DomainError(
                f"shift {shift_cm1} cm^-1 outside axis range "
                f"[{self.start_cm1}, {self.end_cm1}]"
            )
        step = (self.end_cm1 - self.start_cm1) / (self.n_points - 1)
        return int(round((shift_cm1 - self.start_cm1) / step))


@dataclass(frozen=True)
class Spectrum:
    """Fixed-length intensity vector on a wavenumber axis."""

    intensities: np.ndarray
    axis: WavenumberAxis = field(default_factory=WavenumberAxis)
    meta: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "intensities", _readonly(self.intensities))
        if self.intensities.ndim != 1 or len(self.intensities) != self.axis.n_points:
            raise ShapeError(
                f"spectrum has {self.intensities.size} values, "
                f"axis declares {self.axis.n_points}"
            )
        if not np.all(np.isfinite(self.intensities)):
            raise ShapeError("spectrum contains non-finite values")

    def with_values(self, values):
        return Spectrum(values, self.axis, self.meta)


class ClassKind(enum.Enum):
    BACTERIAL = "bacterial"
    BACKGROUND = "background"


@dataclass(frozen=True)
class ClassRegistry:
    """Ordered class list with a bacterial/background kind per class."""

    classes: tuple  # of (name, ClassKind)

    def __post_init__(self):
        classes = tuple((str(n), ClassKind(k)) for n, k in self.classes)
        object.__setattr__(self, "classes", classes)
        names = [n for n, _ in classes]
        if not names:
            raise ConfigError("registry needs at least one class")
        if len(set(names)) != len(names):
            raise ConfigError("registry class names must be unique")

    def __len__(self):
        return len(self.classes)

    @property
    def names(self):
        return [n for n, _ in self.classes]

    def index_of(self, name):
        for i, (n, _) in enumerate(self.classes):
            if n == name:
                return i
        raise KeyError(name)

    def name_of(self, idx):
        return self.classes[idx][0]

    def kind_of(self, idx):
        return self.classes[idx][1]

    def is_bacterial(self, idx):
        return self.classes[idx][1] is ClassKind.BACTERIAL

    def bacterial_indices(self):
        return [i for i, (_, k) in enumerate(self.classes) if k is ClassKind.BACTERIAL]

    def background_indices(self):
        return [i for i, (_, k) in enumerate(self.classes) if k is ClassKind.BACKGROUND]


@dataclass(frozen=True)
class LabeledDataset:
    """Spectra with class labels indexing into a ClassRegistry."""

    spectra: tuple
    labels: np.ndarray
    registry: ClassRegistry

    def __post_init__(self):
        object.__setattr__(self, "spectra", tuple(self.spectra))
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        if len(self.spectra) != len(self.labels):
            raise ShapeError("spectra and labels differ in length")
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= len(self.registry)
        ):
            raise ConfigError("label index outside registry")
        axes = {s.axis for s in self.spectra}
        if len(axes) > 1:
            raise ShapeError("all spectra in a dataset must share one axis")

    def __len__(self):
        return len(self.spectra)

    @property
    def axis(self):
        return self.spectra[0].axis if self.spectra else WavenumberAxis()

    def as_matrix(self):
        """N x n_points intensity matrix (copy)."""
        return np.stack([s.intensities for s in self.spectra]) if self.spectra else \
            np.empty((0, self.axis.n_points))

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            tuple(self.spectra[i] for i in idx), self.labels[idx], self.registry
        )

    def indices_of_class(self, class_idx):
        return np.flatnonzero(self.labels == class_idx)


@dataclass(frozen=True)
class HyperMap:
    """Rectangular grid of spectra from a raster scan."""

    grid: tuple  # rows of tuples of Spectrum
    spacing_um: float
    origin: tuple | None = None

    def __post_init__(self):
        grid = tuple(tuple(row) for row in self.grid)
        object.__setattr__(self, "grid", grid)
        if not grid or not grid[0]:
            raise ShapeError("map needs at least one row and one column")
        cols = len(grid[0])
        if any(len(row) != cols for row in grid):
            raise ShapeError("map rows have unequal lengths")
        axes = {s.axis for row in grid for s in row}
        if len(axes) > 1:
            raise ShapeError("all map cells must share one axis")

    @property
    def rows(self):
        return len(self.grid)

    @property
    def cols(self):
        return len(self.grid[0])

    @property
    def axis(self):
        return self.grid[0][0].axis

    def as_matrix(self):
        """(rows*cols) x n_points intensity matrix, row-major."""
        return np.stack([s.intensities for row in self.grid for s in row])


# ---------------------------------------------------------------------------
# Registry I/O: {"classes":[{"name":..., "kind":"bacterial"|"background"}]}


def load_registry(path):
    with open(path) as f:
        doc = json.load(f)
    try:
        classes = [(c["name"], ClassKind(c["kind"])) for c in doc["classes"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad registry file {path}: {e}") from e
    return ClassRegistry(tuple(classes))


def save_registry(registry, path):
    doc = {
        "classes": [{"name": n, "kind": k.value} for n, k in registry.classes]
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def _sidecar_registry_path(path):
    return str(path) + ".registry.json"


# ---------------------------------------------------------------------------
# Dataset I/O.  CSV: optional "# axis start end n" comment line, then header
# nu_0,...,nu_{n-1},label, one spectrum per row, label stored by class name.
# JSONL: one object per spectrum; the first object carries the axis.

_FLOAT_FMT = "%.17g"


def save_dataset(ds, path, format="csv"):
    if format not in ("csv", "jsonl"):
        raise ConfigError(f"unknown dataset format {format!r}")
    ax = ds.axis
    if format == "csv":
        with open(path, "w") as f:
            f.write(f"# axis {ax.start_cm1:.10g} {ax.end_cm1:.10g} {ax.n_points}\n")
            f.write(",".join(f"nu_{i}" for i in range(ax.n_points)) + ",label\n")
            for s, lab in zip(ds.spectra, ds.labels):
                vals = ",".join(_FLOAT_FMT % v for v in s.intensities)
                f.write(f"{vals},{ds.registry.name_of(lab)}\n")
    else:
        with open(path, "w") as f:
            for i, (s, lab) in enumerate(zip(ds.spectra, ds.labels)):
                obj = {
                    "intensities": [float(v) for v in s.intensities],
                    "label": ds.registry.name_of(lab),
                }
                if i == 0:
                    obj["axis"] = {
                        "start": ax.start_cm1,
                        "end": ax.end_cm1,
                        "n": ax.n_points,
                    }
                f.write(json.dumps(obj) + "\n")
    save_registry(ds.registry, _sidecar_registry_path(path))


def load_dataset(path, format="csv", registry=None):
    if format not in ("csv", "jsonl"):
        raise ConfigError(f"unknown dataset format {format!r}")
    if registry is None:
        try:
            registry = load_registry(_sidecar_registry_path(path))
        except FileNotFoundError:
            raise ConfigError(
                f"no registry given and no sidecar registry next to {path}"
            ) from None
    loader = _load_csv if format == "csv" else _load_jsonl
    spectra, names = loader(path)
    try:
        labels = np.array([registry.index_of(n) for n in names], dtype=np.int64)
    except KeyError as e:
        raise ParseError(f"label {e.args[0]!r} not in registry") from None
    return LabeledDataset(tuple(spectra), labels, registry)


def _load_csv(path):
    with open(path) as f:
        lines = f.read().splitlines()
    lineno = 0
    axis_args = None
    if lines and lines[0].startswith("# axis"):
        parts = lines[0].split()
        if len(parts) != 5:
            raise ParseError("malformed axis comment", line=1)
        axis_args = (float(parts[2]), float(parts[3]), int(parts[4]))
        lines = lines[1:]
        lineno = 1
    if not lines:
        raise ParseError("missing header row", line=lineno + 1)
    header = lines[0].split(",")
    if header[-1] != "label" or not all(
        h == f"nu_{i}" for i, h in enumerate(header[:-1])
    ):
        raise ParseError("bad CSV header", line=lineno + 1)
    n = len(header) - 1
    axis = WavenumberAxis(*axis_args) if axis_args else WavenumberAxis(n_points=n)
    if axis.n_points != n:
        raise ParseError(
            f"axis declares {axis.n_points} points, header has {n}", line=1
        )
    spectra, names = [], []
    for off, line in enumerate(lines[1:]):
        row_no = lineno + 2 + off
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != n + 1:
            raise ShapeError(
                f"line {row_no}: row has {len(cells) - 1} values, expected {n}"
            )
        try:
            values = np.array([float(c) for c in cells[:-1]])
        except ValueError as e:
            raise ParseError(str(e), line=row_no) from None
        spectra.append(Spectrum(values, axis))
        names.append(cells[-1])
    return spectra, names


def _load_jsonl(path):
    spectra, names = [], []
    axis = None
    with open(path) as f:
        for row_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                values = np.asarray(obj["intensities"], dtype=np.float64)
                name = obj["label"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ParseError(str(e), line=row_no) from None
            if "axis" in obj:
                declared = WavenumberAxis(
                    obj["axis"]["start"], obj["axis"]["end"], obj["axis"]["n"]
                )
                if axis is not None and declared != axis:
                    raise ShapeError(f"line {row_no}: axis differs from first object")
                axis = declared
            if axis is None:
                axis = WavenumberAxis(n_points=len(values))
            spectra.append(Spectrum(values, axis))
            names.append(name)
    return spectra, names


# ---------------------------------------------------------------------------
# Map I/O: {"rows","cols","spacing_um","axis":{start,end,n},"cells":[...]}


def load_map(path):
    with open(path) as f:
        doc = json.load(f)
    try:
        rows, cols = int(doc["rows"]), int(doc["cols"])
        spacing = float(doc["spacing_um"])
        ax = doc["axis"]
        axis = WavenumberAxis(float(ax["start"]), float(ax["end"]), int(ax["n"]))
        cells = doc["cells"]
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad map file {path}: {e}") from e
    if len(cells) != rows * cols:
        missing = [
            (k // cols, k % cols) for k in range(len(cells), rows * cols)
        ]
        extra = len(cells) - rows * cols
        if missing:
            raise ShapeError(
                f"map declares {rows}x{cols} but has {len(cells)} cells; "
                f"missing coordinates {missing[:10]}"
            )
        raise ShapeError(
            f"map declares {rows}x{cols} but has {extra} extra cells"
        )
    grid = []
    for r in range(rows):
        grid.append(
            tuple(
                Spectrum(np.asarray(cells[r * cols + c], dtype=np.float64), axis)
                for c in range(cols)
            )
        )
    origin = tuple(doc["origin"]) if doc.get("origin") is not None else None
    return HyperMap(tuple(grid), spacing, origin)


def save_map(hm, path):
    ax = hm.axis
    doc = {
        "rows": hm.rows,
        "cols": hm.cols,
        "spacing_um": hm.spacing_um,
        "axis": {"start": ax.start_cm1, "end": ax.end_cm1, "n": ax.n_points},
        "cells": [[float(v) for v in s.intensities] for row in hm.grid for s in row],
    }
    if hm.origin is not None:
        doc["origin"] = list(hm.origin)
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")
