"""On-disk schema, loading, splitting, value transforms and preprocessing tables.

Responses are held as ``(N, H, W)`` float arrays and conditions as ``(N, 9)``
arrays; :class:`ParticleConditions` is the per-sample view used at API edges.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Union

import h5py
import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
COND_FIELDS = ("energy", "mass", "charge", "pos_x", "pos_y", "pos_z", "mom_x", "mom_y", "mom_z")
COND_DIM = len(COND_FIELDS)

PathLike = Union[str, Path]


class SchemaError(ValueError):
    """Archive or array content violates the dataset schema."""


_CANONICAL = {"ZP": (56, 30), "ZN": (44, 44)}


@dataclass(frozen=True)
class CalorimeterSpec:
    """Detector name and response resolution.

    ``ZP`` and ``ZN`` are pinned to their physical resolutions.  ``DESK`` is a
    reduced-resolution mode for desk-scale experiments and accepts any size.
    """

    name: str
    height: int
    width: int

    def __post_init__(self):
        if self.name in _CANONICAL:
            if (self.height, self.width) != _CANONICAL[self.name]:
                raise ValueError(
                    f"{self.name} resolution must be {_CANONICAL[self.name]}, "
                    f"got {(self.height, self.width)}"
                )
        elif self.name != "DESK":
            raise ValueError(f"unknown detector {self.name!r}")
        if self.height < 2 or self.width < 2:
            raise ValueError("resolution must be at least 2x2")

    @classmethod
    def zp(cls) -> "CalorimeterSpec":
        return cls("ZP", *_CANONICAL["ZP"])

    @classmethod
    def zn(cls) -> "CalorimeterSpec":
        return cls("ZN", *_CANONICAL["ZN"])

    @classmethod
    def desk(cls, height: int = 16, width: int = 16) -> "CalorimeterSpec":
        return cls("DESK", height, width)

    @classmethod
    def from_name(cls, name: str, height: int | None = None, width: int | None = None) -> "CalorimeterSpec":
        if name in _CANONICAL:
            return cls(name, *_CANONICAL[name])
        return cls(name, height or 16, width or 16)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {"name": self.name, "height": self.height, "width": self.width}


@dataclass(frozen=True)
class ParticleConditions:
    energy: float
    mass: float
    charge: float
    pos_x: float
    pos_y: float
    pos_z: float
    mom_x: float
    mom_y: float
    mom_z: float

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            raise ValueError("conditions must be finite")
        if self.energy < 0 or self.mass < 0:
            raise ValueError("energy and mass must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)

    @classmethod
    def from_array(cls, row) -> "ParticleConditions":
        row = np.asarray(row, dtype=np.float64).reshape(-1)
        if row.shape != (COND_DIM,):
            raise ValueError(f"expected {COND_DIM} condition values, got {row.shape[0]}")
        return cls(*(float(v) for v in row))


def validate_arrays(conditions: np.ndarray, responses: np.ndarray, spec: CalorimeterSpec) -> None:
    """Raise :class:`SchemaError` naming the offending array and sample index."""
    if conditions.ndim != 2 or conditions.shape[1] != COND_DIM:
        raise SchemaError(f"conditions: expected shape (N, {COND_DIM}), got {conditions.shape}")
    if responses.ndim != 3 or responses.shape[1:] != spec.shape:
        raise SchemaError(
            f"responses: expected per-sample shape {spec.shape} for {spec.name}, "
            f"got {responses.shape[1:]}"
        )
    if conditions.shape[0] != responses.shape[0]:
        raise SchemaError(
            f"conditions/responses length mismatch: {conditions.shape[0]} vs {responses.shape[0]}"
        )
    bad = ~np.isfinite(conditions).all(axis=1)
    if bad.any():
        raise SchemaError(f"conditions: non-finite value at sample {int(np.argmax(bad))}")
    bad = (conditions[:, 0] < 0) | (conditions[:, 1] < 0)
    if bad.any():
        raise SchemaError(f"conditions: negative energy or mass at sample {int(np.argmax(bad))}")
    flat = responses.reshape(responses.shape[0], -1)
    bad = ~np.isfinite(flat).all(axis=1)
    if bad.any():
        raise SchemaError(f"responses: NaN/Inf pixel at sample {int(np.argmax(bad))}")
    bad = (flat < 0).any(axis=1)
    if bad.any():
        raise SchemaError(f"responses: negative pixel at sample {int(np.argmax(bad))}")


def save_dataset(path: PathLike, conditions, responses, spec: CalorimeterSpec) -> Path:
    path = Path(path)
    conditions = np.asarray(conditions, dtype=np.float32)
    responses = np.asarray(responses, dtype=np.float32)
    validate_arrays(conditions, responses, spec)
    path.parent.mkdir(parents=True, exist_ok=True)
    with h5py.File(path, "w", track_order=False) as f:
        f.create_dataset("conditions", data=conditions, track_times=False)
        f.create_dataset("responses", data=responses, track_times=False)
        f.attrs["detector"] = spec.name
        f.attrs["format_version"] = FORMAT_VERSION
        if spec.name == "DESK":
            f.attrs["height"] = spec.height
            f.attrs["width"] = spec.width
    return path


def read_spec(path: PathLike) -> CalorimeterSpec:
    """Detector spec stored in an archive's root attributes."""
    with h5py.File(path, "r") as f:
        name = f.attrs.get("detector")
        if name is None:
            raise SchemaError("missing root attribute 'detector'")
        name = name.decode() if isinstance(name, bytes) else str(name)
        h, w = f.attrs.get("height"), f.attrs.get("width")
        return CalorimeterSpec.from_name(name, None if h is None else int(h), None if w is None else int(w))


def load_dataset(path: PathLike, spec: CalorimeterSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Load and validate ``(conditions, responses)`` from an archive.

    If ``spec`` is omitted it is read from the archive; otherwise the archive's
    detector attribute must agree with it.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with h5py.File(path, "r") as f:
        for key in ("conditions", "responses"):
            if key not in f:
                raise SchemaError(f"missing array '/{key}'")
        version = f.attrs.get("format_version")
        if version is not None and int(version) != FORMAT_VERSION:
            raise SchemaError(f"unsupported format_version {version}")
        conditions = f["conditions"][()]
        responses = f["responses"][()]
    stored = read_spec(path)
    if spec is None:
        spec = stored
    elif stored.name != spec.name:
        raise SchemaError(f"detector mismatch: archive is {stored.name}, expected {spec.name}")
    validate_arrays(conditions, responses, spec)
    return conditions, responses


@dataclass(frozen=True)
class SplitIndex:
    train_ids: np.ndarray
    test_ids: np.ndarray
    seed: int


def split(n: int, ratio: float = 0.8, seed: int = 0) -> SplitIndex:
    if n < 2:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    n_train = min(max(int(round(n * ratio)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return SplitIndex(np.sort(perm[:n_train]), np.sort(perm[n_train:]), seed)


@dataclass
class PreprocessTables:
    diversity_scale: np.ndarray
    intensity: np.ndarray
    peak_row: np.ndarray
    peak_col: np.ndarray

    def __len__(self) -> int:
        return len(self.intensity)

    def subset(self, idx) -> "PreprocessTables":
        return PreprocessTables(
            self.diversity_scale[idx], self.intensity[idx], self.peak_row[idx], self.peak_col[idx]
        )


def peak_coordinates(responses: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First maximal pixel in row-major order for each image."""
    n, _, w = responses.shape
    flat_idx = np.argmax(responses.reshape(n, -1), axis=1)
    return flat_idx // w, flat_idx % w


def build_preprocess_tables(conditions, responses) -> PreprocessTables:
    """Per-sample diversity scale, total intensity and peak coordinates.

    Samples are grouped by bitwise-equal conditioning vectors.  Each group's raw
    diversity is the sum over pixels of the population standard deviation across
    the group; raw values are divided by the largest group value so the scale
    lands in [0, 1].  Singleton groups get 0.
    """
    conditions = np.ascontiguousarray(conditions)
    responses = np.asarray(responses, dtype=np.float64)
    if len(responses) == 0:
        raise ValueError("empty dataset")
    n = len(responses)
    intensity = responses.reshape(n, -1).sum(axis=1)
    peak_row, peak_col = peak_coordinates(responses)

    keys = conditions.view(np.dtype((np.void, conditions.dtype.itemsize * conditions.shape[1])))
    _, group, counts = np.unique(keys.ravel(), return_inverse=True, return_counts=True)
    raw = np.zeros(len(counts))
    for g in np.flatnonzero(counts > 1):
        members = responses[group == g]
        raw[g] = members.std(axis=0).sum()
    top = raw.max()
    scale = raw / top if top > 0 else raw
    return PreprocessTables(
        diversity_scale=scale[group],
        intensity=intensity,
        peak_row=peak_row.astype(np.int64),
        peak_col=peak_col.astype(np.int64),
    )


class ValueTransform:
    """``log1p`` followed by an affine map of ``[0, log1p(max_value)]`` onto ``[-1, 1]``."""

    range_slack = 0.05

    def __init__(self, max_value: float):
        if not max_value > 0:
            raise ValueError("max_value must be positive")
        self.max_value = float(max_value)
        self._log_max = float(np.log1p(self.max_value))

    @classmethod
    def fit(cls, responses) -> "ValueTransform":
        return cls(float(np.max(responses)))

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.log1p(x) / self._log_max * 2.0 - 1.0

    def inverse(self, y):
        y = np.asarray(y, dtype=np.float64)
        lo, hi = -1.0 - self.range_slack, 1.0 + self.range_slack
        if y.size and (y.min() < lo or y.max() > hi):
            warnings.warn(
                f"transformed values outside [{lo}, {hi}]; clamping", RuntimeWarning, stacklevel=2
            )
            y = np.clip(y, lo, hi)
        return np.maximum(np.expm1((y + 1.0) * 0.5 * self._log_max), 0.0)

    def inverse_torch(self, y):
        """Differentiable inverse for tensors already in generator range."""
        import torch

        return torch.clamp(torch.expm1((y + 1.0) * 0.5 * self._log_max), min=0.0)

    def to_dict(self) -> dict:
        return {"max_value": self.max_value}
