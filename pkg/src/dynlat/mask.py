"""Binary spatial masks: coarse grids, upsampling, patch indexing, Gumbel relaxation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

TAU_START = 5.0
TAU_END = 0.1


def _as_binary(grid) -> np.ndarray:
    a = np.asarray(grid)
    if a.ndim != 2:
        raise ShapeError(f"mask grid must be 2-D, got shape {a.shape}")
    if a.size and not np.isin(a, (0, 1)).all():
        raise DomainError("mask entries must be 0 or 1")
    a = a.astype(np.uint8)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SpatialMask:
    """Full-resolution H x W decision grid."""

    grid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "grid", _as_binary(self.grid))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def __eq__(self, other):
        return isinstance(other, SpatialMask) and np.array_equal(self.grid, other.grid)


@dataclass(frozen=True, eq=False)
class CoarseMask:
    """(H/S) x (W/S) decision grid; each cell governs an S x S output patch."""

    grid: np.ndarray
    s: int = 1

    def __post_init__(self):
        object.__setattr__(self, "grid", _as_binary(self.grid))
        if self.s < 1:
            raise DomainError("granularity must be >= 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def count(self) -> int:
        return int(self.grid.sum())

    def __eq__(self, other):
        return (isinstance(other, CoarseMask) and self.s == other.s
                and np.array_equal(self.grid, other.grid))

    def to_json(self) -> str:
        return json.dumps({"s": self.s, "grid": self.grid.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "CoarseMask":
        d = json.loads(text)
        return cls(np.array(d["grid"], dtype=np.uint8).reshape(len(d["grid"]), -1), d["s"])

    def to_rle(self) -> str:
        """Compact text form: ``"<h>x<w>/<s>:<first>:<run>,<run>,..."``.

        Runs alternate between 0 and 1 over the row-major flattening,
        starting with the value ``first``.
        """
        h, w = self.shape
        flat = self.grid.ravel()
        if flat.size == 0:
            return f"{h}x{w}/{self.s}:0:"
        edges = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate(([0], edges, [flat.size]))
        runs = np.diff(bounds)
        return f"{h}x{w}/{self.s}:{int(flat[0])}:" + ",".join(map(str, runs))

    @classmethod
    def from_rle(cls, text: str) -> "CoarseMask":
        head, first, body = text.strip().split(":")
        dims, s = head.split("/")
        h, w = (int(v) for v in dims.split("x"))
        runs = [int(v) for v in body.split(",")] if body else []
        if sum(runs) != h * w:
            raise ShapeError(f"RLE runs cover {sum(runs)} cells, expected {h * w}")
        vals = np.empty(h * w, dtype=np.uint8)
        pos, v = 0, int(first)
        for n in runs:
            vals[pos:pos + n] = v
            pos += n
            v = 1 - v
        return cls(vals.reshape(h, w), int(s))


@dataclass(frozen=True, eq=False)
class SoftMask:
    """Per-location two-way probabilities, Gumbel noise and temperature."""

    probs: np.ndarray
    gumbel_noise: np.ndarray
    tau: float

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        g = np.asarray(self.gumbel_noise, dtype=np.float64)
        if p.ndim != 3 or p.shape[-1] != 2 or g.shape != p.shape:
            raise ShapeError("probs and gumbel_noise must both be H x W x 2")
        if not self.tau > 0:
            raise DomainError("tau must be positive")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "gumbel_noise", g)


@dataclass(frozen=True)
class PatchIndexList:
    indices: tuple[tuple[int, int], ...]
    total_cells: int

    def __len__(self):
        return len(self.indices)

    def as_array(self) -> np.ndarray:
        return np.array(self.indices, dtype=np.int64).reshape(-1, 2)


def activation_rate(mask: SpatialMask | CoarseMask) -> float:
    g = mask.grid
    if g.size == 0:
        raise ShapeError("activation rate of an empty mask is undefined")
    return float(g.sum()) / g.size


def upsample(coarse: CoarseMask) -> SpatialMask:
    s = coarse.s
    return SpatialMask(np.kron(coarse.grid, np.ones((s, s), dtype=np.uint8)))


def patch_indices(coarse: CoarseMask) -> PatchIndexList:
    rows, cols = np.nonzero(coarse.grid)  # row-major order
    return PatchIndexList(tuple(zip(rows.tolist(), cols.tolist())), coarse.grid.size)


def gumbel_forward(soft: SoftMask) -> np.ndarray:
    """Relaxed probability of channel 0 at every location."""
    if (soft.probs <= 0).any():
        raise DomainError("probabilities must be strictly positive")
    z = (np.log(soft.probs) + soft.gumbel_noise) / soft.tau
    # two-way softmax written as a logistic of the logit gap, stable for tiny tau
    d = z[..., 1] - z[..., 0]
    out = np.empty_like(d)
    pos = d >= 0
    e = np.exp(-d[pos])
    out[pos] = e / (1.0 + e)
    out[~pos] = 1.0 / (1.0 + np.exp(d[~pos]))
    return out


def tau_schedule(step: int, total_steps: int) -> float:
    if total_steps < 2 or not 0 <= step < total_steps:
        raise DomainError(f"step {step} outside [0, {total_steps})")
    if step == 0:
        return TAU_START
    if step == total_steps - 1:
        return TAU_END
    return TAU_START * (TAU_END / TAU_START) ** (step / (total_steps - 1))


def sample_gumbel(shape, seed: int | np.random.Generator | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-300, 1.0)))


def synth_mask(h_cells: int, w_cells: int, target_r: float, seed: int, s: int = 1) -> CoarseMask:
    """Uniform-random coarse mask with exactly ``round(target_r * cells)`` ones."""
    if not 0.0 <= target_r <= 1.0:
        raise DomainError(f"target rate {target_r} outside [0, 1]")
    cells = h_cells * w_cells
    k = int(math.floor(target_r * cells + 0.5))
    rng = np.random.default_rng(seed)
    flat = np.zeros(cells, dtype=np.uint8)
    flat[rng.choice(cells, size=k, replace=False)] = 1
    return CoarseMask(flat.reshape(h_cells, w_cells), s)
