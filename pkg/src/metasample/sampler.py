"""Sample patterns: an explicit, learnable (n, 3) set of cube coordinates."""

from __future__ import annotations

import dataclasses
import warnings
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from . import brdf_core as bc


class BadSchedule(ValueError):
    pass


def random_valid(count: int, rng_seed) -> np.ndarray:
    """``count`` i.i.d. points uniform over the valid region (rejection sampling)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    out = []
    have = 0
    while have < count:
        batch = rng.random((int((count - have) / bc.VALID_FRACTION) + 16, 3))
        batch = batch[bc.is_valid(batch)]
        out.append(batch)
        have += batch.shape[0]
    return np.concatenate(out)[:count]


def sobol_valid(count: int, skip: int = 0) -> tuple[np.ndarray, int]:
    """First ``count`` valid points of the unscrambled 3D Sobol sequence.

    The origin (index 0) is never used; ``skip`` further points are passed
    over. Returns the points and the number of sequence points consumed, so
    a later call can continue where this one stopped.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    engine = qmc.Sobol(d=3, scramble=False)
    engine.fast_forward(1 + skip)
    out, used = [], 0
    have = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        while have < count:
            k = max(8, 2 * (count - have))
            pts = engine.random(k)
            ok = bc.is_valid(pts)
            take = np.flatnonzero(ok)[: count - have]
            if take.size < count - have:
                used += k
            else:
                used += int(take[-1]) + 1
            out.append(pts[take])
            have += take.size
    return np.concatenate(out), skip + used


def sobol_init(count: int, skip: int = 0) -> np.ndarray:
    return sobol_valid(count, skip)[0]


@dataclasses.dataclass
class SamplePattern:
    """Learnable sample coordinates; order carries no meaning."""

    coords: np.ndarray
    sobol_cursor: int = 0

    def __post_init__(self):
        self.coords = np.array(self.coords, dtype=np.float64).reshape(-1, 3)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def clamp(self) -> "SamplePattern":
        np.clip(self.coords, 0.0, 1.0, out=self.coords)
        return self

    def valid_fraction(self) -> float:
        return float(bc.is_valid(self.coords).mean())

    def copy(self) -> "SamplePattern":
        return SamplePattern(self.coords.copy(), self.sobol_cursor)

    def save(self, path) -> None:
        lines = [f"# sobol_cursor {self.sobol_cursor}"]
        lines += [f"{u!r} {v!r} {w!r}" for u, v, w in self.coords.tolist()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SamplePattern":
        cursor, rows = 0, []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "sobol_cursor":
                    cursor = int(parts[1])
                continue
            rows.append([float(t) for t in line.split()])
        return cls(np.array(rows), cursor)

    @classmethod
    def from_sobol(cls, count: int, skip: int = 0) -> "SamplePattern":
        pts, cursor = sobol_valid(count, skip)
        return cls(pts, cursor)


def grow(pattern: SamplePattern, new_n: int) -> SamplePattern:
    """Double a pattern: keep every learned point, add fresh Sobol points."""
    if new_n != 2 * pattern.n:
        raise BadSchedule(f"grow must double the pattern ({pattern.n} -> {2 * pattern.n}), got {new_n}")
    pts, cursor = sobol_valid(new_n - pattern.n, pattern.sobol_cursor)
    return SamplePattern(np.concatenate([pattern.coords, pts]), cursor)


@dataclasses.dataclass(frozen=True)
class DoublingSchedule:
    n_max: int
    guesses_per_stage: int = 8

    def __post_init__(self):
        if not 1 <= self.n_max <= 512 or self.n_max & (self.n_max - 1):
            raise BadSchedule("n_max must be a power of two in [1, 512]")

    @property
    def targets(self) -> list[int]:
        out, n = [], 1
        while n <= self.n_max:
            out.append(n)
            n *= 2
        return out


def star_discrepancy_estimate(points: np.ndarray, n_random: int = 20_000, seed: int = 0) -> float:
    """Lower-bound estimate of the L-infinity star discrepancy in the unit cube.

    Tests anchored boxes whose far corners are the points themselves plus
    random corners, counting both open and closed boxes.
    """
    points = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    corners = np.concatenate([points, rng.random((n_random, points.shape[1]))])
    best = 0.0
    n = points.shape[0]
    for lo in range(0, corners.shape[0], 2048):
        c = corners[lo:lo + 2048]
        vol = np.prod(c, axis=1)
        closed = np.all(points[None] <= c[:, None], axis=2).sum(axis=1) / n
        opened = np.all(points[None] < c[:, None], axis=2).sum(axis=1) / n
        best = max(best, float(np.max(closed - vol)), float(np.max(vol - opened)))
    return best
