"""BRDF data model: Rusinkiewicz geometry, MERL tables, synthetic tasks.

Sample coordinates live in the unit cube and map to half/difference angles
as ``theta_h = u*pi/2``, ``theta_d = v*pi/2``, ``phi_d = w*pi``. phi_d only
covers [0, pi]: swapping the two directions shifts it by pi, and the tables
are reciprocal.
"""

from __future__ import annotations

import dataclasses
import re
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad

RES_THETA_H = 90
RES_THETA_D = 90
RES_PHI_D = 180
TABLE_SHAPE = (RES_THETA_H, RES_THETA_D, RES_PHI_D, 3)
MERL_SCALE = np.array([1.0 / 1500.0, 1.15 / 1500.0, 1.66 / 1500.0])

# Fraction of the cube that is valid, from 10^7 uniform points (std 1.5e-4).
VALID_FRACTION = 0.61719
# Mean u over the valid region, same run (per-sample std 0.2532).
VALID_MEAN_U = 0.38016

_HALF_PI = 0.5 * np.pi


class InvalidSample(ValueError):
    """A sample coordinate maps below the horizon."""


class FormatError(ValueError):
    """A MERL file has an unexpected layout."""


class DirectionPair(NamedTuple):
    omega_in: np.ndarray
    omega_out: np.ndarray


# -------------------------------------------------------------------- geometry


def _angles_trig(x):
    """sin/cos of the three angles, written so that u or v == 1 gives cos == 0 exactly."""
    u, v, w = x[..., 0], x[..., 1], x[..., 2]
    return (np.sin(u * _HALF_PI), np.sin((1.0 - u) * _HALF_PI),
            np.sin(v * _HALF_PI), np.sin((1.0 - v) * _HALF_PI),
            np.sin(w * np.pi), np.cos(w * np.pi))


def coord_to_directions(x) -> DirectionPair:
    """Map cube coordinates (..., 3) to incoming/outgoing unit vectors (+z = normal)."""
    x = np.asarray(x, dtype=np.float64)
    sh, ch, sd, cd, sp, cp = _angles_trig(x)
    dx, dy, dz = sd * cp, sd * sp, cd
    wi = np.stack([ch * dx + sh * dz, dy, -sh * dx + ch * dz], axis=-1)
    # reflect about h = (sin th, 0, cos th); h . wi = cos td
    h = np.stack([sh, np.zeros_like(sh), ch], axis=-1)
    wo = 2.0 * cd[..., None] * h - wi
    return DirectionPair(wi, wo)


def cosines(x):
    """(cos theta_in, cos theta_out) without building the full vectors."""
    x = np.asarray(x, dtype=np.float64)
    sh, ch, sd, cd, sp, cp = _angles_trig(x)
    a = ch * cd
    b = sh * sd * cp
    return a - b, a + b


def is_valid(x) -> np.ndarray:
    """True where both directions lie strictly above the horizon."""
    ci, co = cosines(x)
    return (ci > 0) & (co > 0)


def directions_to_coord(omega_in, omega_out) -> np.ndarray:
    """Inverse transform, dropping phi_h (isotropy) and folding phi_d into [0, pi)."""
    wi = np.asarray(omega_in, dtype=np.float64)
    wo = np.asarray(omega_out, dtype=np.float64)
    h = wi + wo
    h = h / np.linalg.norm(h, axis=-1, keepdims=True)
    th = np.arccos(np.clip(h[..., 2], -1.0, 1.0))
    ph = np.arctan2(h[..., 1], h[..., 0])
    # d = R_y(-th) R_z(-ph) wi
    c, s = np.cos(-ph), np.sin(-ph)
    x1 = c * wi[..., 0] - s * wi[..., 1]
    y1 = s * wi[..., 0] + c * wi[..., 1]
    z1 = wi[..., 2]
    c, s = np.cos(th), np.sin(th)
    dx = c * x1 - s * z1
    dz = s * x1 + c * z1
    td = np.arccos(np.clip(dz, -1.0, 1.0))
    pd = np.arctan2(y1, dx)
    pd = np.where(pd < 0, pd + np.pi, pd)
    pd = np.where(pd >= np.pi, pd - np.pi, pd)
    return np.stack([th / _HALF_PI, td / _HALF_PI, pd / np.pi], axis=-1)


def canonical_pair(omega_in, omega_out) -> DirectionPair:
    """The pair that ``coord_to_directions(directions_to_coord(...))`` reproduces.

    Rotates about the normal so the half vector has phi_h = 0, and swaps the
    two directions when phi_d had to be folded.
    """
    wi = np.asarray(omega_in, dtype=np.float64)
    wo = np.asarray(omega_out, dtype=np.float64)
    h = wi + wo
    ph = np.arctan2(h[..., 1], h[..., 0])
    c, s = np.cos(-ph)[..., None], np.sin(-ph)[..., None]

    def rot(v):
        return np.stack([c[..., 0] * v[..., 0] - s[..., 0] * v[..., 1],
                         s[..., 0] * v[..., 0] + c[..., 0] * v[..., 1], v[..., 2]], axis=-1)

    ri, ro = rot(wi), rot(wo)
    # folded iff the in-direction's y in the half frame is negative
    hn = h / np.linalg.norm(h, axis=-1, keepdims=True)
    th = np.arccos(np.clip(hn[..., 2], -1.0, 1.0))
    y1 = ri[..., 1]
    x1 = ri[..., 0]
    z1 = ri[..., 2]
    dx = np.cos(th) * x1 - np.sin(th) * z1
    pd = np.arctan2(y1, dx)
    swap = (pd < 0)[..., None]
    return DirectionPair(np.where(swap, ro, ri), np.where(swap, ri, ro))


def directions_ad(x):
    """Differentiable directions for an (n, 3) coordinate Var: (wi, wo) as (n, 3) Vars."""
    u, v, w = x[:, 0], x[:, 1], x[:, 2]
    sh = ad.sin(u * _HALF_PI)
    ch = ad.sin((1.0 - u) * _HALF_PI)
    sd = ad.sin(v * _HALF_PI)
    cd = ad.sin((1.0 - v) * _HALF_PI)
    sp = ad.sin(w * np.pi)
    cp = ad.cos(w * np.pi)
    dx, dy, dz = sd * cp, sd * sp, cd
    wi = ad.stack([ch * dx + sh * dz, dy, ch * dz - sh * dx], axis=1)
    two_cd = cd * 2.0
    wo = ad.stack([two_cd * sh - wi[:, 0], -dy, two_cd * ch - wi[:, 2]], axis=1)
    return wi, wo


def cos_in_ad(x):
    """Differentiable cos(theta_in) for an (n, 3) coordinate Var."""
    u, v, w = x[:, 0], x[:, 1], x[:, 2]
    return (ad.sin((1.0 - u) * _HALF_PI) * ad.sin((1.0 - v) * _HALF_PI)
            - ad.sin(u * _HALF_PI) * ad.sin(v * _HALF_PI) * ad.cos(w * np.pi))


def grid_coords() -> np.ndarray:
    """Cube coordinates of every table vertex, shape (90, 90, 180, 3)."""
    u = (np.arange(RES_THETA_H) / RES_THETA_H) ** 2
    v = np.arange(RES_THETA_D) / RES_THETA_D
    w = np.arange(RES_PHI_D) / RES_PHI_D
    U, V, W = np.meshgrid(u, v, w, indexing="ij")
    return np.stack([U, V, W], axis=-1)


def grid_valid_mask() -> np.ndarray:
    return is_valid(grid_coords())


# ----------------------------------------------------------------------- table


class BrdfTable:
    """Dense (90, 90, 180, 3) reflectance table, immutable after construction.

    Negative and non-finite entries are clamped to 0. Tables read from MERL
    files keep their raw payload so an unmodified table re-saves bit-exactly.
    """

    __slots__ = ("values", "name", "raw")

    def __init__(self, values, name: str = "", raw: np.ndarray | None = None):
        values = np.array(values, dtype=np.float64)
        if values.shape != TABLE_SHAPE:
            raise FormatError(f"table must have shape {TABLE_SHAPE}, got {values.shape}")
        values[~np.isfinite(values)] = 0.0
        np.maximum(values, 0.0, out=values)
        values.setflags(write=False)
        if raw is not None:
            raw = np.asarray(raw, dtype="<f8")
            raw.setflags(write=False)
        self.values = values
        self.name = name
        self.raw = raw

    def __repr__(self):
        return f"BrdfTable({self.name!r})"


def coord_to_index_ad(x):
    """Continuous grid indices for an (n, 3) coordinate Var (theta_h uses the sqrt warp)."""
    th = ad.sqrt(ad.max_with_const(x[:, 0], 1e-12)) * float(RES_THETA_H)
    td = x[:, 1] * float(RES_THETA_D)
    pd = x[:, 2] * float(RES_PHI_D)
    return ad.stack([th, td, pd], axis=1)


def lookup_ad(values: np.ndarray, x):
    """Differentiable trilinear lookup of a raw (90, 90, 180, C) array at a coordinate Var."""
    return ad.gather_trilinear(values, coord_to_index_ad(x))


def lookup(table: BrdfTable, x) -> np.ndarray:
    """Trilinear RGB lookup at valid coordinates, shape (n, 3)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.all(is_valid(x)):
        raise InvalidSample("lookup at a coordinate below the horizon")
    with ad.no_grad():
        return lookup_ad(table.values, ad.const(x)).value


def lookup_grad(table: BrdfTable, x) -> np.ndarray:
    """Jacobian d lookup / dx, shape (n, 3 channels, 3 coords)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.all(is_valid(x)):
        raise InvalidSample("lookup at a coordinate below the horizon")
    tape = ad.Tape()
    xv = tape.var(x)
    y = lookup_ad(table.values, xv)
    rows = []
    for c in range(3):
        (g,) = ad.grad(ad.sum(y[:, c]), [xv])
        rows.append(g.value)
    return np.stack(rows, axis=1)


# -------------------------------------------------------------------- MERL I/O


def load_merl(path) -> BrdfTable:
    """Read a MERL ``.binary`` file (int32 dims, then float64 channel-major data)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12:
            raise FormatError(f"{path}: truncated header")
        dims = tuple(int(d) for d in np.frombuffer(head, dtype="<i4"))
        if dims != TABLE_SHAPE[:3]:
            raise FormatError(f"{path}: dimensions {dims}, expected {TABLE_SHAPE[:3]}")
        count = 3 * RES_THETA_H * RES_THETA_D * RES_PHI_D
        raw = np.frombuffer(fh.read(), dtype="<f8")
    if raw.size != count:
        raise FormatError(f"{path}: payload has {raw.size} values, expected {count}")
    raw = raw.reshape(3, *TABLE_SHAPE[:3])
    values = np.moveaxis(raw, 0, -1) * MERL_SCALE
    return BrdfTable(values, name=path.stem, raw=raw.copy())


def _unscale(values: np.ndarray) -> np.ndarray:
    """Raw MERL values that reload to ``values`` whenever such values exist."""
    raw = values / MERL_SCALE
    for _ in range(4):
        back = raw * MERL_SCALE
        bad = back != values
        if not bad.any():
            break
        step = np.where(back < values, np.inf, -np.inf)
        raw = np.where(bad, np.nextafter(raw, step), raw)
    return raw


def save_merl(table: BrdfTable, path) -> None:
    """Write a table in MERL layout (inverse of :func:`load_merl`)."""
    if table.raw is not None:
        raw = table.raw
    else:
        raw = np.moveaxis(_unscale(table.values), -1, 0)
    with open(path, "wb") as fh:
        fh.write(np.array(TABLE_SHAPE[:3], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(raw, dtype="<f8").tobytes())


# ------------------------------------------------------------------- synthetic


@dataclasses.dataclass(frozen=True)
class Lobe:
    kd: tuple[float, float, float]
    ks: tuple[float, float, float]
    q: float


@dataclasses.dataclass(frozen=True)
class SyntheticBrdfSpec:
    lobes: tuple[Lobe, ...]
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        for lobe in self.lobes:
            if lobe.q <= 0:
                raise ValueError("lobe exponent must be positive")
            total = np.add(lobe.kd, lobe.ks)
            if np.any(np.asarray(lobe.kd) < 0) or np.any(np.asarray(lobe.ks) < 0) or np.any(total > 1.0 + 1e-12):
                raise ValueError("lobe needs 0 <= kd, ks and kd + ks <= 1")

    @property
    def label(self) -> str:
        """'specular' when any lobe has a noticeable glossy part, else 'diffuse'."""
        for lobe in self.lobes:
            if max(lobe.ks) >= 0.1 and lobe.q >= 10:
                return "specular"
        return "diffuse"

    def to_text(self) -> str:
        lines = [f"name {self.name}", f"seed {self.seed}"]
        for lb in self.lobes:
            kd = ",".join(repr(float(c)) for c in lb.kd)
            ks = ",".join(repr(float(c)) for c in lb.ks)
            lines.append(f"lobe kd={kd} ks={ks} q={float(lb.q)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SyntheticBrdfSpec":
        name, seed, lobes = "", 0, []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, rest = line.partition(" ")
            if key == "name":
                name = rest.strip()
            elif key == "seed":
                seed = int(rest)
            elif key == "lobe":
                fields = dict(kv.split("=", 1) for kv in rest.split())
                kd = tuple(float(c) for c in fields["kd"].split(","))
                ks = tuple(float(c) for c in fields["ks"].split(","))
                lobes.append(Lobe(kd, ks, float(fields["q"])))
            else:
                raise ValueError(f"unknown key {key!r} in synthetic spec")
        return cls(tuple(lobes), seed, name)


def phong_lobes(x, lobes: Sequence[Lobe]) -> np.ndarray:
    """Sum of physical Phong lobes at cube coordinates; 0 where invalid."""
    x = np.asarray(x, dtype=np.float64)
    wi, wo = coord_to_directions(x)
    # r = mirror of wi about the normal
    cos_r = -wo[..., 0] * wi[..., 0] - wo[..., 1] * wi[..., 1] + wo[..., 2] * wi[..., 2]
    cos_r = np.maximum(cos_r, 0.0)
    out = np.zeros(x.shape[:-1] + (3,))
    for lb in lobes:
        spec = (lb.q + 2.0) / (2.0 * np.pi) * cos_r ** lb.q
        out += np.asarray(lb.kd) / np.pi + np.asarray(lb.ks) * spec[..., None]
    valid = (wi[..., 2] > 0) & (wo[..., 2] > 0)
    out[~valid] = 0.0
    return out


def synth_brdf(spec: SyntheticBrdfSpec) -> BrdfTable:
    """Tabulate a synthetic spec on the MERL grid."""
    return BrdfTable(phong_lobes(grid_coords(), spec.lobes), name=spec.name)


def random_spec(rng: np.random.Generator, name: str = "", seed: int = 0) -> SyntheticBrdfSpec:
    """Draw a Phong-mixture spec: one or two lobes, diffuse to fairly glossy."""
    lobes = []
    count = 1 if rng.random() < 0.6 else 2
    for _ in range(count):
        base = rng.uniform(0.05, 1.0, size=3)
        ksum = rng.uniform(0.2, 0.9) / count
        ratio = rng.uniform(0.1, 1.0)
        kd = ksum * ratio * base / base.max()
        ks = np.full(3, ksum * (1.0 - ratio)) * rng.uniform(0.7, 1.0, size=3)
        q = float(np.exp(rng.uniform(np.log(2.0), np.log(200.0))))
        lobes.append(Lobe(tuple(float(c) for c in kd), tuple(float(c) for c in ks), q))
    return SyntheticBrdfSpec(tuple(lobes), seed=seed, name=name)


def synthetic_family(count: int, seed: int, prefix: str = "synth") -> list[SyntheticBrdfSpec]:
    rng = np.random.default_rng(seed)
    return [random_spec(rng, name=f"{prefix}_{i:04d}", seed=seed) for i in range(count)]


_SPEC_SUFFIX = ".brdfspec"


def load_table(path) -> BrdfTable:
    """Load a MERL ``.binary`` or a synthetic ``.brdfspec`` as a table."""
    path = Path(path)
    if path.suffix == _SPEC_SUFFIX:
        return synth_brdf(SyntheticBrdfSpec.from_text(path.read_text()))
    return load_merl(path)


def dataset_files(root) -> list[Path]:
    root = Path(root)
    files = sorted(p for p in root.iterdir() if p.suffix in (".binary", _SPEC_SUFFIX))
    return files


def label_of(path, labels: dict[str, str] | None = None) -> str:
    """'diffuse' or 'specular' for a dataset file."""
    path = Path(path)
    if path.suffix == _SPEC_SUFFIX:
        return SyntheticBrdfSpec.from_text(path.read_text()).label
    name = path.stem
    if labels and name in labels:
        return labels[name]
    return "specular" if re.search(r"metal|chrome|steel|alum|gold|silver|brass|nickel|specular|phenolic", name) else "diffuse"
