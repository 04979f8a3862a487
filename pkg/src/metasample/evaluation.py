"""Image metrics, a deterministic sphere renderer and experiment reports."""

from __future__ import annotations

import csv
import dataclasses
import math
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from . import brdf_core as bc


class DimMismatch(ValueError):
    pass


# --------------------------------------------------------------------- render


def fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


@dataclasses.dataclass
class RenderConfig:
    """Orthographic view along -z onto a unit sphere lit by a fixed light set.

    The default lights are 64 Fibonacci-sphere directions with a procedural
    sky (world up is +y) and one bright "sun" light. ``lights`` overrides
    them with an explicit ``(directions, radiances)`` pair.
    """

    size: int = 256
    n_lights: int = 64
    exposure: float = 1.0
    gamma: float = 2.2
    sun_direction: tuple = (0.5, 0.7, 0.5)
    sun_radiance: float = 6.0
    sky_zenith: tuple = (0.35, 0.45, 0.65)
    sky_ground: tuple = (0.08, 0.07, 0.06)
    lights: tuple | None = None
    chunk: int = 262_144

    def light_set(self):
        if self.lights is not None:
            d, L = self.lights
            return np.atleast_2d(np.asarray(d, float)), np.atleast_2d(np.asarray(L, float))
        d = fibonacci_sphere(self.n_lights)
        t = (d[:, 1:2] + 1.0) / 2.0
        L = (1.0 - t) * np.asarray(self.sky_ground) + t * np.asarray(self.sky_zenith)
        sun = np.asarray(self.sun_direction, float)
        sun = sun / np.linalg.norm(sun)
        L[int(np.argmax(d @ sun))] += self.sun_radiance
        return d, L


def _frames(n):
    a = np.where(np.abs(n[:, 1:2]) < 0.9, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]])
    t = np.cross(a, n)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    b = np.cross(n, t)
    return t, b


def render_sphere(evalfn: Callable[[np.ndarray], np.ndarray], cfg: RenderConfig | None = None) -> np.ndarray:
    """Linear RGB image (size, size, 3); ``evalfn`` maps valid (k, 3) coords to (k, 3) RGB."""
    cfg = cfg or RenderConfig()
    s = cfg.size
    c = (np.arange(s) + 0.5) / s * 2.0 - 1.0
    X, Y = np.meshgrid(c, -c)
    r2 = X * X + Y * Y
    on = r2 < 1.0
    n = np.stack([X[on], Y[on], np.sqrt(1.0 - r2[on])], axis=1)
    t, b = _frames(n)
    view = np.array([0.0, 0.0, 1.0])
    wo = np.stack([t @ view, b @ view, n @ view], axis=1)
    dirs, rad = cfg.light_set()
    out = np.zeros((n.shape[0], 3))
    for d, L in zip(dirs, rad):
        wi = np.stack([t @ d, b @ d, n @ d], axis=1)
        lit = (wi[:, 2] > 0) & (wo[:, 2] > 0)
        if not lit.any():
            continue
        idx = np.flatnonzero(lit)
        coords = np.clip(bc.directions_to_coord(wi[idx], wo[idx]), 0.0, 1.0)
        ok = bc.is_valid(coords)
        idx, coords = idx[ok], coords[ok]
        for lo in range(0, idx.size, cfg.chunk):
            sl = slice(lo, lo + cfg.chunk)
            f = np.asarray(evalfn(coords[sl]), dtype=np.float64)
            out[idx[sl]] += f * L * wi[idx[sl], 2:3]
    img = np.zeros((s, s, 3))
    img[on] = out
    return img


def tonemap(img, exposure: float = 1.0, gamma: float = 2.2) -> np.ndarray:
    return np.clip(np.asarray(img) * exposure, 0.0, 1.0) ** (1.0 / gamma)


def table_evalfn(table: bc.BrdfTable):
    return lambda x: bc.lookup(table, x)


def model_evalfn(model, theta):
    """Evaluation callback for fitted parameters of any model kind."""
    theta = np.asarray(theta, dtype=np.float64)

    def f(x):
        with ad.no_grad():
            return model.predict(theta, model.features(ad.const(x))).value

    return f


# -------------------------------------------------------------------- metrics


def _check(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def l2(a, b) -> float:
    a, b = _check(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for peak 1.0; +inf for identical images."""
    err = l2(a, b)
    if err == 0.0:
        return math.inf
    return -10.0 * math.log10(err)


def ssim_map(a, b, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0):
    a, b = _check(a, b)
    if a.ndim == 3:
        return np.stack([ssim_map(a[..., i], b[..., i], sigma, k1, k2, data_range) for i in range(a.shape[2])], -1)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    # truncate=3.5 with sigma=1.5 gives the usual 11x11 window
    blur = lambda z: gaussian_filter(z, sigma, truncate=3.5, mode="reflect")
    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a ** 2
    sbb = blur(b * b) - mu_b ** 2
    sab = blur(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))


def ssim(a, b) -> float:
    m = ssim_map(a, b)
    pad = 5
    return float(m[pad:-pad, pad:-pad].mean())


def dssim(a, b) -> float:
    """(1 - SSIM) / 2 on gamma-encoded images."""
    return (1.0 - ssim(a, b)) / 2.0


def image_metrics(reference_linear, test_linear, cfg: RenderConfig | None = None) -> dict:
    cfg = cfg or RenderConfig()
    a = tonemap(reference_linear, cfg.exposure, cfg.gamma)
    b = tonemap(test_linear, cfg.exposure, cfg.gamma)
    return {"dssim": dssim(a, b), "l2": l2(a, b), "psnr": psnr(a, b)}


# -------------------------------------------------------------------- image io


def write_png(path, img_display) -> None:
    from PIL import Image

    data = np.round(np.clip(np.asarray(img_display), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def write_pfm(path, img_linear) -> None:
    img = np.asarray(img_linear, dtype="<f4")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if img.ndim == 3 else b"Pf\n")
        fh.write(f"{w} {h}\n-1.0\n".encode())
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


# --------------------------------------------------------------------- report


METRICS = ("loss", "dssim", "l2", "psnr", "mapped")


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return repr(v)
    return str(v)


@dataclasses.dataclass
class Report:
    """Per-task metric rows plus aggregates recomputed from them."""

    rows: list = dataclasses.field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)

    def groups(self, keys=("model", "method", "n")) -> dict:
        out: dict = {}
        for r in self.rows:
            out.setdefault(tuple(r[k] for k in keys), []).append(r)
        return out

    def aggregates(self, keys=("model", "method", "n")) -> list[dict]:
        res = []
        for key, rows in sorted(self.groups(keys).items(), key=lambda kv: tuple(map(str, kv[0]))):
            agg = dict(zip(keys, key))
            for m in METRICS:
                vals = [r[m] for r in rows if m in r]
                if vals:
                    agg[m] = math.fsum(vals) / len(vals)
            agg["count"] = len(rows)
            res.append(agg)
        return res

    def mean(self, metric: str, **where) -> float:
        vals = [r[metric] for r in self.rows if all(r.get(k) == v for k, v in where.items())]
        return math.fsum(vals) / len(vals)

    def sweep(self, metric: str = "loss") -> dict:
        """{(model, method): [(n, mean), ...]} for quality-vs-sample-count plots."""
        out: dict = {}
        for agg in self.aggregates():
            out.setdefault((agg["model"], agg["method"]), []).append((agg["n"], agg[metric]))
        return {k: sorted(v) for k, v in out.items()}

    def per_task(self, model, n, metric: str = "loss", sort_by: str = "ours") -> list[dict]:
        """Per-task means by method, sorted by ``sort_by`` in decreasing order."""
        table: dict = {}
        for r in self.rows:
            if r["model"] == model and r["n"] == n:
                table.setdefault(r["task"], {}).setdefault(r["method"], []).append(r[metric])
        rows = [{"task": t, **{m: math.fsum(v) / len(v) for m, v in d.items()}} for t, d in table.items()]
        return sorted(rows, key=lambda r: (-r.get(sort_by, 0.0), r["task"]))

    def write_csv(self, path) -> None:
        if not self.rows:
            Path(path).write_text("")
            return
        keys = list(self.rows[0].keys())
        for r in self.rows:
            keys += [k for k in r if k not in keys]
        _write_csv(path, keys, self.rows)

    def write_aggregates_csv(self, path) -> None:
        aggs = self.aggregates()
        keys = ["model", "method", "n", *[m for m in METRICS if any(m in a for a in aggs)], "count"]
        _write_csv(path, keys, aggs)

    def markdown(self, n=None) -> str:
        """Method rows by model column groups, one block per sample count."""
        aggs = self.aggregates()
        ns = sorted({a["n"] for a in aggs}) if n is None else [n]
        models = sorted({a["model"] for a in aggs})
        methods = []
        for a in aggs:
            if a["method"] not in methods:
                methods.append(a["method"])
        metrics = [m for m in METRICS if any(m in a for a in aggs)]
        lines = []
        for nn in ns:
            lines.append(f"### n = {nn}\n")
            head = "| method | " + " | ".join(f"{mo} {me}" for mo in models for me in metrics) + " |"
            lines += [head, "|" + "---|" * (1 + len(models) * len(metrics))]
            for me in methods:
                cells = []
                for mo in models:
                    hit = [a for a in aggs if a["model"] == mo and a["method"] == me and a["n"] == nn]
                    for metric in metrics:
                        cells.append(f"{hit[0][metric]:.4f}" if hit and metric in hit[0] else "---")
                lines.append(f"| {me} | " + " | ".join(cells) + " |")
            lines.append("")
        return "\n".join(lines)


def _write_csv(path, keys, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in keys])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
