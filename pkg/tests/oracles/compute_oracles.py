"""Recompute the frozen oracle values in ``frozen.json``.

Run from the repository root: ``python3 tests/oracles/compute_oracles.py``.
The geometry here is written independently of the package (scipy rotations
instead of the closed-form trig used by ``brdf_core``).
"""

import json
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.stats import qmc


def forward(x):
    """Half/difference construction with explicit rotation matrices."""
    th, td, pd = x[:, 0] * np.pi / 2, x[:, 1] * np.pi / 2, x[:, 2] * np.pi
    z = np.array([0.0, 0.0, 1.0])
    d = Rotation.from_euler("ZY", np.stack([pd, td], 1)).apply(z)
    wi = Rotation.from_euler("Y", th).apply(d)
    h = Rotation.from_euler("Y", th).apply(z)
    wo = 2 * np.sum(h * wi, axis=1, keepdims=True) * h - wi
    return wi, wo


def valid(x):
    wi, wo = forward(x)
    return (wi[:, 2] > 0) & (wo[:, 2] > 0)


def main():
    out = {}
    rng = np.random.default_rng(20240101)
    n, hits, us, us2 = 10_000_000, 0, 0.0, 0.0
    for _ in range(n // 1_000_000):
        x = rng.random((1_000_000, 3))
        ok = valid(x)
        hits += int(ok.sum())
        us += float(x[ok, 0].sum())
        us2 += float((x[ok, 0] ** 2).sum())
    p = hits / n
    mu = us / hits
    out["valid_fraction"] = round(p, 5)
    out["valid_fraction_std"] = float(np.sqrt(p * (1 - p) / n))
    out["valid_mean_u"] = round(mu, 5)
    out["valid_u_std"] = float(np.sqrt(us2 / hits - mu * mu))

    x = np.array([[0.5, 0.25, 0.5]])
    wi, wo = forward(x)
    out["forward_0.5_0.25_0.5"] = {"omega_in": wi[0].tolist(), "omega_out": wo[0].tolist()}

    eng = qmc.Sobol(d=3, scramble=False)
    pts = eng.random(64)[1:]
    pts = pts[valid(pts)][:4]
    out["sobol_first_valid"] = pts.tolist()

    # Phong at normal incidence with kd = ks = 0.25, q = 1
    out["phong_normal_quarter"] = 0.25 / np.pi + 0.25 * 3 / (2 * np.pi)

    Path(__file__).with_name("frozen.json").write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
