"""Checkpoints, flat key-value configs, CSV logs and run manifests.

Checkpoints use a small fixed binary layout instead of ``np.savez``: zip
archives embed modification times, and run directories must be
byte-reproducible.

Layout (little endian)::

    b"MSCK" | u32 version | str kind | u32 count | count * entry
    entry = str name | u32 ndim | ndim * u64 shape | float64 data
    str   = u32 length | utf-8 bytes
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .meta import OptimizerState
from .models import BRDFPCA

MAGIC = b"MSCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ checkpoint


def _w_str(fh, s: str):
    b = s.encode("utf-8")
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _r_exact(fh, k: int) -> bytes:
    b = fh.read(k)
    if len(b) != k:
        raise CheckpointError("truncated checkpoint")
    return b


def _r_str(fh) -> str:
    (k,) = struct.unpack("<I", _r_exact(fh, 4))
    return _r_exact(fh, k).decode("utf-8")


def save_arrays(path, kind: str, arrays: dict) -> None:
    """Write named float64 arrays in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _w_str(fh, kind)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype="<f8")  # tobytes() is C order; keeps 0-d shapes
            _w_str(fh, name)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes())


def load_arrays(path, kind: str | None = None) -> tuple[str, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        (version,) = struct.unpack("<I", _r_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        got = _r_str(fh)
        if kind is not None and got != kind:
            raise CheckpointError(f"expected a {kind!r} checkpoint, found {got!r}")
        (count,) = struct.unpack("<I", _r_exact(fh, 4))
        out = {}
        for _ in range(count):
            name = _r_str(fh)
            (ndim,) = struct.unpack("<I", _r_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}Q", _r_exact(fh, 8 * ndim))
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(_r_exact(fh, 8 * size), dtype="<f8").reshape(shape).copy()
    return got, out


def save_optimizer(path, phi: OptimizerState, model_kind: str) -> None:
    save_arrays(path, f"optimizer/{model_kind}", {"init": phi.init, "step_sizes": phi.step_sizes})


def load_optimizer(path, model_kind: str | None = None) -> tuple[OptimizerState, str]:
    kind, arr = load_arrays(path)
    if not kind.startswith("optimizer/"):
        raise CheckpointError(f"{path} holds {kind!r}, not an optimizer")
    found = kind.split("/", 1)[1]
    if model_kind is not None and found != model_kind:
        raise CheckpointError(f"optimizer was trained for {found!r}, not {model_kind!r}")
    return OptimizerState(arr["init"], arr["step_sizes"]), found


def save_params(path, theta, model_kind: str) -> None:
    save_arrays(path, f"params/{model_kind}", {"theta": np.asarray(theta)})


def load_params(path) -> tuple[np.ndarray, str]:
    kind, arr = load_arrays(path)
    if not kind.startswith("params/"):
        raise CheckpointError(f"{path} holds {kind!r}, not fitted parameters")
    return arr["theta"], kind.split("/", 1)[1]


def save_basis(path, pca: BRDFPCA) -> None:
    save_arrays(path, "basis", {
        "hyper": np.array([pca.n_components, pca.eps, pca.n_observations_]),
        "components": pca.components_,
        "singular_values": pca.singular_values_,
        "mean": pca.mean_,
        "median": pca.median_,
    })


def load_basis(path) -> BRDFPCA:
    _, arr = load_arrays(path, "basis")
    m, eps, n_obs = arr["hyper"]
    pca = BRDFPCA(n_components=int(m), eps=float(eps))
    pca.components_ = arr["components"]
    pca.singular_values_ = arr["singular_values"]
    pca.basis_ = pca.components_ * pca.singular_values_[:, None, None, None]
    pca.mean_ = arr["mean"]
    pca.median_ = arr["median"]
    pca.n_observations_ = int(n_obs)
    pca._stack = None
    return pca


# --------------------------------------------------------------------- config


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, (list, tuple)):
        items = [t.strip() for t in raw.split(",") if t.strip()]
        proto = default[0] if default else ""
        return [_parse_value(t, proto) for t in items]
    return raw


def coerce(schema: dict, key: str, raw):
    if key not in schema:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        raw = ",".join(map(str, raw)) if isinstance(raw, (list, tuple)) else str(raw)
    try:
        return _parse_value(raw, schema[key])
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


def parse_config(text: str, schema: dict) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Lists are comma separated."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        out[key] = coerce(schema, key, raw)
    return out


def read_config(path, schema: dict) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), schema)


def format_config(config: dict) -> str:
    lines = []
    for k, v in config.items():
        if isinstance(v, (list, tuple)):
            v = ", ".join(map(str, v))
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------- manifest


def config_hash(command: str, config: dict) -> str:
    blob = json.dumps({"command": command, "config": config}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def versions() -> dict:
    import scipy
    import sklearn

    return {"metasample": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "python": platform.python_version()}


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(run_dir, command: str, config: dict, seeds: dict, outputs=()) -> dict:
    """Self-describing run record; no timestamps so reruns match byte for byte."""
    run_dir = Path(run_dir)
    man = {
        "command": command,
        "config": config,
        "config_hash": config_hash(command, config),
        "seeds": seeds,
        "versions": versions(),
        "outputs": {name: file_digest(run_dir / name) for name in sorted(outputs)},
    }
    (run_dir / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no manifest at {path}")
    return json.loads(path.read_text())


# ------------------------------------------------------------------------ csv


def write_history(path, rows) -> None:
    rows = list(rows)
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r.get(k), float) else r.get(k, "") for k in keys])
