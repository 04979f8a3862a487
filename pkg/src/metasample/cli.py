"""Command-line recipes. Every command writes into one run directory with a manifest.

Usage::

    metasample <command> [--config FILE] [--run-dir DIR] [--from-manifest RUN] [--<key> VALUE ...]

Config files are flat ``key = value`` text; command-line flags override
them. The dataset root falls back to ``$METASAMPLE_DATA``.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import baselines
from . import brdf_core as bc
from . import evaluation as ev
from . import io
from .experiment import ExperimentConfig, MissingCheckpoint, ModelCheckpoints, run_experiment
from .meta import (MetaConfig, OptimizerState, evaluate, fit_task, metatrain_optimizer,
                   metatrain_sampler)
from .models import BRDFPCA, make_model
from .sampler import DoublingSchedule, SamplePattern, random_valid

log = logging.getLogger("metasample")

DATA_ENV = "METASAMPLE_DATA"

# Defaults double as type declarations for the config parser.
META_KEYS = {
    "split": "", "model": "phong", "basis": "", "n": 8, "inner_steps": 20, "outer_steps": 5000,
    "eval_count": 512, "seed": 0, "first_order": False,
}

SCHEMAS = {
    "import-merl": {"src": "", "labels": ""},
    "synth-dataset": {"count": 50, "seed": 0, "prefix": "synth"},
    "split": {"data": "", "seed": 0, "train_fraction": 0.8, "subset": "all"},
    "pca-build": {"split": "", "m": 5, "eps": 1e-3},
    "meta-train-phi": {**META_KEYS, "lr": 1e-4, "metasgd_init": 1e-3},
    "meta-train-xi": {**META_KEYS, "phi": "", "lr": 5e-4, "guesses": 8, "init": ""},
    "njr15": {"basis": "", "n": 8, "restarts": 4, "seed": 0, "pool_size": 100_000,
              "max_iter": 1000, "eta": 40.0},
    "fit": {"task": "", "data": "", "model": "phong", "basis": "", "phi": "", "pattern": "",
            "method": "ours", "n": 8, "steps": 20, "lr": 1e-3, "seed": 0},
    "eval": {"fit": "", "eval_count": 4096, "seed": 99, "size": 256},
    "render": {"task": "", "data": "", "fit": "", "size": 256, "exposure": 1.0},
    "plot-pattern": {"pattern": "", "title": ""},
    "experiment": {
        "split": "", "models": ["phong"], "methods": ["random", "meta", "ours"], "ns": [8],
        "seeds": 5, "inner_steps": 20, "eval_count": 4096, "eval_seed": 99, "random_lr": 1e-3,
        "render": False, "render_size": 64, "checkpoints": "",
        "outer_steps_phi": 5000, "outer_steps_xi": 5000, "lr_phi": 1e-4, "lr_xi": 5e-4,
        "meta_eval_count": 512, "m": 5, "eta": 40.0, "seed": 0,
        "njr_restarts": 4, "njr_pool": 100_000,
    },
}


# ------------------------------------------------------------------ helpers


def _need(cfg, key):
    if cfg.get(key) in ("", None):
        raise io.ConfigError(f"missing required key {key!r}")
    return cfg[key]


def _data_root(cfg) -> Path:
    root = cfg.get("data") or os.environ.get(DATA_ENV, "")
    if not root:
        raise io.ConfigError(f"no dataset root: set 'data' or ${DATA_ENV}")
    root = Path(root).resolve()
    if not root.is_dir():
        raise io.ConfigError(f"dataset root {root} is not a directory")
    cfg["data"] = str(root)
    return root


def bundled_labels() -> dict:
    text = resources.files("metasample").joinpath("data/merl_labels.txt").read_text()
    return _parse_labels(text)


def _parse_labels(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].split()
        if len(line) == 2:
            out[line[0]] = line[1]
    return out


def _labels_for(root: Path) -> dict:
    f = root / "labels.txt"
    return _parse_labels(f.read_text()) if f.exists() else bundled_labels()


def _split_lists(split_dir) -> tuple[Path, list[Path], list[Path]]:
    split_dir = Path(split_dir)
    man = io.read_manifest(split_dir)
    root = Path(man["config"]["data"])
    read = lambda name: [root / s for s in (split_dir / name).read_text().split()]
    return root, read("train.txt"), read("test.txt")


def _load_tables(paths) -> list[bc.BrdfTable]:
    out = []
    for p in paths:
        t = bc.load_table(p)
        if not t.name:
            t = bc.BrdfTable(t.values, name=Path(p).stem)
        out.append(t)
    return out


def _model(kind, basis_dir, eta: float = 40.0):
    basis = io.load_basis(Path(basis_dir) / "basis.ckpt") if kind == "linear" and basis_dir else None
    if kind == "linear" and basis is None:
        raise io.ConfigError("the linear model needs 'basis' (a pca-build run directory)")
    return make_model(kind, basis, eta)


def _meta_config(cfg, **kw) -> MetaConfig:
    return MetaConfig(inner_steps=cfg["inner_steps"], eval_sample_count=cfg["eval_count"],
                      n_samples=cfg["n"], seed=cfg["seed"], first_order=cfg["first_order"], **kw)


def _task_table(cfg) -> bc.BrdfTable:
    task = Path(_need(cfg, "task"))
    if not task.exists():
        task = _data_root(cfg) / task
    if not task.exists():
        raise io.ConfigError(f"task {cfg['task']!r} not found")
    cfg["task"] = str(task.resolve())
    return _load_tables([task])[0]


# ----------------------------------------------------------------- commands


def cmd_import_merl(cfg, run):
    src = Path(_need(cfg, "src"))
    files = sorted(src.glob("*.binary"))
    if not files:
        raise io.ConfigError(f"no .binary files in {src}")
    labels = _parse_labels(Path(cfg["labels"]).read_text()) if cfg["labels"] else bundled_labels()
    out = run / "data"
    out.mkdir(exist_ok=True)
    lines = []
    for f in files:
        bc.load_merl(f)  # validates header and size
        shutil.copyfile(f, out / f.name)
        lines.append(f"{f.stem} {bc.label_of(f, labels)}")
    (out / "labels.txt").write_text("\n".join(lines) + "\n")
    log.info("imported %d tables", len(files))
    return {}, ["data/labels.txt"]


def cmd_synth_dataset(cfg, run):
    out = run / "data"
    out.mkdir(exist_ok=True)
    specs = bc.synthetic_family(cfg["count"], cfg["seed"], cfg["prefix"])
    for s in specs:
        (out / f"{s.name}.brdfspec").write_text(s.to_text())
    (out / "labels.txt").write_text("".join(f"{s.name} {s.label}\n" for s in specs))
    return {"family": cfg["seed"]}, ["data/labels.txt"] + [f"data/{s.name}.brdfspec" for s in specs]


def cmd_split(cfg, run):
    root = _data_root(cfg)
    if cfg["subset"] not in ("all", "diffuse", "specular"):
        raise io.ConfigError("subset must be diffuse, specular or all")
    if not 0.0 < cfg["train_fraction"] < 1.0:
        raise io.ConfigError("train_fraction must lie in (0, 1)")
    files = bc.dataset_files(root)
    labels = _labels_for(root)
    if cfg["subset"] != "all":
        files = [f for f in files if bc.label_of(f, labels) == cfg["subset"]]
    if len(files) < 2:
        raise io.ConfigError(f"need at least two tables, found {len(files)}")
    order = np.random.default_rng(cfg["seed"]).permutation(len(files))
    k = min(max(1, int(round(cfg["train_fraction"] * len(files)))), len(files) - 1)
    train = sorted(files[i].name for i in order[:k])
    test = sorted(files[i].name for i in order[k:])
    (run / "train.txt").write_text("\n".join(train) + "\n")
    (run / "test.txt").write_text("\n".join(test) + "\n")
    return {"split": cfg["seed"]}, ["train.txt", "test.txt"]


def cmd_pca_build(cfg, run):
    _, train, _ = _split_lists(_need(cfg, "split"))
    pca = BRDFPCA(n_components=cfg["m"], eps=cfg["eps"]).fit(_load_tables(train))
    io.save_basis(run / "basis.ckpt", pca)
    return {}, ["basis.ckpt"]


def cmd_meta_train_phi(cfg, run):
    _, train, _ = _split_lists(_need(cfg, "split"))
    model = _model(cfg["model"], cfg["basis"])
    mc = _meta_config(cfg, outer_steps_phi=cfg["outer_steps"], outer_lr_phi=cfg["lr"],
                      metasgd_init=cfg["metasgd_init"])
    phi, hist = metatrain_optimizer(_load_tables(train), model, mc)
    io.save_optimizer(run / "optimizer.ckpt", phi, model.kind)
    io.write_history(run / "history.csv", hist.rows)
    return {"init": [mc.seed, 0], "tasks": [mc.seed, 1]}, ["optimizer.ckpt", "history.csv"]


def cmd_meta_train_xi(cfg, run):
    _, train, _ = _split_lists(_need(cfg, "split"))
    model = _model(cfg["model"], cfg["basis"])
    phi = _load_phi(cfg, model)
    mc = _meta_config(cfg, outer_steps_xi=cfg["outer_steps"], outer_lr_xi=cfg["lr"],
                      guesses=cfg["guesses"])
    initial = SamplePattern.load(cfg["init"]) if cfg["init"] else None
    outputs = []

    def keep(it, pattern, loss):
        if it == mc.outer_steps_xi - 1:
            pattern.save(run / f"pattern_{pattern.n}.txt")
            outputs.append(f"pattern_{pattern.n}.txt")

    pattern, hist = metatrain_sampler(_load_tables(train), phi, model, mc,
                                      DoublingSchedule(cfg["n"], cfg["guesses"]), initial, callback=keep)
    pattern.save(run / "pattern.txt")
    io.write_history(run / "history.csv", hist.rows)
    return {"sampler": [mc.seed, 2]}, sorted(set(outputs)) + ["pattern.txt", "history.csv"]


def _load_phi(cfg, model):
    if model.kind == "linear":
        return OptimizerState(np.zeros(model.n_params), np.zeros(model.n_params))
    phi_dir = _need(cfg, "phi")
    return io.load_optimizer(Path(phi_dir) / "optimizer.ckpt", model.kind)[0]


def cmd_njr15(cfg, run):
    pca = io.load_basis(Path(_need(cfg, "basis")) / "basis.ckpt")
    pat = baselines.njr15_pattern(pca, cfg["n"], cfg["restarts"], cfg["seed"], cfg["eta"],
                                  cfg["pool_size"], cfg["max_iter"])
    pat.save(run / "pattern.txt")
    (run / "condition.txt").write_text(repr(baselines.condition_number(pca, pat.coords, cfg["eta"])) + "\n")
    return {"njr15": cfg["seed"]}, ["pattern.txt", "condition.txt"]


def _pattern_file(path, n):
    p = Path(path)
    if p.is_dir():
        p = p / f"pattern_{n}.txt" if (p / f"pattern_{n}.txt").exists() else p / "pattern.txt"
    if not p.exists():
        raise MissingCheckpoint(f"no pattern at {p}")
    pat = SamplePattern.load(p)
    if pat.n != n:
        raise io.ConfigError(f"pattern {p} has {pat.n} samples, expected n = {n}")
    return pat


def cmd_fit(cfg, run):
    table = _task_table(cfg)
    model = _model(cfg["model"], cfg["basis"])
    method, n = cfg["method"], cfg["n"]
    if method == "random":
        theta = baselines.train_random(model, table, n, cfg["steps"], lr=cfg["lr"], seed=cfg["seed"],
                                       resample=False)
    elif method == "meta":
        theta = fit_task(model, _load_phi(cfg, model), table, random_valid(n, cfg["seed"]), cfg["steps"])
    elif method in ("ours", "njr15"):
        pat = _pattern_file(_need(cfg, "pattern"), n)
        theta = fit_task(model, _load_phi(cfg, model), table, pat.coords, cfg["steps"])
    else:
        raise io.ConfigError(f"unknown method {method!r}")
    io.save_params(run / "params.ckpt", theta, model.kind)
    return {"fit": cfg["seed"]}, ["params.ckpt"]


def _fitted(fit_dir):
    man = io.read_manifest(fit_dir)
    fc = man["config"]
    theta, kind = io.load_params(Path(fit_dir) / "params.ckpt")
    return fc, _model(kind, fc["basis"]), theta, _load_tables([fc["task"]])[0]


def cmd_eval(cfg, run):
    fc, model, theta, table = _fitted(_need(cfg, "fit"))
    rcfg = ev.RenderConfig(size=cfg["size"])
    ref = ev.render_sphere(ev.table_evalfn(table), rcfg)
    img = ev.render_sphere(ev.model_evalfn(model, theta), rcfg)
    metrics = {"loss": evaluate(model, theta, table, cfg["eval_count"], seed=cfg["seed"])}
    metrics.update(ev.image_metrics(ref, img, rcfg))
    rep = ev.Report()
    rep.add(model=model.kind, method=fc["method"], n=fc["n"], task=table.name, **metrics)
    rep.write_csv(run / "metrics.csv")
    ev.write_png(run / "reference.png", ev.tonemap(ref, rcfg.exposure, rcfg.gamma))
    ev.write_png(run / "fit.png", ev.tonemap(img, rcfg.exposure, rcfg.gamma))
    log.info("loss %.6g dssim %.6g l2 %.6g psnr %.4g", *(metrics[k] for k in ("loss", "dssim", "l2", "psnr")))
    return {"eval": cfg["seed"]}, ["metrics.csv", "reference.png", "fit.png"]


def cmd_render(cfg, run):
    rcfg = ev.RenderConfig(size=cfg["size"], exposure=cfg["exposure"])
    if cfg["fit"]:
        _, model, theta, _ = _fitted(cfg["fit"])
        img = ev.render_sphere(ev.model_evalfn(model, theta), rcfg)
    else:
        img = ev.render_sphere(ev.table_evalfn(_task_table(cfg)), rcfg)
    ev.write_pfm(run / "render.pfm", img)
    ev.write_png(run / "render.png", ev.tonemap(img, rcfg.exposure, rcfg.gamma))
    return {}, ["render.pfm", "render.png"]


def cmd_plot_pattern(cfg, run):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pat = SamplePattern.load(_need(cfg, "pattern"))
    names = ("theta_h", "theta_d", "phi_d")
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    ok = bc.is_valid(pat.coords)
    for ax, (a, b) in zip(axes, ((0, 1), (0, 2), (1, 2))):
        ax.scatter(pat.coords[ok, a], pat.coords[ok, b], s=12, c="tab:blue", label="valid")
        if (~ok).any():
            ax.scatter(pat.coords[~ok, a], pat.coords[~ok, b], s=12, c="tab:red", marker="x", label="invalid")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel(names[a])
        ax.set_ylabel(names[b])
        ax.set_aspect("equal")
    axes[0].legend(loc="upper right")
    fig.suptitle(cfg["title"] or f"{pat.n} samples")
    fig.tight_layout()
    fig.savefig(run / "pattern.png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return {}, ["pattern.png"]


def cmd_experiment(cfg, run):
    _, train_paths, test_paths = _split_lists(_need(cfg, "split"))
    ecfg = ExperimentConfig(models=tuple(cfg["models"]), methods=tuple(cfg["methods"]), ns=tuple(cfg["ns"]),
                            seeds=cfg["seeds"], inner_steps=cfg["inner_steps"], eval_count=cfg["eval_count"],
                            eval_seed=cfg["eval_seed"], random_lr=cfg["random_lr"], render=cfg["render"],
                            render_size=cfg["render_size"])
    train = _load_tables(train_paths)
    test = _load_tables(test_paths)
    ck_dir = Path(cfg["checkpoints"]) if cfg["checkpoints"] else run / "checkpoints"
    training = not cfg["checkpoints"]
    ck_dir.mkdir(exist_ok=True)
    outputs = []
    n_max = 1 << (max(ecfg.ns) - 1).bit_length()
    checkpoints = {}
    for kind in ecfg.models:
        basis = None
        if kind == "linear":
            f = ck_dir / "basis.ckpt"
            if training:
                io.save_basis(f, BRDFPCA(cfg["m"]).fit(train))
                outputs.append("checkpoints/basis.ckpt")
            elif not f.exists():
                raise MissingCheckpoint(f"no basis at {f}")
            basis = io.load_basis(f)
        model = make_model(kind, basis, cfg["eta"])
        ck = ModelCheckpoints(model)
        mc = MetaConfig(inner_steps=cfg["inner_steps"], outer_steps_phi=cfg["outer_steps_phi"],
                        outer_steps_xi=cfg["outer_steps_xi"], outer_lr_phi=cfg["lr_phi"],
                        outer_lr_xi=cfg["lr_xi"], eval_sample_count=cfg["meta_eval_count"],
                        n_samples=n_max, seed=cfg["seed"])
        needs_meta = any(m in ecfg.methods for m in ("meta", "ours", "njr15", "meanbrdf"))
        if needs_meta:
            f = ck_dir / f"{kind}_optimizer.ckpt"
            if training:
                phi, hist = metatrain_optimizer(train, model, mc)
                io.save_optimizer(f, phi, kind)
                io.write_history(ck_dir / f"{kind}_phi_history.csv", hist.rows)
                outputs += [f"checkpoints/{f.name}", f"checkpoints/{kind}_phi_history.csv"]
            elif not f.exists():
                raise MissingCheckpoint(f"no optimizer at {f}")
            ck.phi = io.load_optimizer(f, kind)[0]
        if "ours" in ecfg.methods:
            if training:
                def keep(it, pattern, loss, kind=kind):
                    if it == mc.outer_steps_xi - 1:
                        pattern.save(ck_dir / f"{kind}_pattern_{pattern.n}.txt")

                _, hist = metatrain_sampler(train, ck.phi, model, mc, callback=keep)
                io.write_history(ck_dir / f"{kind}_xi_history.csv", hist.rows)
                outputs.append(f"checkpoints/{kind}_xi_history.csv")
            for n in ecfg.ns:
                f = ck_dir / f"{kind}_pattern_{n}.txt"
                if f.exists():
                    ck.patterns[n] = SamplePattern.load(f)
                    if training:
                        outputs.append(f"checkpoints/{f.name}")
        if "njr15" in ecfg.methods and kind == "linear":
            for n in ecfg.ns:
                f = ck_dir / f"linear_njr15_{n}.txt"
                if training:
                    baselines.njr15_pattern(basis, n, cfg["njr_restarts"], cfg["seed"], cfg["eta"],
                                            cfg["njr_pool"]).save(f)
                    outputs.append(f"checkpoints/{f.name}")
                if f.exists():
                    ck.njr15[n] = SamplePattern.load(f)
        if "meanbrdf" in ecfg.methods:
            ck.mean_sampler = baselines.MeanBrdfSampler(train)
        checkpoints[kind] = ck
    report = run_experiment(ecfg, test, checkpoints,
                            log=lambda r: log.info("%s %s n=%s %s loss=%.5f", r["model"], r["method"],
                                                   r["n"], r["task"], r["loss"]))
    report.write_csv(run / "report.csv")
    report.write_aggregates_csv(run / "aggregates.csv")
    (run / "report.md").write_text(report.markdown())
    sweep_rows = [{"model": k[0], "method": k[1], "n": n, "loss": v}
                  for k, pts in report.sweep().items() for n, v in pts]
    io.write_history(run / "sweep.csv", sweep_rows)
    outputs += ["report.csv", "aggregates.csv", "report.md", "sweep.csv"]
    for kind in ecfg.models:
        for n in ecfg.ns:
            sort_by = "ours" if "ours" in ecfg.methods else ecfg.methods[0]
            name = f"zipf_{kind}_{n}.csv"
            io.write_history(run / name, report.per_task(kind, n, sort_by=sort_by))
            outputs.append(name)
    for agg in report.aggregates():
        log.info("%s %-8s n=%-3s loss %.5f", agg["model"], agg["method"], agg["n"], agg["loss"])
    return {"meta": cfg["seed"], "eval": cfg["eval_seed"], "seeds": cfg["seeds"]}, outputs


COMMANDS = {
    "import-merl": cmd_import_merl,
    "synth-dataset": cmd_synth_dataset,
    "split": cmd_split,
    "pca-build": cmd_pca_build,
    "meta-train-phi": cmd_meta_train_phi,
    "meta-train-xi": cmd_meta_train_xi,
    "njr15": cmd_njr15,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "render": cmd_render,
    "plot-pattern": cmd_plot_pattern,
    "experiment": cmd_experiment,
}


# --------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    # usage errors are config errors: exit 1 (2 is reserved for NaN aborts)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metasample", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--run-dir", help="output directory (default: runs/<command>-<hash>)")
        p.add_argument("--from-manifest", help="rerun with the configuration recorded in a run")
        for key in schema:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE")
    return parser


def resolve_config(command: str, args) -> dict:
    schema = SCHEMAS[command]
    cfg = dict(schema)
    if args.from_manifest:
        man = io.read_manifest(args.from_manifest)
        if man["command"] != command:
            raise io.ConfigError(f"manifest is for {man['command']!r}, not {command!r}")
        for k, v in man["config"].items():
            cfg[k] = io.coerce(schema, k, v)
    if args.config:
        cfg.update(io.read_config(args.config, schema))
    for key in schema:
        raw = getattr(args, key)
        if raw is not None:
            cfg[key] = io.coerce(schema, key, raw)
    return cfg


def run_command(command: str, cfg: dict, run_dir=None) -> Path:
    """Run one command with a resolved config; returns the run directory."""
    func = COMMANDS[command]
    cfg = dict(cfg)
    for key in ("split", "basis", "phi", "fit", "checkpoints", "pattern", "src", "labels", "init"):
        if cfg.get(key):
            cfg[key] = str(Path(cfg[key]).resolve())
    if command in ("split",):
        _data_root(cfg)
    run = Path(run_dir) if run_dir else Path("runs") / f"{command}-{io.config_hash(command, cfg)[:10]}"
    run.mkdir(parents=True, exist_ok=True)
    seeds, outputs = func(cfg, run)
    io.write_manifest(run, command, cfg, seeds, outputs)
    return run


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors and --help become return codes for in-process callers
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.command, args)
        run = run_command(args.command, cfg, args.run_dir)
    except ad.NanGuard as exc:
        log.error("aborted on non-finite value: %s", exc)
        return 2
    except (io.ConfigError, io.CheckpointError, MissingCheckpoint, bc.FormatError,
            FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
