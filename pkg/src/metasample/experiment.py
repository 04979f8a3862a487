"""Equal-time comparison of fitting methods over a set of test tasks."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import baselines
from . import evaluation as ev
from .meta import OptimizerState, evaluate, fit_task
from .sampler import random_valid

METHODS = ("random", "meta", "ours", "njr15", "meanbrdf")
STOCHASTIC = {"random", "meta"}


class MissingCheckpoint(LookupError):
    pass


@dataclasses.dataclass
class ExperimentConfig:
    models: tuple = ("phong",)
    methods: tuple = ("random", "meta", "ours")
    ns: tuple = (8,)
    seeds: int = 5
    inner_steps: int = 20
    eval_count: int = 4096
    eval_seed: int = 99
    random_lr: float = 1e-3
    render: bool = False
    render_size: int = 64

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}")
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")


@dataclasses.dataclass
class ModelCheckpoints:
    """Everything needed to run the methods for one model kind."""

    model: object
    phi: OptimizerState | None = None
    patterns: dict = dataclasses.field(default_factory=dict)
    njr15: dict = dataclasses.field(default_factory=dict)
    mean_sampler: object = None


def _steps(method: str, model, cfg: ExperimentConfig) -> int:
    # gradient steps each method is given on one task; the closed form takes none
    return 0 if model.kind == "linear" else cfg.inner_steps


def _fit(method, ck: ModelCheckpoints, task, n, seed, cfg, task_index):
    model = ck.model
    if method == "random":
        if model.kind == "linear":
            return fit_task(model, None, task, random_valid(n, np.random.default_rng([seed, task_index, 0])), 0)
        return baselines.train_random(model, task, n, cfg.inner_steps, lr=cfg.random_lr,
                                      seed=[seed, task_index, 0], resample=False)
    if method == "meta":
        xs = random_valid(n, np.random.default_rng([seed, task_index, 1]))
        return fit_task(model, ck.phi, task, xs, cfg.inner_steps)
    if method == "ours":
        return fit_task(model, ck.phi, task, ck.patterns[n].coords, cfg.inner_steps)
    if method == "njr15":
        return fit_task(model, ck.phi, task, ck.njr15[n].coords, cfg.inner_steps)
    if method == "meanbrdf":
        return fit_task(model, ck.phi, task, ck.mean_sampler.sample(n), cfg.inner_steps)
    raise ValueError(method)


def _check(ck: ModelCheckpoints, methods, ns):
    kind = ck.model.kind
    for method in methods:
        if method in ("meta", "ours", "njr15", "meanbrdf") and kind != "linear" and ck.phi is None:
            raise MissingCheckpoint(f"{kind}: method {method!r} needs a meta-trained optimizer")
        for n in ns:
            if method == "ours" and n not in ck.patterns:
                raise MissingCheckpoint(f"{kind}: no learned pattern for n={n}")
            if method == "njr15" and n not in ck.njr15:
                raise MissingCheckpoint(f"{kind}: no condition-number pattern for n={n}")
        if method == "meanbrdf" and ck.mean_sampler is None:
            raise MissingCheckpoint(f"{kind}: no mean-BRDF sampler")
        if method == "njr15" and kind != "linear":
            raise ValueError("the condition-number baseline applies to the linear model only")


def run_experiment(config: ExperimentConfig, tasks, checkpoints: dict, log=None) -> ev.Report:
    """Fit every task with every method at every n and collect metrics.

    ``tasks`` is a list of tables; ``checkpoints`` maps model kind to
    :class:`ModelCheckpoints`. Stochastic methods are repeated for
    ``config.seeds`` seeds and each report row holds the seed mean.
    """
    report = ev.Report()
    rcfg = ev.RenderConfig(size=config.render_size)
    refs = {}
    for kind in config.models:
        if kind not in checkpoints:
            raise MissingCheckpoint(f"no checkpoints for model {kind!r}")
        ck = checkpoints[kind]
        _check(ck, config.methods, config.ns)
        budget = {m: _steps(m, ck.model, config) for m in config.methods}
        # equal time: every method gets the same number of gradient steps
        assert len(set(budget.values())) == 1, budget
        for n in config.ns:
            for method in config.methods:
                seeds = range(config.seeds) if method in STOCHASTIC else range(1)
                for ti, task in enumerate(tasks):
                    acc: dict = {}
                    for seed in seeds:
                        theta = _fit(method, ck, task, n, seed, config, ti)
                        m = {"loss": evaluate(ck.model, theta, task, config.eval_count,
                                              seed=[config.eval_seed, ti])}
                        if ck.model.kind == "linear":
                            m["mapped"] = ck.model.basis.reconstruction_error(task, theta)
                        if config.render:
                            if ti not in refs:
                                refs[ti] = ev.render_sphere(ev.table_evalfn(task), rcfg)
                            img = ev.render_sphere(ev.model_evalfn(ck.model, theta), rcfg)
                            m.update(ev.image_metrics(refs[ti], img, rcfg))
                        for k, v in m.items():
                            acc.setdefault(k, []).append(v)
                    row = {"model": kind, "method": method, "n": n, "task": task.name or f"task{ti}",
                           "steps": budget[method], "seeds": len(seeds)}
                    row.update({k: _mean(v) for k, v in acc.items()})
                    report.add(**row)
                    if log is not None:
                        log(row)
    return report


def _mean(vals):
    if any(math.isinf(v) for v in vals):
        return math.inf
    return math.fsum(vals) / len(vals)
