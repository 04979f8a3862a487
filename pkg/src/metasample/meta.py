"""Meta-learning of the fitting optimizer and of the sample pattern.

Two decoupled phases run one after the other:

1. ``metatrain_optimizer`` learns the parameter initialisation and one step
   size per parameter (MetaSGD) while the inner loop sees random samples.
2. ``metatrain_sampler`` freezes that optimizer and moves the sample
   coordinates themselves. The samples are looked up in the task table, so
   they act as the supervision of the inner loop and the meta-gradient
   reaches them through both the lookup and the model features.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import brdf_core as bc
from .objective import SampleBatch, batch_loss
from .sampler import DoublingSchedule, SamplePattern, grow, random_valid, sobol_valid

log = logging.getLogger(__name__)


@dataclasses.dataclass
class OptimizerState:
    """Meta-learned initialisation and per-parameter step sizes."""

    init: np.ndarray
    step_sizes: np.ndarray

    def __post_init__(self):
        self.init = np.array(self.init, dtype=np.float64)
        self.step_sizes = np.array(self.step_sizes, dtype=np.float64)
        if self.init.shape != self.step_sizes.shape:
            raise ValueError("init and step sizes must have the same shape")

    @classmethod
    def fresh(cls, model, rng: np.random.Generator, step: float = 1e-3) -> "OptimizerState":
        init = model.init_params(rng)
        return cls(init, np.full_like(init, step))

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.init.copy(), self.step_sizes.copy())


@dataclasses.dataclass
class MetaConfig:
    inner_steps: int = 20
    outer_steps_phi: int = 5000
    outer_steps_xi: int = 5000
    outer_lr_phi: float = 1e-4
    outer_lr_xi: float = 5e-4
    metasgd_init: float = 1e-3
    meta_batch: int = 1
    eval_sample_count: int = 512
    n_samples: int = 8
    guesses: int = 8
    guess_tasks: int = 8
    first_order: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.meta_batch != 1:
            raise ValueError("only a meta-batch of one is supported")
        for f in ("inner_steps", "outer_steps_phi", "outer_steps_xi"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")
        for f in ("eval_sample_count", "n_samples", "guesses"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")


# ------------------------------------------------------------------ optimizers


@dataclasses.dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64))


def adam_step(state: AdamState, params, grads, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    grads = np.asarray(grads, dtype=np.float64)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return np.asarray(params, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if total <= 0:
        return lr0
    return lr0 * (1.0 + np.cos(np.pi * step / total)) / 2.0


# ----------------------------------------------------------------- inner loop


def learn_inner(phi: OptimizerState, batch: SampleBatch, model, steps: int, *,
                tape: ad.Tape | None = None, init=None, step_sizes=None,
                create_graph: bool = True, loss: Callable | None = None):
    """Fit ``model`` to one task from a fixed batch of supervised samples.

    Gradient models take ``steps`` MetaSGD updates from ``phi``; the
    linear model solves its ridge system once and ignores ``phi``. Pass
    ``init``/``step_sizes`` Vars to differentiate with respect to them.
    Returns the parameter Var.
    """
    if model.kind == "linear":
        return ad.reshape(model.closed_form(batch.feats, batch.ys, mask=batch.valid), (-1,))
    if tape is None:
        tape = ad.Tape()
    theta = init if init is not None else tape.var(phi.init)
    if not theta.tracked:
        theta = tape.var(theta.value)
    step = step_sizes if step_sizes is not None else ad.const(phi.step_sizes)
    loss = loss or (lambda th: batch_loss(model, th, batch))
    xs_before = batch.xs.value.copy()
    for i in range(steps):
        try:
            L = loss(theta)
            (g,) = ad.grad(L, [theta], create_graph=create_graph)
            theta = theta - step * g
        except ad.NanGuard as exc:
            raise ad.NanGuard(f"inner step {i}: {exc}") from None
    # samples are supervision, never updated inside the inner loop
    assert np.array_equal(xs_before, batch.xs.value)
    return theta


def eval_batch(model, task: bc.BrdfTable, count: int, rng) -> SampleBatch:
    xs = random_valid(count, rng)
    with ad.no_grad():
        ys = bc.lookup_ad(task.values, ad.const(xs)).value
        return SampleBatch(model, xs, ys)


def evaluate(model, params, task: bc.BrdfTable, count: int = 512, seed=0) -> float:
    """Loss of trained ``params`` at ``count`` fresh random valid samples."""
    batch = eval_batch(model, task, count, seed)
    with ad.no_grad():
        return float(batch_loss(model, np.asarray(params, dtype=np.float64), batch).value)


def fit_task(model, phi: OptimizerState | None, task: bc.BrdfTable, xs, steps: int) -> np.ndarray:
    """Test-time fitting: the inner loop on samples ``xs`` with no graph kept."""
    xs = np.asarray(xs, dtype=np.float64)
    with ad.no_grad():
        ys = bc.lookup_ad(task.values, ad.const(xs)).value
        batch = SampleBatch(model, xs, ys)
    if model.kind == "linear":
        with ad.no_grad():
            return learn_inner(phi, batch, model, steps).value.copy()
    theta = learn_inner(phi, batch, model, steps, create_graph=False)
    return theta.value.copy()


def _supervised_batch(model, task, xs):
    """Batch whose targets are differentiable lookups at ``xs`` (a Var)."""
    ys = bc.lookup_ad(task.values, xs)
    return SampleBatch(model, xs, ys)


def _barrier_sum(xs):
    valid = bc.is_valid(xs.value)
    if valid.all():
        return 0.0
    u, v = xs[:, 0], xs[:, 1]
    return ad.sum(ad.where(valid, 0.0, u * u + v * v))


# --------------------------------------------------------------- outer loops


@dataclasses.dataclass
class History:
    rows: list = dataclasses.field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def losses(self) -> np.ndarray:
        return np.array([r["eval_loss"] for r in self.rows])


def _pick(tasks: Sequence[bc.BrdfTable], rng):
    # uniform with replacement
    return tasks[int(rng.integers(len(tasks)))]


def metatrain_optimizer(tasks: Sequence[bc.BrdfTable], model, config: MetaConfig,
                        phi: OptimizerState | None = None, history: History | None = None,
                        callback=None) -> tuple[OptimizerState, History]:
    """Learn the initialisation and MetaSGD step sizes with random samples."""
    rng = np.random.default_rng([config.seed, 1])
    if phi is None:
        phi = OptimizerState.fresh(model, np.random.default_rng([config.seed, 0]), config.metasgd_init)
    phi = phi.copy()
    history = history if history is not None else History()
    if model.kind == "linear":
        return phi, history
    adam = AdamState.zeros_like(np.concatenate([phi.init, phi.step_sizes]))
    P = phi.init.size
    for it in range(config.outer_steps_phi):
        task = _pick(tasks, rng)
        tape = ad.Tape()
        init = tape.var(phi.init)
        steps = tape.var(phi.step_sizes)
        try:
            with ad.no_grad():
                xs = random_valid(config.n_samples, rng)
                batch = SampleBatch(model, xs, bc.lookup_ad(task.values, ad.const(xs)).value)
            theta = learn_inner(phi, batch, model, config.inner_steps, tape=tape, init=init,
                                step_sizes=steps, create_graph=not config.first_order)
            L = batch_loss(model, theta, eval_batch(model, task, config.eval_sample_count, rng))
            g_init, g_step = ad.grad(L, [init, steps])
        except ad.NanGuard as exc:
            raise ad.NanGuard(f"optimizer outer step {it}: {exc}") from None
        flat = adam_step(adam, np.concatenate([phi.init, phi.step_sizes]),
                         np.concatenate([g_init.value, g_step.value]), config.outer_lr_phi)
        phi = OptimizerState(flat[:P], flat[P:])
        history.append(phase="phi", outer_step=it, n=config.n_samples, task=task.name,
                       eval_loss=float(L.value), lr=config.outer_lr_phi)
        if callback is not None:
            callback(it, phi, float(L.value))
    return phi, history


def sampler_meta_loss(model, phi: OptimizerState, task, coords: np.ndarray, config: MetaConfig,
                      rng, with_grad: bool = True):
    """Post-training evaluation loss for a pattern, plus its gradient in the coordinates.

    The objective is the evaluation loss after the inner loop plus
    ``sum(u**2 + v**2)`` over invalid samples, so each invalid sample
    receives exactly the barrier gradient (2u, 2v, 0).
    """
    tape = ad.Tape()
    xi = tape.var(coords)
    batch = _supervised_batch(model, task, xi)
    theta = learn_inner(phi, batch, model, config.inner_steps, tape=tape,
                        create_graph=not config.first_order)
    L = batch_loss(model, theta, eval_batch(model, task, config.eval_sample_count, rng))
    total = L + _barrier_sum(xi)
    if not with_grad:
        return float(total.value), None
    (g,) = ad.grad(total, [xi])
    return float(total.value), g.value


def _choose_first_sample(tasks, model, phi, config, rng) -> SamplePattern:
    """Pick the best of several one-sample Sobol guesses on the training tasks."""
    guesses, cursor = sobol_valid(config.guesses, 0)
    if config.guesses == 1:
        return SamplePattern(guesses, cursor)
    picks = [tasks[int(i)] for i in rng.integers(len(tasks), size=min(config.guess_tasks, len(tasks)))]
    seeds = rng.integers(2**63, size=len(picks))
    scores = []
    for g in guesses:
        total = 0.0
        for task, s in zip(picks, seeds):
            total += sampler_meta_loss(model, phi, task, g[None], config,
                                       np.random.default_rng(int(s)), with_grad=False)[0]
        scores.append(total / len(picks))
    best = int(np.argmin(scores))
    return SamplePattern(guesses[best:best + 1], cursor)


def metatrain_sampler(tasks: Sequence[bc.BrdfTable], phi: OptimizerState, model, config: MetaConfig,
                      schedule: DoublingSchedule | None = None, initial: SamplePattern | None = None,
                      history: History | None = None, callback=None) -> tuple[SamplePattern, History]:
    """Learn sample coordinates with the optimizer ``phi`` frozen.

    Runs ``outer_steps_xi`` Adam steps (cosine-annealed) per doubling stage
    and clamps the coordinates to the cube after every step. ``initial``
    replaces the Sobol start (the doubling schedule is then skipped).
    """
    rng = np.random.default_rng([config.seed, 2])
    history = history if history is not None else History()
    phi = phi.copy()
    if initial is not None:
        stages = [initial.n]
        pattern = initial.copy()
    else:
        schedule = schedule or DoublingSchedule(config.n_samples, config.guesses)
        stages = schedule.targets
        pattern = _choose_first_sample(tasks, model, phi, config, rng)
    for stage, n in enumerate(stages):
        if pattern.n < n:
            pattern = grow(pattern, n)
        adam = AdamState.zeros_like(pattern.coords)
        total = config.outer_steps_xi
        for it in range(total):
            task = _pick(tasks, rng)
            lr = cosine_lr(it, total, config.outer_lr_xi)
            try:
                loss, g = sampler_meta_loss(model, phi, task, pattern.coords, config, rng)
            except ad.NanGuard as exc:
                raise ad.NanGuard(f"sampler stage n={n} outer step {it}: {exc}") from None
            pattern.coords = adam_step(adam, pattern.coords, g, lr)
            pattern.clamp()
            history.append(phase="xi", outer_step=it, n=n, task=task.name, eval_loss=loss, lr=lr)
            if callback is not None:
                callback(it, pattern, loss)
    return pattern, history
