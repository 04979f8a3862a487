"""Comparison methods: classic random training, condition-number patterns,
mean-BRDF importance sampling and the two-phase convergence run."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import qmc

from . import autodiff as ad
from . import brdf_core as bc
from .meta import AdamState, OptimizerState, adam_step, learn_inner
from .models import BRDFPCA
from .objective import SampleBatch, batch_loss
from .sampler import SamplePattern, random_valid


def _batch(model, task, xs):
    with ad.no_grad():
        ys = bc.lookup_ad(task.values, ad.const(xs)).value
        return SampleBatch(model, xs, ys)


def train_random(model, task: bc.BrdfTable, n: int, steps: int, lr: float = 1e-3, seed=0,
                 init=None, resample: bool = True, trace: list | None = None,
                 eval_batch: SampleBatch | None = None, trace_every: int = 1) -> np.ndarray:
    """Conventional fitting: random init, Adam at a fixed rate on random valid samples.

    With ``resample`` the ``n`` samples are redrawn at every step; otherwise
    one set of ``n`` samples is drawn up front and reused. ``init`` replaces
    the random initialisation. When ``trace`` is given, ``(step, n, loss)``
    tuples are appended (loss on ``eval_batch`` if provided, else the
    training batch).
    """
    rng = np.random.default_rng(seed)
    theta = model.init_params(rng) if init is None else np.array(init, dtype=np.float64)
    if model.kind == "linear":
        xs = random_valid(n, rng)
        with ad.no_grad():
            batch = _batch(model, task, xs)
            return learn_inner(None, batch, model, 0).value.copy()
    batch = None if resample else _batch(model, task, random_valid(n, rng))
    adam = AdamState.zeros_like(theta)
    for i in range(steps):
        if resample:
            batch = _batch(model, task, random_valid(n, rng))
        tape = ad.Tape()
        th = tape.var(theta)
        try:
            L = batch_loss(model, th, batch)
            (g,) = ad.grad(L, [th])
        except ad.NanGuard as exc:
            raise ad.NanGuard(f"random training step {i}: {exc}") from None
        theta = adam_step(adam, theta, g.value, lr)
        if trace is not None and (i % trace_every == 0 or i == steps - 1):
            trace.append((i, n, _loss(model, theta, eval_batch) if eval_batch else float(L.value)))
    return theta


def _loss(model, theta, batch) -> float:
    with ad.no_grad():
        return float(batch_loss(model, theta, batch).value)


# ----------------------------------------------------------- condition number


def _conds(M):
    ev = np.linalg.eigvalsh(M)
    return ev[..., -1] / ev[..., 0]


def condition_number(basis: BRDFPCA, coords, eta: float = 40.0) -> float:
    """cond(A^T A + eta I) of the reduced basis at ``coords``."""
    with ad.no_grad():
        A = bc.lookup_ad(basis.lookup_stack()[..., :basis.n_components], ad.const(coords)).value
    return float(_conds(A.T @ A + eta * np.eye(A.shape[1])))


def njr15_pattern(basis: BRDFPCA, n: int, restarts: int = 4, seed=0, eta: float = 40.0,
                  pool_size: int = 100_000, max_iter: int = 1000, candidates: int = 2048) -> SamplePattern:
    """Minimise the reduced-basis condition number by greedy swaps from a candidate pool.

    Each iteration visits one pattern position and swaps in the best of a
    random subset of the pool if that lowers the condition number. A run
    stops after a full sweep with no improvement or ``max_iter`` iterations;
    the best of ``restarts`` runs is returned.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    pool = random_valid(pool_size, rng)
    with ad.no_grad():
        rows = bc.lookup_ad(basis.lookup_stack()[..., :basis.n_components], ad.const(pool)).value
    m = rows.shape[1]
    reg = eta * np.eye(m)
    outer = rows[:, :, None] * rows[:, None, :]
    best_sel, best_cond = None, np.inf
    for _ in range(restarts):
        sel = rng.choice(pool_size, size=n, replace=False)
        M = outer[sel].sum(axis=0) + reg
        cur = float(_conds(M))
        quiet = 0
        for it in range(max_iter):
            pos = it % n
            cand = rng.choice(pool_size, size=min(candidates, pool_size), replace=False)
            cand = cand[~np.isin(cand, sel)]
            trial = M[None] - outer[sel[pos]][None] + outer[cand]
            conds = _conds(trial)
            j = int(np.argmin(conds))
            if conds[j] < cur * (1.0 - 1e-12):
                M = trial[j]
                cur = float(conds[j])
                sel[pos] = cand[j]
                quiet = 0
            else:
                quiet += 1
                if quiet >= n:
                    break
        if cur < best_cond:
            best_cond, best_sel = cur, sel.copy()
    return SamplePattern(pool[np.sort(best_sel)])


# ------------------------------------------------------ mean-BRDF importance


class MeanBrdfSampler:
    """Inverse-CDF importance sampler over valid table cells of a log-averaged BRDF.

    Cells are chosen from the first dimension of a 4D Sobol stream and the
    point is placed inside the cell's index box with the other three; if
    that point falls below the horizon the cell's (valid) vertex is used.
    """

    def __init__(self, tables, eps: float = 1e-3):
        tables = list(tables)
        if not tables:
            raise ValueError("need at least one table")
        valid = bc.grid_valid_mask()
        logsum = np.zeros(valid.shape)
        for t in tables:
            logsum += np.log(t.values.mean(axis=-1) + eps)
        density = np.exp(logsum / len(tables)) * valid
        self.cells = np.flatnonzero(density.ravel())
        p = density.ravel()[self.cells]
        self.pmf = p / p.sum()
        self.cdf = np.cumsum(self.pmf)
        self.cdf[-1] = 1.0

    def sample(self, count: int, skip: int = 0) -> np.ndarray:
        engine = qmc.Sobol(d=4, scramble=False)
        engine.fast_forward(1 + skip)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            z = engine.random(count)
        pick = self.cells[np.searchsorted(self.cdf, z[:, 0], side="right").clip(max=self.cells.size - 1)]
        i, j, k = np.unravel_index(pick, bc.TABLE_SHAPE[:3])
        vertex = _index_to_coord(i, j, k)
        jitter = _index_to_coord(i + z[:, 1], j + z[:, 2], k + z[:, 3])
        ok = bc.is_valid(jitter)
        return np.where(ok[:, None], jitter, vertex)

    def cell_of(self, coords) -> np.ndarray:
        """Flat table cell whose index box contains each coordinate."""
        coords = np.asarray(coords)
        i = np.floor(np.sqrt(coords[:, 0]) * bc.RES_THETA_H + 1e-9).astype(int).clip(0, bc.RES_THETA_H - 1)
        j = np.floor(coords[:, 1] * bc.RES_THETA_D + 1e-9).astype(int).clip(0, bc.RES_THETA_D - 1)
        k = np.floor(coords[:, 2] * bc.RES_PHI_D + 1e-9).astype(int).clip(0, bc.RES_PHI_D - 1)
        return np.ravel_multi_index((i, j, k), bc.TABLE_SHAPE[:3])


def _index_to_coord(i, j, k):
    return np.stack([(np.asarray(i, float) / bc.RES_THETA_H) ** 2,
                     np.asarray(j, float) / bc.RES_THETA_D,
                     np.asarray(k, float) / bc.RES_PHI_D], axis=-1)


def mean_brdf_sampler(tables) -> MeanBrdfSampler:
    return MeanBrdfSampler(tables)


# ------------------------------------------------------------- convergence


def hybrid_convergence(model, phi: OptimizerState, pattern: SamplePattern, task: bc.BrdfTable,
                       seed=0, inner_steps: int = 20, steps: int = 10_000, n_random: int = 512,
                       lr: float = 1e-3, eval_count: int = 4096, trace_every: int = 100) -> dict:
    """Short meta-learned start, then long conventional training.

    Variants: ``random`` trains ``inner_steps + steps`` Adam steps from a
    random init; ``meta`` and ``ours`` first take ``inner_steps`` MetaSGD
    steps from ``phi`` on ``pattern.n`` random or learned samples, then
    ``steps`` Adam steps on ``n_random`` fresh random samples per step.
    Returns traces of ``(step, n, eval_loss)`` per variant.
    """
    rng = np.random.default_rng(seed)
    ev = _batch(model, task, random_valid(eval_count, rng))
    out = {}
    trace = []
    train_random(model, task, n_random, inner_steps + steps, lr=lr, seed=[seed, 1], trace=trace,
                 eval_batch=ev, trace_every=trace_every)
    out["random"] = trace
    starts = {"meta": random_valid(pattern.n, np.random.default_rng([seed, 2])), "ours": pattern.coords}
    for name, xs in starts.items():
        trace = []
        theta = phi.init.copy()
        batch = _batch(model, task, xs)
        for i in range(inner_steps):
            theta = learn_inner(OptimizerState(theta, phi.step_sizes), batch, model, 1,
                                create_graph=False).value
            trace.append((i, pattern.n, _loss(model, theta, ev)))
        later = []
        train_random(model, task, n_random, steps, lr=lr, seed=[seed, 3], init=theta, trace=later,
                     eval_batch=ev, trace_every=trace_every)
        trace += [(inner_steps + s, n, loss) for s, n, loss in later]
        out[name] = trace
    return out
