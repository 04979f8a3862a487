"""Training loss: cosine-weighted absolute log error, plus the validity barrier.

Invalid samples are scored by ``u**2 + v**2`` on the cube coordinates, which
pulls them towards the origin of the (theta_h, theta_d) plane where every
phi_d is valid.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from . import brdf_core as bc


@dataclasses.dataclass(frozen=True)
class LossConfig:
    barrier_enabled: bool = True


def _log_error(c, pred, target):
    # c: (n, 1), pred/target: (n, 3) -> per-sample mean over RGB, (n,)
    diff = ad.log1p(ad.const(target) * c) - ad.log1p(ad.const(pred) * c)
    return ad.mean(ad.abs(diff), axis=1)


def brdf_loss(x, pred, target) -> float:
    """Mean over RGB of |log(1 + T c) - log(1 + f c)| for one valid sample."""
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    c = bc.cosines(x)[0].reshape(1, 1)
    with ad.no_grad():
        return float(_log_error(c, np.reshape(pred, (1, 3)), np.reshape(target, (1, 3))).value[0])


def barrier_loss(x, pred, target) -> float:
    """``brdf_loss`` for a valid sample, ``u**2 + v**2`` otherwise."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    if bc.is_valid(x):
        return brdf_loss(x, pred, target)
    return float(x[0] ** 2 + x[1] ** 2)


class SampleBatch:
    """A set of sample coordinates prepared once for repeated loss evaluation.

    ``xs`` may be a tracked Var (learned patterns) or a plain array. The
    validity mask is frozen from the current values; the cosine and the model
    features stay differentiable in ``xs``.
    """

    def __init__(self, model, xs, ys=None):
        self.xs = ad.const(xs)
        self.valid = bc.is_valid(self.xs.value)
        self.n = self.xs.shape[0]
        c = bc.cos_in_ad(self.xs)
        # keep the unused branch finite where invalid
        self.c = ad.reshape(ad.where(self.valid, ad.max_with_const(c, 0.0), 0.0), (-1, 1))
        self.feats = model.features(self.xs)
        self.ys = ys

    def per_sample(self, pred, target=None, barrier: bool = True):
        target = self.ys if target is None else target
        err = _log_error(self.c, pred, target)
        if self.valid.all():
            return err
        if barrier:
            u, v = self.xs[:, 0], self.xs[:, 1]
            return ad.where(self.valid, err, u * u + v * v)
        return ad.where(self.valid, err, 0.0)


def batch_loss(model, theta, batch: SampleBatch, barrier: bool = True):
    """Mean barrier loss over a prepared batch; a scalar Var."""
    pred = model.predict(theta, batch.feats)
    return ad.mean(batch.per_sample(pred, barrier=barrier))


def task_loss(model, params, task: bc.BrdfTable, xs, barrier: bool = True) -> float:
    """Mean barrier loss of ``params`` on ``task`` at coordinates ``xs``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[0] == 0:
        raise ValueError("task_loss needs at least one sample")
    with ad.no_grad():
        ys = bc.lookup_ad(task.values, ad.const(xs)).value
        batch = SampleBatch(model, xs, ys)
        per = batch.per_sample(model.predict(params, batch.feats), barrier=barrier).value
    # exactly rounded sum: the result does not depend on sample order
    return math.fsum(per) / per.size
