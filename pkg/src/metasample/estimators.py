"""scikit-learn style front ends for meta-training and per-task fitting."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import brdf_core as bc
from .meta import (AdamState, History, MetaConfig, OptimizerState, adam_step, evaluate, fit_task,
                   learn_inner, metatrain_optimizer, metatrain_sampler)
from .models import BRDFPCA, make_model
from .objective import SampleBatch, batch_loss
from .sampler import DoublingSchedule


def _check_coords(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ValueError(f"expected coordinates of shape (n, 3), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("coordinates contain NaN or inf")
    return X


def _check_rgb(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n, 3):
        raise ValueError(f"expected reflectance of shape ({n}, 3), got {y.shape}")
    return y


class MetaSampledBRDF(BaseEstimator):
    """Meta-learn a fitting optimizer and an acquisition pattern from BRDF tables.

    ``fit`` runs both meta-training phases on a list of training tables.
    Afterwards ``pattern_`` holds the ``n_samples`` coordinates to measure
    and ``fit_task``/``transform`` fit new tables from those measurements.

    Parameters
    ----------
    model : {"phong", "neural", "linear"}
    n_samples : int
        Final pattern size; a power of two.
    inner_steps : int
        Gradient steps of the inner fitting loop.
    outer_steps_phi, outer_steps_xi : int
        Meta-training steps for the optimizer and per pattern stage.
    outer_lr_phi, outer_lr_xi : float
        Adam rates of the two phases.
    eval_sample_count : int
        Random samples scoring the inner loop's result.
    n_components, eta : int, float
        Basis size and ridge weight (linear model only).
    seed : int

    Attributes
    ----------
    model_ : object
    phi_ : OptimizerState
    pattern_ : SamplePattern
    patterns_ : dict
        Pattern after each doubling stage, keyed by size.
    basis_ : BRDFPCA or None
    history_ : History
    """

    def __init__(self, model: str = "phong", n_samples: int = 8, inner_steps: int = 20,
                 outer_steps_phi: int = 5000, outer_steps_xi: int = 5000,
                 outer_lr_phi: float = 1e-4, outer_lr_xi: float = 5e-4,
                 eval_sample_count: int = 512, n_components: int = 5, eta: float = 40.0,
                 seed: int = 0):
        self.model = model
        self.n_samples = n_samples
        self.inner_steps = inner_steps
        self.outer_steps_phi = outer_steps_phi
        self.outer_steps_xi = outer_steps_xi
        self.outer_lr_phi = outer_lr_phi
        self.outer_lr_xi = outer_lr_xi
        self.eval_sample_count = eval_sample_count
        self.n_components = n_components
        self.eta = eta
        self.seed = seed

    def _config(self) -> MetaConfig:
        return MetaConfig(inner_steps=self.inner_steps, outer_steps_phi=self.outer_steps_phi,
                          outer_steps_xi=self.outer_steps_xi, outer_lr_phi=self.outer_lr_phi,
                          outer_lr_xi=self.outer_lr_xi, eval_sample_count=self.eval_sample_count,
                          n_samples=self.n_samples, seed=self.seed)

    def fit(self, tables, y=None):
        tables = list(tables)
        if not tables:
            raise ValueError("need at least one training table")
        cfg = self._config()
        schedule = DoublingSchedule(self.n_samples)
        self.basis_ = BRDFPCA(self.n_components).fit(tables) if self.model == "linear" else None
        self.model_ = make_model(self.model, self.basis_, self.eta)
        self.history_ = History()
        self.phi_, _ = metatrain_optimizer(tables, self.model_, cfg, history=self.history_)
        self.patterns_ = {}

        def keep(it, pattern, loss):
            if it == cfg.outer_steps_xi - 1:
                self.patterns_[pattern.n] = pattern.copy()

        self.pattern_, _ = metatrain_sampler(tables, self.phi_, self.model_, cfg, schedule,
                                             history=self.history_, callback=keep)
        self.patterns_[self.pattern_.n] = self.pattern_.copy()
        return self

    def fit_task(self, table: bc.BrdfTable, coords=None) -> np.ndarray:
        """Fit one table from its values at the learned (or given) coordinates."""
        check_is_fitted(self, "phi_")
        xs = self.pattern_.coords if coords is None else _check_coords(coords)
        return fit_task(self.model_, self.phi_, table, xs, self.inner_steps)

    def transform(self, tables) -> np.ndarray:
        """Fitted parameter vectors, one row per table."""
        return np.stack([self.fit_task(t) for t in tables])

    def score(self, tables, y=None) -> float:
        """Negative mean loss at random valid samples (higher is better)."""
        losses = [evaluate(self.model_, self.fit_task(t), t, self.eval_sample_count, seed=[self.seed, i])
                  for i, t in enumerate(tables)]
        return -float(np.mean(losses))


class BRDFRegressor(RegressorMixin, BaseEstimator):
    """Fit one BRDF model to measured (coordinate, RGB) pairs.

    With ``optimizer`` the meta-learned initialisation and step sizes are
    used for ``steps`` updates; without it the model starts from a random
    initialisation and takes ``steps`` Adam updates at rate ``lr``.

    Parameters
    ----------
    model : {"phong", "neural", "linear"}
    optimizer : OptimizerState, optional
    basis : BRDFPCA, optional
        Required for the linear model.
    steps : int
    lr : float
    eta : float
    seed : int
    """

    def __init__(self, model: str = "phong", optimizer: OptimizerState | None = None,
                 basis: BRDFPCA | None = None, steps: int = 20, lr: float = 1e-3,
                 eta: float = 40.0, seed: int = 0):
        self.model = model
        self.optimizer = optimizer
        self.basis = basis
        self.steps = steps
        self.lr = lr
        self.eta = eta
        self.seed = seed

    def fit(self, X, y):
        X = _check_coords(X)
        y = _check_rgb(y, X.shape[0])
        if X.shape[0] == 0:
            raise ValueError("need at least one sample")
        self.model_ = make_model(self.model, self.basis, self.eta)
        with ad.no_grad():
            batch = SampleBatch(self.model_, X, y)
        if self.model_.kind == "linear":
            with ad.no_grad():
                self.coef_ = learn_inner(None, batch, self.model_, 0).value.copy()
        elif self.optimizer is not None:
            self.coef_ = learn_inner(self.optimizer, batch, self.model_, self.steps,
                                     create_graph=False).value.copy()
        else:
            rng = np.random.default_rng(self.seed)
            theta = self.model_.init_params(rng)
            adam = AdamState.zeros_like(theta)
            for _ in range(self.steps):
                tape = ad.Tape()
                th = tape.var(theta)
                (g,) = ad.grad(batch_loss(self.model_, th, batch), [th])
                theta = adam_step(adam, theta, g.value, self.lr)
            self.coef_ = theta
        self.n_features_in_ = 3
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        X = _check_coords(X)
        with ad.no_grad():
            return self.model_.predict(self.coef_, self.model_.features(ad.const(X))).value

    def loss(self, X, y) -> float:
        """Mean cosine-weighted log error (invalid samples scored by the barrier)."""
        check_is_fitted(self, "coef_")
        X = _check_coords(X)
        y = _check_rgb(y, X.shape[0])
        with ad.no_grad():
            batch = SampleBatch(self.model_, X, y)
            return float(batch_loss(self.model_, self.coef_, batch).value)


__all__ = ["MetaSampledBRDF", "BRDFRegressor"]
