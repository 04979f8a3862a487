"""The three BRDF models: physical Phong, PCA-linear with a ridge closed form, small MLP.

All models share one calling convention so the fitting loops can treat them
alike: parameters are a flat vector, ``features(x)`` precomputes everything
that depends only on the sample coordinates (the samples are fixed during an
inner loop), and ``predict(theta, feats)`` maps parameters to RGB values.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import brdf_core as bc

EXP_CLAMP = 30.0


class InsufficientData(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def _check_valid(x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.all(bc.is_valid(x)):
        raise bc.InvalidSample("model evaluated at a coordinate below the horizon")
    return x


# ----------------------------------------------------------------------- Phong


@dataclasses.dataclass
class PhongParams:
    lambda_sum: np.ndarray
    lambda_ratio: np.ndarray
    g: float

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.lambda_sum, self.lambda_ratio, [self.g]]).astype(np.float64)

    @classmethod
    def from_vector(cls, theta) -> "PhongParams":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta[0:3].copy(), theta[3:6].copy(), float(theta[6]))

    @classmethod
    def from_physical(cls, kd, ks, q) -> "PhongParams":
        kd, ks = np.asarray(kd, float), np.asarray(ks, float)
        ksum = kd + ks
        ratio = kd / ksum
        logit = lambda p: np.log(p) - np.log1p(-p)
        return cls(logit(ksum), logit(ratio), float(np.log(q)))

    def physical(self):
        """(k_d, k_s, q) after the sigmoid/exp mappings."""
        ksum = 1.0 / (1.0 + np.exp(-self.lambda_sum))
        ratio = 1.0 / (1.0 + np.exp(-self.lambda_ratio))
        return ksum * ratio, ksum * (1.0 - ratio), float(np.exp(self.g))


class PhongModel:
    """Physical Phong with the sum/ratio sigmoid parametrisation and q = exp(g)."""

    kind = "phong"
    n_params = 7

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([rng.normal(0.0, 1.0, 6), [rng.normal(np.log(10.0), 1.0)]])

    def features(self, x):
        wi, wo = bc.directions_ad(ad.const(x))
        cos_r = wo[:, 2] * wi[:, 2] - wo[:, 0] * wi[:, 0] - wo[:, 1] * wi[:, 1]
        return {"cos_r": ad.reshape(ad.max_with_const(cos_r, 0.0), (-1, 1))}

    def predict(self, theta, feats):
        theta = ad.const(theta)
        ksum = ad.sigmoid(theta[0:3])
        ratio = ad.sigmoid(theta[3:6])
        kd = ksum * ratio
        ks = ksum - kd
        q = ad.exp(theta[6:7])
        lobe = ad.power(feats["cos_r"], q) * ((q + 2.0) / (2.0 * np.pi))
        return kd / np.pi + ks * lobe


def phong_eval(params: PhongParams, x) -> np.ndarray:
    """Evaluate Phong at valid coordinates, shape (n, 3)."""
    x = _check_valid(x)
    model = PhongModel()
    with ad.no_grad():
        return model.predict(params.vector, model.features(x)).value


# ---------------------------------------------------------------------- Neural


HIDDEN = 21
N_INPUTS = 6
_LAYERS = ((HIDDEN, N_INPUTS), (HIDDEN, HIDDEN), (3, HIDDEN))


def _layer_slices():
    out, start = [], 0
    for rows, cols in _LAYERS:
        w = slice(start, start + rows * cols)
        start += rows * cols
        b = slice(start, start + rows)
        start += rows
        out.append((w, (rows, cols), b))
    return out, start


_SLICES, N_NEURAL = _layer_slices()


@dataclasses.dataclass
class NeuralParams:
    """Weights of the 6 -> 21 -> 21 -> 3 network (675 scalars)."""

    weights: list
    biases: list

    @property
    def vector(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [np.ravel(w), np.ravel(b)]
        return np.concatenate(parts).astype(np.float64)

    @classmethod
    def from_vector(cls, theta) -> "NeuralParams":
        theta = np.asarray(theta, dtype=np.float64)
        ws, bs = [], []
        for wsl, shape, bsl in _SLICES:
            ws.append(theta[wsl].reshape(shape).copy())
            bs.append(theta[bsl].copy())
        return cls(ws, bs)

    @classmethod
    def zeros(cls) -> "NeuralParams":
        return cls.from_vector(np.zeros(N_NEURAL))

    @property
    def size(self) -> int:
        return int(sum(np.size(w) + np.size(b) for w, b in zip(self.weights, self.biases)))


def neural_encoding(x):
    """Half and difference vectors (phi_h = 0) as a differentiable (n, 6) input."""
    x = ad.const(x)
    u, v, w = x[:, 0], x[:, 1], x[:, 2]
    sh = ad.sin(u * (0.5 * np.pi))
    ch = ad.sin((1.0 - u) * (0.5 * np.pi))
    sd = ad.sin(v * (0.5 * np.pi))
    cd = ad.sin((1.0 - v) * (0.5 * np.pi))
    zero = ad.const(np.zeros(x.shape[0]))
    return ad.stack([sh, zero, ch, sd * ad.cos(w * np.pi), sd * ad.sin(w * np.pi), cd], axis=1)


class NeuralModel:
    """Two hidden ReLU layers of 21 units with an exponential output."""

    kind = "neural"
    n_params = N_NEURAL

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        # Kaiming-He (fan-in) normal weights, zero biases
        ws, bs = [], []
        for rows, cols in _LAYERS:
            ws.append(rng.normal(0.0, np.sqrt(2.0 / cols), size=(rows, cols)))
            bs.append(np.zeros(rows))
        return NeuralParams(ws, bs).vector

    def features(self, x):
        return {"enc": neural_encoding(x)}

    def predict(self, theta, feats):
        theta = ad.const(theta)
        h = feats["enc"]
        for i, (wsl, shape, bsl) in enumerate(_SLICES):
            W = ad.reshape(theta[wsl], shape)
            h = ad.matmul(h, ad.transpose(W)) + theta[bsl]
            if i < len(_SLICES) - 1:
                h = ad.relu(h)
        # symmetric clamp: no overflow, and exp stays strictly positive
        return ad.exp(ad.clamp(h, -EXP_CLAMP, EXP_CLAMP))


def neural_eval(params: NeuralParams, x) -> np.ndarray:
    x = _check_valid(x)
    model = NeuralModel()
    with ad.no_grad():
        return model.predict(params.vector, model.features(x)).value


# ---------------------------------------------------------------------- Linear


def cosine_weight(x) -> np.ndarray:
    ci, co = bc.cosines(x)
    return np.maximum(ci * co, 0.0)


def _cosine_weight_ad(x):
    x = ad.const(x)
    u, v, w = x[:, 0], x[:, 1], x[:, 2]
    a = ad.sin((1.0 - u) * (0.5 * np.pi)) * ad.sin((1.0 - v) * (0.5 * np.pi))
    b = ad.sin(u * (0.5 * np.pi)) * ad.sin(v * (0.5 * np.pi)) * ad.cos(w * np.pi)
    return ad.max_with_const((a - b) * (a + b), 0.0)


class BRDFPCA(TransformerMixin, BaseEstimator):
    """Shared PCA basis of log-relative, cosine-weighted BRDF tables.

    Each table channel is mapped cell-wise as
    ``ln((rho*c + eps) / (rho_median*c + eps))`` with ``c = cos_in*cos_out``
    and the per-cell training median as reference. One basis serves all
    three channels; the mean is kept per channel.

    Parameters
    ----------
    n_components : int
        Number of basis BRDFs ``m``.
    eps : float
        Offset inside the logarithm.
    chunk_size : int
        Cells processed at a time; bounds peak memory.

    Attributes
    ----------
    mean_ : ndarray of shape (90, 90, 180, 3)
        Mean mapped table.
    median_ : ndarray of shape (90, 90, 180, 3)
        Per-cell median reflectance of the training tables.
    components_ : ndarray of shape (m, 90, 90, 180)
        Orthonormal basis over the valid cells (zero elsewhere).
    singular_values_ : ndarray of shape (m,)
    basis_ : ndarray of shape (m, 90, 90, 180)
        ``components_`` scaled by the singular values; the columns of A.
    """

    def __init__(self, n_components: int = 5, eps: float = 1e-3, chunk_size: int = 200_000):
        self.n_components = n_components
        self.eps = eps
        self.chunk_size = chunk_size

    def _map(self, rho, median, c):
        return np.log((rho * c[:, None] + self.eps) / (median * c[:, None] + self.eps))

    def fit(self, tables, y=None):
        tables = list(tables)
        m = self.n_components
        if len(tables) < m + 1:
            raise InsufficientData(f"need at least {m + 1} tables for {m} components, got {len(tables)}")
        valid = bc.grid_valid_mask().ravel()
        cells = np.flatnonzero(valid)
        cw = cosine_weight(bc.grid_coords()).ravel()[cells]
        flat = [t.values.reshape(-1, 3) for t in tables]
        n_obs = 3 * len(tables)
        median = np.zeros((valid.size, 3))
        mean = np.zeros((valid.size, 3))
        gram = np.zeros((n_obs, n_obs))
        for lo in range(0, cells.size, self.chunk_size):
            idx = cells[lo:lo + self.chunk_size]
            X, med, mu = self._chunk(flat, idx, cw[lo:lo + self.chunk_size])
            median[idx], mean[idx] = med, mu
            gram += X @ X.T
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1][:m]
        sig = np.sqrt(np.maximum(evals[order], 0.0))
        vecs = evecs[:, order]
        tol = max(sig.max(initial=0.0), 1.0) * 1e-10
        keep = sig > tol
        comps = np.zeros((m, cells.size))
        self.median_ = median.reshape(bc.TABLE_SHAPE)
        for lo in range(0, cells.size, self.chunk_size):
            idx = cells[lo:lo + self.chunk_size]
            X, _, _ = self._chunk(flat, idx, cw[lo:lo + self.chunk_size], median[idx])
            comps[keep, lo:lo + self.chunk_size] = (vecs[:, keep].T @ X) / sig[keep, None]
        comps = _orthonormal_completion(comps, keep, seed=0)
        sig = np.where(keep, sig, 0.0)
        full = np.zeros((m, valid.size))
        full[:, cells] = comps
        self.components_ = full.reshape((m,) + bc.TABLE_SHAPE[:3])
        self.singular_values_ = sig
        self.basis_ = self.components_ * sig[:, None, None, None]
        self.mean_ = mean.reshape(bc.TABLE_SHAPE)
        self.n_observations_ = n_obs
        self._stack = None
        return self

    def _chunk(self, flat, idx, cw, median=None):
        rho = np.stack([f[idx] for f in flat])  # (tables, cells, 3)
        if median is None:
            median = np.median(rho, axis=0)
        mapped = np.log((rho * cw[None, :, None] + self.eps) / (median[None] * cw[None, :, None] + self.eps))
        mu = mapped.mean(axis=0)
        X = (mapped - mu[None]).transpose(0, 2, 1).reshape(-1, idx.size)
        return X, median, mu

    # full-table helpers

    def map_table(self, table: bc.BrdfTable) -> np.ndarray:
        check_is_fitted(self, "components_")
        cw = cosine_weight(bc.grid_coords())[..., None]
        out = np.log((table.values * cw + self.eps) / (self.median_ * cw + self.eps))
        out[~bc.grid_valid_mask()] = 0.0
        return out

    def transform(self, tables):
        """Least-squares weights over all valid cells, shape (n_tables, m, 3)."""
        check_is_fitted(self, "components_")
        valid = bc.grid_valid_mask()
        A = self.basis_[:, valid].T
        out = []
        for t in tables:
            Y = (self.map_table(t) - self.mean_)[valid]
            out.append(np.linalg.lstsq(A, Y, rcond=None)[0])
        return np.array(out)

    def reconstruction_error(self, table: bc.BrdfTable, weights) -> float:
        """Mean squared mapped-space error of ``mean + A w`` over the valid cells."""
        check_is_fitted(self, "components_")
        valid = bc.grid_valid_mask()
        W = np.asarray(weights, dtype=np.float64).reshape(self.n_components, 3)
        target = (self.map_table(table) - self.mean_)[valid]
        recon = self.basis_[:, valid].T @ W
        return float(np.mean((target - recon) ** 2))

    def inverse_transform(self, weights):
        """Tables from weights (n_tables, m, 3)."""
        check_is_fitted(self, "components_")
        cw = cosine_weight(bc.grid_coords())[..., None]
        valid = bc.grid_valid_mask()
        out = []
        for W in np.asarray(weights):
            mapped = self.mean_ + np.einsum("kijl,kc->ijlc", self.basis_, W)
            out.append(bc.BrdfTable(self._unmap(mapped, self.median_, cw) * valid[..., None]))
        return out

    def _unmap(self, mapped, median, c):
        c_safe = np.maximum(c, 1e-4)
        return np.maximum((median * c + self.eps) * np.exp(mapped) - self.eps, 0.0) / c_safe

    def lookup_stack(self) -> np.ndarray:
        """Basis, mean and median stacked into one (90, 90, 180, m+6) lookup table."""
        if getattr(self, "_stack", None) is None:
            self._stack = np.concatenate(
                [np.moveaxis(self.basis_, 0, -1), self.mean_, self.median_], axis=-1)
        return self._stack


def _orthonormal_completion(comps, keep, seed):
    """Fill the rows of ``comps`` not in ``keep`` with orthonormal directions."""
    if keep.all():
        return comps
    rng = np.random.default_rng(seed)
    comps = comps.copy()
    for k in np.flatnonzero(~keep):
        v = rng.normal(size=comps.shape[1])
        for j in range(comps.shape[0]):
            if j != k and (keep[j] or j < k):
                v -= (comps[j] @ v) * comps[j]
        comps[k] = v / np.linalg.norm(v)
    return comps


def build_pca_basis(tables, m: int = 5, eps: float = 1e-3) -> BRDFPCA:
    return BRDFPCA(n_components=m, eps=eps).fit(tables)


def ridge_solve(A_hat, y, eta: float = 40.0):
    """w = (A^T A + eta I)^{-1} A^T y, differentiable in A_hat and y."""
    A_hat, y = ad.const(A_hat), ad.const(y)
    m = A_hat.shape[1]
    At = ad.transpose(A_hat)
    M = ad.matmul(At, A_hat) + eta * np.eye(m)
    if eta == 0 and np.linalg.cond(M.value) > 1e12:
        raise NumericalError("normal equations are too ill-conditioned without regularisation")
    return ad.solve(M, ad.matmul(At, y))


class LinearModel:
    """Closed-form model over a fitted :class:`BRDFPCA` basis."""

    kind = "linear"

    def __init__(self, basis: BRDFPCA, eta: float = 40.0):
        self.basis = basis
        self.eta = eta
        self.m = basis.n_components
        self.n_params = 3 * self.m

    def init_params(self, rng=None) -> np.ndarray:
        return np.zeros(self.n_params)

    def features(self, x):
        L = bc.lookup_ad(self.basis.lookup_stack(), ad.const(x))
        m = self.m
        c = _cosine_weight_ad(x)
        return {"A": L[:, :m], "mean": L[:, m:m + 3], "median": L[:, m + 3:m + 6],
                "c": ad.reshape(c, (-1, 1))}

    def map_values(self, y, feats):
        """Reflectance -> mapped, mean-subtracted values."""
        eps = self.basis.eps
        c = feats["c"]
        num = ad.const(y) * c + eps
        den = feats["median"] * c + eps
        return ad.log(num / den) - feats["mean"]

    def closed_form(self, feats, y, mask=None):
        """Mapped-space ridge weights (m, 3) from reflectance ``y`` at the featured samples."""
        A = feats["A"]
        Y = self.map_values(y, feats)
        if mask is not None:
            col = np.asarray(mask, dtype=np.float64)[:, None]
            A = A * col
            Y = Y * col
        return ridge_solve(A, Y, self.eta)

    def predict(self, theta, feats):
        W = ad.reshape(ad.const(theta), (self.m, 3))
        mapped = ad.matmul(feats["A"], W) + feats["mean"]
        eps = self.basis.eps
        c = feats["c"]
        rho = (feats["median"] * c + eps) * ad.exp(ad.min_with_const(mapped, EXP_CLAMP)) - eps
        return ad.max_with_const(rho, 0.0) / ad.max_with_const(c, 1e-4)


def linear_solve(basis: BRDFPCA, x, y, eta: float = 40.0) -> np.ndarray:
    """Ridge weights (m, 3) from mapped, mean-subtracted observations ``y`` at ``x``."""
    x = _check_valid(x)
    with ad.no_grad():
        A = bc.lookup_ad(basis.lookup_stack()[..., :basis.n_components], ad.const(x))
        return ridge_solve(A, y, eta).value


def linear_eval(basis: BRDFPCA, w, x) -> np.ndarray:
    """Reflectance of ``mean + A w`` at valid ``x`` after undoing the mapping."""
    x = _check_valid(x)
    model = LinearModel(basis)
    with ad.no_grad():
        return model.predict(np.asarray(w, float).ravel(), model.features(x)).value


def make_model(kind: str, basis: BRDFPCA | None = None, eta: float = 40.0):
    if kind == "phong":
        return PhongModel()
    if kind == "neural":
        return NeuralModel()
    if kind == "linear":
        if basis is None:
            raise ValueError("the linear model needs a PCA basis")
        return LinearModel(basis, eta)
    raise ValueError(f"unknown model kind {kind!r}")
