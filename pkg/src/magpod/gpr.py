"""Gaussian process regression with an RBF kernel, optionally conditioned
on exact gradient observations.

The gradient-enhanced variant models function values and partial
derivatives jointly: the covariance matrix gains, per sample, one value row
and d derivative rows (sample-major, value first), filled from the closed
forms of dk/dx, dk/dx', and d2k/dx dx' for the squared-exponential kernel.
Inputs are affinely normalized to the unit cube and targets standardized
before fitting; gradients are rescaled consistently, and predictions are
mapped back on output.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize
from sklearn.base import BaseEstimator, RegressorMixin

from .exceptions import (
    DimensionMismatchError,
    FitFailedError,
    NegativeVarianceError,
    NotPositiveDefiniteError,
)
from .linalg import JITTER_GROWTH, JITTER_INITIAL, JITTER_MAX
from .validation import check_2d_samples, check_vector

__all__ = [
    "NOISE_FLOOR",
    "KernelParams",
    "rbf_kernel",
    "rbf_kernel_jet",
    "build_covariance",
    "GaussianProcessSurrogate",
]

NOISE_FLOOR = 1e-12

# Restart draws are log-uniform over these ranges (normalized input space).
RESTART_LENGTH_SCALE = (0.05, 2.0)
RESTART_SIGNAL_VARIANCE = (0.1, 10.0)
RESTART_NOISE = (1e-8, 1e-2)

# Optimizer box in log space, generous around the restart ranges.
_LOG_BOUNDS_SIGNAL = (math.log(1e-6), math.log(1e6))
_LOG_BOUNDS_LENGTH = (math.log(1e-3), math.log(1e3))
_LOG_BOUNDS_NOISE = (math.log(NOISE_FLOOR), math.log(1e2))

_FD_LOG_STEP = 1e-4
_GRADIENT_TOL = 1e-4  # L-BFGS gtol; finite-difference gradient noise floor


def _chol_jittered(K):
    """Hot-loop Cholesky with the escalating-jitter ladder, no validation.

    K is symmetric by construction here. Returns (lower factor, log det,
    jitter used) or raises NotPositiveDefiniteError past the ladder.
    """
    try:
        L = scipy.linalg.cholesky(K, lower=True, check_finite=False)
        return L, 2.0 * float(np.sum(np.log(np.diag(L)))), 0.0
    except scipy.linalg.LinAlgError:
        pass
    n = K.shape[0]
    scale = max(float(np.trace(K)) / n, 1e-300)
    eps = JITTER_INITIAL
    eye = np.eye(n)
    while eps <= JITTER_MAX:
        try:
            L = scipy.linalg.cholesky(K + (eps * scale) * eye, lower=True,
                                      check_finite=False)
            return L, 2.0 * float(np.sum(np.log(np.diag(L)))), eps * scale
        except scipy.linalg.LinAlgError:
            eps *= JITTER_GROWTH
    raise NotPositiveDefiniteError(
        f"covariance not positive definite even with jitter {JITTER_MAX:g} * trace/n"
    )


@dataclass(frozen=True)
class KernelParams:
    """RBF hyperparameters: signal variance, length scale(s), noise variance."""

    signal_variance: float
    length_scale: object  # scalar or per-dimension array
    noise_variance: float = NOISE_FLOOR

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.length_scale, dtype=float))
        if self.signal_variance <= 0.0 or np.any(ls <= 0.0):
            raise ValueError("signal variance and length scales must be positive")
        object.__setattr__(self, "length_scale", ls if ls.size > 1 else float(ls[0]))
        object.__setattr__(
            self, "noise_variance", max(float(self.noise_variance), NOISE_FLOOR)
        )

    def inv_sq_lengths(self, d):
        ls = np.atleast_1d(np.asarray(self.length_scale, dtype=float))
        if ls.size == 1:
            ls = np.full(d, ls[0])
        elif ls.size != d:
            raise DimensionMismatchError(
                f"{ls.size} length scales for dimension {d}"
            )
        return 1.0 / ls ** 2


def rbf_kernel(x, xp, params):
    """Squared-exponential covariance between two points."""
    x = check_vector(np.atleast_1d(x), "x")
    xp = check_vector(np.atleast_1d(xp), "xp", length=x.shape[0])
    ili2 = params.inv_sq_lengths(x.shape[0])
    r2 = float(np.sum((x - xp) ** 2 * ili2))
    return params.signal_variance * math.exp(-0.5 * r2)


def rbf_kernel_jet(x, xp, params):
    """Kernel value with first and mixed second derivatives.

    Returns (value, grad_x, grad_xp, hess) where grad_x = dk/dx,
    grad_xp = dk/dx', and hess[i, j] = d2k/dx_i dx'_j.
    """
    x = check_vector(np.atleast_1d(x), "x")
    xp = check_vector(np.atleast_1d(xp), "xp", length=x.shape[0])
    d = x.shape[0]
    ili2 = params.inv_sq_lengths(d)
    diff = x - xp
    k = params.signal_variance * math.exp(-0.5 * float(np.sum(diff ** 2 * ili2)))
    scaled = diff * ili2
    grad_x = -k * scaled
    grad_xp = k * scaled
    hess = k * (np.diag(ili2) - np.outer(scaled, scaled))
    return k, grad_x, grad_xp, hess


def build_covariance(Xa, Xb, params, gradients=False):
    """Covariance matrix between two point sets.

    Without gradients the entry (i, j) is the kernel of row i of Xa against
    row j of Xb. With gradients each point contributes a (1 + d) block,
    sample-major with the value entry first and derivative entries in
    parameter order.
    """
    Xa = check_2d_samples(Xa, "Xa")
    Xb = check_2d_samples(Xb, "Xb", n_features=Xa.shape[1])
    d = Xa.shape[1]
    ili2 = params.inv_sq_lengths(d)
    D = Xa[:, None, :] - Xb[None, :, :]
    r2 = np.einsum("abk,k->ab", D ** 2, ili2)
    K = params.signal_variance * np.exp(-0.5 * r2)
    if not gradients:
        return K

    na, nb = Xa.shape[0], Xb.shape[0]
    scaled = D * ili2  # (na, nb, d)
    G_xp = K[:, :, None] * scaled
    G_x = -G_xp
    H = K[:, :, None, None] * (
        np.diag(ili2)[None, None, :, :]
        - scaled[:, :, :, None] * scaled[:, :, None, :]
    )
    big = np.empty((na, 1 + d, nb, 1 + d))
    big[:, 0, :, 0] = K
    big[:, 0, :, 1:] = G_xp
    big[:, 1:, :, 0] = np.moveaxis(G_x, 2, 1)
    big[:, 1:, :, 1:] = np.transpose(H, (0, 2, 1, 3))
    return big.reshape(na * (1 + d), nb * (1 + d))


def _extended_targets(y, gradients):
    if gradients is None:
        return y.copy()
    n, d = gradients.shape
    t = np.empty(n * (1 + d))
    t[:: 1 + d] = y
    for j in range(d):
        t[1 + j :: 1 + d] = gradients[:, j]
    return t


class GaussianProcessSurrogate(RegressorMixin, BaseEstimator):
    """RBF-kernel Gaussian process regressor, gradient-free or
    gradient-enhanced.

    Parameters
    ----------
    use_gradients : bool, default=False
        Condition jointly on values and exact gradients (which must then be
        passed to :meth:`fit`).
    signal_variance, length_scale, noise_variance : float
        Kernel hyperparameters in normalized space; the default optimizer
        start, or the fixed values when ``optimize=False``. The noise
        variance has an enforced floor of 1e-12.
    optimize : bool, default=True
        Maximize the log marginal likelihood over log-hyperparameters with
        L-BFGS (central finite-difference gradients), best of one default
        start plus ``n_restarts`` seeded random restarts.
    max_iter : int, default=800
        Iteration cap per optimizer start.
    n_restarts : int, default=3
        Number of random restarts.
    per_dimension_scales : bool, default=False
        One length scale per input dimension instead of an isotropic one.
    input_bounds : sequence of (lo, hi) or None
        Box used to normalize inputs to the unit cube; None uses the
        training data extent.
    random_state : int, default=0
        Seed for the restart draws.

    Attributes
    ----------
    kernel_params_ : KernelParams
        Fitted hyperparameters (normalized space).
    log_marginal_likelihood_ : float
        Log marginal likelihood at the fitted hyperparameters.
    fit_log_ : dict
        Final objective, objective at the default start, per-start results,
        and total optimizer iterations.
    """

    def __init__(
        self,
        use_gradients=False,
        signal_variance=1.0,
        length_scale=0.5,
        noise_variance=1e-6,
        optimize=True,
        max_iter=800,
        n_restarts=3,
        per_dimension_scales=False,
        input_bounds=None,
        random_state=0,
    ):
        self.use_gradients = use_gradients
        self.signal_variance = signal_variance
        self.length_scale = length_scale
        self.noise_variance = noise_variance
        self.optimize = optimize
        self.max_iter = max_iter
        self.n_restarts = n_restarts
        self.per_dimension_scales = per_dimension_scales
        self.input_bounds = input_bounds
        self.random_state = random_state

    # ------------------------------------------------------------------
    # normalization
    def _normalize_inputs(self, X):
        return (X - self._lo) / self._range

    def _setup_normalization(self, X, y, gradients):
        if self.input_bounds is not None:
            lo = np.array([b[0] for b in self.input_bounds], dtype=float)
            hi = np.array([b[1] for b in self.input_bounds], dtype=float)
        else:
            lo = X.min(axis=0)
            hi = X.max(axis=0)
        rng = hi - lo
        rng[rng <= 0.0] = 1.0
        self._lo = lo
        self._range = rng
        self._y_mean = float(np.mean(y))
        scale = float(np.std(y))
        self._y_scale = scale if scale > 0.0 else 1.0
        yn = (y - self._y_mean) / self._y_scale
        gn = None
        if gradients is not None:
            gn = gradients * self._range[None, :] / self._y_scale
        return yn, gn

    # ------------------------------------------------------------------
    # likelihood machinery
    def _params_from_z(self, z):
        d = self._Xn.shape[1]
        n_ls = d if self.per_dimension_scales else 1
        return KernelParams(
            signal_variance=math.exp(z[0]),
            length_scale=np.exp(z[1 : 1 + n_ls]),
            noise_variance=math.exp(z[1 + n_ls]),
        )

    def _z_from_params(self, params):
        ls = np.atleast_1d(np.asarray(params.length_scale, dtype=float))
        d = self._Xn.shape[1]
        n_ls = d if self.per_dimension_scales else 1
        if ls.size == 1 and n_ls > 1:
            ls = np.full(n_ls, ls[0])
        return np.concatenate(
            [
                [math.log(params.signal_variance)],
                np.log(ls),
                [math.log(params.noise_variance)],
            ]
        )

    def _factorize(self, params):
        K = build_covariance(
            self._Xn, self._Xn, params, gradients=self.use_gradients
        )
        K.flat[:: K.shape[0] + 1] += params.noise_variance
        return _chol_jittered(K)

    def _neg_log_likelihood(self, z):
        try:
            params = self._params_from_z(z)
            L, log_det, _ = self._factorize(params)
        except (NotPositiveDefiniteError, FloatingPointError, OverflowError):
            return 1e12
        alpha = scipy.linalg.cho_solve((L, True), self._t, check_finite=False)
        n = self._t.shape[0]
        ll = -0.5 * float(self._t @ alpha) - 0.5 * log_det - 0.5 * n * math.log(
            2.0 * math.pi
        )
        if not math.isfinite(ll):
            return 1e12
        return -ll

    def _fd_gradient(self, z):
        g = np.empty_like(z)
        for i in range(z.size):
            zp = z.copy()
            zp[i] += _FD_LOG_STEP
            zm = z.copy()
            zm[i] -= _FD_LOG_STEP
            g[i] = (self._neg_log_likelihood(zp) - self._neg_log_likelihood(zm)) / (
                2.0 * _FD_LOG_STEP
            )
        return g

    # ------------------------------------------------------------------
    def fit(self, X, y, gradients=None):
        """Fit to values (and, in gradient-enhanced mode, exact gradients).

        X has shape (n_samples, d), y (n_samples,), gradients (n_samples, d).
        """
        X = check_2d_samples(X, "X")
        y = check_vector(np.asarray(y, dtype=float).ravel(), "y", length=X.shape[0])
        if X.shape[0] < 1:
            raise ValueError("need at least 1 training sample")
        if self.use_gradients:
            if gradients is None:
                raise ValueError("gradient-enhanced mode requires gradients")
            gradients = check_2d_samples(gradients, "gradients", n_features=X.shape[1])
            if gradients.shape[0] != X.shape[0]:
                raise DimensionMismatchError(
                    "gradients and X must have the same number of rows"
                )
        elif gradients is not None:
            raise ValueError("gradients passed but use_gradients=False")

        yn, gn = self._setup_normalization(X, y, gradients)
        self._Xn = self._normalize_inputs(X)
        d2 = np.sum(
            (self._Xn[:, None, :] - self._Xn[None, :, :]) ** 2, axis=2
        )
        np.fill_diagonal(d2, np.inf)
        if np.min(d2) < (1e-10) ** 2:
            raise ValueError("training inputs contain (near-)duplicates")
        self._t = _extended_targets(yn, gn)
        self.n_features_in_ = X.shape[1]

        start = KernelParams(
            signal_variance=self.signal_variance,
            length_scale=self.length_scale,
            noise_variance=self.noise_variance,
        )
        z0 = self._z_from_params(start)

        if not self.optimize:
            self.kernel_params_ = self._params_from_z(z0)
            self._finalize()
            self.fit_log_ = {
                "objective": -self._neg_log_likelihood(z0),
                "start_objective": -self._neg_log_likelihood(z0),
                "iterations": 0,
                "starts": [],
            }
            self.log_marginal_likelihood_ = self.fit_log_["objective"]
            return self

        n_ls = self.n_features_in_ if self.per_dimension_scales else 1
        bounds = (
            [_LOG_BOUNDS_SIGNAL]
            + [_LOG_BOUNDS_LENGTH] * n_ls
            + [_LOG_BOUNDS_NOISE]
        )
        rng = np.random.default_rng(self.random_state)
        starts = [z0]
        for _ in range(self.n_restarts):
            sv = math.exp(rng.uniform(*np.log(RESTART_SIGNAL_VARIANCE)))
            ls = np.exp(rng.uniform(*np.log(RESTART_LENGTH_SCALE), size=n_ls))
            nv = math.exp(rng.uniform(*np.log(RESTART_NOISE)))
            starts.append(
                self._z_from_params(KernelParams(sv, ls, nv))
            )

        start_obj = -self._neg_log_likelihood(z0)
        best = None
        total_iter = 0
        outcomes = []
        for z_init in starts:
            res = scipy.optimize.minimize(
                self._neg_log_likelihood,
                z_init,
                jac=self._fd_gradient,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": self.max_iter, "gtol": _GRADIENT_TOL},
            )
            total_iter += int(res.nit)
            outcomes.append(float(res.fun))
            if res.fun < 1e12 and (best is None or res.fun < best.fun):
                best = res
        if best is None:
            raise FitFailedError("every optimizer start failed to factorize")

        self.kernel_params_ = self._params_from_z(best.x)
        self._finalize()
        self.fit_log_ = {
            "objective": -float(best.fun),
            "start_objective": start_obj,
            "iterations": total_iter,
            "starts": outcomes,
        }
        self.log_marginal_likelihood_ = self.fit_log_["objective"]
        return self

    def _finalize(self):
        self._L, _, _ = self._factorize(self.kernel_params_)
        self._alpha = scipy.linalg.cho_solve(
            (self._L, True), self._t, check_finite=False
        )

    # ------------------------------------------------------------------
    def _cross_covariance(self, Xq):
        """Cross covariance of query blocks against the training blocks."""
        return build_covariance(
            Xq, self._Xn, self.kernel_params_, gradients=self.use_gradients
        )

    def predict(self, X, return_std=False, return_gradients=False):
        """Posterior mean at query points; optionally the posterior standard
        deviation and (gradient-enhanced mode only) the predicted gradient."""
        X = check_2d_samples(X, "X", n_features=self.n_features_in_)
        Xq = self._normalize_inputs(X)
        nq, d = Xq.shape
        if self.use_gradients:
            cross = self._cross_covariance(Xq)
            ext = (cross @ self._alpha).reshape(nq, 1 + d)
            mean_n = ext[:, 0]
            grad_n = ext[:, 1:]
        else:
            cross = build_covariance(Xq, self._Xn, self.kernel_params_)
            mean_n = cross @ self._alpha
            grad_n = None

        out = [mean_n * self._y_scale + self._y_mean]
        if return_std:
            var = self._variance_normalized(Xq)
            out.append(np.sqrt(var) * self._y_scale)
        if return_gradients:
            if grad_n is None:
                raise ValueError("gradient predictions require use_gradients=True")
            out.append(grad_n * self._y_scale / self._range[None, :])
        return out[0] if len(out) == 1 else tuple(out)

    def _variance_normalized(self, Xq):
        if self.use_gradients:
            d = Xq.shape[1]
            rows = self._cross_covariance(Xq)[:: 1 + d]
        else:
            rows = build_covariance(Xq, self._Xn, self.kernel_params_)
        solved = scipy.linalg.cho_solve((self._L, True), rows.T, check_finite=False)
        q = np.einsum("ij,ij->i", rows, solved.T)
        var = self.kernel_params_.signal_variance - q
        bad = var < -1e-10
        if np.any(bad):
            raise NegativeVarianceError(
                f"variance {var[bad].min():.3e} below the round-off band"
            )
        return np.clip(var, 0.0, None)

    def predict_variance(self, X):
        """Posterior variance of the value at query points (original units)."""
        X = check_2d_samples(X, "X", n_features=self.n_features_in_)
        Xq = self._normalize_inputs(X)
        return self._variance_normalized(Xq) * self._y_scale ** 2

    # ------------------------------------------------------------------
    def log_marginal_likelihood(self, params=None):
        """Log marginal likelihood at given (or fitted) hyperparameters."""
        if params is None:
            params = self.kernel_params_
        return -self._neg_log_likelihood(self._z_from_params(params))

    def to_dict(self):
        """Serializable state: hyperparameters, normalization, training data."""
        ls = self.kernel_params_.length_scale
        return {
            "use_gradients": self.use_gradients,
            "per_dimension_scales": self.per_dimension_scales,
            "signal_variance": float(self.kernel_params_.signal_variance),
            "length_scale": (
                np.atleast_1d(ls).tolist() if np.ndim(ls) else float(ls)
            ),
            "noise_variance": float(self.kernel_params_.noise_variance),
            "lo": self._lo.tolist(),
            "range": self._range.tolist(),
            "y_mean": self._y_mean,
            "y_scale": self._y_scale,
            "Xn": self._Xn.tolist(),
            "targets": self._t.tolist(),
            "log_marginal_likelihood": getattr(
                self, "log_marginal_likelihood_", None
            ),
        }

    @classmethod
    def from_dict(cls, d):
        """Rebuild a fitted model; the covariance is re-factorized here."""
        model = cls(
            use_gradients=d["use_gradients"],
            per_dimension_scales=d["per_dimension_scales"],
            optimize=False,
        )
        model.kernel_params_ = KernelParams(
            d["signal_variance"], d["length_scale"], d["noise_variance"]
        )
        model._lo = np.array(d["lo"])
        model._range = np.array(d["range"])
        model._y_mean = d["y_mean"]
        model._y_scale = d["y_scale"]
        model._Xn = np.array(d["Xn"])
        model._t = np.array(d["targets"])
        model.n_features_in_ = model._Xn.shape[1]
        model.log_marginal_likelihood_ = d["log_marginal_likelihood"]
        model._finalize()
        return model
