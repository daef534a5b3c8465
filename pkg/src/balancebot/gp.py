"""Exact Gaussian-process regression with squared-exponential kernels.

Implements single-output exact GPs with precomputed Cholesky factors,
independent multi-output stacks, analytic mean/variance gradients,
information gain, and the high-probability error-bound coefficient used
by the robust controller.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

__all__ = [
    "SeHyperparams",
    "GpModel",
    "MultiGp",
    "ErrorBoundParams",
    "kernel_eval",
    "fit",
    "fit_hyperparams",
    "error_bound_beta",
    "calibrate_rkhs_norm",
    "save_model",
    "load_model",
    "save_multi",
    "load_multi",
]

_JITTER_START = 1e-10
_JITTER_MAX = 1e-4


@dataclass(frozen=True)
class SeHyperparams:
    """Squared-exponential kernel hyperparameters.

    ``weights`` holds the diagonal of the positive-definite weighting
    matrix (inverse squared length-scales, one per input dimension).
    """

    signal_variance: float
    noise_variance: float
    weights: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "weights", w)
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be positive")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")
        if not np.all(w > 0):
            raise ValueError("all kernel weights must be positive")

    @property
    def input_dim(self) -> int:
        return self.weights.shape[0]


def kernel_eval(x_i, x_j, hyper: SeHyperparams, same_index: bool = False) -> float:
    """Evaluate the SE kernel between two points.

    The noise term is added only when both arguments refer to the same
    training index (``same_index=True``).
    """
    x_i = np.asarray(x_i, dtype=float)
    x_j = np.asarray(x_j, dtype=float)
    if x_i.shape != (hyper.input_dim,) or x_j.shape != (hyper.input_dim,):
        raise ValueError(
            f"kernel inputs must have dimension {hyper.input_dim}, "
            f"got {x_i.shape} and {x_j.shape}"
        )
    dx = x_i - x_j
    value = hyper.signal_variance * np.exp(-0.5 * np.dot(dx * hyper.weights, dx))
    if same_index:
        value += hyper.noise_variance
    return float(value)


def _kernel_cross(X: np.ndarray, Z: np.ndarray, hyper: SeHyperparams) -> np.ndarray:
    """Noise-free kernel matrix between row sets X (N,d) and Z (M,d)."""
    Xw = X * np.sqrt(hyper.weights)
    Zw = Z * np.sqrt(hyper.weights)
    sq = (
        np.sum(Xw**2, axis=1)[:, None]
        + np.sum(Zw**2, axis=1)[None, :]
        - 2.0 * Xw @ Zw.T
    )
    np.maximum(sq, 0.0, out=sq)
    return hyper.signal_variance * np.exp(-0.5 * sq)


def _kernel_vector(X: np.ndarray, x: np.ndarray, hyper: SeHyperparams) -> np.ndarray:
    diff = X - x
    sq = np.einsum("ij,j,ij->i", diff, hyper.weights, diff)
    return hyper.signal_variance * np.exp(-0.5 * sq)


class GpModel:
    """A fitted exact GP: training data, Cholesky factor and weight vector.

    Immutable after construction (the negative-variance clamp counter is
    the only mutable diagnostic). Use :func:`fit` to build one.
    """

    def __init__(self, X, y, hyper: SeHyperparams, chol, alpha_weights, k_inv):
        self.X = X
        self.y = y
        self.hyper = hyper
        self.chol = chol
        self.alpha_weights = alpha_weights
        self._k_inv = k_inv
        self.clamped_variances = 0

    @property
    def n_train(self) -> int:
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.hyper.input_dim

    def _check_query(self, x_star) -> np.ndarray:
        x = np.asarray(x_star, dtype=float)
        if x.shape != (self.input_dim,):
            raise ValueError(
                f"query must have dimension {self.input_dim}, got shape {x.shape}"
            )
        return x

    def predict(self, x_star):
        """Posterior mean and variance at a single test point."""
        x = self._check_query(x_star)
        prior_var = self.hyper.signal_variance + self.hyper.noise_variance
        if self.n_train == 0:
            return 0.0, prior_var
        k = _kernel_vector(self.X, x, self.hyper)
        mean = float(k @ self.alpha_weights)
        var = prior_var - float(k @ (self._k_inv @ k))
        if var < 0.0:
            self.clamped_variances += 1
            var = 0.0
        return mean, var

    def predict_mean(self, x_star) -> float:
        """Posterior mean only; skips the O(N^2) variance solve."""
        x = self._check_query(x_star)
        if self.n_train == 0:
            return 0.0
        k = _kernel_vector(self.X, x, self.hyper)
        return float(k @ self.alpha_weights)

    def predict_mean_gradient(self, x_star) -> np.ndarray:
        """Analytic gradient of the posterior mean with respect to x*."""
        x = self._check_query(x_star)
        if self.n_train == 0:
            return np.zeros(self.input_dim)
        k = _kernel_vector(self.X, x, self.hyper)
        return (self.alpha_weights * k) @ ((self.X - x) * self.hyper.weights)

    def predict_full(self, x_star):
        """Mean, variance and their input gradients in one pass.

        Returns ``(mean, var, dmean_dx, dvar_dx)``; shares the kernel
        vector and solve between all four quantities.
        """
        x = self._check_query(x_star)
        prior_var = self.hyper.signal_variance + self.hyper.noise_variance
        if self.n_train == 0:
            d = self.input_dim
            return 0.0, prior_var, np.zeros(d), np.zeros(d)
        k = _kernel_vector(self.X, x, self.hyper)
        dk = (self.X - x) * self.hyper.weights * k[:, None]  # (N, d)
        mean = float(k @ self.alpha_weights)
        dmean = self.alpha_weights @ dk
        b = self._k_inv @ k
        var = prior_var - float(k @ b)
        dvar = -2.0 * (b @ dk)
        if var < 0.0:
            self.clamped_variances += 1
            var = 0.0
            dvar = np.zeros_like(dvar)
        return mean, var, dmean, dvar

    def predict_batch(self, X_star, kc=None):
        """Vectorized :meth:`predict_full` over the rows of ``X_star``.

        Returns ``(means, vars, dmeans, dvars)`` with leading dimension
        equal to the number of query rows. Mathematically identical to
        querying each row separately, but the variance solves collapse
        into a single matrix product. ``kc`` optionally supplies the
        precomputed kernel cross-matrix rows k(X, x_q).
        """
        Xq = np.atleast_2d(np.asarray(X_star, dtype=float))
        if Xq.shape[1] != self.input_dim:
            raise ValueError(
                f"queries must have dimension {self.input_dim}, got {Xq.shape[1]}"
            )
        nq, d = Xq.shape
        prior_var = self.hyper.signal_variance + self.hyper.noise_variance
        if self.n_train == 0:
            return (
                np.zeros(nq), np.full(nq, prior_var),
                np.zeros((nq, d)), np.zeros((nq, d)),
            )
        w = self.hyper.weights
        if kc is None:
            kc = np.empty((nq, self.n_train))
            for i in range(nq):
                kc[i] = _kernel_vector(self.X, Xq[i], self.hyper)
        # The derivative contractions collapse to matrix products with X,
        # avoiding any (nq, N, d) temporaries.
        Kc = kc
        means = Kc @ self.alpha_weights
        A = Kc * self.alpha_weights
        dmeans = ((A @ self.X) - A.sum(axis=1)[:, None] * Xq) * w
        B = Kc @ self._k_inv
        vars_ = prior_var - np.einsum("qn,qn->q", Kc, B)
        KB = Kc * B
        dvars = -2.0 * ((KB @ self.X) - KB.sum(axis=1)[:, None] * Xq) * w
        neg = vars_ < 0.0
        if np.any(neg):
            self.clamped_variances += int(np.count_nonzero(neg))
            vars_[neg] = 0.0
            dvars[neg] = 0.0
        return means, vars_, dmeans, dvars


def fit(X, y, hyper: SeHyperparams) -> GpModel:
    """Fit an exact GP by factoring K(X,X) + sigma^2 I.

    Escalates a diagonal jitter from 1e-10 by factors of 10 up to 1e-4
    if the factorization fails, then raises.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y row counts differ")
    if X.shape[0] > 0 and X.shape[1] != hyper.input_dim:
        raise ValueError(
            f"X has {X.shape[1]} columns but hyperparameters expect {hyper.input_dim}"
        )
    n = X.shape[0]
    if n == 0:
        d = hyper.input_dim
        return GpModel(
            np.zeros((0, d)), np.zeros(0), hyper,
            np.zeros((0, 0)), np.zeros(0), np.zeros((0, 0)),
        )
    K = _kernel_cross(X, X, hyper)
    K[np.diag_indices_from(K)] += hyper.noise_variance
    L = _chol_with_jitter(K)
    alpha = cho_solve((L, True), y)
    k_inv = cho_solve((L, True), np.eye(n))
    return GpModel(X, y, hyper, L, alpha, k_inv)


def _chol_with_jitter(K: np.ndarray) -> np.ndarray:
    jitter = 0.0
    while True:
        try:
            return cholesky(K + jitter * np.eye(K.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            pass
        jitter = _JITTER_START if jitter == 0.0 else jitter * 10.0
        if jitter > _JITTER_MAX:
            cond = np.linalg.cond(K)
            raise np.linalg.LinAlgError(
                f"kernel matrix not positive definite after jitter escalation "
                f"(condition estimate {cond:.3e})"
            )


def log_marginal_likelihood(model: GpModel) -> float:
    """Log marginal likelihood of the training targets under the model."""
    n = model.n_train
    if n == 0:
        return 0.0
    return float(
        -0.5 * model.y @ model.alpha_weights
        - np.sum(np.log(np.diag(model.chol)))
        - 0.5 * n * np.log(2.0 * np.pi)
    )


def information_gain(model: GpModel) -> float:
    """Realized information gain 0.5 * log det(I + K / sigma^2).

    Computed from the stored factorization of K + sigma^2 I.
    """
    n = model.n_train
    if n == 0:
        return 0.0
    log_det = 2.0 * np.sum(np.log(np.diag(model.chol)))
    return max(0.0, 0.5 * (log_det - n * np.log(model.hyper.noise_variance)))


def _lml_and_grad(X, y, log_params):
    """Log marginal likelihood and gradient in log-parameter coordinates.

    log_params = [log sigma_f^2, log sigma^2, log w_1, ..., log w_d].
    """
    n, d = X.shape
    sf2, s2 = np.exp(log_params[0]), np.exp(log_params[1])
    w = np.exp(log_params[2:])
    hyper = SeHyperparams(sf2, s2, w)
    Kse = _kernel_cross(X, X, hyper)
    K = Kse + s2 * np.eye(n)
    try:
        L = cholesky(K, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf, np.zeros_like(log_params)
    alpha = cho_solve((L, True), y)
    lml = (
        -0.5 * y @ alpha
        - np.sum(np.log(np.diag(L)))
        - 0.5 * n * np.log(2.0 * np.pi)
    )
    # dLML/dtheta = 0.5 tr((alpha alpha^T - K^-1) dK/dtheta)
    k_inv = cho_solve((L, True), np.eye(n))
    A = np.outer(alpha, alpha) - k_inv
    grad = np.empty_like(log_params)
    grad[0] = 0.5 * np.sum(A * Kse)  # dK/dlog sf2 = Kse
    grad[1] = 0.5 * s2 * np.trace(A)
    for j in range(d):
        diff2 = (X[:, j, None] - X[None, :, j]) ** 2
        dK = -0.5 * w[j] * diff2 * Kse
        grad[2 + j] = 0.5 * np.sum(A * dK)
    return float(lml), grad


def fit_hyperparams(X, y, init: SeHyperparams, iters: int = 200) -> SeHyperparams:
    """Monotone-accept gradient ascent on the log marginal likelihood.

    Works in log-parameter coordinates; a step is accepted only if it
    does not decrease the likelihood, halving the step otherwise.
    Returns ``init`` unchanged for ``iters=0`` or on non-finite
    likelihoods (with a warning).
    """
    if iters < 0:
        raise ValueError("iters must be nonnegative")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if iters == 0 or X.shape[0] == 0:
        return init
    theta = np.concatenate((
        [np.log(init.signal_variance), np.log(init.noise_variance)],
        np.log(init.weights),
    ))
    value, grad = _lml_and_grad(X, y, theta)
    if not np.isfinite(value):
        warnings.warn("non-finite likelihood at initial hyperparameters; keeping init")
        return init
    step = 0.1
    for _ in range(iters):
        gnorm = np.max(np.abs(grad))
        if gnorm < 1e-10:
            break
        direction = grad / gnorm
        accepted = False
        trial_step = step
        for _ in range(20):
            cand = theta + trial_step * direction
            cand_value, cand_grad = _lml_and_grad(X, y, cand)
            if np.isfinite(cand_value) and cand_value >= value:
                theta, value, grad = cand, cand_value, cand_grad
                accepted = True
                break
            trial_step *= 0.5
        if not accepted:
            break
        step = min(trial_step * 2.0, 1.0)
    return SeHyperparams(
        float(np.exp(theta[0])), float(np.exp(theta[1])), np.exp(theta[2:])
    )


class MultiGp:
    """Independent per-output GPs over a shared input space."""

    def __init__(self, models: list[GpModel]):
        if not models:
            raise ValueError("MultiGp requires at least one model")
        d = models[0].input_dim
        if any(m.input_dim != d for m in models):
            raise ValueError("all models must share the input dimension")
        self.models = list(models)

    @property
    def n_outputs(self) -> int:
        return len(self.models)

    @property
    def input_dim(self) -> int:
        return self.models[0].input_dim

    def predict(self, x_star):
        """Componentwise posterior mean vector and diagonal covariance."""
        out = [m.predict(x_star) for m in self.models]
        mean = np.array([o[0] for o in out])
        var = np.array([o[1] for o in out])
        return mean, var

    def predict_full(self, x_star):
        """Means, variances and input gradients stacked over outputs."""
        n, d = self.n_outputs, self.input_dim
        mean = np.empty(n)
        var = np.empty(n)
        dmean = np.empty((n, d))
        dvar = np.empty((n, d))
        for i, m in enumerate(self.models):
            mean[i], var[i], dmean[i], dvar[i] = m.predict_full(x_star)
        return mean, var, dmean, dvar

    def predict_mean(self, x_star) -> np.ndarray:
        """Posterior mean vector only (no variance solves)."""
        return np.array([m.predict_mean(x_star) for m in self.models])

    def predict_batch(self, X_star, kc=None):
        """Vectorized full prediction; leading axis is the query row.

        Returns ``(means, vars, dmeans, dvars)`` with shapes
        ``(nq, n_out)``, ``(nq, n_out)``, ``(nq, n_out, d)`` and
        ``(nq, n_out, d)``. ``kc`` optionally supplies per-model
        precomputed kernel cross-matrices.
        """
        per = [
            m.predict_batch(X_star, kc=None if kc is None else kc[i])
            for i, m in enumerate(self.models)
        ]
        means = np.stack([p[0] for p in per], axis=1)
        vars_ = np.stack([p[1] for p in per], axis=1)
        dmeans = np.stack([p[2] for p in per], axis=1)
        dvars = np.stack([p[3] for p in per], axis=1)
        return means, vars_, dmeans, dvars

    def max_prior_variance(self) -> float:
        """max_i (sigma_f_i^2 + sigma_i^2), the covariance-norm bound."""
        return max(
            m.hyper.signal_variance + m.hyper.noise_variance for m in self.models
        )


@dataclass(frozen=True)
class ErrorBoundParams:
    """Inputs and result of the high-probability error-bound coefficient."""

    delta: float
    rkhs_norm_estimate: float
    info_gain: float
    n_train: int
    beta: float = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        beta = np.sqrt(
            2.0 * self.rkhs_norm_estimate**2
            + 300.0 * self.info_gain * np.log((self.n_train + 1) / self.delta) ** 3
        )
        object.__setattr__(self, "beta", float(beta))


def error_bound_beta(model: GpModel, delta: float, rkhs_norm_estimate: float = 1.0):
    """Error-bound coefficient using the model's realized information gain."""
    return ErrorBoundParams(
        delta=delta,
        rkhs_norm_estimate=rkhs_norm_estimate,
        info_gain=information_gain(model),
        n_train=model.n_train,
    )


def calibrate_rkhs_norm(
    model: GpModel,
    X_test,
    f_true,
    delta: float = 0.05,
    target_coverage: float = 0.95,
    max_doublings: int = 60,
) -> float:
    """Scale the RKHS-norm estimate until held-out coverage reaches target.

    Coverage is the fraction of test points with |mu - f| <= beta * sqrt(var).
    """
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    f_true = np.asarray(f_true, dtype=float).ravel()
    preds = np.array([model.predict(x) for x in X_test])
    err = np.abs(preds[:, 0] - f_true)
    sd = np.sqrt(preds[:, 1])
    norm = 1e-3
    for _ in range(max_doublings):
        beta = error_bound_beta(model, delta, norm).beta
        if np.mean(err <= beta * sd) >= target_coverage:
            return norm
        norm *= 2.0
    return norm


# ---------------------------------------------------------------------------
# Serialization: self-describing JSON text files with bit-exact round trip.
# ---------------------------------------------------------------------------


def _model_to_dict(model: GpModel) -> dict:
    return {
        "input_dim": model.input_dim,
        "inputs": model.X.tolist(),
        "targets": model.y.tolist(),
        "hyperparams": {
            "signal_variance": model.hyper.signal_variance,
            "noise_variance": model.hyper.noise_variance,
            "weights": model.hyper.weights.tolist(),
        },
    }


def _model_from_dict(data: dict) -> GpModel:
    hp = data["hyperparams"]
    hyper = SeHyperparams(
        hp["signal_variance"], hp["noise_variance"], np.array(hp["weights"])
    )
    X = np.array(data["inputs"], dtype=float).reshape(-1, data["input_dim"])
    y = np.array(data["targets"], dtype=float)
    return fit(X, y, hyper)


def save_model(model: GpModel, path):
    with open(path, "w") as fh:
        json.dump(_model_to_dict(model), fh, indent=1)


def load_model(path) -> GpModel:
    with open(path) as fh:
        return _model_from_dict(json.load(fh))


def save_multi(mgp: MultiGp, path):
    with open(path, "w") as fh:
        json.dump({"outputs": [_model_to_dict(m) for m in mgp.models]}, fh, indent=1)


def load_multi(path) -> MultiGp:
    with open(path) as fh:
        data = json.load(fh)
    return MultiGp([_model_from_dict(d) for d in data["outputs"]])
