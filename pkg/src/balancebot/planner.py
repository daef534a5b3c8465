"""Uncertainty-aware MPC over learned external dynamics.

Propagates Gaussian state beliefs through the GP model of the external
subsystem with a linearized covariance recursion, evaluates the tracking
objective augmented with the inverse-dynamics uncertainty penalty
nu * ||Sigma_d||, computes the full gradient by back-propagation, and
solves the unconstrained problem with monotone gradient descent.

The covariance-path gradient uses a Gauss-Newton-style truncation: the
GP mean Jacobian is treated as locally constant (its second derivative
is dropped), while the dependence of the GP variance on the query point
is kept. Mean-path gradients are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .gp import GpModel, _kernel_vector

__all__ = [
    "MpcConfig",
    "GpInputMap",
    "BeliefTrajectory",
    "PlannerSolution",
    "Planner",
    "propagate",
    "rollout",
    "objective",
    "gradient",
    "solve",
    "default_pendulum_config",
    "default_bikebot_config",
]


@dataclass
class MpcConfig:
    """Horizon, weights and solver settings of the planner."""

    horizon: int = 27
    dt: float = 0.02
    Q1: np.ndarray = field(default_factory=lambda: np.diag([1000.0, 100.0]))
    Q2: np.ndarray = field(default_factory=lambda: np.diag([100.0, 100.0]))
    Q3: np.ndarray = field(default_factory=lambda: np.diag([1000.0, 100.0]))
    r_w: float = 10.0
    r_uf: float = 10.0
    nu: float = 1.0
    max_iters: int = 100
    step_size: float = 1e-2
    grad_tol: float = 1e-6
    propagate_uncertainty: bool = True

    def __post_init__(self):
        self.Q1 = np.atleast_2d(np.asarray(self.Q1, float))
        self.Q2 = np.atleast_2d(np.asarray(self.Q2, float))
        self.Q3 = np.atleast_2d(np.asarray(self.Q3, float))
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")
        for W in (self.Q1, self.Q2, self.Q3):
            if np.any(np.linalg.eigvalsh(W) <= 0):
                raise ValueError("weight matrices must be positive definite")


def default_pendulum_config(**overrides) -> MpcConfig:
    return MpcConfig(**overrides)


def default_bikebot_config(**overrides) -> MpcConfig:
    # Position weight matches the velocity weight: with the planner run in
    # real-time mode (one gradient step per cycle) a heavier position term
    # turns the plan/plant loop into a growing roll oscillation.
    base = dict(
        Q1=np.diag([100.0, 100.0, 100.0, 100.0]),
        Q3=np.diag([100.0, 100.0, 100.0, 100.0]),
        Q2=np.diag([100.0, 100.0]),
    )
    base.update(overrides)
    return MpcConfig(**base)


class GpInputMap:
    """Layout of GP query vectors shared by the planner and stabilizer.

    The query is the concatenation (theta2, alpha1, alpha2, w[, u_f]):
    actuated positions are excluded (the dynamics of both platforms do
    not depend on them), which keeps the GP input dimension small.
    """

    def __init__(self, m: int, n: int, include_uf: bool, canon_theta2=None):
        self.m, self.n, self.include_uf = m, n, include_uf
        # Optional canonicalization of the external-velocity slots used
        # only for inverse-model (internal channel) queries. The bikebot's
        # roll/steer dynamics depend on the velocity solely through the
        # speed, so mapping (xdot, ydot) -> (speed, 0) removes a spurious
        # heading dimension from that model's input space.
        self.canon_theta2 = canon_theta2
        n_uf = (m - n) if include_uf else 0
        self.dim = m + 3 * n + n_uf
        self.sl_theta2 = slice(0, m)
        self.sl_alpha = slice(m, m + 2 * n)
        self.sl_w = slice(m + 2 * n, m + 3 * n)
        self.sl_uf = slice(m + 3 * n, self.dim)

    def build(self, theta2, alpha, w, u_f=None) -> np.ndarray:
        parts = [np.atleast_1d(theta2), np.atleast_1d(alpha), np.atleast_1d(w)]
        if self.include_uf:
            parts.append(np.atleast_1d(u_f))
        return np.concatenate(parts)

    def from_state(self, state, w, u_f) -> np.ndarray:
        """Query vector from a StatePartition (stabilizer-side entry)."""
        alpha = np.concatenate((state.alpha1, state.alpha2))
        theta2 = state.theta2
        if self.canon_theta2 is not None:
            theta2 = self.canon_theta2(theta2)
        return self.build(theta2, alpha, w, u_f)


@dataclass
class BeliefTrajectory:
    """Gaussian belief rollout: means, covariances and the internal plan."""

    means: np.ndarray       # (H+2, 2m)
    covs: np.ndarray        # (H+2, 2m, 2m)
    alphas: np.ndarray      # (H+1, 2n)


@dataclass
class PlannerSolution:
    """Optimized decision variables of one receding-horizon step."""

    alpha_hat0: np.ndarray
    w_hat: np.ndarray       # (H+1, n)
    u_f: np.ndarray         # (H+1, m-n)
    cost: float
    sigma_d_norm: float
    iterations: int
    grad_norm: float
    degraded: bool = False


_FG_CACHE: dict = {}


def _fg(m: int, dt: float):
    key = (m, dt)
    if key not in _FG_CACHE:
        F = np.block([[np.eye(m), dt * np.eye(m)], [np.zeros((m, m)), np.eye(m)]])
        G = np.vstack((np.zeros((m, m)), dt * np.eye(m)))
        _FG_CACHE[key] = (F, G)
    return _FG_CACHE[key]


def propagate(gp_theta, belief_i, alpha_hat_i, w_i, u_f_i, cfg: MpcConfig, imap: GpInputMap):
    """One belief step through the learned external dynamics.

    Returns (mu', Sigma', alpha_hat', cache) where cache holds the GP
    query and its outputs for gradient reuse.
    """
    mu, Sigma = belief_i
    m, n = imap.m, imap.n
    F, G = _fg(m, cfg.dt)
    x = imap.build(mu[m:], alpha_hat_i, w_i, u_f_i)
    mu_gp, var_gp, dmu, dvar = gp_theta.predict_full(x)
    mu_next = F @ mu + G @ mu_gp
    if cfg.propagate_uncertainty:
        J = np.zeros((m, 2 * m))
        J[:, m:] = dmu[:, imap.sl_theta2]
        inner = J @ Sigma @ J.T + np.diag(var_gp)
        Sigma_next = F @ Sigma @ F.T + G @ inner @ G.T
    else:
        Sigma_next = np.zeros_like(Sigma)
    alpha_next = np.concatenate((
        alpha_hat_i[:n] + cfg.dt * alpha_hat_i[n:],
        alpha_hat_i[n:] + cfg.dt * np.atleast_1d(w_i),
    ))
    cache = (x, mu_gp, var_gp, dmu, dvar)
    return mu_next, Sigma_next, alpha_next, cache


def rollout(gp_theta, theta0, alpha0, w, u_f, cfg: MpcConfig, imap: GpInputMap):
    """Full-horizon belief rollout from the measured external state.

    The covariance recursion never feeds back into the mean path, so the
    rollout runs in two passes: a sequential mean-only pass that fixes
    all GP query points, then one batched GP evaluation that supplies
    the variances and gradients for the covariance recursion and the
    planner gradient caches.
    """
    H, m, n = cfg.horizon, imap.m, imap.n
    F, G = _fg(m, cfg.dt)
    means = np.zeros((H + 2, 2 * m))
    covs = np.zeros((H + 2, 2 * m, 2 * m))
    alphas = np.zeros((H + 1, 2 * n))
    means[0] = theta0
    alphas[0] = alpha0
    # When the model is a (Multi)GpModel, the mean pass also collects
    # the kernel cross-vectors, so the batched variance pass reuses them
    # instead of recomputing the kernel matrix.
    mods = getattr(gp_theta, "models", None)
    if mods is None and isinstance(gp_theta, GpModel):
        mods = [gp_theta]
    if mods is not None and not all(isinstance(mo, GpModel) for mo in mods):
        mods = None
    ks = None
    if mods is not None:
        ks = [np.zeros((H + 1, mo.n_train)) for mo in mods]
    xs = []
    mu_gps = np.zeros((H + 1, m))
    empty_uf = np.zeros(0)
    for i in range(H + 1):
        uf_i = u_f[i] if u_f.shape[1] else empty_uf
        x = np.concatenate((means[i][m:], alphas[i], w[i], uf_i))
        xs.append(x)
        if mods is not None:
            for j, mo in enumerate(mods):
                if mo.n_train:
                    k = _kernel_vector(mo.X, x, mo.hyper)
                    ks[j][i] = k
                    mu_gps[i, j] = k @ mo.alpha_weights
        else:
            mu_gps[i] = np.atleast_1d(gp_theta.predict_mean(x))
        means[i + 1] = F @ means[i] + G @ mu_gps[i]
        if i + 1 <= H:
            alphas[i + 1, :n] = alphas[i, :n] + cfg.dt * alphas[i, n:]
            alphas[i + 1, n:] = alphas[i, n:] + cfg.dt * w[i]
    Xq = np.array(xs)
    if mods is not None and len(mods) == 1:
        _, var_b, dmu_b, dvar_b = mods[0].predict_batch(Xq, kc=ks[0])
    elif mods is not None:
        _, var_b, dmu_b, dvar_b = gp_theta.predict_batch(Xq, kc=ks)
    else:
        _, var_b, dmu_b, dvar_b = gp_theta.predict_batch(Xq)
    var_b = var_b.reshape(H + 1, m)
    dmu_b = dmu_b.reshape(H + 1, m, -1)
    dvar_b = dvar_b.reshape(H + 1, m, -1)
    caches = []
    if cfg.propagate_uncertainty:
        J = np.zeros((m, 2 * m))
        idx = np.arange(m)
        for i in range(H + 1):
            J[:, m:] = dmu_b[i][:, imap.sl_theta2]
            inner = J @ covs[i] @ J.T
            inner[idx, idx] += var_b[i]
            covs[i + 1] = F @ covs[i] @ F.T + G @ inner @ G.T
    for i in range(H + 1):
        caches.append((xs[i], mu_gps[i], var_b[i], dmu_b[i], dvar_b[i]))
    return BeliefTrajectory(means, covs, alphas), caches


def _sigma_d(gp_alpha, theta0, alpha0, w0, uf0, imap: GpInputMap):
    """Inverse-dynamics uncertainty at the current step and its gradient."""
    theta2 = theta0[imap.m :]
    if imap.canon_theta2 is not None:
        theta2 = imap.canon_theta2(theta2)
    x = imap.build(theta2, alpha0, w0, uf0)
    _, var, _, dvar = gp_alpha.predict_full(x)
    var = np.atleast_1d(var)
    j = int(np.argmax(var))
    return float(var[j]), np.atleast_2d(dvar)[j], x


def objective(belief: BeliefTrajectory, alpha0, w, u_f, window, sigma_d_norm, cfg: MpcConfig):
    """Expected tracking cost plus input effort and uncertainty penalties."""
    H = cfg.horizon
    e = belief.means - window
    eh = e[: H + 1]
    J = float(np.einsum("ij,jk,ik->", eh, cfg.Q1, eh))
    J += float(np.einsum("jk,ikj->", cfg.Q1, belief.covs[: H + 1]))
    J += cfg.r_w * float(np.sum(w * w))
    if u_f.shape[1]:
        J += cfg.r_uf * float(np.sum(u_f * u_f))
    J += alpha0 @ cfg.Q2 @ alpha0
    J += e[H + 1] @ cfg.Q3 @ e[H + 1] + np.trace(cfg.Q3 @ belief.covs[H + 1])
    J += cfg.nu * sigma_d_norm
    return float(J)


def _pack(alpha0, w, u_f):
    return np.concatenate((alpha0, w.ravel(), u_f.ravel()))


def _unpack(z, m, n, H):
    alpha0 = z[: 2 * n]
    w = z[2 * n : 2 * n + (H + 1) * n].reshape(H + 1, n)
    u_f = z[2 * n + (H + 1) * n :].reshape(H + 1, m - n)
    return alpha0, w, u_f


def _evaluate(gp_theta, gp_alpha, theta0, z, window, cfg, imap):
    """Objective value plus the rollout caches needed for the gradient."""
    alpha0, w, u_f = _unpack(z, imap.m, imap.n, cfg.horizon)
    belief, caches = rollout(gp_theta, theta0, alpha0, w, u_f, cfg, imap)
    if gp_alpha is not None and cfg.nu > 0 and cfg.propagate_uncertainty:
        uf0 = u_f[0] if u_f.shape[1] else np.zeros(0)
        sd, sd_grad, _ = _sigma_d(gp_alpha, theta0, alpha0, w[0], uf0, imap)
    else:
        sd, sd_grad = 0.0, None
    J = objective(belief, alpha0, w, u_f, window, sd, cfg)
    return J, belief, caches, sd, sd_grad


def _backprop(belief, caches, sd_grad, alpha0, w, u_f, window, cfg: MpcConfig, imap: GpInputMap):
    """Backward adjoint sweep given a completed rollout."""
    H, m, n = cfg.horizon, imap.m, imap.n
    F, G = _fg(m, cfg.dt)
    e = belief.means - window
    has_uf = u_f.shape[1] > 0

    grad_w = 2.0 * cfg.r_w * w.copy()
    grad_uf = 2.0 * cfg.r_uf * u_f.copy() if has_uf else np.zeros_like(u_f)
    grad_alpha0 = 2.0 * cfg.Q2 @ alpha0

    g = 2.0 * cfg.Q3 @ e[H + 1]           # dJ/dmu at the terminal step
    S = cfg.Q3.copy()                      # dJ/dSigma at the terminal step
    h = np.zeros(2 * n)                    # dJ/dalpha_hat carried backward
    for i in range(H, -1, -1):
        x, mu_gp, var_gp, dmu, dvar = caches[i]
        q = dmu.T @ (G.T @ g)              # GP-input adjoint, mean path
        if cfg.propagate_uncertainty:
            wdiag = np.diag(G.T @ S @ G)
            q = q + dvar.T @ wdiag         # variance path through Sigma_gp
        # scatter the query adjoint into the plan variables
        grad_w[i] += q[imap.sl_w]
        if has_uf:
            grad_uf[i] += q[imap.sl_uf]
        h_new = q[imap.sl_alpha].copy()
        if i < H:
            # alpha_hat integration chain: alpha_{i+1} = A_a alpha_i + B_a w_i
            h_new[:n] += h[:n]
            h_new[n:] += cfg.dt * h[:n] + h[n:]
            grad_w[i] += cfg.dt * h[n:]
        h = h_new
        # mean adjoint to the previous step
        g_prev = 2.0 * cfg.Q1 @ e[i] + F.T @ g
        g_prev[m:] += q[imap.sl_theta2]    # J^T G^T g contribution
        if cfg.propagate_uncertainty and i > 0:
            Jx = np.zeros((m, 2 * m))
            Jx[:, m:] = dmu[:, imap.sl_theta2]
            S = cfg.Q1 + F.T @ S @ F + Jx.T @ (G.T @ S @ G) @ Jx
        g = g_prev
    grad_alpha0 += h

    if sd_grad is not None:
        grad_alpha0 += cfg.nu * sd_grad[imap.sl_alpha]
        grad_w[0] += cfg.nu * sd_grad[imap.sl_w]
        if has_uf:
            grad_uf[0] += cfg.nu * sd_grad[imap.sl_uf]
    return _pack(grad_alpha0, grad_w, grad_uf)


def gradient(gp_theta, gp_alpha, theta0, z, window, cfg: MpcConfig, imap: GpInputMap):
    """Back-propagated total gradient of the objective in the plan variables.

    Mean-path adjoints are chained through F + G * dmu/dtheta; the
    covariance adjoints reuse the same Jacobian (Gauss-Newton truncation)
    while keeping the query-point dependence of the GP variance.
    Returns (gradient, objective value, sigma_d norm).
    """
    alpha0, w, u_f = _unpack(z, imap.m, imap.n, cfg.horizon)
    J_val, belief, caches, sd, sd_grad = _evaluate(
        gp_theta, gp_alpha, theta0, z, window, cfg, imap
    )
    grad = _backprop(belief, caches, sd_grad, alpha0, w, u_f, window, cfg, imap)
    return grad, J_val, sd


def _step_scale(cfg: MpcConfig, m: int, n: int) -> np.ndarray:
    """Per-variable step scaling by the magnitude of the acting weights."""
    H = cfg.horizon
    s_alpha = 1.0 / max(1.0, float(np.max(np.diag(cfg.Q2))))
    s_w = 1.0 / max(1.0, cfg.r_w, float(np.max(np.diag(cfg.Q1))) * cfg.dt)
    s_uf = 1.0 / max(1.0, cfg.r_uf)
    return np.concatenate((
        np.full(2 * n, s_alpha),
        np.full((H + 1) * n, s_w),
        np.full((H + 1) * (m - n), s_uf),
    ))


def solve(gp_theta, gp_alpha, theta0, window, warm_start, cfg: MpcConfig,
          imap: GpInputMap) -> PlannerSolution:
    """Monotone gradient descent on the plan from a warm start.

    Fixed base step with backtracking halving on non-decrease; a halved
    step stays in effect for the rest of the solve. Terminates at the
    max-norm gradient tolerance or the iteration cap.
    """
    theta0 = np.asarray(theta0, float)
    z = np.asarray(warm_start, float).copy()
    scale = _step_scale(cfg, imap.m, imap.n)
    J, belief, caches, sd, sd_grad = _evaluate(
        gp_theta, gp_alpha, theta0, z, window, cfg, imap
    )
    if not np.isfinite(J):
        raise FloatingPointError("non-finite MPC cost at the warm start")

    def grad_at(zv):
        a0, w, u_f = _unpack(zv, imap.m, imap.n, cfg.horizon)
        return _backprop(belief, caches, sd_grad, a0, w, u_f, window, cfg, imap)

    grad = grad_at(z)
    step = cfg.step_size
    iters = 0
    gnorm = float(np.max(np.abs(grad)))
    while iters < cfg.max_iters and gnorm > cfg.grad_tol:
        accepted = False
        # Beyond ~12 halvings the remaining decrease is at rounding level;
        # treat the direction as exhausted and stop the solve.
        for _ in range(12):
            z_new = z - step * scale * grad
            out = _evaluate(gp_theta, gp_alpha, theta0, z_new, window, cfg, imap)
            if np.isfinite(out[0]) and out[0] <= J:
                z = z_new
                J, belief, caches, sd, sd_grad = out
                accepted = True
                break
            step *= 0.5
        iters += 1
        if not accepted:
            break
        grad = grad_at(z)
        gnorm = float(np.max(np.abs(grad)))
    alpha0, w, u_f = _unpack(z, imap.m, imap.n, cfg.horizon)
    return PlannerSolution(
        alpha_hat0=alpha0, w_hat=w, u_f=u_f, cost=J,
        sigma_d_norm=sd, iterations=iters, grad_norm=gnorm,
    )


class Planner:
    """Receding-horizon wrapper: warm-start management and fault fallback."""

    def __init__(self, gp_theta, gp_alpha, cfg: MpcConfig, imap: GpInputMap,
                 cold_start_iters: int = 0):
        self.gp_theta = gp_theta
        self.gp_alpha = gp_alpha
        self.cfg = cfg
        self.imap = imap
        # With receding-horizon warm starts a couple of descent iterations
        # per period suffice, but the very first plan starts from scratch.
        self.cold_start_iters = max(cold_start_iters, cfg.max_iters)
        self.prev_z: np.ndarray | None = None

    def _shifted_warm_start(self, state) -> np.ndarray:
        m, n, H = self.imap.m, self.imap.n, self.cfg.horizon
        if self.prev_z is None:
            alpha0 = np.concatenate((state.alpha1, state.alpha2))
            return _pack(alpha0, np.zeros((H + 1, n)), np.zeros((H + 1, m - n)))
        alpha0, w, u_f = _unpack(self.prev_z, m, n, H)
        alpha_shift = np.concatenate((
            alpha0[:n] + self.cfg.dt * alpha0[n:],
            alpha0[n:] + self.cfg.dt * w[0],
        ))
        w_shift = np.vstack((w[1:], w[-1:]))
        uf_shift = np.vstack((u_f[1:], u_f[-1:])) if u_f.shape[1] else u_f
        return _pack(alpha_shift, w_shift, uf_shift)

    def step(self, state, window) -> PlannerSolution:
        """Solve the kth MPC problem from the measured state.

        On a planner fault the previous plan is reused shifted one step
        and the solution is flagged degraded.
        """
        theta0 = np.concatenate((state.theta1, state.theta2))
        cfg = self.cfg
        if self.prev_z is None and self.cold_start_iters > cfg.max_iters:
            cfg = replace(cfg, max_iters=self.cold_start_iters)
        warm = self._shifted_warm_start(state)
        try:
            sol = solve(
                self.gp_theta, self.gp_alpha, theta0, window, warm,
                cfg, self.imap,
            )
            self.prev_z = _pack(sol.alpha_hat0, sol.w_hat, sol.u_f)
            return sol
        except FloatingPointError:
            alpha0, w, u_f = _unpack(warm, self.imap.m, self.imap.n, self.cfg.horizon)
            self.prev_z = warm
            return PlannerSolution(
                alpha_hat0=alpha0, w_hat=w, u_f=u_f, cost=np.nan,
                sigma_d_norm=np.nan, iterations=0, grad_norm=np.nan,
                degraded=True,
            )
