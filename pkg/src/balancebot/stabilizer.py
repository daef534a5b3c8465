"""Fast-time-scale stabilization of the unactuated (internal) subsystem.

Contains the PD virtual input on the singularly-perturbed error
coordinates, the Lyapunov machinery (A, P, Q, M) behind the robust
auxiliary term, the disturbance bound rho, the GP inverse-dynamics
control law, and the physical-model baseline with its balance-manifold
(BEM) inversion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import BalanceDomainError, ControlInput, StatePartition

__all__ = [
    "PdGains",
    "RobustConfig",
    "StabilizerOutput",
    "build_gains",
    "pd_virtual_input",
    "rho_bound",
    "robust_aux",
    "gp_inverse_control",
    "envelope_constants",
    "BemSolver",
    "eic_bem_solve",
    "eic_control",
]


@dataclass(frozen=True)
class PdGains:
    """PD gains and the singular-perturbation scale of the internal loop."""

    k_p: float = 25.0
    k_d: float = 12.0
    epsilon: float = 0.1

    def __post_init__(self):
        if self.k_p <= 0 or self.k_d <= 0:
            raise ValueError("gains must be positive")
        if self.k_d**2 <= 4.0 * self.k_p:
            raise ValueError("k_d^2 must exceed 4 k_p (real eigenvalues)")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")


@dataclass
class RobustConfig:
    """Lyapunov matrices and constants for the auxiliary control term.

    Built by :func:`build_gains`; satisfies A^T P + P A = -Q and
    A = M Lambda M^{-1} by construction.
    """

    n: int
    lambda1: float
    lambda2: float
    A: np.ndarray
    B: np.ndarray
    M: np.ndarray
    Lambda: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    xi: float
    taylor_consts: tuple = (0.01, 0.1, 0.5)
    a_kappa_min: float = 1.0
    robust_on: bool = True
    m_norm: float = field(init=False)

    def __post_init__(self):
        self.m_norm = float(np.linalg.norm(self.M, 2))


@dataclass
class StabilizerOutput:
    """One control period of the internal-loop law."""

    u_d_mean: np.ndarray
    u_d_cov: np.ndarray
    virtual_input: np.ndarray
    aux: np.ndarray
    rho: float
    beta_sigma_norm: float


def build_gains(
    k_p: float = 25.0,
    k_d: float = 12.0,
    epsilon: float = 0.1,
    n: int = 1,
    taylor_consts: tuple = (0.01, 0.1, 0.5),
    a_kappa_min: float = 1.0,
    xi: float | None = None,
    robust_on: bool = True,
) -> tuple[PdGains, RobustConfig]:
    """Build the PD gains and the Lyapunov data of the error dynamics.

    The internal error e = (e_alpha1, e_alpha2) obeys e_dot = A e + B d
    with A having eigenvalues lambda1/eps and lambda2/eps (each with
    multiplicity n); P solves the Lyapunov equation for Q = M^{-T}M^{-1}.
    """
    gains = PdGains(k_p, k_d, epsilon)
    disc = k_d**2 - 4.0 * k_p
    lam1 = (-k_d + np.sqrt(disc)) / 2.0
    lam2 = (-k_d - np.sqrt(disc)) / 2.0
    eye = np.eye(n)
    M = np.block([[epsilon * eye, epsilon * eye], [lam1 * eye, lam2 * eye]])
    Lam = np.block([[(lam1 / epsilon) * eye, 0 * eye], [0 * eye, (lam2 / epsilon) * eye]])
    M_inv = np.linalg.inv(M)
    A = M @ Lam @ M_inv
    B = np.vstack((np.zeros((n, n)), eye))
    P_alpha = np.block(
        [[(-epsilon / (2 * lam1)) * eye, 0 * eye], [0 * eye, (-epsilon / (2 * lam2)) * eye]]
    )
    P = M_inv.T @ P_alpha @ M_inv
    Q = M_inv.T @ M_inv
    cfg = RobustConfig(
        n=n, lambda1=lam1, lambda2=lam2, A=A, B=B, M=M, Lambda=Lam,
        P=P, Q=Q, xi=0.0, taylor_consts=tuple(taylor_consts),
        a_kappa_min=a_kappa_min, robust_on=robust_on,
    )
    if xi is None:
        c2 = cfg.taylor_consts[2]
        xi = a_kappa_min / (c2 * cfg.m_norm**2)
    cfg.xi = float(xi)
    return gains, cfg


def pd_virtual_input(gains: PdGains, alpha: np.ndarray, plan, r: np.ndarray) -> np.ndarray:
    """Virtual acceleration command for the internal subsystem.

    ``plan`` is the pair (alpha_hat0, w_hat): the freshly planned internal
    state anchor and its acceleration.
    """
    alpha = np.asarray(alpha, float)
    alpha_hat0, w_hat = plan
    alpha_hat0 = np.asarray(alpha_hat0, float)
    w_hat = np.atleast_1d(np.asarray(w_hat, float))
    n = w_hat.shape[0]
    e1 = alpha[:n] - alpha_hat0[:n]
    e2 = alpha[n:] - alpha_hat0[n:]
    return (
        w_hat
        - (gains.k_d / gains.epsilon) * e2
        - (gains.k_p / gains.epsilon**2) * e1
        + np.atleast_1d(np.asarray(r, float))
    )


def rho_bound(cfg: RobustConfig, e_alpha: np.ndarray, beta_sigma_norm: float) -> float:
    """Disturbance upper bound from the Taylor-remainder constants."""
    c0, c1, c2 = cfg.taylor_consts
    e = float(np.linalg.norm(e_alpha))
    return (c0 + c1 * e + c2 * e**2 + beta_sigma_norm) / cfg.a_kappa_min


def robust_aux(cfg: RobustConfig, e_alpha: np.ndarray, rho: float) -> np.ndarray:
    """Continuous unit-vector auxiliary control with dead-zone smoothing."""
    if not cfg.robust_on:
        return np.zeros(cfg.n)
    s = cfg.B.T @ cfg.P @ np.asarray(e_alpha, float)
    s_norm = float(np.linalg.norm(s))
    if s_norm > cfg.xi:
        return -rho * s / s_norm
    return -(rho / cfg.xi) * s


def envelope_constants(
    gains: PdGains, cfg: RobustConfig, beta_sigma_norm: float
) -> tuple[float, float]:
    """Exponential-envelope constants (d1, d2) of the internal error norm."""
    c0, c1, c2 = cfg.taylor_consts
    m2 = cfg.m_norm**2
    c3 = (
        0.25 * c1**2 / (c2**2 * m2)
        + 0.5 * c0 / (c2 * m2)
        + beta_sigma_norm / (4.0 * c2 * m2)
    )
    evals = np.linalg.eigvalsh(cfg.P)
    p_min, p_max = float(evals[0]), float(evals[-1])
    d1 = np.sqrt(p_max / p_min)
    d2 = np.sqrt(-2.0 * gains.epsilon * c3 / (cfg.lambda1 * p_min))
    return float(d1), float(d2)


def gp_inverse_control(
    gp_alpha,
    state: StatePartition,
    u_f: np.ndarray,
    plan,
    gains: PdGains,
    cfg: RobustConfig,
    feature_fn,
    beta_alpha: float = 1.0,
    v_limit: float | None = None,
) -> StabilizerOutput:
    """GP inverse-dynamics law: u_d = v + mu_alpha with uncertainty Sigma_d.

    ``feature_fn(state, v, u_f)`` maps the current state and virtual input
    to the GP query point. Far from the training support the posterior
    mean vanishes and the law degenerates to u_d = v; ``v_limit`` clips
    the virtual input to the support of the inverse model, where the
    degenerate law would otherwise have the wrong sign entirely.
    """
    alpha = np.concatenate((state.alpha1, state.alpha2))
    alpha_hat0 = np.asarray(plan[0], float)
    e_alpha = alpha - alpha_hat0
    # Provisional query (r = 0) to evaluate the uncertainty entering rho.
    v0 = pd_virtual_input(gains, alpha, plan, np.zeros(cfg.n))
    if v_limit is not None:
        v0 = np.clip(v0, -v_limit, v_limit)
    _, var0 = gp_alpha.predict(feature_fn(state, v0, u_f))
    bsn = beta_alpha * float(np.linalg.norm(np.sqrt(var0)))
    rho = rho_bound(cfg, e_alpha, bsn)
    r = robust_aux(cfg, e_alpha, rho)
    v = v0 + r
    if v_limit is not None:
        v = np.clip(v, -v_limit, v_limit)
    mu, var = gp_alpha.predict(feature_fn(state, v, u_f))
    return StabilizerOutput(
        u_d_mean=v + mu,
        u_d_cov=np.atleast_1d(var),
        virtual_input=v,
        aux=r,
        rho=float(rho),
        beta_sigma_norm=bsn,
    )


class BemSolver:
    """Scalar balance-equilibrium-manifold inversion with warm starts.

    Newton with a numeric Jacobian, falling back to bisection on the
    platform bracket when Newton stalls or leaves the bracket.
    """

    def __init__(self, bracket: float, tol: float = 1e-10, max_iter: int = 50,
                 slew: float | None = None):
        self.bracket = float(bracket)
        self.tol = tol
        self.max_iter = max_iter
        self.slew = slew
        self.warm = 0.0

    def solve(self, residual) -> float:
        """Root of ``residual`` in the bracket, slew-limited if configured.

        The slew limit bounds the change of the returned equilibrium per
        call: the internal subsystem can only realize a bounded reference
        rate, and an unlimited reference winds up the saturated input.
        """
        prev = self.warm
        root = self._root(residual)
        if self.slew is not None:
            root = float(np.clip(root, prev - self.slew, prev + self.slew))
            self.warm = root
        return root

    def _root(self, residual) -> float:
        a = self.warm
        if abs(a) > self.bracket:
            a = 0.0
        for _ in range(self.max_iter):
            f = residual(a)
            if abs(f) < self.tol:
                self.warm = a
                return a
            h = 1e-6
            df = (residual(a + h) - residual(a - h)) / (2.0 * h)
            if df == 0.0 or not np.isfinite(df):
                break
            a_next = a - f / df
            if not np.isfinite(a_next) or abs(a_next) > self.bracket:
                break
            a = a_next
        return self._bisect(residual)

    def _bisect(self, residual) -> float:
        lo, hi = -self.bracket, self.bracket
        f_lo, f_hi = residual(lo), residual(hi)
        if not np.isfinite(f_lo) or not np.isfinite(f_hi) or f_lo * f_hi > 0:
            raise BalanceDomainError(
                "balance-manifold inversion infeasible: no root in bracket"
            )
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            f_mid = residual(mid)
            if abs(f_mid) < self.tol or hi - lo < 1e-14:
                self.warm = mid
                return mid
            if f_lo * f_mid <= 0:
                hi, f_hi = mid, f_mid
            else:
                lo, f_lo = mid, f_mid
        self.warm = 0.5 * (lo + hi)
        return self.warm


def _pendulum_bem_residual(plant, theta2: float, demand: float):
    """Residual of theta_ddot(alpha_d) = demand on the balance manifold.

    On the manifold alpha_ddot = 0 and alpha2 = 0, the external
    acceleration reduces to -H2/D3, independent of the motor input.
    """
    from .dynamics import _pendulum_terms

    def residual(a):
        s = StatePartition([0.0], [theta2], [a], [0.0])
        _, _, d3, _, h2 = _pendulum_terms(plant.params, s)
        if abs(d3) <= 1e-9:
            return np.inf
        return -h2 / d3 - demand

    return residual


def eic_bem_solve(plant, state: StatePartition, demand: np.ndarray, solver: BemSolver) -> float:
    """Solve for the internal equilibrium angle realizing the demand.

    ``demand`` is the commanded external acceleration vector (PD-shaped
    tracking demand). Pendulum: invert the manifold acceleration map.
    Bikebot: roll balancing the lateral component of the demand.
    """
    demand = np.atleast_1d(np.asarray(demand, float))
    if plant.name == "pendulum":
        return solver.solve(
            _pendulum_bem_residual(plant, float(state.theta2[0]), float(demand[0]))
        )
    # Bikebot: lateral demand in the body frame; equilibrium roll satisfies
    # g * tan(phi_d) = a_lat.
    psi = np.arctan2(state.theta2[1], state.theta2[0])
    a_lat = -demand[0] * np.sin(psi) + demand[1] * np.cos(psi)
    g = plant.params.g
    # Roll-command limit: demands beyond the largest lateral acceleration
    # attainable inside the roll bracket are clamped to keep the
    # equilibrium solvable (transient countersteer can spike the PD demand).
    a_max = g * np.tan(solver.bracket) * (1.0 - 1e-9)
    a_lat = float(np.clip(a_lat, -a_max, a_max))

    def residual(a):
        return g * np.tan(a) - a_lat

    return solver.solve(residual)


def eic_control(
    plant,
    state: StatePartition,
    theta_d: tuple,
    gains: PdGains,
    ext_gains: tuple = (4.0, 4.0),
    solver: BemSolver | None = None,
) -> ControlInput:
    """Physical-model baseline: external PD + BEM + analytic inverse dynamics.

    ``theta_d`` is (position, velocity, acceleration) of the desired
    external trajectory; ``ext_gains`` are the slow outer-loop PD gains.
    """
    if solver is None:
        bracket = np.pi / 3 if plant.name == "pendulum" else 0.5
        solver = BemSolver(bracket)
    pos_d, vel_d, acc_d = (np.atleast_1d(np.asarray(v, float)) for v in theta_d)
    kp_e, kd_e = ext_gains

    if plant.name == "pendulum":
        demand = acc_d - kd_e * (state.theta2 - vel_d) - kp_e * (state.theta1 - pos_d)
        alpha_d1 = eic_bem_solve(plant, state, demand, solver)
        u_f = np.zeros(0)
        u_f_scalar = 0.0
    else:
        # Bikebot outer loop: pursuit shaping. Raw position-PD demand fed
        # straight to the roll manifold is unstable here (the countersteer
        # transient moves the contact line the wrong way first), so the
        # position error instead bends the desired course, the heading
        # error sets the yaw-rate demand, and the yaw rate maps to the
        # equilibrium roll through the manifold.
        psi = np.arctan2(state.theta2[1], state.theta2[0])
        v_c = float(np.hypot(state.theta2[0], state.theta2[1]))
        v_ref = float(np.hypot(vel_d[0], vel_d[1]))
        course = vel_d + kp_e * (pos_d - state.theta1)
        psi_d = np.arctan2(course[1], course[0])
        e_psi = float(np.arctan2(np.sin(psi_d - psi), np.cos(psi_d - psi)))
        psidot_ff = float(
            (vel_d[0] * acc_d[1] - vel_d[1] * acc_d[0]) / max(v_ref**2, 1e-6)
        )
        a_lat = v_c * (psidot_ff + kd_e * e_psi)
        # World-frame demand with the commanded lateral component; the
        # manifold solve projects back onto the same body normal.
        demand = np.array([-a_lat * np.sin(psi), a_lat * np.cos(psi)])
        alpha_d1 = eic_bem_solve(plant, state, demand, solver)
        # Longitudinal channel: along-track feedforward plus speed
        # regulation. Position-error braking is deliberately excluded --
        # losing speed costs the steering authority that keeps the roll
        # stabilizable.
        a_long = float(acc_d[0]) * np.cos(psi) + float(acc_d[1]) * np.sin(psi)
        u_f_scalar = float(np.clip(
            a_long + kd_e * (v_ref - v_c),
            -plant.params.u_f_max, plant.params.u_f_max,
        ))
        u_f = np.array([u_f_scalar])

    alpha = np.concatenate((state.alpha1, state.alpha2))
    plan = (np.array([alpha_d1, 0.0]), np.zeros(plant.n))
    v = pd_virtual_input(gains, alpha, plan, np.zeros(plant.n))
    u_d = v + plant.kappa_alpha(state, float(v[0]), u_f_scalar)
    return plant.saturate(ControlInput(u_d, u_f))
