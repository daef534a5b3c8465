"""Analytic ground-truth dynamics for the rotary pendulum and bikebot.

Both platforms are expressed in the external/internal partitioned form:
the actuated coordinates theta track a trajectory while the unactuated
coordinates alpha must balance about an unstable equilibrium. The module
exposes the forward accelerations, the external acceleration map f_theta,
the inverse-dynamics residual kappa_alpha (so that u_d = alpha_ddot +
kappa_alpha), an RK4 integrator with zero-order-hold inputs, and a noisy
observation path for training-data generation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "StatePartition",
    "ControlInput",
    "PendulumParams",
    "BikebotParams",
    "NoiseConfig",
    "PendulumPlant",
    "BikebotPlant",
    "CapsizeError",
    "BalanceDomainError",
    "pendulum_accel",
    "pendulum_f_theta",
    "pendulum_kappa_alpha",
    "bikebot_accel",
    "bikebot_kappa",
    "step",
    "observe",
]


class CapsizeError(RuntimeError):
    """Internal angle left its validity region; the trial terminates."""


class BalanceDomainError(ValueError):
    """State outside the domain of validity of an analytic formula."""


@dataclass
class StatePartition:
    """Partitioned state: actuated (theta) and unactuated (alpha) blocks.

    theta1/theta2 are actuated positions/velocities (m-vectors), alpha1/
    alpha2 unactuated positions/velocities (n-vectors).
    """

    theta1: np.ndarray
    theta2: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray

    def __post_init__(self):
        for name in ("theta1", "theta2", "alpha1", "alpha2"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        if self.theta1.shape != self.theta2.shape:
            raise ValueError("theta1 and theta2 dimensions differ")
        if self.alpha1.shape != self.alpha2.shape:
            raise ValueError("alpha1 and alpha2 dimensions differ")
        if not all(
            np.all(np.isfinite(getattr(self, n)))
            for n in ("theta1", "theta2", "alpha1", "alpha2")
        ):
            raise ValueError("state entries must be finite")

    @property
    def m(self) -> int:
        return self.theta1.shape[0]

    @property
    def n(self) -> int:
        return self.alpha1.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate((self.theta1, self.theta2, self.alpha1, self.alpha2))

    @classmethod
    def from_vector(cls, x: np.ndarray, m: int, n: int) -> "StatePartition":
        x = np.asarray(x, float)
        return cls(x[:m], x[m : 2 * m], x[2 * m : 2 * m + n], x[2 * m + n :])

    def copy(self) -> "StatePartition":
        return StatePartition(
            self.theta1.copy(), self.theta2.copy(),
            self.alpha1.copy(), self.alpha2.copy(),
        )


@dataclass
class ControlInput:
    """Inverse-dynamics input u_d (n-vector) and free input u_f ((m-n)-vector)."""

    u_d: np.ndarray
    u_f: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.u_d = np.atleast_1d(np.asarray(self.u_d, float))
        self.u_f = np.atleast_1d(np.asarray(self.u_f, float)) if np.size(self.u_f) else np.zeros(0)


@dataclass
class PendulumParams:
    """Rotary inverted pendulum parameters (SI), modeled on a desktop kit."""

    m_p: float = 0.024
    l_p: float = 0.129
    l_r: float = 0.085
    J_p: float = 3.3e-5
    J_r: float = 5.7e-5
    d_r: float = 0.0015
    d_p: float = 0.0005
    k_g: float = 70.0
    k_t: float = 0.042
    k_m: float = 0.042
    R_m: float = 8.4
    g: float = 9.81
    v_max: float = 5.0

    def __post_init__(self):
        if min(self.m_p, self.l_p, self.l_r, self.J_p, self.J_r) <= 0:
            raise ValueError("masses, lengths and inertias must be positive")
        if min(self.d_r, self.d_p) < 0:
            raise ValueError("damping must be nonnegative")


@dataclass
class BikebotParams:
    """Autonomous bicycle parameters: point mass on an inverted pendulum roll."""

    m_b: float = 50.0
    l: float = 1.1
    h_b: float = 0.55
    xi: float = 0.25
    J_b: float = 2.0
    g: float = 9.81
    v_min: float = 0.3
    u_f_max: float = 2.0

    def __post_init__(self):
        if self.l <= 0:
            raise ValueError("wheelbase must be positive")
        if abs(self.xi) >= np.pi / 2:
            raise ValueError("caster angle must satisfy |xi| < pi/2")

    @property
    def J_t(self) -> float:
        """Total roll inertia about the ground contact line."""
        return self.m_b * self.h_b**2 + self.J_b


def _pendulum_terms(p: PendulumParams, s: StatePartition):
    """Inertia entries D1-D3 and bias terms H1, H2 of the 2x2 system."""
    th2 = float(s.theta2[0])
    a1 = float(s.alpha1[0])
    a2 = float(s.alpha2[0])
    sa, ca = np.sin(a1), np.cos(a1)
    d1 = p.m_p * p.l_r**2 + 0.25 * p.m_p * p.l_p**2 * sa**2 + p.J_r
    d2 = p.J_p + 0.25 * p.m_p * p.l_p**2
    d3 = -0.5 * p.m_p * p.l_p * p.l_r * ca
    h1 = (
        0.5 * p.m_p * p.l_p**2 * th2 * a2 * sa * ca
        + 0.5 * p.m_p * p.l_p * p.l_r * a2**2 * sa
        + p.d_r * th2
        + (p.k_g**2 * p.k_t * p.k_m / p.R_m) * th2
    )
    h2 = (
        -0.25 * p.m_p * p.l_p**2 * ca * sa * th2**2
        + p.d_p * a2
        - 0.5 * p.m_p * p.l_p * p.g * sa
    )
    return d1, d2, d3, h1, h2


def pendulum_accel(p: PendulumParams, s: StatePartition, u: ControlInput):
    """Solve the 2x2 inertia system for (theta_ddot, alpha_ddot)."""
    d1, d2, d3, h1, h2 = _pendulum_terms(p, s)
    det = d1 * d2 - d3**2
    if abs(det) < 1e-12:
        raise BalanceDomainError(f"near-singular inertia matrix (det={det:.3e})")
    v_m = float(u.u_d[0])
    theta_ddot = (d2 * (v_m - h1) + d3 * h2) / det
    alpha_ddot = (-d1 * h2 - d3 * (v_m - h1)) / det
    return theta_ddot, alpha_ddot


def pendulum_f_theta(p: PendulumParams, s: StatePartition, u: ControlInput) -> float:
    """External acceleration map: theta_ddot as an explicit formula."""
    d1, d2, d3, h1, h2 = _pendulum_terms(p, s)
    det = d1 * d2 - d3**2
    v_m = float(u.u_d[0])
    return (d2 * v_m - h1 * d2 + d3 * h2) / det


def pendulum_kappa_alpha(p: PendulumParams, s: StatePartition, alpha_ddot: float) -> float:
    """Inverse-dynamics residual so that V_m = alpha_ddot + kappa_alpha."""
    d1, d2, d3, h1, h2 = _pendulum_terms(p, s)
    if abs(d3) <= 1e-9:
        raise BalanceDomainError("pendulum near horizontal: coupling term vanishes")
    det = d1 * d2 - d3**2
    return h1 - ((d3 + det) * alpha_ddot + h2 * d1) / d3


def bikebot_accel(p: BikebotParams, s: StatePartition, v_c: float, u: ControlInput):
    """Planar accelerations and roll acceleration of the bikebot.

    u.u_d holds the steering angle, u.u_f the rear-wheel acceleration.
    Yaw is reconstructed from the velocity direction.
    """
    phi = float(s.alpha1[0])
    if abs(phi) >= np.pi / 2:
        raise CapsizeError(f"bikebot capsized: |roll| = {abs(phi):.3f} rad")
    if v_c < 0:
        raise BalanceDomainError("speed must be nonnegative")
    steer = float(u.u_d[0])
    u_f = float(u.u_f[0]) if u.u_f.size else 0.0
    psi = np.arctan2(s.theta2[1], s.theta2[0])
    psi_dot = v_c * np.cos(p.xi) * np.tan(steer) / (p.l * np.cos(phi))
    x_ddot = u_f * np.cos(psi) - v_c * np.sin(psi) * psi_dot
    y_ddot = u_f * np.sin(psi) + v_c * np.cos(psi) * psi_dot
    phi_ddot = (
        -p.m_b * p.h_b * (v_c**2 / p.l) * np.cos(p.xi) * np.tan(steer)
        + p.m_b * p.h_b * p.g * np.sin(phi)
    ) / p.J_t
    return x_ddot, y_ddot, phi_ddot


def bikebot_kappa(
    p: BikebotParams, s: StatePartition, v_c: float, u_f: float, phi_ddot: float
) -> float:
    """Steering residual so that u_d = phi_ddot + kappa reproduces phi_ddot."""
    if v_c <= p.v_min:
        raise BalanceDomainError(
            f"speed {v_c:.3f} m/s at or below the v_min={p.v_min} guard"
        )
    phi = float(s.alpha1[0])
    steer = np.arctan(
        (p.m_b * p.h_b * p.g * p.l * np.sin(phi) - p.J_t * p.l * phi_ddot)
        / (p.m_b * p.h_b * v_c**2 * np.cos(p.xi))
    )
    return steer - phi_ddot


class PendulumPlant:
    """Rotary pendulum: m = n = 1, input is motor voltage."""

    name = "pendulum"
    m = 1
    n = 1

    def __init__(self, params: PendulumParams | None = None):
        self.params = params or PendulumParams()

    def saturate(self, u: ControlInput) -> ControlInput:
        v = np.clip(u.u_d, -self.params.v_max, self.params.v_max)
        return ControlInput(v, np.zeros(0))

    def derivative(self, x: np.ndarray, u: ControlInput) -> np.ndarray:
        s = StatePartition.from_vector(x, self.m, self.n)
        th_dd, al_dd = pendulum_accel(self.params, s, u)
        return np.array([x[1], th_dd, x[3], al_dd])

    def accel(self, s: StatePartition, u: ControlInput):
        return pendulum_accel(self.params, s, u)

    def f_theta(self, s: StatePartition, u: ControlInput) -> float:
        return pendulum_f_theta(self.params, s, u)

    def kappa_alpha(self, s: StatePartition, alpha_ddot: float, u_f=None) -> float:
        return pendulum_kappa_alpha(self.params, s, alpha_ddot)

    def capsized(self, s: StatePartition) -> bool:
        return bool(abs(s.alpha1[0]) > np.pi / 3)


class BikebotPlant:
    """Bikebot: m = 2 planar coordinates, n = 1 roll angle; steering input."""

    name = "bikebot"
    m = 2
    n = 1

    def __init__(self, params: BikebotParams | None = None):
        self.params = params or BikebotParams()

    def saturate(self, u: ControlInput) -> ControlInput:
        steer = np.clip(u.u_d, -np.pi / 3, np.pi / 3)
        u_f = np.clip(u.u_f, -self.params.u_f_max, self.params.u_f_max)
        return ControlInput(steer, u_f)

    def speed(self, s: StatePartition) -> float:
        return float(np.hypot(s.theta2[0], s.theta2[1]))

    def derivative(self, x: np.ndarray, u: ControlInput) -> np.ndarray:
        s = StatePartition.from_vector(x, self.m, self.n)
        v_c = self.speed(s)
        x_dd, y_dd, phi_dd = bikebot_accel(self.params, s, v_c, u)
        return np.array([x[2], x[3], x_dd, y_dd, x[5], phi_dd])

    def accel(self, s: StatePartition, u: ControlInput):
        return bikebot_accel(self.params, s, self.speed(s), u)

    def kappa_alpha(self, s: StatePartition, alpha_ddot: float, u_f: float = 0.0) -> float:
        return bikebot_kappa(self.params, s, self.speed(s), u_f, alpha_ddot)

    def capsized(self, s: StatePartition) -> bool:
        return bool(abs(s.alpha1[0]) >= np.pi / 2)


def step(plant, s: StatePartition, u: ControlInput, dt: float) -> StatePartition:
    """One classical RK4 step with the input held constant over dt."""
    if not 0.0 < dt <= 0.05:
        raise ValueError("dt must lie in (0, 0.05]")
    x = s.as_vector()
    k1 = plant.derivative(x, u)
    k2 = plant.derivative(x + 0.5 * dt * k1, u)
    k3 = plant.derivative(x + 0.5 * dt * k2, u)
    k4 = plant.derivative(x + dt * k3, u)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise FloatingPointError("state overflow during integration")
    return StatePartition.from_vector(x_next, plant.m, plant.n)


def _pendulum_rk4_many(p: PendulumParams, x, v_m: float, dt: float, n_steps: int):
    """Scalar-arithmetic RK4 chain for the pendulum (hot path).

    The stiff electromechanical mode forces sub-millisecond steps, so the
    inner loop avoids array allocation entirely.
    """
    mp, lp, lr = p.m_p, p.l_p, p.l_r
    c_emf = p.d_r + p.k_g**2 * p.k_t * p.k_m / p.R_m
    d2 = p.J_p + 0.25 * mp * lp**2
    c_d1a = mp * lr**2 + p.J_r
    c_d1b = 0.25 * mp * lp**2
    c_h1a = 0.5 * mp * lp**2
    c_h1b = 0.5 * mp * lp * lr
    c_h2a = 0.25 * mp * lp**2
    c_h2g = 0.5 * mp * lp * p.g
    c_d3 = -0.5 * mp * lp * lr

    def deriv(th1, th2, a1, a2):
        sa = math.sin(a1)
        ca = math.cos(a1)
        d1 = c_d1a + c_d1b * sa * sa
        d3 = c_d3 * ca
        h1 = c_h1a * th2 * a2 * sa * ca + c_h1b * a2 * a2 * sa + c_emf * th2
        h2 = -c_h2a * ca * sa * th2 * th2 + p.d_p * a2 - c_h2g * sa
        det = d1 * d2 - d3 * d3
        if abs(det) < 1e-12:
            raise BalanceDomainError(f"near-singular inertia matrix (det={det:.3e})")
        rhs = v_m - h1
        return th2, (d2 * rhs + d3 * h2) / det, a2, (-d1 * h2 - d3 * rhs) / det

    th1, th2, a1, a2 = x
    try:
        for _ in range(n_steps):
            k1 = deriv(th1, th2, a1, a2)
            k2 = deriv(
                th1 + 0.5 * dt * k1[0], th2 + 0.5 * dt * k1[1],
                a1 + 0.5 * dt * k1[2], a2 + 0.5 * dt * k1[3],
            )
            k3 = deriv(
                th1 + 0.5 * dt * k2[0], th2 + 0.5 * dt * k2[1],
                a1 + 0.5 * dt * k2[2], a2 + 0.5 * dt * k2[3],
            )
            k4 = deriv(
                th1 + dt * k3[0], th2 + dt * k3[1],
                a1 + dt * k3[2], a2 + dt * k3[3],
            )
            s6 = dt / 6.0
            th1 += s6 * (k1[0] + 2.0 * (k2[0] + k3[0]) + k4[0])
            th2 += s6 * (k1[1] + 2.0 * (k2[1] + k3[1]) + k4[1])
            a1 += s6 * (k1[2] + 2.0 * (k2[2] + k3[2]) + k4[2])
            a2 += s6 * (k1[3] + 2.0 * (k2[3] + k3[3]) + k4[3])
    except OverflowError as err:
        raise FloatingPointError("state overflow during integration") from err
    out = np.array([th1, th2, a1, a2])
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("state overflow during integration")
    return out


def _bikebot_rk4_many(p: BikebotParams, x, steer: float, u_f: float, dt: float, n_steps: int):
    """Scalar-arithmetic RK4 chain for the bikebot (hot path)."""
    half_pi = math.pi / 2
    c_turn = math.cos(p.xi) * math.tan(steer) / p.l
    c_roll = p.m_b * p.h_b / p.J_t
    g = p.g

    def deriv(xd, yd, phi, phid):
        if abs(phi) >= half_pi:
            raise CapsizeError(f"bikebot capsized: |roll| = {abs(phi):.3f} rad")
        v_c = math.hypot(xd, yd)
        psi_dot = v_c * c_turn / math.cos(phi)
        if v_c > 0.0:
            cpsi, spsi = xd / v_c, yd / v_c
        else:
            cpsi, spsi = 1.0, 0.0
        x_dd = u_f * cpsi - v_c * spsi * psi_dot
        y_dd = u_f * spsi + v_c * cpsi * psi_dot
        phi_dd = c_roll * (-(v_c * v_c) * c_turn + g * math.sin(phi))
        return x_dd, y_dd, phi_dd

    X, Y, xd, yd, phi, phid = x
    try:
        for _ in range(n_steps):
            a1 = deriv(xd, yd, phi, phid)
            v1 = (xd, yd, phid)
            v2 = (xd + 0.5 * dt * a1[0], yd + 0.5 * dt * a1[1], phid + 0.5 * dt * a1[2])
            a2 = deriv(v2[0], v2[1], phi + 0.5 * dt * v1[2], v2[2])
            v3 = (xd + 0.5 * dt * a2[0], yd + 0.5 * dt * a2[1], phid + 0.5 * dt * a2[2])
            a3 = deriv(v3[0], v3[1], phi + 0.5 * dt * v2[2], v3[2])
            v4 = (xd + dt * a3[0], yd + dt * a3[1], phid + dt * a3[2])
            a4 = deriv(v4[0], v4[1], phi + dt * v3[2], v4[2])
            s6 = dt / 6.0
            X += s6 * (xd + 2.0 * (v2[0] + v3[0]) + v4[0])
            Y += s6 * (yd + 2.0 * (v2[1] + v3[1]) + v4[1])
            phi += s6 * (phid + 2.0 * (v2[2] + v3[2]) + v4[2])
            xd += s6 * (a1[0] + 2.0 * (a2[0] + a3[0]) + a4[0])
            yd += s6 * (a1[1] + 2.0 * (a2[1] + a3[1]) + a4[1])
            phid += s6 * (a1[2] + 2.0 * (a2[2] + a3[2]) + a4[2])
    except OverflowError as err:
        raise FloatingPointError("state overflow during integration") from err
    out = np.array([X, Y, xd, yd, phi, phid])
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("state overflow during integration")
    return out


def step_many(plant, s: StatePartition, u: ControlInput, dt: float, n_steps: int) -> StatePartition:
    """n_steps RK4 steps with the input held constant throughout.

    Matches repeated calls to :func:`step` to machine precision; plants
    with a scalar fast path use it to avoid per-step array overhead.
    """
    if not 0.0 < dt <= 0.05:
        raise ValueError("dt must lie in (0, 0.05]")
    if plant.name == "pendulum":
        x = _pendulum_rk4_many(plant.params, s.as_vector(), float(u.u_d[0]), dt, n_steps)
    elif plant.name == "bikebot":
        u_f = float(u.u_f[0]) if u.u_f.size else 0.0
        x = _bikebot_rk4_many(plant.params, s.as_vector(), float(u.u_d[0]), u_f, dt, n_steps)
    else:
        for _ in range(n_steps):
            s = step(plant, s, u, dt)
        return s
    return StatePartition.from_vector(x, plant.m, plant.n)


@dataclass(frozen=True)
class NoiseConfig:
    """Per-channel Gaussian observation-noise standard deviations."""

    angle_std: float = 1e-3
    rate_std: float = 1e-2
    accel_std: float = 5e-2

    def scaled(self, factor: float) -> "NoiseConfig":
        return NoiseConfig(
            self.angle_std * factor, self.rate_std * factor, self.accel_std * factor
        )


NOISELESS = NoiseConfig(0.0, 0.0, 0.0)


def observe(
    s: StatePartition,
    accels: np.ndarray,
    rng: np.random.Generator,
    noise: NoiseConfig,
):
    """Emulated measurement: state plus accelerations with additive noise.

    Returns a (noisy state, noisy accelerations) pair; the input state is
    not modified. Deterministic under a seeded generator.
    """
    accels = np.atleast_1d(np.asarray(accels, float))
    noisy = StatePartition(
        s.theta1 + rng.normal(0.0, 1.0, s.m) * noise.angle_std,
        s.theta2 + rng.normal(0.0, 1.0, s.m) * noise.rate_std,
        s.alpha1 + rng.normal(0.0, 1.0, s.n) * noise.angle_std,
        s.alpha2 + rng.normal(0.0, 1.0, s.n) * noise.rate_std,
    )
    noisy_acc = accels + rng.normal(0.0, 1.0, accels.shape[0]) * noise.accel_std
    return noisy, noisy_acc
