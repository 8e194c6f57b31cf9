"""Planar 2-DoF mixing surrogate: velocity-controlled arm with a vertical stick
stirring inside a bowl.

The particle bath is replaced by a viscous drag field inside the bowl and the
bowl wall by a penalty contact.  Contact and drag forces act on the stick tip
and are mapped through the arm Jacobian into joint-velocity perturbations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray


class SimulationDivergedError(RuntimeError):
    pass


class IndeterminateAngleError(ValueError):
    pass


@dataclass(frozen=True)
class ArmConfig:
    link_lengths: tuple[float, float] = (0.35, 0.30)
    stick_length: float = 0.5
    stick_diameter: float = 0.02
    bowl_center: tuple[float, float] = (0.45, 0.0)
    bowl_diameter: float = 0.24
    arm_height: float = 0.0
    contact_stiffness: float = 2000.0   # N/m
    contact_damping: float = 10.0       # N s/m
    drag_coeff: float = 2.0             # N s/m
    joint_inertia: tuple[float, float] = (0.5, 0.2)   # kg m^2
    dt: float = 0.1
    control_scale: float = 4.0          # velocity change per step = control_scale * u * dt
    substeps: int = 20
    max_joint_speed: float = 0.5        # rad/s
    process_noise_std: float = 0.01     # rad/s, on joint velocity per step
    reference_diameter: float = 0.1
    reference_period: float = 5.0
    elbow: float = 1.0                  # sign of theta_2 in the home configuration

    def __post_init__(self):
        positive = (*self.link_lengths, self.stick_length, self.stick_diameter, self.bowl_diameter,
                    self.contact_stiffness, self.contact_damping, self.drag_coeff,
                    *self.joint_inertia, self.dt, self.control_scale, self.max_joint_speed,
                    self.reference_diameter, self.reference_period)
        if min(positive) <= 0 or self.substeps < 1:
            raise ValueError("physical constants must be positive")
        if self.bowl_diameter <= self.stick_diameter:
            raise ValueError("bowl must be wider than the stick")
        if self.process_noise_std < 0:
            raise ValueError("process noise must be non-negative")

    @property
    def wall_radius(self) -> float:
        """Distance from the bowl centre at which the stick surface touches the wall."""
        return 0.5 * (self.bowl_diameter - self.stick_diameter)


@dataclass(frozen=True)
class ContactEvent:
    time: float
    force: float
    point: tuple[float, float]


@dataclass(frozen=True)
class SimState:
    theta: NDArray[np.float64]
    theta_dot: NDArray[np.float64]
    t: float = 0.0
    events: tuple[ContactEvent, ...] = field(default=(), repr=False)


def forward_kinematics(theta, cfg: ArmConfig = ArmConfig()):
    """Tip position ``(x, y, z)`` in the arm frame and tip heading ``theta_1 + theta_2``."""
    theta = np.asarray(theta, dtype=np.float64)
    l1, l2 = cfg.link_lengths
    a1 = theta[..., 0]
    a12 = theta[..., 0] + theta[..., 1]
    x = l1 * np.cos(a1) + l2 * np.cos(a12)
    y = l1 * np.sin(a1) + l2 * np.sin(a12)
    z = np.full_like(x, cfg.arm_height)
    return np.stack([x, y, z], axis=-1), a12


def jacobian(theta, cfg: ArmConfig) -> NDArray[np.float64]:
    l1, l2 = cfg.link_lengths
    a1, a12 = theta[0], theta[0] + theta[1]
    return np.array([
        [-l1 * math.sin(a1) - l2 * math.sin(a12), -l2 * math.sin(a12)],
        [l1 * math.cos(a1) + l2 * math.cos(a12), l2 * math.cos(a12)],
    ])


def inverse_kinematics(p, cfg: ArmConfig = ArmConfig()) -> NDArray[np.float64]:
    x, y = float(p[0]), float(p[1])
    l1, l2 = cfg.link_lengths
    c2 = (x * x + y * y - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    if abs(c2) > 1:
        raise ValueError(f"target {p[:2]} out of reach")
    t2 = cfg.elbow * math.acos(c2)
    t1 = math.atan2(y, x) - math.atan2(l2 * math.sin(t2), l1 + l2 * math.cos(t2))
    return np.array([t1, t2])


def observe(state: SimState) -> NDArray[np.float64]:
    """Belief-space mean ``[sin theta, cos theta, theta_dot]``; sensing is exact."""
    return np.concatenate([np.sin(state.theta), np.cos(state.theta), state.theta_dot])


def angle_recovery(mu_sin, mu_cos) -> NDArray[np.float64]:
    """Joint angle as the phase of ``mu_cos + i mu_sin``, in (-pi, pi]."""
    mu_sin = np.asarray(mu_sin, dtype=np.float64)
    mu_cos = np.asarray(mu_cos, dtype=np.float64)
    if np.any((np.abs(mu_sin) < 1e-12) & (np.abs(mu_cos) < 1e-12)):
        raise IndeterminateAngleError("sin and cos means both vanish")
    return np.angle(mu_cos + 1j * mu_sin)


def reference(t: float, cfg: ArmConfig = ArmConfig()):
    """Circular stirring target: tip position and the heading the arm has there."""
    omega = 2.0 * math.pi / cfg.reference_period
    r = 0.5 * cfg.reference_diameter
    cx, cy = cfg.bowl_center
    p = np.array([cx + r * math.cos(omega * t), cy + r * math.sin(omega * t), cfg.arm_height])
    theta = inverse_kinematics(p, cfg)
    return p, float(theta[0] + theta[1])


def home_state(cfg: ArmConfig = ArmConfig()) -> SimState:
    p, _ = reference(0.0, cfg)
    return SimState(inverse_kinematics(p, cfg), np.zeros(2), 0.0)


class ArmSim:
    """Integrates the surrogate; owns the process-noise generator."""

    def __init__(self, cfg: ArmConfig = ArmConfig(), seed: int | None = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self._inv_inertia = 1.0 / np.asarray(cfg.joint_inertia, dtype=np.float64)
        self._center = np.asarray(cfg.bowl_center, dtype=np.float64)

    def tip_forces(self, theta, theta_dot):
        """Wall (penalty) and drag forces on the stick tip; returns (F_wall, F_drag, |F_wall|, point)."""
        cfg = self.cfg
        p, _ = forward_kinematics(theta, cfg)
        p = p[:2]
        J = jacobian(theta, cfg)
        v = J @ theta_dot
        rel = p - self._center
        r = math.hypot(rel[0], rel[1])
        f_wall = np.zeros(2)
        mag = 0.0
        if r > cfg.wall_radius:
            n = rel / r
            pen = r - cfg.wall_radius
            mag = max(0.0, cfg.contact_stiffness * pen + cfg.contact_damping * float(n @ v))
            f_wall = -mag * n
        f_drag = -cfg.drag_coeff * v if r < 0.5 * cfg.bowl_diameter else np.zeros(2)
        return f_wall, f_drag, mag, p, J

    def step(self, state: SimState, u) -> tuple[SimState, ContactEvent | None]:
        cfg = self.cfg
        u = np.asarray(u, dtype=np.float64)
        vmax = cfg.max_joint_speed
        theta = state.theta.astype(np.float64).copy()
        theta_dot = np.clip(state.theta_dot + cfg.control_scale * u * cfg.dt, -vmax, vmax)
        h = cfg.dt / cfg.substeps
        peak, peak_point = 0.0, None
        for _ in range(cfg.substeps):
            f_wall, f_drag, mag, p, J = self.tip_forces(theta, theta_dot)
            if mag > peak:
                peak, peak_point = mag, (float(p[0]), float(p[1]))
            theta_dot = theta_dot + h * self._inv_inertia * (J.T @ (f_wall + f_drag))
            theta = theta + h * theta_dot
        if cfg.process_noise_std > 0:
            theta_dot = theta_dot + cfg.process_noise_std * self.rng.standard_normal(2)
        theta_dot = np.clip(theta_dot, -vmax, vmax)
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(theta_dot))):
            raise SimulationDivergedError(f"non-finite state at t={state.t:.2f}")
        t = state.t + cfg.dt
        event = ContactEvent(t, peak, peak_point) if peak > 0 else None
        events = state.events + (event,) if event else state.events
        return SimState(theta, theta_dot, t, events), event

    def kinetic_energy(self, state: SimState) -> float:
        return 0.5 * float(np.sum(np.asarray(self.cfg.joint_inertia) * state.theta_dot**2))


def with_noise(cfg: ArmConfig, std: float) -> ArmConfig:
    return replace(cfg, process_noise_std=std)
