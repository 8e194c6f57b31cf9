"""Receding-horizon probabilistic MPC with state-dependent control boxes.

The deterministic expanded-state dynamics make the box of step ``k`` a plain
function of the predicted belief ``s_k``.  Candidates are evaluated by
rolling the belief forward and projecting every control onto its own box
before it is applied, so any sampled sequence is feasible.  The search is a
cross-entropy method over ``R^{H x U}``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .lgm import LgmModel
from .moment_matching import CLAMP_TOL, BeliefState, clamp_variance, propagate, raw_moments
from .safe_limits import SafetyParams, limits_batch

log = logging.getLogger(__name__)

Kinematics = Callable[[NDArray], tuple[NDArray, NDArray]]
Reference = Callable[[float], tuple[NDArray, float]]


class RolloutDivergedError(ArithmeticError):
    pass


class PlanningFailedError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossSpec:
    """Tracking objective; deliberately has no control-effort weight."""

    reference: Reference
    k_s: float = 1.0
    k_o: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.k_s) and np.isfinite(self.k_o)) or min(self.k_s, self.k_o) < 0:
            raise ValueError("loss weights must be finite and non-negative")


@dataclass(frozen=True)
class SolverConfig:
    horizon: int = 3
    population: int = 64
    elites: int = 8
    iterations: int = 5
    seed: int = 0
    dt: float = 0.1

    def __post_init__(self):
        if not (1 <= self.elites <= self.population) or self.horizon < 1 or self.iterations < 1:
            raise ValueError("invalid solver configuration")


@dataclass(frozen=True)
class MpcPlan:
    controls: NDArray[np.float64]          # (H, U), each inside its own box
    beliefs: tuple[BeliefState, ...]       # s_1 .. s_{H+1}
    loss: float
    iterations: int
    boxes: NDArray[np.float64]             # (H, 2, U): [u_min, u_max] per step
    k_s: NDArray[np.float64]               # (H,)
    uncertainty: NDArray[np.float64]       # (H,) uncertainty used for each box
    t_start: float
    best_history: tuple[float, ...] = ()

    @property
    def first(self) -> NDArray[np.float64]:
        return self.controls[0]


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _angles(mean: NDArray) -> tuple[NDArray, NDArray]:
    """Joint angles from belief means ``(..., 3k)`` and a mask of indeterminate ones."""
    k = mean.shape[-1] // 3
    s, c = mean[..., :k], mean[..., k:2 * k]
    bad = np.any((np.abs(s) < 1e-12) & (np.abs(c) < 1e-12), axis=-1)
    return np.arctan2(s, c), bad


def tracking_loss_batch(means, t: float, loss_spec: LossSpec, kinematics: Kinematics) -> NDArray:
    """Loss of belief means ``(P, 3k)`` at time ``t``; indeterminate angles give ``inf``."""
    theta, bad = _angles(means)
    p, o = kinematics(theta)
    p_ref, o_ref = loss_spec.reference(t)
    loss = loss_spec.k_s * np.linalg.norm(p - p_ref, axis=-1)
    if loss_spec.k_o:
        loss = loss + loss_spec.k_o * np.abs(_wrap(o_ref - o))
    return np.where(bad, np.inf, loss)


def tracking_loss(belief: BeliefState, t: float, loss_spec: LossSpec, kinematics: Kinematics) -> float:
    from .sim_env import angle_recovery

    k = belief.dof
    theta = angle_recovery(belief.mean[:k], belief.mean[k:2 * k])
    p, o = kinematics(theta)
    p_ref, o_ref = loss_spec.reference(t)
    return float(loss_spec.k_s * np.linalg.norm(p - p_ref) + loss_spec.k_o * abs(_wrap(o_ref - o)))


def _rollout_batch(model: LgmModel, s1: BeliefState, controls, safety: SafetyParams,
                   loss_spec: LossSpec, kinematics: Kinematics, t0: float, dt: float,
                   stats: dict | None = None):
    """Roll ``P`` candidates forward; returns projected controls, losses, boxes and beliefs."""
    P, H, U = controls.shape
    k = s1.dof
    mean = np.broadcast_to(s1.mean, (P, s1.mean.size)).copy()
    var = np.broadcast_to(s1.var, (P, s1.var.size)).copy()
    applied = np.empty_like(controls)
    boxes = np.empty((P, H, 2, U))
    ks = np.empty((P, H))
    means = [mean]
    vars_ = [var]
    loss = np.zeros(P)
    dead = np.zeros(P, dtype=bool)
    for h in range(H):
        lo, hi, ks[:, h] = limits_batch(safety, var[:, :2 * k], mean[:, 2 * k:])
        boxes[:, h, 0], boxes[:, h, 1] = lo, hi
        u = np.clip(controls[:, h], lo, hi)
        applied[:, h] = u
        mean, var = raw_moments(model, mean, var, u)
        bad = ~(np.all(np.isfinite(mean), axis=1) & np.all(np.isfinite(var), axis=1)) | np.any(var < -CLAMP_TOL, axis=1)
        dead |= bad
        mean = np.where(bad[:, None], 0.0, mean)
        var = clamp_variance(np.where(bad[:, None], 0.0, var), stats)
        means.append(mean)
        vars_.append(var)
        loss += tracking_loss_batch(mean, t0 + (h + 1) * dt, loss_spec, kinematics)
    loss = np.where(dead, np.inf, loss)
    return applied, loss, boxes, ks, np.stack(means, 1), np.stack(vars_, 1), dead


def rollout(model: LgmModel, s1: BeliefState, controls, safety: SafetyParams, loss_spec: LossSpec,
            kinematics: Kinematics, t0: float = 0.0, dt: float = 0.1):
    """Single-sequence rollout: ``(beliefs, loss, boxes, applied_controls)``.

    Controls are projected onto the box of the belief they are applied in.
    """
    controls = np.atleast_2d(np.asarray(controls, dtype=np.float64))
    applied, loss, boxes, _, means, vars_, dead = _rollout_batch(
        model, s1, controls[None], safety, loss_spec, kinematics, t0, dt)
    if dead[0]:
        raise RolloutDivergedError("belief became non-finite during rollout")
    beliefs = [s1] + [BeliefState(means[0, h], vars_[0, h]) for h in range(1, means.shape[1])]
    return beliefs, float(loss[0]), boxes[0], applied[0]


def _as_plan(model, s1, controls, safety, loss_spec, kinematics, t0, dt, iterations, history) -> MpcPlan:
    applied, loss, boxes, ks, means, vars_, dead = _rollout_batch(
        model, s1, controls[None], safety, loss_spec, kinematics, t0, dt)
    beliefs = (s1,) + tuple(BeliefState(means[0, h], vars_[0, h]) for h in range(1, means.shape[1]))
    k = s1.dof
    unc = np.array([np.max(vars_[0, h, :2 * k]) for h in range(controls.shape[0])])
    return MpcPlan(applied[0], beliefs, float(loss[0]), iterations, boxes[0], ks[0], unc, t0, tuple(history))


def plan(model: LgmModel, s_start: BeliefState, loss_spec: LossSpec, safety: SafetyParams,
         solver: SolverConfig, kinematics: Kinematics, t0: float = 0.0,
         warm_start: NDArray | None = None, seed: int | None = None,
         stats: dict | None = None) -> MpcPlan:
    """Cross-entropy search for an H-step control sequence from ``s_start``.

    ``warm_start`` is the previous plan's control sequence; it is shifted by
    one step with a zero appended.  Deterministic for a fixed ``seed``.
    """
    H, P = solver.horizon, solver.population
    lo, hi = safety.base_box
    U = lo.size
    rng = np.random.default_rng(solver.seed if seed is None else seed)
    mean = np.zeros((H, U))
    if warm_start is not None:
        mean[:-1] = np.asarray(warm_start)[1:H]
    std = np.broadcast_to(0.5 * (hi - lo), (H, U)).copy()
    best_u, best_loss = None, np.inf
    history = []
    for it in range(solver.iterations):
        cand = mean + std * rng.standard_normal((P, H, U))
        cand[0] = mean
        if it == 0:
            cand[1] = 0.0
        applied, loss, *_ = _rollout_batch(model, s_start, cand, safety, loss_spec, kinematics,
                                           t0, solver.dt, stats)
        order = np.argsort(loss, kind="stable")
        if np.isfinite(loss[order[0]]) and loss[order[0]] < best_loss:
            best_loss = float(loss[order[0]])
            best_u = applied[order[0]].copy()
        history.append(best_loss)
        elite = applied[order[: solver.elites]]
        if not np.all(np.isfinite(loss[order[: solver.elites]])):
            continue
        mean = elite.mean(axis=0)
        std = elite.std(axis=0) + 1e-6
    if best_u is None:
        raise PlanningFailedError("every candidate diverged or had an undefined loss")
    return _as_plan(model, s_start, best_u, safety, loss_spec, kinematics, t0, solver.dt,
                    solver.iterations, history)


def ahead_plan(model: LgmModel, s_t: BeliefState, u_committed, loss_spec: LossSpec,
               safety: SafetyParams, solver: SolverConfig, kinematics: Kinematics,
               t: float = 0.0, **kw) -> tuple[BeliefState, MpcPlan]:
    """Predict one step under the committed control, then plan from the prediction.

    Returns the predicted belief (the plan's input) and the plan, whose first
    control is meant for step ``t + dt``.
    """
    s_next = propagate(model, s_t, u_committed)
    return s_next, plan(model, s_next, loss_spec, safety, solver, kinematics, t + solver.dt, **kw)


def with_sample_count(safety: SafetyParams, n: int) -> SafetyParams:
    return replace(safety, num_samples=n)
