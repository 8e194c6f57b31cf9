"""Uncertainty-aware control limits (scaling and translating of a base box).

    K_s = (1 - beta_s) exp(-alpha_s * unc) + beta_s
    K_t = (1 - exp(-alpha_t * unc)) * gamma_t * velocity_mean
    u_max(s) = K_s u_max - K_t,   u_min(s) = K_s u_min - K_t

``unc`` is the spectral norm of the (diagonal) position covariance, i.e. its
largest entry, or ``1 / N`` for the global-uncertainty baseline.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray


class UncertaintySource(str, enum.Enum):
    MODEL = "model"
    GLOBAL = "global"


@dataclass(frozen=True)
class SafetyParams:
    alpha_s: float = 0.0
    alpha_t: float = 0.0
    beta_s: float = 0.3
    gamma_t: float = 0.2
    u_min_base: tuple[float, ...] = (-0.2, -0.2)
    u_max_base: tuple[float, ...] = (0.2, 0.2)
    uncertainty_source: UncertaintySource = UncertaintySource.MODEL
    num_samples: int = field(default=0, compare=False)

    def __post_init__(self):
        if not 0.0 < self.beta_s <= 1.0:
            raise ValueError("beta_s must lie in (0, 1]")
        if min(self.alpha_s, self.alpha_t, self.gamma_t) < 0:
            raise ValueError("alpha_s, alpha_t and gamma_t must be non-negative")
        lo = np.asarray(self.u_min_base, dtype=float)
        hi = np.asarray(self.u_max_base, dtype=float)
        if lo.shape != hi.shape or not np.all(hi > lo):
            raise ValueError("u_max_base must exceed u_min_base elementwise")
        object.__setattr__(self, "uncertainty_source", UncertaintySource(self.uncertainty_source))

    @classmethod
    def from_log_alphas(cls, ln_alpha_s: float | None, ln_alpha_t: float | None, **kw) -> "SafetyParams":
        """``None`` disables a mechanism (alpha = 0)."""
        a_s = 0.0 if ln_alpha_s is None else math.exp(ln_alpha_s)
        a_t = 0.0 if ln_alpha_t is None else math.exp(ln_alpha_t)
        return cls(alpha_s=a_s, alpha_t=a_t, **kw)

    @property
    def base_box(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        return np.asarray(self.u_min_base, dtype=float), np.asarray(self.u_max_base, dtype=float)


def uncertainty(params: SafetyParams, position_var) -> NDArray[np.float64]:
    """Scalar uncertainty per belief; ``position_var`` has shape (..., 2k)."""
    position_var = np.asarray(position_var, dtype=float)
    if params.uncertainty_source is UncertaintySource.GLOBAL:
        n = params.num_samples
        val = 1.0 / n if n > 0 else np.inf
        return np.full(position_var.shape[:-1], val)
    return np.max(position_var, axis=-1)


def _k_s(params: SafetyParams, unc):
    if params.alpha_s == 0.0:
        return np.ones_like(unc)
    return (1.0 - params.beta_s) * np.exp(-params.alpha_s * unc) + params.beta_s


def _k_t(params: SafetyParams, unc, velocity_mean):
    if params.alpha_t == 0.0:
        return np.zeros_like(velocity_mean)
    grow = -np.expm1(-params.alpha_t * unc)
    return grow[..., None] * params.gamma_t * velocity_mean


def k_s(params: SafetyParams, belief) -> float:
    return float(_k_s(params, uncertainty(params, belief.position_var)))


def k_t(params: SafetyParams, belief) -> NDArray[np.float64]:
    unc = uncertainty(params, belief.position_var)
    return _k_t(params, unc, belief.velocity_mean)


def limits_batch(params: SafetyParams, position_var, velocity_mean):
    """Vectorised limits; returns ``(u_min, u_max, K_s)`` with leading batch axes."""
    unc = uncertainty(params, position_var)
    ks = _k_s(params, unc)
    kt = _k_t(params, unc, np.asarray(velocity_mean, dtype=float))
    lo, hi = params.base_box
    return ks[..., None] * lo - kt, ks[..., None] * hi - kt, ks


def limits(params: SafetyParams, belief) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    lo, hi, _ = limits_batch(params, belief.position_var[None], belief.velocity_mean[None])
    return lo[0], hi[0]
