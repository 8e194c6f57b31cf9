"""Analytic moment matching through an LGM-FF model.

For a cosine feature ``c cos(a_j)`` with ``a = Omega x + b`` and
``x ~ N(mu, Sigma)`` the phases are jointly Gaussian with mean ``m`` and
covariance ``C = Omega Sigma Omega^T``.  Using ``E[cos z] = exp(-var/2) cos(mean)``::

    q_j   = c exp(-C_jj / 2) cos(m_j)
    Q_jk  = c^2 exp(-(C_jj + C_kk) / 2) [cosh(C_jk) cos m_j cos m_k
                                         + sinh(C_jk) sin m_j sin m_k]

The next-state moments per output are ``w.q`` and
``tr(A^{-1} Q) + w^T Q w - mean^2``.  Only diagonal covariances are carried.
"""

from __future__ import annotations

import logging
import weakref
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .fastfood import DomainError
from .lgm import LgmModel

log = logging.getLogger(__name__)

CLAMP_TOL = 1e-10


class NumericalFailureError(ArithmeticError):
    pass


@dataclass(frozen=True)
class BeliefState:
    """Diagonal Gaussian over ``[sin theta, cos theta, theta_dot]``."""

    mean: NDArray[np.float64]
    var: NDArray[np.float64]

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if mean.shape != var.shape or mean.ndim != 1:
            raise ValueError("mean and var must be 1-D and of equal length")
        if mean.size % 3:
            raise ValueError("belief dimension must be 3k for a k-joint arm")
        if np.any(var < 0):
            raise ValueError("belief variances must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dof(self) -> int:
        return self.mean.size // 3

    @property
    def position_var(self) -> NDArray[np.float64]:
        return self.var[: 2 * self.dof]

    @property
    def velocity_mean(self) -> NDArray[np.float64]:
        return self.mean[2 * self.dof:]

    @classmethod
    def exact(cls, mean) -> "BeliefState":
        mean = np.asarray(mean, dtype=np.float64)
        return cls(mean, np.zeros_like(mean))


def pack(belief: BeliefState) -> NDArray[np.float64]:
    return np.concatenate([belief.mean, belief.var])


def unpack(s) -> BeliefState:
    s = np.asarray(s, dtype=np.float64)
    D = s.size // 2
    return BeliefState(s[:D].copy(), s[D:].copy())


def feature_moments(model: LgmModel, mean, var):
    """Batched ``q`` (P, M) and ``Q`` (P, M, M) for inputs with diagonal variance.

    Writing ``h_j = C_jj / 2`` this equals
    ``c^2 / 2 [e^{C_jk - h_j - h_k} cos(m_j - m_k) + e^{-C_jk - h_j - h_k} cos(m_j + m_k)]``;
    both exponents are <= 0 because ``|C_jk| <= h_j + h_k``, so nothing
    overflows for large input variances.
    """
    Om = model.stack.frequencies
    c2 = 2.0 / model.num_features
    m = mean @ Om.T + model.stack.phases
    C = np.matmul(Om[None] * var[:, None, :], Om.T)
    h = 0.5 * np.einsum("pmm->pm", C)
    hh = h[:, :, None] + h[:, None, :]
    cm, sm = np.cos(m), np.sin(m)
    cc = cm[:, :, None] * cm[:, None, :]
    ss = sm[:, :, None] * sm[:, None, :]
    Q = np.exp(C - hh) * (cc + ss) + np.exp(-C - hh) * (cc - ss)
    Q *= 0.5 * c2
    return np.sqrt(c2) * np.exp(-h) * cm, Q


class _PairTable:
    """Upper-triangle index pairs of the feature covariance, cached per stack."""

    def __init__(self, stack):
        Om = stack.frequencies
        M = Om.shape[0]
        self.i, self.j = np.triu_indices(M)
        self.om_pairs = Om[self.i] * Om[self.j]              # (T, d)
        self.weight = np.where(self.i == self.j, 1.0, 2.0)   # off-diagonals appear twice


_pair_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _pairs(stack) -> _PairTable:
    table = _pair_cache.get(stack)
    if table is None:
        table = _pair_cache[stack] = _PairTable(stack)
    return table


def raw_moments(model: LgmModel, mean, var, u):
    """Unclamped next-state moments for a batch ``(P, D)`` under controls ``(P, U)``.

    Same algebra as :func:`feature_moments`, evaluated on the upper triangle
    of the symmetric ``Q`` only.
    """
    x_mean = np.concatenate([mean, u], axis=1)
    x_var = np.concatenate([var, np.zeros_like(u)], axis=1)
    stack = model.stack
    tab = _pairs(stack)
    c2 = 2.0 / model.num_features
    m = x_mean @ stack.frequencies.T + stack.phases
    C = x_var @ tab.om_pairs.T                                 # (P, T)
    h = 0.5 * (x_var @ (stack.frequencies ** 2).T)             # (P, M)
    hh = h[:, tab.i] + h[:, tab.j]
    cm, sm = np.cos(m), np.sin(m)
    W = model.weights
    mu = (np.sqrt(c2) * np.exp(-h) * cm) @ W.T
    cc = cm[:, tab.i] * cm[:, tab.j]
    ss = sm[:, tab.i] * sm[:, tab.j]
    plus = np.exp(C - hh)
    plus *= cc + ss
    C += hh
    np.negative(C, out=C)
    np.exp(C, out=C)
    C *= cc - ss
    Q = plus + C
    # tr(A^{-1} Q) + w'Qw  =  <A^{-1} + w w', Q>
    B = model.precision_inv[:, tab.i, tab.j] + W[:, tab.i] * W[:, tab.j]
    second = Q @ (B * (0.5 * c2 * tab.weight)).T
    return mu, second - mu**2


def clamp_variance(s2, stats: dict | None = None):
    n_clamped = int(np.count_nonzero(s2 < 0))
    if n_clamped:
        log.debug("clamped %d slightly negative variances", n_clamped)
        if stats is not None:
            stats["clamped"] = stats.get("clamped", 0) + n_clamped
        s2 = np.maximum(s2, 0.0)
    return s2


def propagate_batch(model: LgmModel, mean, var, u, stats: dict | None = None):
    """Moment-match a batch of beliefs ``(P, D)`` under deterministic controls ``(P, U)``."""
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    var = np.atleast_2d(np.asarray(var, dtype=np.float64))
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var)) and np.all(np.isfinite(u))):
        raise DomainError("propagate: non-finite belief or control")
    mu, s2 = raw_moments(model, mean, var, u)
    if np.any(s2 < -CLAMP_TOL):
        raise NumericalFailureError(f"negative propagated variance {s2.min():.3e}")
    return mu, clamp_variance(s2, stats)


def propagate(model: LgmModel, belief: BeliefState, u, stats: dict | None = None) -> BeliefState:
    mu, s2 = propagate_batch(model, belief.mean[None], belief.var[None], np.atleast_1d(u)[None], stats)
    return BeliefState(mu[0], s2[0])


def deterministic_dynamics(model: LgmModel, s, u) -> NDArray[np.float64]:
    """Expanded-state map ``[mean, var] -> [mean', var']``."""
    return pack(propagate(model, unpack(s), u))
