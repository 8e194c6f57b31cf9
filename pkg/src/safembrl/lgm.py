"""Bayesian linear-Gaussian regression on Fastfood features.

One independent model per output dimension ``i``::

    A_i = Phi Phi^T / sn2_i + I / ss2_i
    w_i = A_i^{-1} Phi y_i / sn2_i

with predictive ``N(w_i . phi*, phi*^T A_i^{-1} phi*)``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from .fastfood import DomainError, FastfoodStack, build_stack, features

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_JITTER0 = 1e-10
_JITTER_TRIES = 3


class SingularModelError(np.linalg.LinAlgError):
    def __init__(self, dim: int):
        super().__init__(f"precision matrix of output dimension {dim} is not positive definite")
        self.dim = dim


class UndefinedEvidenceError(ValueError):
    pass


@dataclass
class TrainingDataset:
    inputs: NDArray[np.float64]
    targets: NDArray[np.float64]

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have the same number of rows")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise DomainError("training data must be finite")

    @classmethod
    def empty(cls, input_dim: int, output_dim: int) -> "TrainingDataset":
        return cls(np.zeros((0, input_dim)), np.zeros((0, output_dim)))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def append(self, x, y) -> "TrainingDataset":
        return TrainingDataset(np.vstack([self.inputs, np.atleast_2d(x)]),
                               np.vstack([self.targets, np.atleast_2d(y)]))


@dataclass(frozen=True)
class LgmModel:
    stack: FastfoodStack
    weights: NDArray[np.float64]          # (D, M)
    chol: NDArray[np.float64]             # (D, M, M) lower Cholesky factors of A_i
    precision_inv: NDArray[np.float64]    # (D, M, M) A_i^{-1}
    noise_vars: NDArray[np.float64]       # (D,)
    signal_vars: NDArray[np.float64]      # (D,)
    num_samples: int

    @property
    def output_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_features(self) -> int:
        return self.weights.shape[1]


def _cholesky_with_jitter(A: NDArray, dim: int) -> NDArray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    jitter = _JITTER0
    for _ in range(_JITTER_TRIES):
        try:
            L = np.linalg.cholesky(A + jitter * np.eye(A.shape[0]))
            log.warning("added jitter %.1e to precision of dimension %d", jitter, dim)
            return L
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularModelError(dim)


def _as_vector(v, n: int, name: str) -> NDArray[np.float64]:
    out = np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)).copy()
    if not np.all(out > 0):
        raise ValueError(f"{name} must be positive")
    return out


def fit(dataset: TrainingDataset, stack: FastfoodStack, noise_vars, signal_vars) -> LgmModel:
    """Exact normal-equation solve per output dimension; N = 0 yields the prior."""
    D = dataset.targets.shape[1]
    M = stack.num_features
    sn2 = _as_vector(noise_vars, D, "noise_vars")
    ss2 = _as_vector(signal_vars, D, "signal_vars")
    if len(dataset):
        Phi = features(stack, dataset.inputs)  # (N, M): rows are phi(x_t)
        gram = Phi.T @ Phi
        proj = Phi.T @ dataset.targets         # (M, D)
    else:
        gram = np.zeros((M, M))
        proj = np.zeros((M, D))
    eye = np.eye(M)
    W = np.empty((D, M))
    L = np.empty((D, M, M))
    Ainv = np.empty((D, M, M))
    for i in range(D):
        A = gram / sn2[i] + eye / ss2[i]
        L[i] = _cholesky_with_jitter(A, i)
        W[i] = scipy.linalg.cho_solve((L[i], True), proj[:, i]) / sn2[i]
        Ainv[i] = scipy.linalg.cho_solve((L[i], True), eye)
        Ainv[i] = 0.5 * (Ainv[i] + Ainv[i].T)
    return LgmModel(stack, W, L, Ainv, sn2, ss2, len(dataset))


def predict(model: LgmModel, x) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Posterior mean and variance of every output dimension at ``x``.

    ``x`` may be a single input or a batch ``(n, input_dim)``; outputs carry a
    trailing ``D`` axis.
    """
    phi = features(model.stack, x)
    mean = phi @ model.weights.T
    var = np.stack([np.sum((phi @ Ainv) * phi, axis=-1) for Ainv in model.precision_inv], axis=-1)
    return mean, np.maximum(var, 0.0)


def _evidence_from_features(Phi, Y, sn2, ss2) -> NDArray[np.float64]:
    N, M = Phi.shape
    gram = Phi.T @ Phi
    proj = Phi.T @ Y
    out = np.empty(Y.shape[1])
    for i in range(Y.shape[1]):
        A = gram / sn2[i] + np.eye(M) / ss2[i]
        L = _cholesky_with_jitter(A, i)
        w = scipy.linalg.cho_solve((L, True), proj[:, i]) / sn2[i]
        resid = Y[:, i] - Phi @ w
        quad = resid @ resid / sn2[i] + w @ w / ss2[i]
        logdet = N * np.log(sn2[i]) + M * np.log(ss2[i]) + 2.0 * np.sum(np.log(np.diag(L)))
        out[i] = -0.5 * (quad + logdet + N * np.log(2.0 * np.pi))
    return out


def log_evidence(dataset: TrainingDataset, stack: FastfoodStack, noise_vars, signal_vars) -> NDArray[np.float64]:
    """Log marginal likelihood ``log N(y_i | 0, ss2 Phi^T Phi + sn2 I)`` per output dimension."""
    if len(dataset) == 0:
        raise UndefinedEvidenceError("log evidence needs at least one sample")
    D = dataset.targets.shape[1]
    sn2 = _as_vector(noise_vars, D, "noise_vars")
    ss2 = _as_vector(signal_vars, D, "signal_vars")
    return _evidence_from_features(features(stack, dataset.inputs), dataset.targets, sn2, ss2)


@dataclass(frozen=True)
class GridSpec:
    """Log-spaced candidate values for coordinate-wise evidence maximisation."""

    noise_std: tuple[float, ...] = tuple(np.logspace(-2, 0, 7))
    signal_std: tuple[float, ...] = tuple(np.logspace(-1, 1, 5))
    lengthscale: tuple[float, ...] = tuple(np.logspace(-0.5, 1.5, 5))
    sweeps: int = 2
    num_features: int = 65
    seed: int = 0
    initial_lengthscales: tuple[float, ...] | None = None


@dataclass(frozen=True)
class Hyperparameters:
    noise_vars: NDArray[np.float64]
    signal_vars: NDArray[np.float64]
    lengthscales: NDArray[np.float64]

    def __iter__(self):
        return iter((self.noise_vars, self.signal_vars, self.lengthscales))


def _best_noise_signal(Phi, Y, grid: GridSpec):
    """Per output dimension, exhaustive search of the (noise, signal) grid.

    Uses one eigendecomposition of the Gram matrix so each candidate is O(M).
    """
    N, M = Phi.shape
    evals, evecs = np.linalg.eigh(Phi.T @ Phi)
    evals = np.maximum(evals, 0.0)
    proj = evecs.T @ (Phi.T @ Y)    # (M, D)
    yy = np.sum(Y * Y, axis=0)
    D = Y.shape[1]
    best = np.full(D, -np.inf)
    best_sn = np.empty(D)
    best_ss = np.empty(D)
    for sn, ss in itertools.product(grid.noise_std, grid.signal_std):
        sn2, ss2 = sn * sn, ss * ss
        a = evals / sn2 + 1.0 / ss2
        # y^T C^{-1} y = (y.y)/sn2 - |proj|^2 / (sn2^2 a); log|C| = N log sn2 + M log ss2 + sum log a
        quad = yy / sn2 - np.sum(proj**2 / a[:, None], axis=0) / sn2**2
        logdet = N * np.log(sn2) + M * np.log(ss2) + np.sum(np.log(a))
        ev = -0.5 * (quad + logdet + N * np.log(2.0 * np.pi))
        better = ev > best
        best = np.where(better, ev, best)
        best_sn = np.where(better, sn2, best_sn)
        best_ss = np.where(better, ss2, best_ss)
    return best_sn, best_ss, float(np.sum(best))


def select_hyperparameters(dataset: TrainingDataset, grid: GridSpec = GridSpec()) -> Hyperparameters:
    """Coordinate-wise log-grid search of summed log evidence.

    Lengthscales (shared across output dimensions, one per input dimension)
    are updated one coordinate at a time; for each candidate the stack is
    rebuilt from the same seed and the noise/signal variances of every output
    are re-optimised.
    """
    if len(dataset) == 0:
        raise UndefinedEvidenceError("hyperparameter selection needs data")
    X, Y = dataset.inputs, dataset.targets
    d = X.shape[1]
    base = build_stack(d, grid.num_features, 1.0, grid.seed)
    if grid.initial_lengthscales is not None:
        ell = np.asarray(grid.initial_lengthscales, dtype=np.float64).copy()
    else:
        ell = np.full(d, grid.lengthscale[len(grid.lengthscale) // 2])

    def score(ells):
        Phi = features(base.with_lengthscales(ells), X)
        return _best_noise_signal(Phi, Y, grid)

    sn2, ss2, best = score(ell)
    for _ in range(grid.sweeps):
        changed = False
        for k in range(d):
            for cand in grid.lengthscale:
                if cand == ell[k]:
                    continue
                trial = ell.copy()
                trial[k] = cand
                t_sn2, t_ss2, t_best = score(trial)
                if t_best > best + 1e-9:
                    ell, sn2, ss2, best = trial, t_sn2, t_ss2, t_best
                    changed = True
        if not changed:
            break
    return Hyperparameters(sn2, ss2, ell)


def save_checkpoint(model: LgmModel, path) -> None:
    """Write every model field to an ``.npz`` archive with a version header."""
    st = model.stack
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "weights": model.weights,
        "chol": model.chol,
        "precision_inv": model.precision_inv,
        "noise_vars": model.noise_vars,
        "signal_vars": model.signal_vars,
        "num_samples": np.array(model.num_samples),
        "stack_input_dim": np.array(st.input_dim),
        "stack_padded_dim": np.array(st.padded_dim),
        "stack_num_features": np.array(st.num_features),
        "stack_phases": st.phases,
        "stack_lengthscales": st.lengthscales,
        "stack_seed": np.array(st.seed),
        "stack_S": np.stack([b.S for b in st.blocks]),
        "stack_G": np.stack([b.G for b in st.blocks]),
        "stack_B": np.stack([b.B for b in st.blocks]),
        "stack_perm": np.stack([b.perm for b in st.blocks]),
    }
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> LgmModel:
    from .fastfood import FastfoodBlock

    with np.load(Path(path)) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        blocks = []
        for S, G, B, perm in zip(z["stack_S"], z["stack_G"], z["stack_B"], z["stack_perm"]):
            for arr in (S, G, B, perm):
                arr.setflags(write=False)
            blocks.append(FastfoodBlock(S=S, G=G, B=B, perm=perm))
        phases = z["stack_phases"]
        ell = z["stack_lengthscales"]
        stack = FastfoodStack(int(z["stack_input_dim"]), int(z["stack_padded_dim"]),
                              int(z["stack_num_features"]), tuple(blocks), phases, ell,
                              int(z["stack_seed"]))
        return LgmModel(stack, z["weights"], z["chol"], z["precision_inv"],
                        z["noise_vars"], z["signal_vars"], int(z["num_samples"]))
