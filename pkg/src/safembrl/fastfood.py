"""Fastfood random Fourier features for the ARD squared-exponential kernel.

The feature map is

    phi_j(x) = sqrt(2 / M) * cos(w_j . (x / ell) + b_j)

where the frequency rows ``w_j`` are never stored: each block of
``padded_dim`` rows is the structured product ``S H G Pi H B / sqrt(d)``
(Le, Sarlos & Smola, 2013), evaluated with two fast Walsh-Hadamard
transforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import NDArray


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p <<= 1
    return p


def fwht(v: NDArray) -> NDArray[np.float64]:
    """Unnormalised Walsh-Hadamard transform along the last axis.

    Leading axes are treated as a batch. ``fwht(fwht(v)) == n * v``.
    """
    a = np.array(v, dtype=np.float64, copy=True)
    n = a.shape[-1] if a.ndim else 0
    if not _is_pow2(n):
        raise ShapeError(f"fwht needs a power-of-two length, got {n}")
    batch = a.shape[:-1]
    h = 1
    while h < n:
        view = a.reshape(*batch, n // (2 * h), 2, h)
        x = view[..., 0, :].copy()
        view[..., 0, :] += view[..., 1, :]
        np.subtract(x, view[..., 1, :], out=view[..., 1, :])
        h *= 2
    return a


@dataclass(frozen=True)
class FastfoodBlock:
    S: NDArray[np.float64]
    G: NDArray[np.float64]
    B: NDArray[np.float64]
    perm: NDArray[np.intp]


@dataclass(frozen=True, eq=False)
class FastfoodStack:
    input_dim: int
    padded_dim: int
    num_features: int
    blocks: tuple[FastfoodBlock, ...]
    phases: NDArray[np.float64]
    lengthscales: NDArray[np.float64]
    seed: int

    @property
    def scale(self) -> float:
        return float(np.sqrt(2.0 / self.num_features))

    @cached_property
    def frequencies(self) -> NDArray[np.float64]:
        return frequency_matrix(self)

    @cached_property
    def _packed(self):
        return tuple(np.stack([getattr(b, f) for b in self.blocks]) for f in ("B", "G", "S", "perm"))

    def with_lengthscales(self, lengthscales) -> "FastfoodStack":
        """Same random draw, new lengthscales (ARD is applied to the input)."""
        ell = _check_lengthscales(lengthscales, self.input_dim)
        return FastfoodStack(self.input_dim, self.padded_dim, self.num_features,
                             self.blocks, self.phases, ell, self.seed)


def _check_lengthscales(lengthscales, input_dim: int) -> NDArray[np.float64]:
    ell = np.broadcast_to(np.asarray(lengthscales, dtype=np.float64), (input_dim,)).copy()
    if not np.all(ell > 0) or not np.all(np.isfinite(ell)):
        raise ValueError("lengthscales must be finite and positive")
    ell.setflags(write=False)
    return ell


def build_stack(input_dim: int, num_features: int, lengthscales=1.0, seed: int = 0) -> FastfoodStack:
    if input_dim < 1 or num_features < 1:
        raise ValueError("input_dim and num_features must be >= 1")
    ell = _check_lengthscales(lengthscales, input_dim)
    d = next_pow2(input_dim)
    n_blocks = -(-num_features // d)
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(n_blocks):
        B = rng.choice(np.array([-1.0, 1.0]), size=d)
        perm = rng.permutation(d)
        G = rng.standard_normal(d)
        # Row norms of S H G Pi H B / sqrt(d) become chi(d), matching N(0, I) rows.
        radii = np.sqrt(rng.chisquare(d, size=d))
        S = radii / np.linalg.norm(G)
        for arr in (B, perm, G, S):
            arr.setflags(write=False)
        blocks.append(FastfoodBlock(S=S, G=G, B=B, perm=perm))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=num_features)
    phases.setflags(write=False)
    return FastfoodStack(input_dim, d, num_features, tuple(blocks), phases, ell, int(seed))


def _project(stack: FastfoodStack, z: NDArray[np.float64]) -> NDArray[np.float64]:
    """Apply the implicit frequency matrix to already-scaled inputs (batch x input_dim)."""
    d = stack.padded_dim
    B, G, S, perm = stack._packed
    padded = np.zeros(z.shape[:-1] + (1, d))
    padded[..., 0, : stack.input_dim] = z
    t = fwht(padded * B)                                  # (..., n_blocks, d)
    flat_perm = (perm + d * np.arange(len(perm))[:, None]).ravel()
    t = t.reshape(z.shape[:-1] + (-1,))[..., flat_perm].reshape(t.shape) * G
    t = fwht(t) * (S / np.sqrt(d))
    return t.reshape(z.shape[:-1] + (-1,))[..., : stack.num_features]


def features(stack: FastfoodStack, x) -> NDArray[np.float64]:
    """Feature vector(s) for ``x`` of shape (input_dim,) or (n, input_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stack.input_dim:
        raise ShapeError(f"expected last dim {stack.input_dim}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("features: non-finite input")
    proj = _project(stack, x / stack.lengthscales)
    return stack.scale * np.cos(proj + stack.phases)


def frequency_matrix(stack: FastfoodStack) -> NDArray[np.float64]:
    """Explicit (M, input_dim) frequencies acting on raw inputs, lengthscales included.

    Moment matching needs the frequencies in closed form; this reads them off
    the fast path by projecting the unit basis.
    """
    eye = np.eye(stack.input_dim)
    return _project(stack, eye).T / stack.lengthscales
