"""Truncated two-mode Fock space.

Basis convention used everywhere in the package (files, error-bar indices):
``|n1, n2>`` lives at flat index ``n1 * dim2 + n2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm


@dataclass(frozen=True)
class SpaceConfig:
    """Fock truncation of the two cavities (photon numbers ``0..dim-1``)."""

    dim1: int
    dim2: int

    def __post_init__(self):
        for name in ("dim1", "dim2"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))

    @property
    def dim(self) -> int:
        return self.dim1 * self.dim2

    def index(self, n1: int, n2: int) -> int:
        if not (0 <= n1 < self.dim1 and 0 <= n2 < self.dim2):
            raise ValueError(f"|{n1},{n2}> outside the {self.dim1}x{self.dim2} space")
        return n1 * self.dim2 + n2

    def unpack(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.dim:
            raise ValueError(f"index {index} outside a space of dimension {self.dim}")
        return divmod(index, self.dim2)

    def photon_numbers(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-basis-state photon numbers ``(n1, n2)`` as flat integer arrays."""
        n1, n2 = np.divmod(np.arange(self.dim), self.dim2)
        return n1, n2

    def identity(self) -> np.ndarray:
        return np.eye(self.dim, dtype=complex)

    def basis_state(self, n1: int, n2: int) -> np.ndarray:
        psi = np.zeros(self.dim, dtype=complex)
        psi[self.index(n1, n2)] = 1.0
        return psi


def annihilation(dim: int) -> np.ndarray:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return np.diag(np.sqrt(np.arange(1, dim)), k=1).astype(complex)


def creation(dim: int) -> np.ndarray:
    return annihilation(dim).conj().T


def number(dim: int) -> np.ndarray:
    return np.diag(np.arange(dim)).astype(complex)


def displacement(alpha: complex, dim: int) -> np.ndarray:
    """Exponential of the truncated generator ``alpha a^dag - alpha^* a``.

    Unitary by construction. For ``|alpha|^2`` comparable to ``dim`` this is
    not the truncation of the infinite-dimensional displacement.
    """
    a = annihilation(dim)
    generator = alpha * a.conj().T - np.conj(alpha) * a
    return expm(generator)


def detuning_rotation(tau: float, delta: float, space: SpaceConfig) -> np.ndarray:
    """Diagonal unitary ``exp(i delta tau (N2 - N1) / 2)``; tau in ms, delta in rad/ms."""
    n1, n2 = space.photon_numbers()
    return np.diag(np.exp(0.5j * delta * tau * (n2 - n1)))


def lift(op1: np.ndarray, op2: np.ndarray, space: SpaceConfig) -> np.ndarray:
    op1 = np.asarray(op1)
    op2 = np.asarray(op2)
    if op1.shape != (space.dim1, space.dim1) or op2.shape != (space.dim2, space.dim2):
        raise ValueError(
            f"operator shapes {op1.shape}, {op2.shape} do not match "
            f"a {space.dim1}x{space.dim2} space"
        )
    return np.kron(op1, op2)


def total_number(space: SpaceConfig) -> np.ndarray:
    """``N1 (x) I2 + I1 (x) N2``."""
    n1, n2 = space.photon_numbers()
    return np.diag(n1 + n2).astype(complex)
