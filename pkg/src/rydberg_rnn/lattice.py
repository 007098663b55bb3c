"""Rydberg Hamiltonian on an open-boundary L x L square lattice.

H = -(omega/2) sum_i X_i - delta sum_i n_i + sum_{i<j} V_ij n_i n_j,
with V_ij = omega * rb**6 / |r_i - r_j|**6.

Sites are numbered in row-major raster order; site ``k`` sits at
``(k // L, k % L) * a``.  Configurations are 0/1 occupation vectors
(1 = Rydberg state) in the same order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

#: blockade radius that puts the nearest-neighbour coupling at 7 (for omega=1)
DEFAULT_RB = 7.0 ** (1.0 / 6.0)


@dataclass(frozen=True, eq=False)
class HamiltonianSpec:
    L: int
    a: float
    omega: float
    delta: float
    rb: float
    positions: np.ndarray = field(repr=False)
    couplings: np.ndarray = field(repr=False)

    @property
    def n_atoms(self) -> int:
        return self.L * self.L

    def as_dict(self) -> dict:
        return {"L": self.L, "a": self.a, "omega": self.omega,
                "delta": self.delta, "rb": self.rb}


def build_spec(L: int, a: float = 1.0, omega: float = 1.0, delta: float = 1.0,
               rb: float = DEFAULT_RB) -> HamiltonianSpec:
    """Build the lattice geometry and the full (uncut) van der Waals couplings."""
    if int(L) != L or L < 1:
        raise ValueError(f"L must be a positive integer, got {L!r}")
    if not a > 0:
        raise ValueError(f"lattice spacing must be positive, got {a!r}")
    if not rb > 0:
        raise ValueError(f"blockade radius must be positive, got {rb!r}")
    L = int(L)

    rows, cols = np.divmod(np.arange(L * L), L)
    positions = np.stack([rows, cols], axis=1).astype(np.float64) * a

    diff = positions[:, None, :] - positions[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)
    couplings = np.zeros_like(dist2)
    off = ~np.eye(L * L, dtype=bool)
    couplings[off] = omega * rb**6 / dist2[off] ** 3

    positions.setflags(write=False)
    couplings.setflags(write=False)
    return HamiltonianSpec(L=L, a=float(a), omega=float(omega), delta=float(delta),
                           rb=float(rb), positions=positions, couplings=couplings)


def without_drive(spec: HamiltonianSpec) -> HamiltonianSpec:
    """Same lattice and couplings with the transverse drive switched off.

    Couplings scale with omega, so ``build_spec(..., omega=0)`` would also
    remove the interactions; this keeps them and leaves a classical problem.
    """
    return replace(spec, omega=0.0)


def diagonal_energies(spec: HamiltonianSpec, sigmas) -> np.ndarray:
    """Diagonal part of H for a batch of configurations, shape (B, N) -> (B,)."""
    s = np.asarray(sigmas, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != spec.n_atoms:
        raise ValueError(f"expected configurations of length {spec.n_atoms}, got shape {s.shape}")
    # each unordered pair once: half of the symmetric quadratic form
    pair = 0.5 * np.einsum("bi,ij,bj->b", s, spec.couplings, s)
    return pair - spec.delta * s.sum(axis=1)


def diagonal_energy(spec: HamiltonianSpec, sigma) -> float:
    s = np.asarray(sigma)
    if s.ndim != 1:
        raise ValueError("a single configuration must be one-dimensional")
    return float(diagonal_energies(spec, s[None, :])[0])
