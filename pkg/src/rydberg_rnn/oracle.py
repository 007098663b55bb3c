"""Exact-diagonalization reference: ground state, exact sampling, enumeration.

Basis index convention: bit ``i`` of a basis index is the occupation of
site ``i``.  The Hamiltonian is applied matrix-free on 2**N vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from ._rng import SAMPLE, make_rng
from .lattice import HamiltonianSpec, build_spec

MAX_ED_ATOMS = 20
MAX_ENUM_ATOMS = 16
DENSE_LIMIT = 10
RESIDUAL_TOL = 1e-8


class CapacityError(ValueError):
    """System too large for an exhaustive or exact method."""


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float):
        super().__init__(f"eigensolver did not converge: residual {residual:.3e} > {RESIDUAL_TOL:.0e}")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class ExactGroundState:
    energy: float
    amplitudes: np.ndarray = field(repr=False)
    residual: float = 0.0

    @property
    def n_atoms(self) -> int:
        return int(self.amplitudes.size).bit_length() - 1

    @property
    def probabilities(self) -> np.ndarray:
        return self.amplitudes**2


@dataclass(eq=False)
class Dataset:
    samples: np.ndarray
    seed: int | None = None
    source: str = "oracle"

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.uint8)
        if s.ndim != 2:
            raise ValueError(f"samples must be a 2-D array, got shape {s.shape}")
        if s.size and s.max() > 1:
            raise ValueError("samples must be 0/1 occupations")
        self.samples = s

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.samples.shape[1]


def all_configurations(n_atoms: int) -> np.ndarray:
    """Every configuration, row ``k`` holding the bits of basis index ``k``."""
    if n_atoms > MAX_ED_ATOMS:
        raise CapacityError(f"cannot enumerate 2**{n_atoms} configurations")
    idx = np.arange(2**n_atoms, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n_atoms)) & 1).astype(np.uint8)


def configuration_index(sigmas) -> np.ndarray:
    s = np.asarray(sigmas, dtype=np.int64)
    return s @ (np.int64(1) << np.arange(s.shape[-1], dtype=np.int64))


def diagonal_table(spec: HamiltonianSpec) -> np.ndarray:
    """Diagonal matrix elements of H for all 2**N basis states."""
    n = spec.n_atoms
    if n > MAX_ED_ATOMS:
        raise CapacityError(f"N={n} exceeds the exact-diagonalization limit of {MAX_ED_ATOMS}")
    idx = np.arange(2**n, dtype=np.int64)
    bits = [((idx >> i) & 1).astype(np.float64) for i in range(n)]
    diag = -spec.delta * np.sum(bits, axis=0)
    for i in range(n):
        for j in range(i + 1, n):
            diag += spec.couplings[i, j] * (bits[i] * bits[j])
    return diag


def apply_hamiltonian(spec: HamiltonianSpec, vec: np.ndarray, diag: np.ndarray | None = None) -> np.ndarray:
    n = spec.n_atoms
    if diag is None:
        diag = diagonal_table(spec)
    idx = np.arange(2**n, dtype=np.int64)
    out = diag * vec
    flips = np.zeros_like(vec)
    for i in range(n):
        flips += vec[idx ^ (1 << i)]
    out -= 0.5 * spec.omega * flips
    return out


def _fix_sign(vec: np.ndarray) -> np.ndarray:
    vec = vec / np.linalg.norm(vec)
    if vec[np.argmax(np.abs(vec))] < 0:
        vec = -vec
    vec[(vec < 0) & (vec >= -1e-12)] = 0.0
    return vec


def ground_state(spec: HamiltonianSpec) -> ExactGroundState:
    """Lowest eigenpair of H, with a non-negative amplitude vector."""
    n = spec.n_atoms
    if n > MAX_ED_ATOMS:
        raise CapacityError(f"N={n} exceeds the exact-diagonalization limit of {MAX_ED_ATOMS}")
    dim = 2**n
    diag = diagonal_table(spec)

    if n <= DENSE_LIMIT:
        dense = np.column_stack([apply_hamiltonian(spec, col, diag) for col in np.eye(dim)])
        vals, vecs = scipy.linalg.eigh(dense, subset_by_index=[0, 0])
        energy, vec = float(vals[0]), vecs[:, 0]
    else:
        op = scipy.sparse.linalg.LinearOperator(
            (dim, dim), matvec=lambda v: apply_hamiltonian(spec, np.ravel(v), diag), dtype=np.float64)
        # deterministic start vector: uniform superposition has overlap with the positive ground state
        v0 = np.full(dim, dim**-0.5)
        vals, vecs = scipy.sparse.linalg.eigsh(op, k=1, which="SA", v0=v0, tol=0, ncv=min(dim, 40))
        energy, vec = float(vals[0]), vecs[:, 0]

    vec = _fix_sign(vec)
    # Rayleigh quotient of the normalized vector is at least as accurate as the Ritz value
    hv = apply_hamiltonian(spec, vec, diag)
    energy = float(vec @ hv)
    residual = float(np.linalg.norm(hv - energy * vec))
    if residual > RESIDUAL_TOL:
        raise ConvergenceError(residual)
    vec.setflags(write=False)
    return ExactGroundState(energy=energy, amplitudes=vec, residual=residual)


def sample_dataset(gs: ExactGroundState, count: int, seed: int) -> Dataset:
    """Independent draws from |psi(sigma)|**2 by inverse CDF."""
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    cdf = np.cumsum(gs.probabilities)
    cdf /= cdf[-1]
    u = make_rng(seed, SAMPLE).random(count)
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    bits = ((idx[:, None] >> np.arange(gs.n_atoms)) & 1).astype(np.uint8)
    return Dataset(samples=bits, seed=seed, source="oracle")


def exact_logprob(gs: ExactGroundState) -> Callable[[np.ndarray], np.ndarray]:
    """Batched log|psi|**2 lookup for the exact state."""
    with np.errstate(divide="ignore"):
        table = np.log(gs.probabilities)

    def logprob(sigmas):
        return table[configuration_index(np.atleast_2d(sigmas))]

    return logprob


def enumerated_energy(spec: HamiltonianSpec, logprob: Callable[[np.ndarray], np.ndarray]) -> float:
    """Exact <H> = sum_sigma p(sigma) H_loc(sigma) by summing over all 2**N states.

    ``logprob`` maps a (M, N) array of configurations to M log-probabilities.
    Configurations with p = 0 contribute nothing and are skipped.
    """
    from .energy import local_energies_from_logprob

    n = spec.n_atoms
    if n > MAX_ENUM_ATOMS:
        raise CapacityError(f"N={n} exceeds the enumeration limit of {MAX_ENUM_ATOMS}")
    configs = all_configurations(n)
    logp = np.asarray(logprob(configs), dtype=np.float64)
    keep = np.isfinite(logp)
    e_loc = local_energies_from_logprob(spec, logprob, configs[keep], logp[keep])
    return float(np.sum(np.exp(logp[keep]) * e_loc))


# -- dataset files ---------------------------------------------------------

def format_header(spec: HamiltonianSpec, seed, source: str) -> str:
    return (f"# L={spec.L} delta={spec.delta!r} omega={spec.omega!r} rb={spec.rb!r} "
            f"seed={seed} source={source}")


def write_dataset(path, dataset: Dataset, spec: HamiltonianSpec) -> None:
    if dataset.n_atoms != spec.n_atoms:
        raise ValueError(f"dataset has {dataset.n_atoms} sites, lattice has {spec.n_atoms}")
    chars = np.empty((len(dataset), dataset.n_atoms + 1), dtype=np.uint8)
    chars[:, :-1] = dataset.samples + ord("0")
    chars[:, -1] = ord("\n")
    with open(path, "wb") as fh:
        fh.write((format_header(spec, dataset.seed, dataset.source) + "\n").encode())
        fh.write(chars.tobytes())


def parse_header(line: str) -> dict:
    if not line.startswith("#"):
        raise ValueError("dataset file is missing its '# L=...' header line")
    fields = {}
    for token in line[1:].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ValueError(f"malformed header token {token!r}")
        fields[key] = value
    missing = {"L", "delta", "omega", "rb", "seed", "source"} - fields.keys()
    if missing:
        raise ValueError(f"dataset header lacks {sorted(missing)}")
    return fields


def read_dataset(path) -> tuple[Dataset, HamiltonianSpec]:
    """Read a dataset file; returns the samples and the lattice named in its header."""
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    fields = parse_header(head.decode())
    spec = build_spec(int(fields["L"]), omega=float(fields["omega"]),
                      delta=float(fields["delta"]), rb=float(fields["rb"]))
    lines = body.split()
    n = spec.n_atoms
    if any(len(line) != n for line in lines):
        raise ValueError(f"every configuration line must have {n} characters")
    samples = np.frombuffer(b"".join(lines), dtype=np.uint8).reshape(-1, n) - ord("0")
    if samples.size and samples.max() > 1:
        raise ValueError("configuration lines may contain only '0' and '1'")
    seed = None if fields["seed"] == "None" else int(fields["seed"])
    return Dataset(samples=samples, seed=seed, source=fields["source"]), spec
