"""Local energy and the sampled energy estimator for the RNN wavefunction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import wavefunction as wf
from ._rng import EVAL
from .lattice import HamiltonianSpec, diagonal_energies

DEFAULT_EVAL_SAMPLES = 1000


@dataclass(frozen=True)
class EnergyEstimate:
    mean: float
    std_error: float
    n_samples: int


def flip_batch(sigmas: np.ndarray) -> np.ndarray:
    """Stack each configuration with its N single-site flips.

    Returns (B * (N + 1), N); block ``b`` holds sigma_b first, then the
    flip of site 0, 1, ..., N-1.
    """
    s = np.asarray(sigmas, dtype=np.uint8)
    b, n = s.shape
    out = np.repeat(s[:, None, :], n + 1, axis=1)
    sites = np.arange(n)
    out[:, 1 + sites, sites] ^= 1
    return out.reshape(b * (n + 1), n)


def _assemble(spec: HamiltonianSpec, s: np.ndarray, stacked: np.ndarray) -> np.ndarray:
    # stacked[:, 0] = log p(sigma), stacked[:, k + 1] = log p(sigma with site k flipped)
    ratios = np.exp(0.5 * (stacked[:, 1:] - stacked[:, :1]))
    return diagonal_energies(spec, s) - 0.5 * spec.omega * ratios.sum(axis=1)


def _check_sites(spec: HamiltonianSpec, sigmas) -> np.ndarray:
    s = np.atleast_2d(np.asarray(sigmas, dtype=np.uint8))
    if s.shape[1] != spec.n_atoms:
        raise ValueError(f"configurations have {s.shape[1]} sites, lattice has {spec.n_atoms}")
    return s


def local_energies_from_logprob(spec: HamiltonianSpec, logprob: Callable[[np.ndarray], np.ndarray],
                                sigmas, logp: np.ndarray | None = None) -> np.ndarray:
    """H_loc for any positive wavefunction psi = sqrt(p) given as a batched log p."""
    s = _check_sites(spec, sigmas)
    b, n = s.shape
    stacked = np.asarray(logprob(flip_batch(s)), dtype=np.float64).reshape(b, n + 1)
    if logp is not None:
        stacked[:, 0] = logp
    return _assemble(spec, s, stacked)


def local_energies(spec: HamiltonianSpec, params: wf.RnnParams, sigmas) -> np.ndarray:
    """Batched H_loc, sharing the forward-pass prefix between sigma and its flips."""
    s = _check_sites(spec, sigmas)
    return _assemble(spec, s, wf.log_prob_with_flips(params, s))


def local_energies_naive(spec: HamiltonianSpec, params: wf.RnnParams, sigmas) -> np.ndarray:
    """Reference path: N + 1 independent full forward passes per configuration."""
    s = _check_sites(spec, sigmas)
    rows = [wf.log_prob(params, flip_batch(x[None, :])) for x in s]
    return _assemble(spec, s, np.array(rows))


def local_energy(spec: HamiltonianSpec, params: wf.RnnParams, sigma) -> float:
    s = np.asarray(sigma)
    if s.ndim != 1:
        raise ValueError("local_energy takes a single configuration; use local_energies for batches")
    return float(local_energies(spec, params, s[None, :])[0])


def summarize(values: np.ndarray) -> EnergyEstimate:
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n < 1:
        raise ValueError("need at least one local energy")
    std = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return EnergyEstimate(mean=float(values.mean()), std_error=std, n_samples=n)


def energy_estimate(spec: HamiltonianSpec, params: wf.RnnParams,
                    n_samples: int = DEFAULT_EVAL_SAMPLES, seed=0) -> EnergyEstimate:
    """Sample mean and standard error of H_loc over fresh autoregressive draws."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    keys = (seed,) if np.isscalar(seed) else tuple(seed)
    samples, _ = wf.sample(params, spec.n_atoms, n_samples, (*keys, EVAL))
    return summarize(local_energies(spec, params, samples))
