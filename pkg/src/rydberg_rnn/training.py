"""Data-driven, Hamiltonian-driven (VMC) and hybrid training of the GRU wavefunction.

Iteration bookkeeping: in the data phase one iteration is one epoch over
the dataset (many Adam updates); in the VMC phase one iteration is one
Adam update.  ``updates_so_far`` in the trace counts Adam updates so either
axis can be plotted.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np

from . import wavefunction as wf
from ._rng import SHUFFLE, VMC, make_rng
from .energy import DEFAULT_EVAL_SAMPLES, energy_estimate, local_energies
from .lattice import HamiltonianSpec
from .metrics import DEFAULT_THRESHOLD, DEFAULT_WINDOW, EnergyTrace, TraceRow, convergence_time
from .oracle import MAX_ENUM_ATOMS, CapacityError, Dataset, all_configurations

log = logging.getLogger(__name__)

MODES = ("data", "vmc", "hybrid")


class TrainingDivergence(FloatingPointError):
    """Raised when a loss or gradient turns non-finite."""

    def __init__(self, message: str, trace: EnergyTrace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "hybrid"
    t_trans: int = 0
    total_iterations: int = 1000
    eta_data: float = 1e-3
    eta_vmc: float = 1e-3
    batch_size: int = 100
    n_samples: int = 1000
    eval_samples: int = DEFAULT_EVAL_SAMPLES
    eval_every: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # opt-in extras, all off by default
    carry_adam: bool = False
    grad_clip: float = 0.0
    weight_decay: float = 0.0
    stop_at_convergence: bool = False
    threshold: float = DEFAULT_THRESHOLD
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be non-negative")
        if not 0 <= self.t_trans <= self.total_iterations:
            raise ValueError(f"need 0 <= t_trans <= total_iterations, got t_trans={self.t_trans}")
        for name in ("eta_data", "eta_vmc", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("batch_size", "eval_samples", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2 (the baseline needs a batch mean)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def data_iterations(self) -> int:
        """Length of the data phase after resolving the mode."""
        if self.mode == "data":
            return self.total_iterations
        if self.mode == "vmc":
            return 0
        return self.t_trans

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**values)


@dataclass
class AdamState:
    m: wf.RnnParams
    v: wf.RnnParams
    t: int = 0

    @classmethod
    def fresh(cls, nh: int) -> "AdamState":
        return cls(wf.RnnParams.zeros(nh), wf.RnnParams.zeros(nh), 0)


@dataclass(frozen=True)
class LossReport:
    """``value`` is the mean NLL (data loss without the constant entropy) or the mean local energy."""

    value: float
    entropy_offset: float | None = None
    std_error: float | None = None


def adam_step(params: wf.RnnParams, state: AdamState, grad: wf.RnnParams, eta: float,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8
              ) -> tuple[wf.RnnParams, AdamState]:
    """One bias-corrected Adam update.  Inputs are not modified."""
    for name, g in grad.tensors().items():
        want = getattr(params, name).shape
        if g.shape != want or getattr(state.m, name).shape != want:
            raise ValueError(f"shape mismatch for {name}: grad {g.shape}, params {want}")
    t = state.t + 1
    m = state.m.map(lambda m, g: beta1 * m + (1.0 - beta1) * g, grad)
    v = state.v.map(lambda v, g: beta2 * v + (1.0 - beta2) * (g * g), grad)
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new = params.map(lambda p, m_, v_: p - eta * (m_ / c1) / (np.sqrt(v_ / c2) + epsilon), m, v)
    return new, AdamState(m, v, t)


def nll_loss_and_grad(params: wf.RnnParams, batch) -> tuple[LossReport, wf.RnnParams]:
    """Mean negative log-likelihood of a batch and its gradient."""
    s = np.asarray(batch)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValueError("batch must be a non-empty (B, N) array of configurations")
    tape = wf.forward(params, s)
    b = s.shape[0]
    value = -float(tape.log_probs.mean())
    grad = wf.backprop(params, tape, weights=np.full(b, -1.0 / b))
    return LossReport(value=value), grad


def centered(values: np.ndarray) -> np.ndarray:
    """values - mean(values), exactly zero when all values are equal."""
    values = np.asarray(values, dtype=np.float64)
    pivot = values[0]
    shifted = values - pivot
    return shifted - shifted.mean()


def score_function_gradient(params: wf.RnnParams, samples, e_loc) -> wf.RnnParams:
    """(1/N_s) sum (E_loc - mean E_loc) grad log p, the baseline-centered estimator."""
    weights = centered(e_loc) / len(e_loc)
    return wf.backprop(params, wf.forward(params, samples), weights=weights)


def vmc_loss_and_grad(spec: HamiltonianSpec, params: wf.RnnParams, n_samples: int,
                      seed) -> tuple[LossReport, wf.RnnParams]:
    """Mean local energy over fresh samples and its score-function gradient."""
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    samples, _ = wf.sample(params, spec.n_atoms, n_samples, seed)
    e_loc = local_energies(spec, params, samples)
    report = LossReport(value=float(e_loc.mean()),
                        std_error=float(e_loc.std(ddof=1) / np.sqrt(n_samples)))
    return report, score_function_gradient(params, samples, e_loc)


def exact_energy_gradient(spec: HamiltonianSpec, params: wf.RnnParams) -> tuple[float, wf.RnnParams]:
    """Energy and its gradient by summing over every configuration (small N only)."""
    n = spec.n_atoms
    if n > MAX_ENUM_ATOMS:
        raise CapacityError(f"N={n} too large to enumerate")
    configs = all_configurations(n)
    tape = wf.forward(params, configs)
    p = np.exp(tape.log_probs)
    e_loc = local_energies(spec, params, configs)
    energy = float(p @ e_loc)
    return energy, wf.backprop(params, tape, weights=p * (e_loc - energy))


def _regularize(grad: wf.RnnParams, params: wf.RnnParams, config: TrainConfig) -> wf.RnnParams:
    if config.weight_decay:
        grad = grad.map(lambda g, p: g + config.weight_decay * p, params)
    if config.grad_clip:
        norm = float(np.linalg.norm(grad.flat()))
        if norm > config.grad_clip:
            grad = grad.map(lambda g: g * (config.grad_clip / norm))
    return grad


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly."""

    params: wf.RnnParams
    adam: AdamState
    iteration: int = 0
    updates: int = 0
    trace: EnergyTrace = field(default_factory=EnergyTrace)
    converged_at: int | None = None

    @property
    def phase(self) -> str:
        return "data" if self.trace.rows and self.trace.rows[-1].phase == "data" else "vmc"


def _finite(grad: wf.RnnParams) -> bool:
    return bool(np.all(np.isfinite(grad.flat())))


def _data_epoch(state: TrainState, samples: np.ndarray, config: TrainConfig, t: int) -> float:
    order = make_rng(config.seed, SHUFFLE, t).permutation(samples.shape[0])
    total = 0.0
    for start in range(0, order.size, config.batch_size):
        batch = samples[order[start:start + config.batch_size]]
        report, grad = nll_loss_and_grad(state.params, batch)
        if not (np.isfinite(report.value) and _finite(grad)):
            return float("nan")
        grad = _regularize(grad, state.params, config)
        state.params, state.adam = adam_step(state.params, state.adam, grad, config.eta_data,
                                             config.beta1, config.beta2, config.epsilon)
        state.updates += 1
        total += report.value * batch.shape[0]
    return total / order.size


def _vmc_iteration(state: TrainState, spec: HamiltonianSpec, config: TrainConfig, t: int) -> float:
    report, grad = vmc_loss_and_grad(spec, state.params, config.n_samples, (config.seed, VMC, t))
    if not (np.isfinite(report.value) and _finite(grad)):
        return float("nan")
    grad = _regularize(grad, state.params, config)
    state.params, state.adam = adam_step(state.params, state.adam, grad, config.eta_vmc,
                                         config.beta1, config.beta2, config.epsilon)
    state.updates += 1
    return report.value


def iterate_training(spec: HamiltonianSpec, params: wf.RnnParams, dataset: Dataset | None,
                     config: TrainConfig, reference_energy: float | None = None,
                     resume: TrainState | None = None) -> Iterator[TrainState]:
    """Run the schedule, yielding the live state after every iteration.

    All randomness is keyed by (seed, iteration), so continuing from a
    yielded state reproduces an uninterrupted run exactly.
    """
    t_data = config.data_iterations
    if t_data > 0:
        if dataset is None or len(dataset) == 0:
            raise ValueError("the data phase needs a non-empty dataset")
        if dataset.n_atoms != spec.n_atoms:
            raise ValueError(f"dataset has {dataset.n_atoms} sites, lattice has {spec.n_atoms}")
    if config.stop_at_convergence and reference_energy is None:
        raise ValueError("stop_at_convergence needs a reference energy")
    params.validate()

    state = resume if resume is not None else TrainState(params=params.copy(), adam=AdamState.fresh(params.nh))
    samples = dataset.samples if dataset is not None else None

    while state.iteration < config.total_iterations and state.converged_at is None:
        t = state.iteration + 1
        if t <= t_data:
            phase = "data"
            loss = _data_epoch(state, samples, config, t)
        else:
            phase = "vmc"
            if t == t_data + 1 and t_data > 0 and not config.carry_adam:
                state.adam = AdamState.fresh(state.params.nh)
            loss = _vmc_iteration(state, spec, config, t)
        state.iteration = t

        if not np.isfinite(loss):
            state.trace.append(TraceRow(t, phase, state.updates, loss, float("nan"), float("nan")))
            raise TrainingDivergence(f"non-finite {phase} loss at iteration {t}", state.trace)

        if t % config.eval_every == 0 or t == config.total_iterations:
            est = energy_estimate(spec, state.params, config.eval_samples, seed=(config.seed, t))
            state.trace.append(TraceRow(t, phase, state.updates, loss, est.mean, est.std_error))
            if config.stop_at_convergence:
                state.converged_at = convergence_time(state.trace, reference_energy, spec.n_atoms,
                                                      config.threshold, config.window)
            log.debug("iter %d %s loss=%.6f E/N=%.6f", t, phase, loss, est.mean / spec.n_atoms)
        yield state


def train(spec: HamiltonianSpec, params: wf.RnnParams, dataset: Dataset | None, config: TrainConfig,
          reference_energy: float | None = None) -> tuple[wf.RnnParams, EnergyTrace]:
    """Train from ``params`` under ``config``; returns final parameters and the energy trace."""
    state = None
    for state in iterate_training(spec, params, dataset, config, reference_energy):
        pass
    if state is None:
        return params.copy(), EnergyTrace()
    return state.params, state.trace


def with_mode(config: TrainConfig, mode: str, **changes) -> TrainConfig:
    """Copy of ``config`` switched to ``mode``, keeping t_trans consistent."""
    values = {**changes, "mode": mode}
    if mode == "vmc":
        values.setdefault("t_trans", 0)
    elif mode == "data":
        values.setdefault("t_trans", changes.get("total_iterations", config.total_iterations))
    return replace(config, **values)


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, state: TrainState, seed: int) -> None:
    """Write an uncompressed ``.npz`` holding everything needed to resume.

    Arrays: ``param/<name>``, ``adam_m/<name>``, ``adam_v/<name>`` for every
    GRU tensor; scalars ``version``, ``nh``, ``adam_t``, ``iteration``,
    ``updates``, ``seed``, ``converged_at`` (-1 if unset); ``trace`` as a
    (rows, 6) float array (phase 0=data, 1=vmc).
    """
    arrays = {
        **wf.params_to_arrays(state.params, "param/"),
        **wf.params_to_arrays(state.adam.m, "adam_m/"),
        **wf.params_to_arrays(state.adam.v, "adam_v/"),
        "version": np.array(CHECKPOINT_VERSION),
        "nh": np.array(state.params.nh),
        "adam_t": np.array(state.adam.t),
        "iteration": np.array(state.iteration),
        "updates": np.array(state.updates),
        "seed": np.array(seed),
        "converged_at": np.array(-1 if state.converged_at is None else state.converged_at),
        "trace": state.trace.to_array(),
    }
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[TrainState, int]:
    """Inverse of ``save_checkpoint``; returns (state, seed)."""
    with np.load(path) as data:
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(data['version'])}")
        params = wf.params_from_arrays(data, "param/")
        if params.nh != int(data["nh"]):
            raise ValueError("checkpoint nh does not match its tensors")
        adam = AdamState(wf.params_from_arrays(data, "adam_m/"), wf.params_from_arrays(data, "adam_v/"),
                         int(data["adam_t"]))
        converged = int(data["converged_at"])
        state = TrainState(params=params, adam=adam, iteration=int(data["iteration"]),
                           updates=int(data["updates"]), trace=EnergyTrace.from_array(data["trace"]),
                           converged_at=None if converged < 0 else converged)
        return state, int(data["seed"])
