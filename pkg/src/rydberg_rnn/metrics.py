"""Energy traces, running averages and convergence time."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

DEFAULT_WINDOW = 50
DEFAULT_THRESHOLD = 0.015

TRACE_COLUMNS = ("iteration", "phase", "updates_so_far", "loss", "energy_mean", "energy_std")
PHASES = ("data", "vmc")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    phase: str
    updates_so_far: int
    loss: float
    energy_mean: float
    energy_std: float


@dataclass
class EnergyTrace:
    """Per-iteration training record.

    ``energy_std`` holds the standard error of the sampled energy mean.
    Rows are only written on evaluated iterations, so with an evaluation
    cadence above one the iteration column has gaps.
    """

    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if row.phase not in PHASES:
            raise ValueError(f"unknown phase {row.phase!r}")
        if self.rows:
            last = self.rows[-1]
            if row.iteration <= last.iteration:
                raise ValueError(f"iterations must increase: {row.iteration} after {last.iteration}")
            if last.phase == "vmc" and row.phase == "data":
                raise ValueError("a data-phase row cannot follow the vmc phase")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, idx):
        return self.rows[idx]

    @property
    def iterations(self) -> np.ndarray:
        return np.array([r.iteration for r in self.rows], dtype=np.int64)

    @property
    def energies(self) -> np.ndarray:
        return np.array([r.energy_mean for r in self.rows], dtype=np.float64)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.rows], dtype=np.float64)

    def phase_rows(self, phase: str) -> "EnergyTrace":
        return EnergyTrace([r for r in self.rows if r.phase == phase])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for r in self.rows:
                writer.writerow([r.iteration, r.phase, r.updates_so_far,
                                 repr(float(r.loss)), repr(float(r.energy_mean)), repr(float(r.energy_std))])

    @classmethod
    def from_csv(cls, path) -> "EnergyTrace":
        trace = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
                raise ValueError(f"trace columns must be {TRACE_COLUMNS}, got {reader.fieldnames}")
            for rec in reader:
                trace.append(TraceRow(int(rec["iteration"]), rec["phase"], int(rec["updates_so_far"]),
                                      float(rec["loss"]), float(rec["energy_mean"]), float(rec["energy_std"])))
        return trace

    def to_array(self) -> np.ndarray:
        """Numeric columns as a (rows, 6) array; phase encoded as 0=data, 1=vmc."""
        return np.array([[r.iteration, PHASES.index(r.phase), r.updates_so_far,
                          r.loss, r.energy_mean, r.energy_std] for r in self.rows],
                        dtype=np.float64).reshape(-1, 6)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "EnergyTrace":
        trace = cls()
        for it, ph, up, loss, em, es in np.asarray(arr).reshape(-1, 6):
            trace.append(TraceRow(int(it), PHASES[int(ph)], int(up), float(loss), float(em), float(es)))
        return trace


def _energies_of(trace) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(trace, EnergyTrace):
        return trace.iterations, trace.energies
    values = np.asarray(trace, dtype=np.float64)
    return np.arange(1, values.size + 1), values


def running_average(trace, window: int = DEFAULT_WINDOW) -> list[tuple[int, float]]:
    """Mean of energies at offsets -window/2+1 .. window/2 around each interior row.

    Accepts an EnergyTrace or a plain sequence of energies (numbered from 1).
    Boundary rows whose window is incomplete are omitted.
    """
    if window < 2 or window % 2:
        raise ValueError(f"window must be a positive even integer, got {window}")
    its, e = _energies_of(trace)
    if e.size < window:
        raise ValueError(f"trace has {e.size} rows, shorter than the window of {window}")
    half = window // 2
    windows = np.lib.stride_tricks.sliding_window_view(e, window)
    # averaging deviations from the first entry keeps constant windows exact
    pivot = windows[:, :1]
    means = pivot[:, 0] + (windows - pivot).mean(axis=1)
    centers = its[half - 1: half - 1 + means.size]
    return [(int(t), float(m)) for t, m in zip(centers, means)]


def convergence_time(trace, reference: float, n_atoms: int, threshold: float = DEFAULT_THRESHOLD,
                     window: int = DEFAULT_WINDOW) -> int | None:
    """First iteration whose smoothed energy density is within ``threshold`` of the reference.

    Returns None (not converged) when no smoothed value crosses, including
    when the trace is too short to smooth.
    """
    _, e = _energies_of(trace)
    if e.size == 0:
        raise ValueError("empty trace")
    if e.size < window:
        return None
    for t, avg in running_average(trace, window):
        if (avg - reference) / n_atoms <= threshold:
            return t
    return None


def density_difference(trace: EnergyTrace, reference: float, n_atoms: int,
                       start: int | None = None, stop: int | None = None) -> tuple[float, float]:
    """Mean and standard deviation of (E - reference)/N over rows with start <= iteration <= stop."""
    its, e = trace.iterations, trace.energies
    mask = np.ones(e.size, dtype=bool)
    if start is not None:
        mask &= its >= start
    if stop is not None:
        mask &= its <= stop
    if not mask.any():
        raise ValueError(f"no trace rows in iterations [{start}, {stop}]")
    diff = (e[mask] - reference) / n_atoms
    return float(diff.mean()), float(diff.std())


@dataclass
class RunSummary:
    trace: str
    t_conv: int | None
    final_smoothed_density: float | None
    final_density_difference: float | None
    reference_energy: float
    n_atoms: int
    threshold: float
    window: int
    t_trans: int | None = None


def summarize(trace: EnergyTrace, reference: float, n_atoms: int, *, name: str = "",
              threshold: float = DEFAULT_THRESHOLD, window: int = DEFAULT_WINDOW,
              t_trans: int | None = None) -> RunSummary:
    t_conv = convergence_time(trace, reference, n_atoms, threshold, window) if len(trace) else None
    final = None
    if len(trace) >= window:
        final = running_average(trace, window)[-1][1] / n_atoms
    elif len(trace):
        final = float(trace.energies.mean()) / n_atoms
    return RunSummary(
        trace=name, t_conv=t_conv, final_smoothed_density=final,
        final_density_difference=None if final is None else final - reference / n_atoms,
        reference_energy=reference, n_atoms=n_atoms, threshold=threshold, window=window,
        t_trans=t_trans)


def _finite_or_none(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite_or_none(v) for v in obj]
    return obj


def write_summary(path, summaries: list[RunSummary]) -> None:
    runs = [asdict(s) for s in summaries]
    table = {}
    for s in summaries:
        if s.t_trans is not None:
            table.setdefault(str(s.t_trans), []).append(s.t_conv)
    payload = {"runs": runs}
    if table:
        payload["t_conv_by_t_trans"] = table
    with open(path, "w") as fh:
        json.dump(_finite_or_none(payload), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
