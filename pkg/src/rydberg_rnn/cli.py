"""Command-line entry point: ``rydberg-rnn {gen-data,train,evaluate,report}``.

Every command writes a JSON manifest next to its outputs.  A manifest's
``args`` block can be fed back through ``--config`` to repeat the run.

Exit status: 0 success, 2 usage or I/O error, 3 capacity exceeded,
4 numerical failure (eigensolver or training divergence).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from . import wavefunction as wf
from .energy import energy_estimate
from .lattice import DEFAULT_RB, build_spec
from .metrics import (DEFAULT_THRESHOLD, DEFAULT_WINDOW, EnergyTrace, summarize, write_summary)
from .oracle import (CapacityError, ConvergenceError, enumerated_energy, ground_state,
                     read_dataset, sample_dataset, write_dataset)
from .training import (AdamState, TrainConfig, TrainingDivergence, TrainState, iterate_training,
                       load_checkpoint, save_checkpoint)

EXIT_OK, EXIT_USAGE, EXIT_CAPACITY, EXIT_NUMERICAL = 0, 2, 3, 4
THREADS_ENV = "RYDBERG_RNN_THREADS"

MANIFEST_NAME = "manifest.json"
TRACE_NAME = "trace.csv"
CHECKPOINT_NAME = "checkpoint.npz"

# argparse destinations that locate outputs or control the process, not the computation
_NOT_RECORDED = {"command", "config", "out", "out_dir", "resume", "halt_after", "threads", "verbose",
                 "func", "run", "traces", "summary"}


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    args: dict
    version: str = __version__
    started: str = ""
    finished: str | None = None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        names = {f.name for f in dataclasses.fields(cls)}
        if not isinstance(data, dict) or not {"command", "args"} <= data.keys() or data.keys() - names:
            raise ValueError("not a run manifest")
        return cls(**data)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls.from_json(Path(path).read_text())


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _recorded(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_RECORDED}


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = build_spec(args.L, omega=args.omega, delta=args.delta, rb=args.rb)
    manifest = RunManifest("gen-data", _recorded(args), started=_now())
    gs = ground_state(spec)
    dataset = sample_dataset(gs, args.count, args.seed)
    out = Path(args.out)
    write_dataset(out, dataset, spec)
    manifest.outputs = {"dataset": {"path": out.name, "sha256": sha256(out)}}
    manifest.results = {"ground_energy": gs.energy, "ground_energy_density": gs.energy / spec.n_atoms,
                        "residual": gs.residual, "n_atoms": spec.n_atoms}
    manifest.finished = _now()
    manifest.write(_data_manifest_path(out))
    print(f"E0 = {gs.energy!r}  E0/N = {gs.energy / spec.n_atoms!r}")
    return EXIT_OK


def _data_manifest_path(dataset_path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.name + ".manifest.json")


def _train_config(args) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig.from_dict({k: v for k, v in vars(args).items() if k in names})


def _write_outputs(out_dir: Path, state: TrainState, seed: int, manifest: RunManifest) -> None:
    state.trace.to_csv(out_dir / TRACE_NAME)
    save_checkpoint(out_dir / CHECKPOINT_NAME, state, seed)
    manifest.outputs = {name: {"path": name, "sha256": sha256(out_dir / name)}
                        for name in (TRACE_NAME, CHECKPOINT_NAME)}
    manifest.results.update(iteration=state.iteration, updates=state.updates,
                            converged_at=state.converged_at)
    manifest.write(out_dir / MANIFEST_NAME)


def cmd_train(args) -> int:
    out_dir = Path(args.resume or args.out_dir)
    if args.dataset:
        args.dataset = str(Path(args.dataset).resolve())
    config = _train_config(args)
    spec = build_spec(args.L, omega=args.omega, delta=args.delta, rb=args.rb)

    dataset = None
    inputs = {}
    if config.data_iterations > 0:
        if not args.dataset:
            raise UsageError(f"mode {config.mode!r} with a data phase needs --dataset")
        dataset, data_spec = read_dataset(args.dataset)
        if data_spec.L != spec.L:
            raise UsageError(f"dataset is for L={data_spec.L}, training lattice has L={spec.L}")
        inputs["dataset"] = {"path": str(args.dataset), "sha256": sha256(args.dataset)}

    reference = args.reference
    if reference is None and config.stop_at_convergence:
        reference = ground_state(spec).energy

    resume = None
    if args.resume:
        previous = RunManifest.read(out_dir / MANIFEST_NAME)
        resume, seed = load_checkpoint(out_dir / CHECKPOINT_NAME)
        if seed != config.seed:
            raise UsageError("checkpoint seed does not match the manifest")
        manifest = dataclasses.replace(previous, finished=None)
        params = resume.params
    else:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest("train", _recorded(args), started=_now(), inputs=inputs)
        params = wf.init_params(args.nh, config.seed)
    if reference is not None:
        manifest.results["reference_energy"] = reference

    state = resume
    halt = args.halt_after
    done_here = 0
    try:
        for state in iterate_training(spec, params, dataset, config, reference, resume=resume):
            done_here += 1
            if args.checkpoint_every and state.iteration % args.checkpoint_every == 0:
                _write_outputs(out_dir, state, config.seed, manifest)
            if halt and done_here >= halt:
                break
    except TrainingDivergence as err:
        err.trace.to_csv(out_dir / TRACE_NAME)
        raise
    if state is None:
        state = TrainState(params=params.copy(), adam=AdamState.fresh(params.nh))

    finished = state.iteration >= config.total_iterations or state.converged_at is not None
    if finished:
        manifest.finished = _now()
    _write_outputs(out_dir, state, config.seed, manifest)
    last = state.trace.rows[-1] if state.trace.rows else None
    if last is not None:
        print(f"iteration {state.iteration}: E/N = {last.energy_mean / spec.n_atoms!r}"
              f" +/- {last.energy_std / spec.n_atoms!r}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    manifest = RunManifest.read(run / MANIFEST_NAME)
    a = manifest.args
    spec = build_spec(a["L"], omega=a["omega"], delta=a["delta"], rb=a["rb"])
    state, _ = load_checkpoint(run / CHECKPOINT_NAME)
    est = energy_estimate(spec, state.params, args.samples, seed=args.seed)
    result = {"iteration": state.iteration, "energy_mean": est.mean, "energy_std": est.std_error,
              "n_samples": est.n_samples, "energy_density": est.mean / spec.n_atoms}
    if args.exact:
        result["enumerated_energy"] = enumerated_energy(spec, lambda c: wf.log_prob(state.params, c))
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def _load_run(path: Path):
    """A trace CSV or a run directory; returns (trace, manifest or None)."""
    if path.is_dir():
        manifest = RunManifest.read(path / MANIFEST_NAME)
        return EnergyTrace.from_csv(path / TRACE_NAME), manifest
    sibling = path.with_name(MANIFEST_NAME)
    return EnergyTrace.from_csv(path), RunManifest.read(sibling) if sibling.exists() else None


def _reference_from(path) -> float:
    m = RunManifest.read(path)
    for key in ("ground_energy", "reference_energy"):
        if key in m.results:
            return float(m.results[key])
    raise UsageError(f"{path} records no reference energy")


def cmd_report(args) -> int:
    reference = args.reference
    if reference is None and args.reference_manifest:
        reference = _reference_from(args.reference_manifest)
    summaries = []
    for item in args.traces:
        trace, manifest = _load_run(Path(item))
        ref = reference
        if ref is None and manifest is not None:
            ref = manifest.results.get("reference_energy")
        if ref is None:
            raise UsageError(f"no reference energy for {item}: pass --reference or --reference-manifest")
        if args.L is not None:
            n_atoms = args.L**2
        elif manifest is not None:
            n_atoms = manifest.args["L"] ** 2
        else:
            raise UsageError(f"cannot tell the lattice size of {item}: pass --L")
        t_trans = None
        if manifest is not None:
            cfg = _train_config(argparse.Namespace(**manifest.args))
            t_trans = cfg.data_iterations if cfg.mode != "data" else None
        summaries.append(summarize(trace, float(ref), n_atoms, name=str(item), threshold=args.threshold,
                                   window=args.window, t_trans=t_trans))
    for s in summaries:
        tc = "not converged" if s.t_conv is None else str(s.t_conv)
        dd = "n/a" if s.final_density_difference is None else f"{s.final_density_difference:.6f}"
        print(f"{s.trace}: t_trans={s.t_trans} t_conv={tc} final (E-E0)/N={dd} "
              f"(E0={s.reference_energy!r}, threshold={s.threshold})")
    if args.summary:
        write_summary(args.summary, summaries)
    return EXIT_OK


# -- argument parsing --------------------------------------------------------

def _add_lattice(p) -> None:
    p.add_argument("--L", type=int, default=4, help="linear lattice size (N = L*L atoms)")
    p.add_argument("--delta", type=float, default=1.0, help="detuning")
    p.add_argument("--omega", type=float, default=1.0, help="Rabi frequency")
    p.add_argument("--rb", type=float, default=DEFAULT_RB, help="blockade radius in lattice units")


def _add_train_config(p) -> None:
    help_text = {
        "mode": "data, vmc, or hybrid",
        "t_trans": "iteration at which hybrid training switches to VMC",
        "eval_every": "estimate the energy every k iterations (and at the last)",
        "carry_adam": "keep Adam moments across the switch instead of resetting",
    }
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kw = {"default": f.default, "help": help_text.get(f.name)}
        if f.type in ("bool", bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif f.name == "mode":
            p.add_argument(flag, choices=("data", "vmc", "hybrid"), **kw)
        else:
            p.add_argument(flag, type=int if isinstance(f.default, int) else float, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rydberg-rnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None,
                        help=f"cap on BLAS/worker threads (default: ${THREADS_ENV} or library default)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="exact ground state and sampled dataset")
    g.add_argument("--config", help="key = value file or a previous manifest supplying defaults")
    _add_lattice(g)
    g.add_argument("--count", type=int, default=100_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="dataset file to write")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a GRU wavefunction")
    t.add_argument("--config", help="key = value file or a previous manifest supplying defaults")
    _add_lattice(t)
    t.add_argument("--nh", type=int, default=8, help="hidden units")
    _add_train_config(t)
    t.add_argument("--dataset", help="dataset file for the data phase")
    t.add_argument("--reference", type=float, default=None, help="reference ground energy E0")
    t.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every k iterations")
    where = t.add_mutually_exclusive_group(required=True)
    where.add_argument("--out-dir", help="directory for trace, checkpoint and manifest")
    where.add_argument("--resume", help="continue the run stored in this directory")
    t.add_argument("--halt-after", type=int, default=0,
                   help="stop this process after k iterations, leaving a resumable checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="sampled energy of a trained run")
    e.add_argument("run", help="run directory written by train")
    e.add_argument("--samples", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--exact", action="store_true", help="also enumerate the exact variational energy")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="convergence times and final energy densities")
    r.add_argument("traces", nargs="+", help="run directories or trace CSV files")
    r.add_argument("--reference", type=float, default=None, help="reference ground energy E0")
    r.add_argument("--reference-manifest", help="gen-data manifest whose E0 is the reference")
    r.add_argument("--L", type=int, default=None, help="lattice size when no manifest is present")
    r.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    r.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    r.add_argument("--summary", help="write a JSON summary here")
    r.set_defaults(func=cmd_report)
    return parser


def read_config_file(path) -> dict:
    """Defaults from ``key = value`` lines, or from the ``args`` of a JSON manifest."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return dict(RunManifest.from_json(text).args)
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(sub, values: dict) -> dict:
    actions = {a.dest: a for a in sub._actions}
    out = {}
    for key, value in values.items():
        if key in _NOT_RECORDED:
            continue
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown option {key!r} in config")
        if isinstance(value, str):
            if isinstance(action, argparse.BooleanOptionalAction):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise UsageError(f"option {key!r} needs a boolean, got {value!r}")
                value = low in ("true", "1", "yes")
            elif action.type is not None:
                try:
                    value = action.type(value)
                except ValueError as err:
                    raise UsageError(f"option {key!r}: {err}") from None
            if action.choices and value not in action.choices:
                raise UsageError(f"option {key!r} must be one of {action.choices}")
        out[key] = value
    return out


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices[args.command]

    defaults = {}
    if getattr(args, "resume", None):
        defaults = read_config_file(Path(args.resume) / MANIFEST_NAME)
    elif getattr(args, "config", None):
        defaults = read_config_file(args.config)
    if defaults:
        # flags given on the command line still win over file values
        sub.set_defaults(**_coerce(sub, defaults))
        args = parser.parse_args(argv)
        if getattr(args, "resume", None):
            # the stored manifest is authoritative for a resumed run
            for key, value in _coerce(sub, defaults).items():
                setattr(args, key, value)
    return args


def _thread_count(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    except (UsageError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _thread_count(args)
        with threadpool_limits(limits=threads):
            return args.func(args)
    except CapacityError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CAPACITY
    except (ConvergenceError, TrainingDivergence, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValueError, OSError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
