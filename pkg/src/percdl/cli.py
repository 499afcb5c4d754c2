"""Command-line interface: ``percdl synth-gen | fit | experiment | eval``.

Every command writes its outputs plus one ``manifest.json`` into ``--out``.
Options may also come from a JSON file given with ``--config``; flags given
on the command line override it.  Exit codes: 0 success, 1 runtime failure,
2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from . import __version__
from .core import FitConfig
from .experiments import (experiment_convergence_vs_S, experiment_mle_rate,
                          experiment_noise_robustness, experiment_segmentation,
                          experiment_sensitivity_grid)
from .federated import run_federated
from .io import (dictionary_to_json, fit_result_from_json, fit_result_to_json,
                 ground_truth_to_json, read_dataset, read_json, write_dataset, write_json)
from .metrics import TAU_ACT, TAU_TOL, recon_error, segmentation_eval
from .solvers import fit, fit_indcdl, fit_popcdl, reconstruct
from .synth import SynthSpec, gen_dataset
from .transforms import make_transform
from .warp import WarpConfig

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2

EXPERIMENTS = {
    "convergence_vs_s": experiment_convergence_vs_S,
    "noise_robustness": experiment_noise_robustness,
    "sensitivity_grid": experiment_sensitivity_grid,
    "mle_rate": experiment_mle_rate,
    "segmentation": experiment_segmentation,
}

# flag defaults of ``fit``; D=4, W=15, lambda=1e-2 is the gait regime
FIT_DEFAULTS = {
    "method": "percdl", "transform": "timewarp", "variant": "barycenter",
    "K": 1, "L": 100, "D": 4, "W": 15, "lam": 1e-2, "sigma": 0.002, "theta_margin": 1e-3,
    "n_init": 5, "n_perso": 5, "ipu_steps": 25, "ipu_step_scale": 1.0, "ipu_mode": "polyak",
    "recenter": False, "cdu_mode": "least_squares", "perso_order": "ipu_first",
    "init": "first-signal", "seed": 0,
}


class InputError(Exception):
    """Invalid user input; maps to exit code 2."""


@dataclass
class RunManifest:
    command: str
    config: Dict
    seed: int
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    version: str = __version__
    wall_time: float = 0.0

    def write(self, directory, name="manifest.json"):
        path = os.path.join(directory, name)
        write_json(dataclasses.asdict(self), path)
        return path


def _jobs(value):
    if value is not None:
        return value
    env = os.environ.get("PERCDL_JOBS")
    if env is None:
        return 1
    try:
        return int(env)
    except ValueError:
        raise InputError(f"PERCDL_JOBS must be an integer, got {env!r}")


def _merge(defaults, config_path, args, keys):
    """defaults < JSON config < explicit flags."""
    merged = dict(defaults)
    if config_path:
        try:
            cfg = read_json(config_path)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read config {config_path}: {exc}")
        if not isinstance(cfg, dict):
            raise InputError("config must be a JSON object")
        unknown = set(cfg) - set(keys)
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        merged.update(cfg)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


def _load_dataset(path):
    try:
        return read_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read dataset {path}: {exc}")


def _prepare_out(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {path}: {exc}")
    if not os.access(path, os.W_OK):
        raise InputError(f"output directory {path} is not writable")
    return path


# --- synth-gen ---------------------------------------------------------------

def cmd_synth_gen(args):
    start = time.perf_counter()
    try:
        raw = read_json(args.spec)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read spec {args.spec}: {exc}")
    if not isinstance(raw, dict):
        raise InputError("spec must be a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    names = {f.name for f in dataclasses.fields(SynthSpec)}
    unknown = set(raw) - names
    if unknown:
        raise InputError(f"unknown spec keys: {sorted(unknown)}")
    if raw.get("noise") is not None:
        raw["noise"] = tuple(raw["noise"])
    if raw.get("base_atoms") is not None:
        raw["base_atoms"] = np.asarray(raw["base_atoms"], dtype=float)
    try:
        spec = SynthSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid spec: {exc}")
    out = _prepare_out(args.out)

    data, truth = gen_dataset(spec)
    data_dir = os.path.join(out, "data")
    mpath = write_dataset(data, data_dir)
    truth_path = os.path.join(out, "ground_truth.json")
    write_json(ground_truth_to_json(truth), truth_path)
    snapshot = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in dataclasses.asdict(spec).items()}
    outputs = [os.path.join(data_dir, f) for f in read_json(mpath)["files"]]
    manifest = RunManifest("synth-gen", snapshot, spec.seed, [args.spec],
                           outputs + [mpath, truth_path],
                           wall_time=time.perf_counter() - start)
    manifest.write(out)
    print(f"wrote {data.n_series} series to {data_dir}")


# --- fit ---------------------------------------------------------------------

def _fit_config(opts, n_jobs, progress):
    try:
        cfg = FitConfig(lam=opts["lam"], n_init=opts["n_init"], n_perso=opts["n_perso"],
                        ipu_steps=opts["ipu_steps"], ipu_step_scale=opts["ipu_step_scale"],
                        ipu_mode=opts["ipu_mode"], recenter_atoms=bool(opts["recenter"]),
                        cdu_mode=opts["cdu_mode"], perso_order=opts["perso_order"],
                        rng_seed=opts["seed"], n_jobs=n_jobs, progress=progress)
        kind = make_transform(opts["transform"],
                              WarpConfig(opts["D"], opts["W"], opts["sigma"],
                                         opts["theta_margin"]))
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc))
    if opts["method"] not in ("percdl", "popcdl", "indcdl", "federated"):
        raise InputError(f"unknown method {opts['method']!r}")
    if opts["variant"] not in ("barycenter", "robust_joint"):
        raise InputError(f"unknown variant {opts['variant']!r}")
    return cfg, kind


def _write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "objective"])
        for i, v in enumerate(trace):
            writer.writerow([i, repr(float(v))])


def cmd_fit(args):
    start = time.perf_counter()
    opts = _merge(FIT_DEFAULTS, args.config, args, list(FIT_DEFAULTS))
    n_jobs = _jobs(args.jobs)
    cfg, kind = _fit_config(opts, n_jobs, args.progress)
    data = _load_dataset(args.data)
    K, L = int(opts["K"]), int(opts["L"])
    if L >= data.n_samples:
        raise InputError(f"atom length {L} must be smaller than series length {data.n_samples}")
    out = _prepare_out(args.out)

    method = opts["method"]
    outputs = []
    fit_path = os.path.join(out, "fit.json")
    if method == "percdl":
        res = fit(data, K, L, kind, cfg, init=opts["init"])
        doc, trace = fit_result_to_json(res), res.objective_trace
    elif method == "popcdl":
        res = fit_popcdl(data, K, L, cfg, init=opts["init"])
        doc, trace = fit_result_to_json(res), res.objective_trace
    elif method == "indcdl":
        res = fit_indcdl(data, K, L, cfg, init=opts["init"])
        doc = {"barycenter": dictionary_to_json(res.barycenter),
               "individual": [fit_result_to_json(r) for r in res.individual]}
        trace = list(np.sum([r.objective_trace for r in res.individual], axis=0))
    else:
        fres = run_federated(data, K, L, kind, cfg, opts["variant"], opts["init"])
        doc, trace = fit_result_to_json(fres.fit), fres.fit.objective_trace
        comm_path = os.path.join(out, "comm.json")
        write_json({"rounds": json.loads(fres.comm.to_json()),
                    "max_message_scalars": fres.comm.max_message_scalars}, comm_path)
        outputs.append(comm_path)
    doc["method"] = method
    write_json(doc, fit_path)
    trace_path = os.path.join(out, "trace.csv")
    _write_trace(trace_path, trace)
    outputs = [fit_path, trace_path] + outputs
    RunManifest("fit", dict(opts, jobs=n_jobs), int(opts["seed"]), [args.data], outputs,
                wall_time=time.perf_counter() - start).write(out)
    print(f"{method}: final objective {trace[-1]:.6g}" if len(trace) else f"{method}: no rounds run")


# --- experiment --------------------------------------------------------------

def cmd_experiment(args):
    start = time.perf_counter()
    if args.name not in EXPERIMENTS:
        raise InputError(f"unknown experiment {args.name!r}; choose from {sorted(EXPERIMENTS)}")
    kwargs = {}
    if args.config:
        try:
            kwargs = read_json(args.config)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}")
        if not isinstance(kwargs, dict):
            raise InputError("config must be a JSON object")
    if args.seed is not None:
        kwargs["seed"] = args.seed
    if args.replicates is not None:
        kwargs["replicates"] = args.replicates
    for key in ("S_grid", "D_grid", "W_grid", "levels"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    if isinstance(kwargs.get("cfg"), dict):
        try:
            kwargs["cfg"] = FitConfig(**kwargs["cfg"])
        except (TypeError, ValueError) as exc:
            raise InputError(f"invalid cfg: {exc}")
    kwargs["n_jobs"] = _jobs(args.jobs)
    out = _prepare_out(args.out)
    try:
        report = EXPERIMENTS[args.name](**kwargs)
    except TypeError as exc:
        raise InputError(f"invalid experiment options: {exc}")
    csv_path = os.path.join(out, "report.csv")
    json_path = os.path.join(out, "summary.json")
    report.to_csv(csv_path)
    report.to_json(json_path)
    snapshot = {k: (dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v)
                for k, v in kwargs.items()}
    RunManifest("experiment", dict(snapshot, name=args.name), int(kwargs.get("seed", 0)),
                [args.config] if args.config else [], [csv_path, json_path],
                wall_time=time.perf_counter() - start).write(out)
    print(f"{args.name}: {len(report.rows)} rows written to {csv_path}")


# --- eval --------------------------------------------------------------------

def cmd_eval(args):
    start = time.perf_counter()
    data = _load_dataset(args.data)
    try:
        doc = read_json(args.fit)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read fit {args.fit}: {exc}")
    if "individual" in doc:
        results = [fit_result_from_json(d) for d in doc["individual"]]
        recon = np.concatenate([r.reconstruction() for r in results])
        series = [r.activations.series[0] for r in results]
    else:
        res = fit_result_from_json(doc)
        recon = reconstruct(res.activations, res.personalized_atoms())
        series = res.activations.series
    if recon.shape != data.data.shape:
        raise InputError(f"fit shape {recon.shape} does not match dataset {data.data.shape}")
    out = {"recon_error": recon_error(data, recon),
           "recon_error_normalized": recon_error(data, recon, normalized=True)}
    inputs = [args.data, args.fit]
    if args.events:
        try:
            ev = read_json(args.events)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read events {args.events}: {exc}")
        events = ev["events"] if isinstance(ev, dict) else ev
        if len(events) != len(series):
            raise InputError("need one event list per series")
        preds = [(s.positions, s.amplitudes) for s in series]
        if args.atom is not None:
            preds = [s.select(args.atom) for s in series]
        out.update(segmentation_eval(preds, events, args.tau_tol, args.tau_act))
        inputs.append(args.events)
    directory = _prepare_out(os.path.dirname(os.path.abspath(args.out)))
    write_json(out, args.out)
    # the eval manifest is named after its output so it never clobbers a fit manifest
    stem = os.path.splitext(os.path.basename(args.out))[0]
    RunManifest("eval", {"tau_tol": args.tau_tol, "tau_act": args.tau_act, "atom": args.atom},
                0, inputs, [args.out], wall_time=time.perf_counter() - start
                ).write(directory, f"{stem}.manifest.json")
    print(json.dumps(out, sort_keys=True))


# --- parser ------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="percdl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset with ground truth")
    p.add_argument("spec", help="JSON file with SynthSpec fields (S, N, K, r, L, P, D, W, seed, noise)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("fit", help="fit PerCDL, PopCDL, IndCDL or the federated variant")
    p.add_argument("data", help="dataset directory or its dataset.json manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of options; flags override it")
    p.add_argument("--method", choices=["percdl", "popcdl", "indcdl", "federated"])
    p.add_argument("--transform", choices=["timewarp", "identity", "free", "rotation"])
    p.add_argument("--variant", choices=["barycenter", "robust_joint"])
    p.add_argument("--K", type=int, help="number of atoms (default 1)")
    p.add_argument("--L", type=int, help="atom length (default 100)")
    p.add_argument("--D", type=int, help="warp depth (default 4)")
    p.add_argument("--W", type=int, help="warp width (default 15)")
    p.add_argument("--lambda", dest="lam", type=float, help="sparsity penalty (default 1e-2)")
    p.add_argument("--sigma", type=float)
    p.add_argument("--theta-margin", dest="theta_margin", type=float)
    p.add_argument("--n-init", dest="n_init", type=int)
    p.add_argument("--n-perso", dest="n_perso", type=int)
    p.add_argument("--ipu-steps", dest="ipu_steps", type=int)
    p.add_argument("--ipu-step-scale", dest="ipu_step_scale", type=float)
    p.add_argument("--ipu-mode", dest="ipu_mode", choices=["polyak", "fixed"])
    p.add_argument("--recenter", action="store_const", const=True)
    p.add_argument("--cdu-mode", dest="cdu_mode", choices=["least_squares", "barycenter"])
    p.add_argument("--perso-order", dest="perso_order", choices=["ipu_first", "csc_first"])
    p.add_argument("--init", choices=["first-signal", "random-unit"])
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="worker count (fallback: PERCDL_JOBS, then 1)")
    p.add_argument("--progress", action="store_true", help="per-round objective on stderr")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("experiment", help="run a synthetic experiment")
    p.add_argument("name", help=", ".join(sorted(EXPERIMENTS)))
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON object of keyword arguments of the runner")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("eval", help="reconstruction and segmentation metrics of a stored fit")
    p.add_argument("data")
    p.add_argument("fit", help="fit.json written by `percdl fit`")
    p.add_argument("--events", help="JSON list of true event positions per series, "
                                    "or a ground_truth.json with an `events` field")
    p.add_argument("--tau-tol", dest="tau_tol", type=int, default=TAU_TOL)
    p.add_argument("--tau-act", dest="tau_act", type=float, default=TAU_ACT)
    p.add_argument("--atom", type=int, help="score only this atom's activations")
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - report any solver failure as runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
