"""Command-line surface.

Subcommands: ``gen-data`` (built-in benchmark datasets with conservation
diagnostics), ``extract-priors`` (coupling-structure search), ``discover``
(the full symbolic search), and ``eval`` (score an expression against a
dataset).

Exit codes: 0 success (or recovery), 1 completed without recovery, 2 usage
or input errors, 3 runtime failure. ``HAMSR_THREADS`` sets the default
fitting-thread count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import coupling as cp
from . import engine as eng
from . import systems
from .errors import ExpressionSyntaxError, FormatError, HamsrError, SeparabilityError
from .expressions import numeric_equivalence, parse_hamiltonian_text
from .integrators import predict_windows
from .rewards import nrmse_reward

EXIT_OK = 0
EXIT_NOT_RECOVERED = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3

_SYSTEM_ALIASES = {
    "oscillator": "oscillator",
    "pendulum": "pendulum",
    "two-body": "two_body",
    "two_body": "two_body",
    "three-body": "three_body",
    "three_body": "three_body",
}


def _fail_usage(message):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(EXIT_USAGE)


def _fail_runtime(message):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(EXIT_RUNTIME)


def _load_dataset(path):
    if not Path(path).exists():
        _fail_usage(f"dataset file not found: {path}")
    try:
        return systems.load(path)
    except FormatError as exc:
        _fail_usage(f"bad dataset file: {exc}")


def _apply_config_overrides(obj, overrides, label):
    fields = {f.name for f in dataclasses.fields(obj)}
    unknown = set(overrides) - fields
    if unknown:
        _fail_usage(f"unknown {label} config keys: {sorted(unknown)}")
    cleaned = {
        k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()
    }
    try:
        return dataclasses.replace(obj, **cleaned)
    except (TypeError, HamsrError) as exc:
        _fail_usage(f"bad {label} config: {exc}")


def _read_config_file(path):
    if path is None:
        return {}
    if not Path(path).exists():
        _fail_usage(f"config file not found: {path}")
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        _fail_usage(f"config is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        _fail_usage("config file must hold a JSON object")
    known_sections = {"system", "search", "training"}
    unknown = set(doc) - known_sections
    if unknown:
        _fail_usage(f"unknown config sections: {sorted(unknown)} (use {sorted(known_sections)})")
    return doc


def _custom_spec(section):
    required = {"kind", "constants", "q0", "p0", "t0", "t1", "n_points", "bodies", "dims"}
    missing = required - set(section)
    if missing:
        _fail_usage(f"custom system config missing keys: {sorted(missing)}")
    try:
        return systems.SystemSpec(
            kind=section["kind"],
            constants=dict(section["constants"]),
            q0=tuple(section["q0"]),
            p0=tuple(section["p0"]),
            t0=float(section["t0"]),
            t1=float(section["t1"]),
            n_points=int(section["n_points"]),
            n_bodies=int(section["bodies"]),
            n_dims=int(section["dims"]),
        )
    except HamsrError as exc:
        _fail_usage(f"bad custom system: {exc}")


def cmd_gen_data(args):
    config = _read_config_file(args.config)
    if "system" in config:
        spec = _custom_spec(config["system"])
    else:
        kind = _SYSTEM_ALIASES[args.system]
        spec = systems.paper_system(kind, args.dataset)
    try:
        ds = systems.generate(spec, substeps=args.substeps)
    except HamsrError as exc:
        _fail_runtime(f"generation failed: {exc}")
    sigma = 0.0
    if args.noise:
        sigma = args.sigma if args.sigma is not None else systems.DEFAULT_NOISE_SIGMA[spec.kind]
        ds = systems.add_noise(ds, sigma, args.seed)
    systems.save(ds, args.out)
    H = systems.hamiltonian_values(spec, ds.trajectory())
    drift = float(np.max(np.abs(H - H[0])) / max(abs(H[0]), 1e-30))
    print(f"wrote {args.out}: {ds.n_points} samples, system={spec.kind}")
    print(f"noise sigma: {sigma}")
    print(f"energy drift along samples (relative): {drift:.3e}"
          + (" [includes noise]" if sigma else ""))
    if spec.kind in ("two_body", "three_body"):
        ptot = ds.p.reshape(ds.n_points, spec.n_bodies, spec.n_dims).sum(axis=1)
        dp = float(np.max(np.abs(ptot - ptot[0])))
        print(f"total momentum drift (absolute): {dp:.3e}")
    return EXIT_OK


def cmd_extract_priors(args):
    ds = _load_dataset(args.data)
    config = _read_config_file(args.config)
    cfg = cp.default_search_config(ds.spec.kind)
    cfg = _apply_config_overrides(cfg, config.get("search", {}), "search")
    try:
        result = cp.coupling_search(ds, cfg, master_seed=args.seed)
    except HamsrError as exc:
        _fail_runtime(f"coupling search failed: {exc}")
    cp.save_coupling_spec(result.spec, args.out)
    table = result.render_table()
    if args.report:
        Path(args.report).write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"T: {result.spec.describe('T')}")
    print(f"V: {result.spec.describe('V')}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_discover(args):
    ds = _load_dataset(args.data)
    priors = None
    if args.priors:
        if not Path(args.priors).exists():
            _fail_usage(f"priors file not found: {args.priors}")
        try:
            priors = cp.load_coupling_spec(args.priors)
        except FormatError as exc:
            _fail_usage(f"bad priors file: {exc}")
    config = _read_config_file(args.config)
    threads = args.threads or int(os.environ.get("HAMSR_THREADS", "1"))
    cfg = eng.TrainingConfig(master_seed=args.seed, threads=threads)
    cfg = _apply_config_overrides(cfg, config.get("training", {}), "training")
    if args.max_batches is not None:
        cfg = dataclasses.replace(cfg, max_batches=args.max_batches)
    try:
        report = eng.discover(
            ds, priors, cfg, open_mode=args.open_mode, progress=_progress
        )
    except HamsrError as exc:
        _fail_runtime(f"discovery failed: {exc}")
    report.save(args.out)
    stem = Path(args.out)
    curve = stem.with_name(stem.stem + "_reward_curve.csv")
    eng.write_reward_curve_csv(report, curve)
    if report.best_expression:
        phase = stem.with_name(stem.stem + "_phase.csv")
        try:
            cand = parse_hamiltonian_text(report.best_expression)
            eng.write_phase_csv(ds, cand, phase)
        except HamsrError:
            phase = None
    print(f"best: {report.best_expression}")
    print(f"best reward: {report.best_reward:.6f}")
    print(f"recovered: {report.recovered} in {report.batches_used} batches "
          f"({report.seconds_used:.1f}s)")
    print(f"wrote {args.out}")
    if report.mode == "experiment" and not report.recovered:
        return EXIT_NOT_RECOVERED
    return EXIT_OK


def _progress(row):
    print(
        f"batch {row.index}: best_reward={row.best_reward:.6f} "
        f"r_eps={row.r_eps:.6f} unique={row.n_unique}"
        + (" RECOVERED" if row.recovered else "")
    )


def cmd_eval(args):
    ds = _load_dataset(args.data)
    try:
        cand = parse_hamiltonian_text(args.expr)
    except (ExpressionSyntaxError, SeparabilityError) as exc:
        _fail_usage(f"cannot parse expression: {exc}")
    cfg = eng.TrainingConfig()
    reward = eng.single_step_reward(cand, ds, cfg)
    print(f"single-step NRMSE reward: {reward:.6f}")
    horizon = min(10, ds.n_points - 1)
    pred_q, pred_p = predict_windows(cand, cand.constants, ds, horizon=horizon)
    obs = np.stack(
        [
            np.concatenate([ds.q[k + 1 : k + 1 + ds.n_points - horizon],
                            ds.p[k + 1 : k + 1 + ds.n_points - horizon]], axis=1)
            for k in range(horizon)
        ]
    )
    pred = np.concatenate([pred_q, pred_p], axis=2)
    if np.all(np.isfinite(pred)):
        err = float(np.sqrt(np.mean((pred - obs) ** 2)))
        print(f"multi-step ({horizon}-interval) RMSE: {err:.6e}")
    else:
        print(f"multi-step ({horizon}-interval) RMSE: not finite")
    if ds.spec.kind in systems.SYSTEM_KINDS:
        truth, _ = systems.ground_truth(ds.spec)
        try:
            same = numeric_equivalence(
                cand,
                truth,
                ds.state_ranges(),
                args.tol,
                seed=0,
                max_grad=eng._truth_gradient_cap(truth, ds),
            )
        except HamsrError:
            same = False
        print(f"equivalent to {ds.spec.kind} ground truth (tol {args.tol}): {same}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hamsr",
        description="Discover separable Hamiltonians from trajectory data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a benchmark dataset file")
    g.add_argument("--system", choices=sorted(_SYSTEM_ALIASES), default="oscillator")
    g.add_argument("--dataset", type=int, choices=(1, 2, 3), default=1)
    g.add_argument("--noise", action="store_true", help="add per-system default noise")
    g.add_argument("--sigma", type=float, default=None, help="override noise sigma")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--substeps", type=int, default=systems.GENERATION_SUBSTEPS)
    g.add_argument("--config", default=None, help="JSON config with a custom system")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("extract-priors", help="run the coupling-structure search")
    e.add_argument("--data", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", default=None, help="also write the stage table here")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract_priors)

    d = sub.add_parser("discover", help="run the symbolic Hamiltonian search")
    d.add_argument("--data", required=True)
    d.add_argument("--priors", default=None)
    d.add_argument("--config", default=None)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--max-batches", type=int, default=None)
    d.add_argument("--threads", type=int, default=None)
    d.add_argument(
        "--open",
        dest="open_mode",
        action="store_true",
        help="open discovery: skip ground-truth recovery checks",
    )
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_discover)

    v = sub.add_parser("eval", help="score an infix expression on a dataset")
    v.add_argument("--expr", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--tol", type=float, default=1e-2)
    v.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except HamsrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
