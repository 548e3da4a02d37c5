"""Command-line interface.

Exit codes: 0 success, 2 invalid input, 3 the requested solution does not
exist (or a policy fails verification), 4 resource bound exceeded,
5 reference values not reproduced.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .equilibrium import NO, EquilibriumPolicy, build_policy, classify_existence
from .linalg import Tolerances
from .model import ProblemError, builtin_example, fingerprint, format_document, load_problem, example_document
from .recursions import BackwardTables, RecursionBlowup, feedback_backward, mixed_backward, open_loop_backward
from .reference import (
    FEEDBACK_CONVEXITY, LAST_CASE_GAINS, MATCH_TOLERANCE, MIXED_CASES, OPEN_CONVEXITY, case_gains,
)
from .simulate import NoiseModel, TreeDepthError, build_noise_tree, simulate_closed_loop, write_trajectories_csv
from .verify import (
    check_cost_difference, check_definition_inequality, check_Jtilde_identity, tables_for_policy,
)

EXIT_OK, EXIT_INPUT, EXIT_NONEXISTENT, EXIT_RESOURCE, EXIT_MISMATCH = 0, 2, 3, 4, 5


class InputError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _emit(report: dict, path) -> None:
    text = json.dumps(report, indent=2, default=_json_default) + "\n"
    if path:
        _write_atomic(path, text)
    else:
        sys.stdout.write(text)


def _read_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {what} file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} file is not valid JSON: {exc}") from None


def _tolerances(args) -> Tolerances:
    try:
        return Tolerances.from_env(
            pinv_rtol=args.pinv_rtol, psd_tol=args.psd_tol,
            range_tol=args.range_tol, invert_rtol=args.invert_rtol,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _vector(text, n: int, what: str) -> np.ndarray:
    try:
        v = np.array([float(s) for s in text.split(",")])
    except ValueError:
        raise InputError(f"{what} must be a comma-separated list of numbers") from None
    if v.shape != (n,) or not np.all(np.isfinite(v)):
        raise InputError(f"{what} must have {n} finite entries")
    return v


def _feedback_part(args, spec):
    """Gains from --phi FILE or --phi-random, or None when neither is given."""
    if getattr(args, "phi", None):
        doc = _read_json(args.phi, "feedback-gain")
        gains = doc.get("Phi") if isinstance(doc, dict) else doc
        try:
            arr = np.asarray(gains, dtype=float)
        except (TypeError, ValueError):
            raise InputError("feedback-gain file must hold a numeric 'Phi' array") from None
        if arr.ndim == 2 and spec.m == 1 and arr.shape[1] == spec.n:
            arr = arr[:, None, :]
        start = doc.get("t", 0) if isinstance(doc, dict) else 0
        if arr.ndim != 3 or arr.shape[1:] != (spec.m, spec.n) or arr.shape[0] != spec.N - start:
            raise InputError(f"feedback gains must have shape ({spec.N - start}, {spec.m}, {spec.n}), got {arr.shape}")
        full = np.zeros((spec.N, spec.m, spec.n))
        full[start:] = arr
        return full, {"source": str(args.phi)}
    if getattr(args, "phi_random", False):
        rng = np.random.default_rng(args.seed)
        return rng.standard_normal((spec.N, spec.m, spec.n)), {"source": "random", "seed": args.seed}
    return None, None


def stage_summary(tables: BackwardTables) -> list[dict]:
    rows = []
    for k in tables.stages:
        rows.append({
            "stage": k,
            "convexity_eigenvalues": np.linalg.eigvalsh(tables.convexity[k]).tolist(),
            "stationarity": tables.stationarity[k].tolist(),
            "stationarity_singular_values": np.linalg.svd(tables.stationarity[k], compute_uv=False).tolist(),
            "stationarity_asymmetry": float(tables.stationarity_asymmetry[k]),
            "state_coupling": tables.state_coupling[k].tolist(),
            "state_coupling_singular_values": np.linalg.svd(tables.state_coupling[k], compute_uv=False).tolist(),
            "offset_term": tables.offset_term[k].tolist(),
        })
    return rows


def _base_report(command: str, spec, args, tol: Tolerances) -> dict:
    params = {
        k: v for k, v in vars(args).items()
        if k not in ("func", "command") and not callable(v)
    }
    return {
        "tool": "mixedlq",
        "version": __version__,
        "command": command,
        "fingerprint": fingerprint(spec) if spec is not None else None,
        "parameters": params,
        "tolerances": dict(tol.__dict__),
        "notes": [],
    }


def _load(args, tol):
    try:
        return load_problem(Path(args.problem), tol)
    except ProblemError as exc:
        raise InputError(f"problem file: {exc}") from None


def _solve_tables(kind, spec, t, gains, tol) -> BackwardTables:
    if kind == "open":
        return open_loop_backward(spec, t, tol)
    if kind == "feedback":
        return feedback_backward(spec, t, tol)
    return mixed_backward(spec, gains, t, tol)


# ----------------------------------------------------------------- commands

def cmd_solve(args) -> int:
    started = time.perf_counter()
    tol = _tolerances(args)
    spec = _load(args, tol)
    t = args.t
    if not 0 <= t < spec.N:
        raise InputError(f"--t must lie in 0..{spec.N - 1}")
    x = _vector(args.x, spec.n, "--x") if args.x else None
    gains, gain_info = _feedback_part(args, spec)
    if args.kind == "mixed" and gains is None:
        raise InputError("--kind mixed needs --phi FILE or --phi-random")
    report = _base_report("solve", spec, args, tol)
    tables = _solve_tables(args.kind, spec, t, gains, tol)
    scope = "fixed" if x is not None else "all"
    existence = classify_existence(
        spec, scope, gains if args.kind == "mixed" else None, t=t, x=x, tol=tol,
        n_samples=args.samples, seed=args.seed,
    )
    verdict = {
        "open": existence.open_exists,
        "feedback": existence.feedback_exists,
        "mixed": existence.mixed_exists_for_given_phi,
    }[args.kind]
    report["feedback_part"] = gain_info
    report["operators"] = stage_summary(tables)
    report["existence"] = existence.to_dict()
    report["verdict"] = verdict
    code = EXIT_OK
    if verdict == NO:
        code = EXIT_NONEXISTENT
        report["notes"].append(f"no {args.kind} equilibrium exists; policy file not written")
    else:
        policy = build_policy(tables)
        report["policy"] = policy.to_dict()
        if args.out_policy:
            _write_atomic(args.out_policy, json.dumps(policy.to_dict(), indent=2) + "\n")
    report["timing"] = {"seconds": time.perf_counter() - started}
    _emit(report, args.report)
    return code


def cmd_classify(args) -> int:
    started = time.perf_counter()
    tol = _tolerances(args)
    spec = _load(args, tol)
    x = None
    if args.scope == "fixed":
        if not args.x:
            raise InputError("--scope fixed needs --x")
        x = _vector(args.x, spec.n, "--x")
    if not 0 <= args.t < spec.N:
        raise InputError(f"--t must lie in 0..{spec.N - 1}")
    gains, gain_info = _feedback_part(args, spec)
    existence = classify_existence(
        spec, args.scope, gains, t=args.t, x=x, tol=tol, n_samples=args.samples, seed=args.seed,
    )
    report = _base_report("classify", spec, args, tol)
    report["feedback_part"] = gain_info
    report["existence"] = existence.to_dict()
    report["verdicts"] = existence.verdicts()
    report["timing"] = {"seconds": time.perf_counter() - started}
    _emit(report, args.report)
    return EXIT_OK


def _load_policy(args, spec) -> EquilibriumPolicy:
    doc = _read_json(args.policy, "policy")
    try:
        return EquilibriumPolicy.from_dict(doc, spec)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    tol = _tolerances(args)
    spec = _load(args, tol)
    policy = _load_policy(args, spec)
    t = policy.t if args.t is None else args.t
    if not policy.t <= t < spec.N:
        raise InputError(f"--t must lie in {policy.t}..{spec.N - 1} for this policy")
    x = _vector(args.x, spec.n, "--x")
    if args.reps < 1:
        raise InputError("--reps must be positive")
    variant = args.noise.replace("-", "_")
    try:
        model = NoiseModel(variant, spec.delta)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    paths, summary = simulate_closed_loop(spec, policy, t, x, model, args.reps, args.seed)
    files = write_trajectories_csv(paths, args.out, long_format=args.long)
    report = _base_report("simulate", spec, args, tol)
    report["summary"] = summary.to_dict()
    report["files"] = [p.name for p in files]
    report["timing"] = {"seconds": time.perf_counter() - started}
    _write_atomic(Path(args.out) / "report.json", json.dumps(report, indent=2, default=_json_default) + "\n")
    _emit(report, args.report)
    return EXIT_OK


def cmd_verify(args) -> int:
    started = time.perf_counter()
    tol = _tolerances(args)
    spec = _load(args, tol)
    policy = _load_policy(args, spec)
    t = policy.t if args.t is None else args.t
    if not policy.t <= t < spec.N:
        raise InputError(f"--t must lie in {policy.t}..{spec.N - 1} for this policy")
    x = _vector(args.x, spec.n, "--x")
    report = _base_report("verify", spec, args, tol)
    if spec.p != 1:
        raise InputError("verification on the noise tree needs a single noise channel (p = 1)")
    if spec.N - t > args.depth_limit:
        report["error"] = f"tree depth {spec.N - t} exceeds --depth-limit {args.depth_limit}"
        _emit(report, args.report)
        return EXIT_RESOURCE
    tables = tables_for_policy(spec, policy, tol)
    tree = build_noise_tree(spec, t, x, policy, max_depth=args.depth_limit)
    rng = np.random.default_rng(args.seed)
    probes, identities = [], []
    for k in range(t, spec.N):
        B = 2 ** (k - t)
        directions = [rng.standard_normal(spec.m) for _ in range(args.probes)]
        directions += [rng.standard_normal((B, spec.m)) for _ in range(args.probes)]
        for u in directions:
            probe = check_cost_difference(spec, policy, t, x, k, u, tables=tables, tree=tree)
            probes.append(probe.to_dict())
            identities.append({
                "stage": k,
                "residual": check_Jtilde_identity(spec, policy.feedback_gain, t, k, u, tables=tables),
            })
    inequality = check_definition_inequality(spec, policy, t, x, tree=tree, seed=args.seed)
    worst_probe = max(max(p["linear_error"], p["quadratic_error"], p["fit_residual"]) for p in probes)
    worst_identity = max(i["residual"] for i in identities)
    probes_ok = worst_probe <= args.atol
    identities_ok = worst_identity <= args.atol
    passed = inequality.passed and probes_ok and identities_ok
    report["probes"] = probes
    report["identity_residuals"] = identities
    report["definition_inequality"] = inequality.to_dict()
    report["summary"] = {
        "passed": passed,
        "worst_probe_error": worst_probe,
        "worst_identity_residual": worst_identity,
        "worst_margin": inequality.worst_margin,
    }
    report["timing"] = {"seconds": time.perf_counter() - started}
    _emit(report, args.report)
    return EXIT_OK if passed else EXIT_NONEXISTENT


def reproduction_rows(tol: Tolerances | None = None) -> list[dict]:
    """Computed vs reference entries for the builtin example."""
    tol = tol or Tolerances()
    spec = builtin_example()
    rows = []

    def add(label, computed, expected):
        for k, (c, e) in enumerate(zip(computed, expected)):
            rows.append({"quantity": label, "index": k, "computed": float(c), "reference": float(e),
                         "deviation": abs(float(c) - float(e))})

    add("open convexity", open_loop_backward(spec, 0, tol).convexity[:, 0, 0], OPEN_CONVEXITY)
    add("feedback convexity", feedback_backward(spec, 0, tol).convexity[:, 0, 0], FEEDBACK_CONVEXITY)
    for i, (_, conv, stat) in enumerate(MIXED_CASES):
        tab = mixed_backward(spec, case_gains(i), 0, tol)
        add(f"mixed case {i + 1} convexity", tab.convexity[:, 0, 0], conv)
        add(f"mixed case {i + 1} stationarity", tab.stationarity[:, 0, 0], stat)
        if i == len(MIXED_CASES) - 1:
            gains = tab.closed_loop_gain[:, 0, :]
            add("mixed case 10 gain column 1", gains[:, 0], [g[0] for g in LAST_CASE_GAINS])
            add("mixed case 10 gain column 2", gains[:, 1], [g[1] for g in LAST_CASE_GAINS])
    return rows


def cmd_reproduce_example(args) -> int:
    started = time.perf_counter()
    tol = _tolerances(args)
    spec = builtin_example()
    rows = reproduction_rows(tol)
    mismatches = [r for r in rows if r["deviation"] > MATCH_TOLERANCE]
    width = max(len(r["quantity"]) for r in rows)
    out = sys.stdout
    print(f"{'quantity':<{width}}  idx  {'computed':>12}  {'reference':>12}  {'deviation':>10}  ok", file=out)
    for r in rows:
        flag = "yes" if r["deviation"] <= MATCH_TOLERANCE else "NO"
        print(f"{r['quantity']:<{width}}  {r['index']:>3}  {r['computed']:>12.4f}  {r['reference']:>12.4f}"
              f"  {r['deviation']:>10.2e}  {flag}", file=out)
    report = _base_report("reproduce-example", spec, args, tol)
    report["rows"] = rows
    report["mismatches"] = len(mismatches)
    if args.samples:
        rng = np.random.default_rng(args.seed)
        sampled = []
        for _ in range(args.samples):
            gains = rng.standard_normal((spec.N, spec.m, spec.n))
            tab = mixed_backward(spec, gains, 0, tol)
            ex = classify_existence(spec, "all", gains, tol=tol)
            sampled.append({
                "Phi": gains[:, 0, :].tolist(),
                "convexity": tab.convexity[:, 0, 0].tolist(),
                "stationarity": tab.stationarity[:, 0, 0].tolist(),
                "convexity_positive": bool(np.all(tab.convexity[:, 0, 0] > 0)),
                "stationarity_invertible": all(s.stationarity_invertible for s in ex.details["mixed"].stages),
                "mixed_exists": ex.mixed_exists_for_given_phi,
            })
        report["random_feedback_parts"] = sampled
        hits = sum(s["mixed_exists"] == "yes" for s in sampled)
        print(f"random feedback parts with a mixed solution: {hits}/{len(sampled)} (seed {args.seed})", file=out)
    report["timing"] = {"seconds": time.perf_counter() - started}
    if args.report:
        _emit(report, args.report)
    if mismatches:
        print(f"{len(mismatches)} of {len(rows)} entries deviate by more than {MATCH_TOLERANCE:g}", file=out)
    return EXIT_OK if not mismatches else EXIT_MISMATCH


def cmd_export_example(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_atomic(out / "example4.json", format_document(example_document()) + "\n")
    for i, (rows, _, _) in enumerate(MIXED_CASES):
        doc = {"t": 0, "Phi": [[r] for r in rows]}
        _write_atomic(out / f"psi_{i + 1:02d}.json", json.dumps(doc) + "\n")
    schema = resources.files("mixedlq").joinpath("data/report.schema.json").read_text()
    _write_atomic(out / "report.schema.json", schema)
    print(str(out))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _add_tolerance_flags(p) -> None:
    g = p.add_argument_group("tolerances (defaults may be set with MIXEDLQ_<NAME> variables)")
    g.add_argument("--pinv-rtol", type=float, help="relative pseudoinverse cutoff (1e-12)")
    g.add_argument("--psd-tol", type=float, help="semidefiniteness slack (1e-8)")
    g.add_argument("--range-tol", type=float, help="range-membership slack (1e-8)")
    g.add_argument("--invert-rtol", type=float, help="invertibility cutoff on sigma_min/sigma_max (1e-10)")


def _add_phi_flags(p) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--phi", metavar="FILE", help="feedback part: JSON with 'Phi' of shape (N - t, m, n)")
    g.add_argument("--phi-random", action="store_true", help="draw the feedback part from a standard normal")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixedlq",
        description="Equilibrium solutions of time-inconsistent mean-field stochastic LQ problems.",
        epilog="exit codes: 0 ok, 2 invalid input, 3 no equilibrium / verification failed, "
               "4 depth bound exceeded, 5 reference mismatch",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="build an open-loop, feedback or mixed equilibrium policy")
    p.add_argument("--problem", required=True, metavar="FILE")
    p.add_argument("--kind", required=True, choices=("open", "feedback", "mixed"))
    p.add_argument("--t", type=int, default=0)
    p.add_argument("--x", help="initial state as comma-separated values (fixed-pair check)")
    _add_phi_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=256, help="sampled paths for state-dependent checks")
    p.add_argument("--out-policy", metavar="FILE")
    p.add_argument("--report", metavar="FILE", help="write the report here instead of stdout")
    _add_tolerance_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("classify", help="existence and uniqueness verdicts")
    p.add_argument("--problem", required=True, metavar="FILE")
    p.add_argument("--scope", choices=("fixed", "all"), default="all")
    p.add_argument("--t", type=int, default=0)
    p.add_argument("--x")
    _add_phi_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--report", metavar="FILE")
    _add_tolerance_flags(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("simulate", help="sample closed-loop trajectories")
    p.add_argument("--problem", required=True, metavar="FILE")
    p.add_argument("--policy", required=True, metavar="FILE")
    p.add_argument("--t", type=int)
    p.add_argument("--x", required=True)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", choices=("gaussian", "two-point"), default="gaussian")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--long", action="store_true", help="one long CSV with a rep column")
    p.add_argument("--report", metavar="FILE")
    _add_tolerance_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="check a policy against the exact noise tree")
    p.add_argument("--problem", required=True, metavar="FILE")
    p.add_argument("--policy", required=True, metavar="FILE")
    p.add_argument("--t", type=int)
    p.add_argument("--x", required=True)
    p.add_argument("--depth-limit", type=int, default=12)
    p.add_argument("--probes", type=int, default=2, help="perturbation directions of each type per stage")
    p.add_argument("--atol", type=float, default=1e-8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", metavar="FILE")
    _add_tolerance_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("reproduce-example", help="compare the builtin example with its reference values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=0, help="also try this many random feedback parts")
    p.add_argument("--report", metavar="FILE")
    _add_tolerance_flags(p)
    p.set_defaults(func=cmd_reproduce_example)

    p = sub.add_parser("export-example", help="write the example problem and feedback-part files")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_export_example)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"mixedlq: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TreeDepthError as exc:
        print(f"mixedlq: error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except RecursionBlowup as exc:
        print(f"mixedlq: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
