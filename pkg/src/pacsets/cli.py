"""Command-line interface.

Exit codes: 0 success, 1 bad flags or unusable input, 2 infeasible
(n, epsilon, delta), 3 input schema violation.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from .baseline import mass_set_categorical, mass_set_gaussian
from .bounds import BoundKind, Infeasible, PacParams, direct_alpha, min_n_direct, min_n_vc, vc_alpha
from .confset import Threshold
from .estimator import FittedArtifact, _fit_tau, end_to_end
from .forecaster import LOG_2PI, CategoricalForecast, GaussianForecast
from .harness import SizeStats, make_world, sweep, verify_pac
from .io import SchemaError, dump_json, example_to_record, load_json, read_records, set_record
from .trajectory import TrajectoryForecast

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_SCHEMA = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _emit(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _emit_json(obj, path: str | None) -> None:
    _emit(dump_json(obj, indent=2) + "\n", path)


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, (list, tuple, dict)):
        return dump_json(v)
    return v


def _emit_csv(rows: list[dict], path: str | None) -> None:
    buf = _io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _csv_cell(v) for k, v in r.items()})
    _emit(buf.getvalue(), path)


def _infeasible_info(exc: Infeasible, p: PacParams) -> dict:
    info = {"feasible": False, "reason": exc.reason, "bound": BoundKind(exc.bound).value}
    for name, fn in (("min_n_direct", min_n_direct), ("min_n_vc", min_n_vc)):
        try:
            info[name] = fn(p.epsilon, p.delta)
        except OverflowError:
            info[name] = None
    return info


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _load_artifact(path) -> FittedArtifact:
    try:
        art = FittedArtifact.from_dict(load_json(path))
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot read artifact {path}: {exc}") from exc
    if not art.feasible or art.T_hat is None:
        raise UsageError(f"artifact {path} is infeasible: {art.reason}")
    return art


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"missing required option(s): {flags}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_alpha(args) -> int:
    _require(args, "n", "epsilon", "delta")
    p = PacParams(args.epsilon, args.delta, args.n)
    try:
        b = direct_alpha(p) if args.bound == "direct" else vc_alpha(p)
    except Infeasible as exc:
        _emit_json({"n": p.n, "epsilon": p.epsilon, "delta": p.delta, **_infeasible_info(exc, p)}, args.output)
        return EXIT_INFEASIBLE
    _emit_json({
        "n": p.n, "epsilon": p.epsilon, "delta": p.delta, "bound": args.bound, "feasible": True,
        "k_star": b.k_star, "alpha": float(b.alpha), "alpha_exact": str(b.alpha),
    }, args.output)
    return EXIT_OK


def _tau_json(tau):
    if tau is None:
        return None
    if np.ndim(tau) == 0:
        return float(tau)
    return np.asarray(tau, dtype=float).tolist()


def cmd_calibrate(args) -> int:
    _require(args, "input")
    cal = read_records(args.input)
    tau = _fit_tau(cal, args.tau_mode)
    kinds = sorted({type(e.forecast).__name__ for e in cal})
    _emit_json({"tau": _tau_json(tau), "tau_mode": args.tau_mode, "m": len(cal), "forecasts": kinds}, args.output)
    return EXIT_OK


def cmd_fit(args) -> int:
    _require(args, "validation", "epsilon", "delta")
    validation = read_records(args.validation)
    calibration = read_records(args.calibration) if args.calibration else None
    tau = None
    if args.tau_file:
        t = load_json(args.tau_file)["tau"]
        tau = np.asarray(t, dtype=float) if isinstance(t, list) else t
    use_cal = not args.no_calibrate
    if use_cal and tau is None and calibration is None:
        raise UsageError("calibration needs --calibration or --tau-file (or pass --no-calibrate)")
    p = PacParams(args.epsilon, args.delta, len(validation))
    try:
        art = end_to_end(calibration, validation, args.epsilon, args.delta, args.bound,
                         use_calibration=use_cal, tau_mode=args.tau_mode, tau=tau)
    except Infeasible as exc:
        info = _infeasible_info(exc, p)
        out = FittedArtifact(args.epsilon, args.delta, p.n, args.bound, feasible=False, reason=exc.reason).to_dict()
        out.update(min_n_direct=info["min_n_direct"], min_n_vc=info["min_n_vc"])
        _emit_json(out, args.output)
        print(f"infeasible: {exc.reason}", file=sys.stderr)
        return EXIT_INFEASIBLE
    _emit_json(art.to_dict(), args.output)
    return EXIT_OK


def _set_records(art: FittedArtifact, examples, box: bool, workers: int) -> list[dict]:
    T = art.threshold
    return _map(lambda e: set_record(e, art.calibrate(e.forecast), T, box), examples, workers)


def _write_jsonl(records, path):
    _emit("".join(dump_json(r) + "\n" for r in records), path)


def cmd_predict(args) -> int:
    _require(args, "artifact", "input")
    art = _load_artifact(args.artifact)
    _write_jsonl(_set_records(art, read_records(args.input), args.box, args.workers), args.output)
    return EXIT_OK


def _read_sets(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", lineno, str(path)) from exc
            if not isinstance(rec, dict) or "size" not in rec or "id" not in rec:
                raise SchemaError("set record needs 'id' and 'size'", lineno, str(path))
            if not isinstance(rec.get("covered"), bool):
                raise SchemaError("set record has no boolean 'covered' flag", lineno, str(path))
            out.append(rec)
    if not out:
        raise SchemaError("no records", None, str(path))
    return out


def _summary(records: list[dict], epsilon: float) -> dict:
    misses = sum(1 for r in records if not r["covered"])
    err = Fraction(misses, len(records))
    return {
        "n": len(records),
        "misses": misses,
        "error": float(err),
        "error_exact": str(err),
        "epsilon": epsilon,
        "valid": err < Fraction(epsilon),
        "size_stats": SizeStats.of([r["size"] for r in records]).to_dict(),
    }


def _split_stats(examples, records) -> dict:
    groups: dict[str, list[float]] = {"correct": [], "incorrect": []}
    for e, r in zip(examples, records):
        if not isinstance(e.forecast, CategoricalForecast):
            raise UsageError("--split needs categorical forecasts")
        ok = int(np.argmax(e.forecast.log_probs)) == int(e.label)
        groups["correct" if ok else "incorrect"].append(r["size"])
    return {k: SizeStats.of(v).to_dict() if v else None for k, v in groups.items()}


def cmd_eval(args) -> int:
    _require(args, "artifact")
    art = _load_artifact(args.artifact)
    if (args.input is None) == (args.sets is None):
        raise UsageError("eval needs exactly one of --input or --sets")
    if args.sets:
        if args.split:
            raise UsageError("--split needs --input")
        records = _read_sets(args.sets)
        out = _summary(records, art.epsilon)
    else:
        examples = read_records(args.input)
        if any(e.label is None for e in examples):
            raise UsageError("eval needs true_label on every record")
        records = _set_records(art, examples, False, args.workers)
        out = _summary(records, art.epsilon)
        if args.split:
            out["split"] = _split_stats(examples, records)
    _emit_json(out, args.output)
    return EXIT_OK


def _baseline_record(e, epsilon: float) -> dict:
    f = e.forecast
    if isinstance(f, CategoricalForecast):
        labels = mass_set_categorical(f, epsilon)
        rec = {"id": e.id, "kind": "categorical", "set": {"labels": labels}, "size": float(len(labels))}
        if e.label is not None:
            rec["covered"] = int(e.label) in labels
        return rec
    if isinstance(f, GaussianForecast):
        return set_record(e, f, mass_set_gaussian(f, epsilon))
    if isinstance(f, TrajectoryForecast):
        # mass set of the joint block-diagonal Gaussian, projected per step
        from .baseline import chi2_quantile

        hd = f.horizon * f.dim
        T = 0.5 * chi2_quantile(1.0 - epsilon, hd) + 0.5 * hd * LOG_2PI + 0.5 * f.joint_logdet()
        return set_record(e, f, Threshold(T))
    raise TypeError(type(f).__name__)


def cmd_baseline(args) -> int:
    _require(args, "input", "epsilon")
    examples = read_records(args.input)
    tau = _load_artifact(args.artifact).tau if args.artifact else None
    if tau is not None:
        from .estimator import apply_tau

        examples = [type(e)(e.id, apply_tau(e.forecast, tau), e.label) for e in examples]
    records = _map(lambda e: _baseline_record(e, args.epsilon), examples, args.workers)
    if args.sets_output:
        _write_jsonl(records, args.sets_output)
    if all("covered" in r for r in records):
        out = _summary(records, args.epsilon)
    else:
        out = {"n": len(records), "size_stats": SizeStats.of([r["size"] for r in records]).to_dict()}
    _emit_json(out, args.output)
    return EXIT_OK


def _world(args):
    kw = {}
    if args.world == "categorical":
        kw = dict(gamma=args.gamma, num_inputs=args.num_inputs, num_labels=args.num_labels)
    elif args.world == "gaussian":
        kw = dict(dim=args.dim, scale=args.scale, num_inputs=args.num_inputs)
    elif args.world == "trajectory":
        kw = dict(horizon=args.horizon, dim=args.dim, scale=args.scale, mc_samples=args.mc_samples)
    return make_world(args.world, seed=args.seed, **kw)


def cmd_verify_pac(args) -> int:
    _require(args, "n", "epsilon", "delta")
    world = _world(args)
    p = PacParams(args.epsilon, args.delta, args.n)
    calibrate = world.supports_calibration and not args.no_calibrate
    try:
        rep = verify_pac(world, p, args.trials, calibrate=calibrate, bound=args.bound, seed=args.seed,
                         calibration_size=args.calibration_size, workers=args.workers)
    except Infeasible as exc:
        _emit_json({"world": world.kind, "n": p.n, "epsilon": p.epsilon, "delta": p.delta,
                    **_infeasible_info(exc, p)}, args.output)
        return EXIT_INFEASIBLE
    if args.records:
        rows = [{"trial": r.trial, "tau": r.tau, "T_hat": r.T_hat, "effective_k": r.effective_k,
                 "true_error": r.true_error, "failed": r.failed} for r in rep.records]
        _emit_csv(rows, args.records)
    _emit_json(rep.summary(), args.output)
    return EXIT_OK


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def cmd_sweep(args) -> int:
    _require(args, "n")
    world = _world(args)
    calibrate = world.supports_calibration and not args.no_calibrate
    epsilons = args.epsilons if isinstance(args.epsilons, list) else _float_list(str(args.epsilons))
    deltas = args.deltas if isinstance(args.deltas, list) else _float_list(str(args.deltas))
    rows = sweep(world, epsilons, deltas, args.n, calibrate=calibrate, bound=args.bound,
                 seed=args.seed, calibration_size=args.calibration_size, test_size=args.test_size)
    _emit_csv(rows, args.output)
    return EXIT_OK


def cmd_report(args) -> int:
    _require(args, "artifact", "input")
    art = _load_artifact(args.artifact)
    examples = read_records(args.input)
    records = _set_records(art, examples, False, args.workers)
    rows = []
    for r in records:
        covered = r.get("covered")
        if r["kind"] == "trajectory":
            for t, st in enumerate(r["set"]["steps"], start=1):
                rows.append({"id": r["id"], "kind": r["kind"], "step": t, "size": st["size"], "covered": covered})
        else:
            rows.append({"id": r["id"], "kind": r["kind"], "step": None, "size": r["size"], "covered": covered})
    _emit_csv(rows, args.output)
    return EXIT_OK


def cmd_simulate(args) -> int:
    _require(args, "n")
    world = _world(args)
    if world.kind == "exp":
        raise UsageError("the exponential-score world has no forecasts to write")
    from .harness import trial_rng

    sample = world.sample(args.n, trial_rng(args.seed, 0))
    examples = world.examples(sample, prefix=args.prefix)
    if world.kind == "trajectory":
        recs = [example_to_record(e, x0) for e, x0 in zip(examples, sample[0])]
    else:
        recs = [example_to_record(e) for e in examples]
    _write_jsonl(recs, args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from exc
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _common(p, *, pac=False, world=False):
    p.add_argument("--config", help="TOML file whose keys mirror the long flags; flags win")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--output", "-o", help="output path (default: stdout)")
    if pac:
        p.add_argument("--n", type=_positive_int)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--delta", type=float)
        p.add_argument("--bound", choices=[b.value for b in BoundKind], default="direct")
    if world:
        p.add_argument("--world", choices=["exp", "categorical", "gaussian", "trajectory"], default="exp")
        p.add_argument("--gamma", type=float, default=3.0)
        p.add_argument("--scale", type=float, default=1.0)
        p.add_argument("--dim", type=_positive_int, default=1)
        p.add_argument("--horizon", type=_positive_int, default=20)
        p.add_argument("--num-inputs", type=_positive_int, default=200)
        p.add_argument("--num-labels", type=_positive_int, default=10)
        p.add_argument("--mc-samples", type=_positive_int, default=1_000_000)
        p.add_argument("--calibration-size", type=_positive_int, default=1000)
        p.add_argument("--no-calibrate", action="store_true", help="skip temperature scaling")


def _tau_flags(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--tau-mode", choices=["global", "per-step", "per-step-dim"], default="per-step",
                   help="temperature granularity for trajectory forecasts")
    g.add_argument("--per-step-tau", dest="tau_mode", action="store_const", const="per-step",
                   help="same as --tau-mode per-step")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = _Parser(prog="pacsets", description="PAC confidence sets for probabilistic forecasters")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    p = sub.add_parser("alpha", help="validation error budget k* for (n, epsilon, delta)")
    _common(p, pac=True)
    p.set_defaults(func=cmd_alpha)
    subs["alpha"] = p

    p = sub.add_parser("calibrate", help="fit temperatures on a calibration file")
    _common(p)
    p.add_argument("--input", help="calibration JSONL")
    _tau_flags(p)
    p.set_defaults(func=cmd_calibrate)
    subs["calibrate"] = p

    p = sub.add_parser("fit", help="calibrate and choose the threshold; writes the artifact")
    _common(p, pac=True)
    p.add_argument("--calibration", help="calibration JSONL")
    p.add_argument("--validation", help="validation JSONL (ids disjoint from calibration)")
    p.add_argument("--tau-file", help="reuse temperatures written by 'calibrate'")
    p.add_argument("--no-calibrate", action="store_true", help="skip temperature scaling")
    _tau_flags(p)
    p.set_defaults(func=cmd_fit)
    subs["fit"] = p

    p = sub.add_parser("predict", help="emit one confidence set per input record")
    _common(p)
    p.add_argument("--artifact")
    p.add_argument("--input")
    p.add_argument("--box", action="store_true", help="add axis-aligned bounding boxes of ellipsoids")
    p.set_defaults(func=cmd_predict)
    subs["predict"] = p

    p = sub.add_parser("eval", help="test error, validity flag and size statistics")
    _common(p)
    p.add_argument("--artifact")
    p.add_argument("--input", help="labelled forecast JSONL")
    p.add_argument("--sets", help="output of 'predict' on labelled records")
    p.add_argument("--split", action="store_true", help="size stats split by top-1 correctness")
    p.set_defaults(func=cmd_eval)
    subs["eval"] = p

    p = sub.add_parser("baseline", help="per-input 1-epsilon probability-mass sets")
    _common(p)
    p.add_argument("--input")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--artifact", help="apply this artifact's temperatures first")
    p.add_argument("--sets-output", help="write the baseline sets as JSONL")
    p.set_defaults(func=cmd_baseline)
    subs["baseline"] = p

    p = sub.add_parser("verify-pac", help="Monte-Carlo check of the PAC guarantee on a synthetic world")
    _common(p, pac=True, world=True)
    p.add_argument("--trials", type=_positive_int, default=1000)
    p.add_argument("--records", help="per-trial CSV output")
    p.set_defaults(func=cmd_verify_pac)
    subs["verify-pac"] = p

    p = sub.add_parser("sweep", help="threshold and set sizes over an epsilon x delta grid")
    _common(p, pac=True, world=True)
    p.add_argument("--epsilons", type=_float_list, default=[0.01, 0.02, 0.05, 0.1, 0.2])
    p.add_argument("--deltas", type=_float_list, default=[1e-5, 1e-3, 1e-2, 1e-1])
    p.add_argument("--test-size", type=_positive_int, default=5000)
    p.set_defaults(func=cmd_sweep)
    subs["sweep"] = p

    p = sub.add_parser("report", help="plot-ready CSV of per-input (and per-step) set sizes")
    _common(p)
    p.add_argument("--artifact")
    p.add_argument("--input")
    p.set_defaults(func=cmd_report)
    subs["report"] = p

    p = sub.add_parser("simulate", help="write labelled forecast records from a synthetic world")
    _common(p, world=True)
    p.add_argument("--n", type=_positive_int)
    p.add_argument("--prefix", default="", help="id prefix")
    p.set_defaults(func=cmd_simulate)
    subs["simulate"] = p
    return parser, subs


def _apply_config(parser, subs, argv, args):
    try:
        with open(args.config, "rb") as fh:
            cfg = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    values = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    section = cfg.get(args.command, {})
    if not isinstance(section, dict):
        raise UsageError(f"config entry {args.command!r} must be a table")
    values.update(section)
    sp = subs[args.command]
    known = {a.dest for a in sp._actions}
    defaults = {}
    for key, v in values.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "func", "help"):
            raise UsageError(f"unknown config key {key!r} for command {args.command!r}")
        defaults[dest] = v
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            args = _apply_config(parser, subs, argv, args)
        return args.func(args)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except Infeasible as exc:
        print(f"infeasible: {exc.reason}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
