"""Command-line front end tying the library into reproducible experiments.

Exit codes: 0 success, 2 input/validation error, 3 infeasible query,
4 internal invariant breach. All inputs named by a command are resolved and
validated before any computation or output starts. The ``AXMAP_LOG``
environment variable sets the log level.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mapping as mapping_mod
from . import mining as mining_mod
from . import queries as queries_mod
from .engine import QuantModel, exact_mul
from .errors import AxmapError, InternalError, ValidationError
from .mapping import FractionVectors
from .model_io import Dataset, batches_for, load_any_dataset, load_model
from .multipliers import AxMode, AxMultiplier, builtin_truncation, error_profile, load_lut, save_lut

log = logging.getLogger("axmap")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3
EXIT_INTERNAL = 4

DEFAULT_MODES = ("trunc:0", "trunc:1", "trunc:2")
DEFAULT_ENERGIES = (1.0, 0.8, 0.6)


def _setup_logging() -> None:
    level = os.environ.get("AXMAP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _parse_mode_spec(spec: str, energy: float) -> AxMode:
    if spec == "exact":
        return builtin_truncation(0, energy)
    if spec.startswith("trunc:"):
        try:
            k = int(spec.split(":", 1)[1])
        except ValueError as exc:
            raise ValidationError(f"bad truncation spec {spec!r}") from exc
        try:
            return builtin_truncation(k, energy)
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc
    path = Path(spec)
    if not path.exists():
        raise ValidationError(f"multiplier LUT not found: {spec}")
    mode = load_lut(path)
    # an explicit --energy always wins over the energy stored in the file
    return AxMode(name=mode.name, table=mode.table, energy_per_op=energy,
                  source=mode.source)


def build_multiplier(mult_arg: str | None, energy_arg: str | None) -> AxMultiplier:
    specs = dict(zip(("m0", "m1", "m2"), DEFAULT_MODES))
    if mult_arg:
        for part in mult_arg.split(","):
            key, _, value = part.partition("=")
            key = key.strip().lower()
            if key not in specs or not value:
                raise ValidationError(f"bad --mult entry {part!r} (use m0=...,m1=...,m2=...)")
            specs[key] = value.strip()
    energies = DEFAULT_ENERGIES
    if energy_arg:
        try:
            energies = tuple(float(x) for x in energy_arg.split(","))
        except ValueError as exc:
            raise ValidationError(f"bad --energy value {energy_arg!r}") from exc
        if len(energies) != 3:
            raise ValidationError("--energy needs exactly three values e0,e1,e2")
    use_stored = energy_arg is None
    modes = []
    for key, energy in zip(("m0", "m1", "m2"), energies):
        spec = specs[key]
        if use_stored and not (spec == "exact" or spec.startswith("trunc:")):
            mode = load_lut(spec)  # keep the energy recorded in the file
        else:
            mode = _parse_mode_spec(spec, energy)
        modes.append(mode)
    return AxMultiplier(modes=tuple(modes))


def parse_fv_literal(text: str, layer_count: int) -> FractionVectors:
    """Parse per-layer ``v1:v2`` pairs (comma separated), or ``0`` for all-exact."""
    text = text.strip()
    if text == "0":
        return FractionVectors.zeros(layer_count)
    pairs = [p for p in text.split(",") if p.strip()]
    if len(pairs) != layer_count:
        raise ValidationError(
            f"--fv lists {len(pairs)} layer pairs, model has {layer_count}")
    v1, v2 = [], []
    for pair in pairs:
        left, sep, right = pair.partition(":")
        if not sep:
            raise ValidationError(f"bad --fv pair {pair!r} (use v1:v2)")
        try:
            v1.append(float(left))
            v2.append(float(right))
        except ValueError as exc:
            raise ValidationError(f"bad --fv pair {pair!r}") from exc
    try:
        return FractionVectors(np.array(v1), np.array(v2))
    except ValidationError:
        raise
    except Exception as exc:  # pragma: no cover
        raise ValidationError(str(exc)) from exc


def _load_query(path: str) -> queries_mod.Query:
    query_path = Path(path)
    if not query_path.exists():
        raise ValidationError(f"query file not found: {path}")
    return queries_mod.parse_query(query_path.read_text(encoding="utf-8"))


def _resolve_fv(args, model: QuantModel) -> FractionVectors:
    given = sum(x is not None for x in (args.mapping, args.fv))
    if given != 1:
        raise ValidationError("exactly one of --mapping or --fv is required")
    if args.mapping is not None:
        mapping_file = mapping_mod.read_mapping(args.mapping)
        if len(mapping_file.fv) != model.mul_layer_count:
            raise ValidationError(
                f"mapping has {len(mapping_file.fv)} layers, "
                f"model has {model.mul_layer_count}")
        if mapping_file.model_sha256 and model.sha256 and \
                mapping_file.model_sha256 != model.sha256:
            log.warning("mapping was produced for a different model "
                        "(sha256 mismatch)")
        return mapping_file.fv
    return parse_fv_literal(args.fv, model.mul_layer_count)


@dataclass
class RunInputs:
    """Validated inputs of one experiment; nothing is computed before this exists."""

    model: QuantModel
    dataset: Dataset
    batches: list
    mult: AxMultiplier


def _load_run_inputs(args) -> RunInputs:
    model_path = Path(args.model)
    if not model_path.exists():
        raise ValidationError(f"model file not found: {args.model}")
    model = load_model(model_path)
    dataset = load_any_dataset(args.dataset)
    batches = batches_for(model, dataset, args.batch_size)
    mult = build_multiplier(args.mult, args.energy)
    return RunInputs(model=model, dataset=dataset, batches=batches, mult=mult)


# ---------------------------------------------------------------------------
# subcommands


def cmd_infer(args) -> int:
    inputs = _load_run_inputs(args)
    if args.mapping is None and args.fv is None:
        mul = exact_mul()
        gain = 0.0
    else:
        fv = _resolve_fv(args, inputs.model)
        mul = mapping_mod.mapped_multiplier(fv, inputs.model, inputs.mult)
        gain = mapping_mod.energy_gain(
            mapping_mod.utilization(inputs.model, fv), inputs.mult)
    accs = mining_mod.batch_accuracies(inputs.model, inputs.batches, mul, args.threads)
    for i, acc in enumerate(accs):
        print(f"batch {i:3d}: accuracy {acc:7.3f}%")
    print(f"overall: accuracy {np.mean(accs):.3f}% over {len(accs)} batches; "
          f"energy gain {gain:.4f}")
    return EXIT_OK


def cmd_trace(args) -> int:
    inputs = _load_run_inputs(args)
    fv = _resolve_fv(args, inputs.model)
    out_path = Path(args.out)
    if out_path.parent and not out_path.parent.exists():
        raise ValidationError(f"output directory does not exist: {out_path.parent}")
    mul = mapping_mod.mapped_multiplier(fv, inputs.model, inputs.mult)
    exact_pct = mining_mod.batch_accuracies(inputs.model, inputs.batches,
                                            exact_mul(), args.threads)
    approx_pct = mining_mod.batch_accuracies(inputs.model, inputs.batches, mul,
                                             args.threads)
    gain = mapping_mod.energy_gain(
        mapping_mod.utilization(inputs.model, fv), inputs.mult)
    trace = queries_mod.write_trace(out_path, exact_pct, approx_pct, gain)
    diffs = trace.acc_diff
    print(f"wrote {out_path} ({len(diffs)} batches)")
    print(f"average drop {trace.avg_acc_drop:.4f} pp, max drop {diffs.max():.4f} pp, "
          f"energy gain {gain:.4f}")
    for threshold in (3.0, 5.0, 15.0):
        share = 100.0 * np.mean(diffs > threshold)
        print(f"batches dropping more than {threshold:g} pp: {share:.1f}%")
    return EXIT_OK


def cmd_robustness(args) -> int:
    query = _load_query(args.query)
    trace_paths = [Path(p) for p in args.trace]
    for p in trace_paths:
        if not p.exists():
            raise ValidationError(f"trace file not found: {p}")
    thetas = []
    if args.theta:
        try:
            thetas = [float(x) for x in args.theta.split(",")]
        except ValueError as exc:
            raise ValidationError(f"bad --theta list {args.theta!r}") from exc
    rhs = queries_mod.consequent(query)
    for path in trace_paths:
        trace, _, _ = queries_mod.read_trace(path)
        print(f"trace {path}: {len(trace)} batches, energy gain "
              f"{trace.energy_gain:.4f}, avg drop {trace.avg_acc_drop:.4f} pp")
        rhs_rho = queries_mod.robustness(rhs, None, trace)
        print(f"  constraints: robustness {rhs_rho:+.6f} -> "
              f"{'satisfied' if rhs_rho >= 0 else 'violated'}")
        for conjunct in queries_mod.conjuncts(rhs):
            rho = queries_mod.robustness(conjunct, None, trace)
            sat = queries_mod.satisfies(conjunct, None, trace)
            print(f"    {queries_mod.to_text(conjunct)}: robustness {rho:+.6f} -> "
                  f"{'satisfied' if sat else 'violated'}")
        for theta in thetas:
            rho = queries_mod.robustness(query, theta, trace)
            sat = queries_mod.satisfies(query, theta, trace)
            print(f"  theta={theta:g}: robustness {rho:+.6f} -> "
                  f"{'satisfied' if sat else 'violated'}")
    return EXIT_OK


def cmd_mine(args) -> int:
    inputs = _load_run_inputs(args)
    query_path = Path(args.query)
    query = _load_query(args.query)
    out_dir = Path(args.out)
    cfg = mining_mod.MiningConfig(
        iterations=args.iterations,
        proposal_sigma=args.sigma,
        seed=args.seed,
        optimization_subset_fraction=args.subset,
        batch_size=args.batch_size,
        threads=args.threads,
    )
    out_dir.mkdir(parents=True, exist_ok=True)

    result = mining_mod.run_mining(inputs.model, inputs.mult, inputs.batches,
                                   query, cfg)
    mining_mod.write_log(result.records, out_dir / "mining.axlog")
    query_hash = hashlib.sha256(query_path.read_bytes()).hexdigest()
    summary = {
        "theta_star": result.theta_star,
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "query_sha256": query_hash,
        "model_sha256": inputs.model.sha256,
        "tests": len(result.records),
    }
    if not result.feasible:
        summary["diagnostic"] = result.diagnostic
        (out_dir / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        print(f"infeasible: {result.diagnostic}")
        return EXIT_INFEASIBLE

    full = mining_mod.reevaluate(result.best_mapping, inputs.model, inputs.mult,
                                 inputs.batches, query, threads=args.threads)
    summary["satisfied_on_full"] = full.satisfied
    summary["full_rhs_robustness"] = full.rhs_robustness
    summary["subset_rhs_robustness"] = result.best_record.rhs_robustness
    mapping_mod.write_mapping(out_dir / "best.axmap", inputs.model,
                              result.best_mapping, inputs.mult)
    queries_mod.write_trace(out_dir / "best.axtr", full.acc_exact, full.acc_approx,
                            full.energy_gain)
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"theta* = {result.theta_star:.6f} "
          f"(subset robustness {result.best_record.rhs_robustness:+.4f}, "
          f"full-set robustness {full.rhs_robustness:+.4f}, "
          f"full-set satisfied: {full.satisfied})")
    print(f"bundle written to {out_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import load_bundle, write_report

    bundle = load_bundle(args.bundle)
    out_dir = Path(args.out) if args.out else Path(args.bundle) / "report"
    summary = write_report(bundle, out_dir, figures=not args.no_figures)
    print(f"report written to {out_dir} "
          f"(energy gain {summary['energy_gain']:.4f}, "
          f"avg drop {summary['avg_acc_drop']:.4f} pp)")
    return EXIT_OK


def cmd_lut(args) -> int:
    if args.lut_action == "build":
        energy = args.lut_energy
        mode = _parse_mode_spec(args.mode, energy)
        if args.name:
            mode = AxMode(name=args.name, table=mode.table,
                          energy_per_op=mode.energy_per_op, source=mode.source)
        save_lut(mode, args.out)
        print(f"wrote {args.out} (mode {mode.name}, energy {mode.energy_per_op})")
        return EXIT_OK
    # inspect
    path = Path(args.path)
    if not path.exists():
        raise ValidationError(f"LUT file not found: {path}")
    mode = load_lut(path)
    profile = error_profile(mode)
    print(f"{path}: mode {mode.name!r}, energy_per_op {mode.energy_per_op}")
    print(f"  mean error          {profile.mean_error:.6f}")
    print(f"  mean absolute error {profile.mean_absolute_error:.6f}")
    print(f"  max absolute error  {profile.max_absolute_error}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def _add_run_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", required=True, help="AXQM model file")
    parser.add_argument("--dataset", required=True,
                        help="AXDS file or images:labels IDX pair")
    parser.add_argument("--mult", default=None,
                        help="mode specs m0=...,m1=...,m2=... "
                             "(exact, trunc:<k>, or AXLU path)")
    parser.add_argument("--energy", default=None,
                        help="energy per op e0,e1,e2 (default 1.0,0.8,0.6)")
    parser.add_argument("--batch-size", type=int, default=100)
    parser.add_argument("--threads", type=int, default=1)


def _add_mapping_args(parser: argparse.ArgumentParser, required: bool) -> None:
    parser.add_argument("--mapping", default=None, help="AXMAP file")
    parser.add_argument("--fv", default=None,
                        help="per-layer v1:v2 pairs, comma separated, or 0")
    parser.required_mapping = required  # type: ignore[attr-defined]


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="axmap",
        description="Map quantized CNN weights onto approximate-multiplier "
                    "modes under formal accuracy constraints.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_infer = sub.add_parser("infer", help="run inference and print accuracies")
    _add_run_args(p_infer)
    _add_mapping_args(p_infer, required=False)
    p_infer.set_defaults(func=cmd_infer)

    p_trace = sub.add_parser("trace", help="write a per-batch accuracy-drop trace")
    _add_run_args(p_trace)
    _add_mapping_args(p_trace, required=True)
    p_trace.add_argument("--out", required=True, help="output AXTR path")
    p_trace.set_defaults(func=cmd_trace)

    p_rob = sub.add_parser("robustness",
                           help="evaluate a query against recorded traces")
    p_rob.add_argument("--query", required=True)
    p_rob.add_argument("--trace", required=True, nargs="+")
    p_rob.add_argument("--theta", default=None, help="comma separated theta values")
    p_rob.set_defaults(func=cmd_robustness)

    p_mine = sub.add_parser("mine", help="mine the maximum feasible energy gain")
    _add_run_args(p_mine)
    p_mine.add_argument("--query", required=True)
    p_mine.add_argument("--iterations", type=int, default=50)
    p_mine.add_argument("--sigma", type=float, default=0.05)
    p_mine.add_argument("--subset", type=float, default=0.25)
    p_mine.add_argument("--seed", type=int, default=0)
    p_mine.add_argument("--out", required=True, help="output bundle directory")
    p_mine.set_defaults(func=cmd_mine)

    p_report = sub.add_parser("report", help="render tables and figures from a bundle")
    p_report.add_argument("--bundle", required=True)
    p_report.add_argument("--out", default=None)
    p_report.add_argument("--no-figures", action="store_true")
    p_report.set_defaults(func=cmd_report)

    p_lut = sub.add_parser("lut", help="build or inspect AXLU multiplier tables")
    lut_sub = p_lut.add_subparsers(dest="lut_action", required=True)
    p_build = lut_sub.add_parser("build")
    p_build.add_argument("--mode", required=True, help="exact or trunc:<k>")
    p_build.add_argument("--energy", dest="lut_energy", type=float, required=True)
    p_build.add_argument("--name", default=None)
    p_build.add_argument("--out", required=True)
    p_inspect = lut_sub.add_parser("inspect")
    p_inspect.add_argument("path")
    p_lut.set_defaults(func=cmd_lut)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InternalError as exc:
        log.error("internal invariant breach: %s", exc)
        print(f"error: internal invariant breach: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except AxmapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
