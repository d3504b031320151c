"""Turn a mining result bundle into plot-ready tables and rendered figures.

A bundle directory holds ``mining.axlog``, ``best.axmap``, ``best.axtr`` (+
sidecar) and ``summary.json`` as written by the ``mine`` command. The report
emits delimited data (trace.csv, pareto.csv, utilization.csv, report.json)
and, unless disabled, renders the matching figures (trace.png, pareto.png,
utilization.png) alongside them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .mapping import MappingFile, read_mapping
from .mining import TestRecord, read_log
from .queries import Trace, read_trace

BUNDLE_PARTS = ("mining.axlog", "best.axmap", "best.axtr", "best.axtr.json",
                "summary.json")


@dataclass
class Bundle:
    records: list[TestRecord]
    mapping: MappingFile
    trace: Trace
    acc_exact: np.ndarray
    acc_approx: np.ndarray
    summary: dict


def load_bundle(directory: str | Path) -> Bundle:
    directory = Path(directory)
    missing = [part for part in BUNDLE_PARTS if not (directory / part).exists()]
    if missing:
        raise ValidationError(
            f"incomplete bundle {directory}: missing {', '.join(missing)}")
    trace, exact, approx = read_trace(directory / "best.axtr")
    return Bundle(
        records=read_log(directory / "mining.axlog"),
        mapping=read_mapping(directory / "best.axmap"),
        trace=trace,
        acc_exact=exact,
        acc_approx=approx,
        summary=json.loads((directory / "summary.json").read_text(encoding="utf-8")),
    )


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_report(bundle: Bundle, out_dir: str | Path, figures: bool = True) -> dict:
    """Emit the report tables (and figures) into ``out_dir``; returns the summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    _write_csv(out_dir / "trace.csv",
               ["batch", "acc_exact", "acc_approx", "acc_diff"],
               [[i, repr(float(e)), repr(float(a)), repr(float(d))]
                for i, (e, a, d) in enumerate(
                    zip(bundle.acc_exact, bundle.acc_approx, bundle.trace.acc_diff))])

    _write_csv(out_dir / "pareto.csv",
               ["iteration", "energy_gain", "rhs_robustness", "satisfied"],
               [[r.iteration, repr(r.energy_gain), repr(r.rhs_robustness),
                 int(r.satisfied)]
                for r in sorted(_pareto_of(bundle), key=lambda r: r.iteration)])

    util_rows = []
    for layer in bundle.mapping.per_layer_utilization:
        total = layer.total
        shares = layer.shares() if total else (0.0, 0.0, 0.0)
        util_rows.append([
            len(util_rows), layer.ops_m0, layer.ops_m1, layer.ops_m2,
            repr(100.0 * shares[0]), repr(100.0 * shares[1]), repr(100.0 * shares[2]),
        ])
    agg = bundle.mapping.utilization
    agg_shares = agg.shares()
    util_rows.append(["total", agg.ops_m0, agg.ops_m1, agg.ops_m2,
                      repr(100.0 * agg_shares[0]), repr(100.0 * agg_shares[1]),
                      repr(100.0 * agg_shares[2])])
    _write_csv(out_dir / "utilization.csv",
               ["layer", "ops_m0", "ops_m1", "ops_m2", "pct_m0", "pct_m1", "pct_m2"],
               util_rows)

    summary = {
        "theta_star": bundle.summary.get("theta_star"),
        "energy_gain": bundle.mapping.energy_gain,
        "avg_acc_drop": bundle.trace.avg_acc_drop,
        "max_acc_diff": float(bundle.trace.acc_diff.max()),
        "batches": len(bundle.trace),
        "utilization_pct": {
            "m0": 100.0 * agg_shares[0],
            "m1": 100.0 * agg_shares[1],
            "m2": 100.0 * agg_shares[2],
        },
        "tests": len(bundle.records),
        "pareto_size": len(_pareto_of(bundle)),
        "model_sha256": bundle.mapping.model_sha256,
        "query_sha256": bundle.summary.get("query_sha256"),
        "seed": bundle.summary.get("seed"),
        "satisfied_on_full": bundle.summary.get("satisfied_on_full"),
    }
    (out_dir / "report.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    if figures:
        render_figures(bundle, out_dir)
    return summary


def _pareto_of(bundle: Bundle) -> list[TestRecord]:
    from .mining import pareto_front

    return pareto_front(bundle.records)


def render_figures(bundle: Bundle, out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # per-batch accuracy differences
    fig, ax = plt.subplots(figsize=(7, 3.2))
    batches = np.arange(len(bundle.trace))
    ax.bar(batches, bundle.trace.acc_diff, color="#c44e52", width=0.8)
    ax.axhline(bundle.trace.avg_acc_drop, color="#4c72b0", lw=1.2,
               label=f"average drop {bundle.trace.avg_acc_drop:.2f} pp")
    ax.set_xlabel("batch")
    ax.set_ylabel("accuracy drop (pp)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "trace.png", dpi=150)
    plt.close(fig)

    # explored mappings and the Pareto front
    fig, ax = plt.subplots(figsize=(5, 3.6))
    gains = [r.energy_gain for r in bundle.records]
    robs = [r.rhs_robustness for r in bundle.records]
    sats = [r.satisfied for r in bundle.records]
    ax.scatter([g for g, s in zip(gains, sats) if not s],
               [r for r, s in zip(robs, sats) if not s],
               s=14, c="#c44e52", label="violating", alpha=0.7)
    ax.scatter([g for g, s in zip(gains, sats) if s],
               [r for r, s in zip(robs, sats) if s],
               s=14, c="#55a868", label="satisfying", alpha=0.7)
    front = sorted(_pareto_of(bundle), key=lambda r: r.energy_gain)
    ax.plot([r.energy_gain for r in front], [r.rhs_robustness for r in front],
            "k--", lw=1, label="pareto front")
    ax.axhline(0.0, color="gray", lw=0.8)
    ax.set_xlabel("energy gain")
    ax.set_ylabel("constraint robustness (pp)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "pareto.png", dpi=150)
    plt.close(fig)

    # per-layer mode utilization
    fig, ax = plt.subplots(figsize=(6, 3.2))
    layers = np.arange(len(bundle.mapping.per_layer_utilization))
    pct = np.array([
        [100.0 * s for s in u.shares()] if u.total else [0.0, 0.0, 0.0]
        for u in bundle.mapping.per_layer_utilization
    ])
    bottom = np.zeros(len(layers))
    for idx, (label, color) in enumerate(
            [("M0 (exact)", "#4c72b0"), ("M1", "#dd8452"), ("M2", "#c44e52")]):
        ax.bar(layers, pct[:, idx], bottom=bottom, label=label, color=color)
        bottom += pct[:, idx]
    ax.set_xlabel("layer")
    ax.set_ylabel("multiplications (%)")
    ax.set_xticks(layers)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "utilization.png", dpi=150)
    plt.close(fig)
