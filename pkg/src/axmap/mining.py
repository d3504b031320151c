"""Simulated-annealing search over fraction vectors for the best energy gain.

The chain maximizes energy gain subject to the query's constraint side
(everything right of the implication): the cost of a tested mapping is
``-energy_gain + P * max(0, -constraint_robustness)`` with penalty weight
P = 1e3, so infeasible mappings are driven back toward the satisfaction
boundary while feasible ones compete on gain alone. The inverse temperature
adapts multiplicatively toward a target acceptance rate, and the proposal
step size cools geometrically from 8x the configured sigma down to 0.25x:
wide early steps traverse from the random start toward feasibility, narrow
late steps refine along the constraint boundary (a fixed step size does
neither within a 50-iteration budget). Every evaluated proposal is recorded;
the result carries the full log, the Pareto front over (energy gain,
constraint robustness), and the best satisfying mapping.

All randomness flows from the config seed through three counter-split
streams (initialization, proposals, acceptance coins), so identical inputs
reproduce identical results bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .engine import Batch, QuantModel, exact_mul, infer_batch
from .errors import FormatError, ValidationError
from .mapping import FractionVectors, energy_gain, mapped_multiplier, utilization
from .multipliers import AxMultiplier
from .queries import Query, Trace, consequent_robustness

PENALTY_WEIGHT = 1e3

# geometric proposal-step schedule, as multiples of MiningConfig.proposal_sigma
SIGMA_START_FACTOR = 8.0
SIGMA_END_FACTOR = 0.25


@dataclass(frozen=True)
class MiningConfig:
    """Knobs of one mining run; defaults follow the evaluation setup."""

    iterations: int = 50
    proposal_sigma: float = 0.05
    initial_beta: float = 10.0
    target_accept_rate: float = 0.3
    seed: int = 0
    optimization_subset_fraction: float = 0.25
    batch_size: int = 100
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be positive")
        if not (self.proposal_sigma > 0):
            raise ValidationError("proposal_sigma must be positive")
        if not (self.initial_beta > 0):
            raise ValidationError("initial_beta must be positive")
        if not 0 < self.target_accept_rate < 1:
            raise ValidationError("target_accept_rate must be in (0, 1)")
        if not 0 < self.optimization_subset_fraction <= 1:
            raise ValidationError("optimization_subset_fraction must be in (0, 1]")
        if self.batch_size < 1 or self.threads < 1:
            raise ValidationError("batch_size and threads must be positive")


@dataclass(frozen=True)
class TestRecord:
    """One evaluated mapping: its trace, constraint robustness, and gain."""

    __test__ = False  # not a pytest class, despite the name

    fv: FractionVectors
    acc_exact: np.ndarray   # percent, one entry per batch
    acc_approx: np.ndarray  # percent
    trace: Trace
    rhs_robustness: float
    energy_gain: float
    satisfied: bool
    iteration: int
    accepted: bool = False


@dataclass(frozen=True)
class MiningResult:
    records: list[TestRecord]
    pareto: list[TestRecord]
    theta_star: float | None
    best_mapping: FractionVectors | None
    best_record: TestRecord | None
    diagnostic: str | None

    @property
    def feasible(self) -> bool:
        return self.theta_star is not None


def _dominates(a: TestRecord, b: TestRecord) -> bool:
    return (a.energy_gain >= b.energy_gain and a.rhs_robustness >= b.rhs_robustness
            and (a.energy_gain > b.energy_gain or a.rhs_robustness > b.rhs_robustness))


def pareto_front(records: Sequence[TestRecord]) -> list[TestRecord]:
    """Records not dominated in (energy_gain up, rhs_robustness up)."""
    return [r for r in records if not any(_dominates(o, r) for o in records)]


def initial_fractions(layer_count: int, rng: np.random.Generator) -> FractionVectors:
    """Uniform draw from the per-layer simplex {v1, v2 >= 0, v1 + v2 <= 1}."""
    points = rng.dirichlet(np.ones(3), size=layer_count)
    return FractionVectors(points[:, 0].copy(), points[:, 1].copy())


def propose(fv: FractionVectors, sigma: float, rng: np.random.Generator) -> FractionVectors:
    """Gaussian perturbation projected back onto the per-layer simplex.

    Negative coordinates clip to zero; pairs exceeding unit sum are rescaled
    by 1/(v1+v2).
    """
    noise = rng.normal(0.0, sigma, size=(len(fv), 2)) if sigma > 0 else np.zeros((len(fv), 2))
    v1 = np.maximum(fv.v1 + noise[:, 0], 0.0)
    v2 = np.maximum(fv.v2 + noise[:, 1], 0.0)
    total = v1 + v2
    over = total > 1.0
    if over.any():
        divisor = np.where(over, total, 1.0)
        v1 = np.where(over, v1 / divisor, v1)
        v2 = np.where(over, v2 / divisor, v2)
        v2 = np.minimum(v2, 1.0 - v1)  # absorb rounding from the division
    return FractionVectors(v1, v2)


def batch_accuracies(model: QuantModel, batches: Sequence[Batch], mul,
                     threads: int = 1) -> np.ndarray:
    """Per-batch accuracies in percent; thread count never changes values."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(lambda b: infer_batch(model, b, mul), batches))
    else:
        accs = [infer_batch(model, b, mul) for b in batches]
    return np.array(accs, dtype=np.float64) * 100.0


def evaluate_mapping(fv: FractionVectors, model: QuantModel, mult: AxMultiplier,
                     batches: Sequence[Batch], phi: Query, *,
                     iteration: int = 0, threads: int = 1,
                     exact_pct: np.ndarray | None = None) -> TestRecord:
    """Run exact and approximate inference over the batches and score the trace."""
    if exact_pct is None:
        exact_pct = batch_accuracies(model, batches, exact_mul(), threads)
    approx_pct = batch_accuracies(model, batches, mapped_multiplier(fv, model, mult),
                                  threads)
    gain = energy_gain(utilization(model, fv), mult)
    trace = Trace.from_accuracies(exact_pct, approx_pct, gain)
    rhs = consequent_robustness(phi, trace)
    return TestRecord(
        fv=fv, acc_exact=exact_pct, acc_approx=approx_pct, trace=trace,
        rhs_robustness=rhs, energy_gain=gain, satisfied=rhs >= 0,
        iteration=iteration,
    )


def _cost(record: TestRecord) -> float:
    return -record.energy_gain + PENALTY_WEIGHT * max(0.0, -record.rhs_robustness)


def _scheduled_sigma(base: float, iteration: int, total: int) -> float:
    if total <= 1:
        return base * SIGMA_START_FACTOR
    progress = (iteration - 1) / (total - 1)
    return base * SIGMA_START_FACTOR * (SIGMA_END_FACTOR / SIGMA_START_FACTOR) ** progress


def anneal(evaluate: Callable[[FractionVectors, int], TestRecord],
           layer_count: int, cfg: MiningConfig) -> list[TestRecord]:
    """Generic annealing chain over an arbitrary mapping evaluator.

    ``evaluate(fv, iteration)`` must return a TestRecord; the surrogate
    system used in tests plugs in here as well as the real inference stack.
    """
    streams = np.random.SeedSequence(cfg.seed).spawn(3)
    rng_init, rng_prop, rng_accept = (np.random.Generator(np.random.Philox(s))
                                      for s in streams)
    current = evaluate(initial_fractions(layer_count, rng_init), 0)
    records = [current]
    current_cost = _cost(current)
    beta = cfg.initial_beta
    accepted_count = 0
    for it in range(1, cfg.iterations + 1):
        sigma = _scheduled_sigma(cfg.proposal_sigma, it, cfg.iterations)
        candidate_fv = propose(current.fv, sigma, rng_prop)
        candidate = evaluate(candidate_fv, it)
        candidate_cost = _cost(candidate)
        delta = candidate_cost - current_cost
        accept_prob = 1.0 if delta <= 0 else math.exp(-beta * delta)
        if rng_accept.random() < accept_prob:
            candidate = replace(candidate, accepted=True)
            current = candidate
            current_cost = candidate_cost
            accepted_count += 1
        records.append(candidate)
        rate = accepted_count / it
        if rate > cfg.target_accept_rate:
            beta *= 1.5
        elif rate < cfg.target_accept_rate:
            beta /= 1.5
    return records


def assemble_result(records: list[TestRecord]) -> MiningResult:
    satisfied = [r for r in records if r.satisfied]
    if satisfied:
        best = max(satisfied, key=lambda r: (r.energy_gain, -r.iteration))
        return MiningResult(
            records=records, pareto=pareto_front(records),
            theta_star=best.energy_gain, best_mapping=best.fv,
            best_record=best, diagnostic=None,
        )
    top = max(records, key=lambda r: r.rhs_robustness)
    return MiningResult(
        records=records, pareto=pareto_front(records),
        theta_star=None, best_mapping=None, best_record=None,
        diagnostic=(
            "no mapping satisfied the constraints; "
            f"max constraint robustness {top.rhs_robustness:.6f} "
            f"at iteration {top.iteration}"
        ),
    )


def subset_batches(batches: Sequence[Batch], fraction: float) -> list[Batch]:
    """Deterministic optimization subset: the first ceil(fraction * N) batches."""
    count = min(len(batches), math.ceil(fraction * len(batches)))
    return list(batches[:count])


def run_mining(model: QuantModel, mult: AxMultiplier, batches: Sequence[Batch],
               phi: Query, cfg: MiningConfig) -> MiningResult:
    """Mine the largest feasible energy gain on the optimization subset."""
    subset = subset_batches(batches, cfg.optimization_subset_fraction)
    exact_pct = batch_accuracies(model, subset, exact_mul(), cfg.threads)

    def evaluate(fv: FractionVectors, iteration: int) -> TestRecord:
        return evaluate_mapping(fv, model, mult, subset, phi, iteration=iteration,
                                threads=cfg.threads, exact_pct=exact_pct)

    records = anneal(evaluate, model.mul_layer_count, cfg)
    return assemble_result(records)


def reevaluate(best_mapping: FractionVectors | None, model: QuantModel,
               mult: AxMultiplier, batches: Sequence[Batch], phi: Query,
               threads: int = 1) -> TestRecord:
    """Score the mined mapping on the full dataset for final reporting."""
    if best_mapping is None:
        raise ValidationError("mining found no satisfying mapping to re-evaluate")
    return evaluate_mapping(best_mapping, model, mult, batches, phi,
                            iteration=-1, threads=threads)


# ---------------------------------------------------------------------------
# AXLOG artifact (JSON lines, one record per evaluated mapping)


def write_log(records: Sequence[TestRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "iteration": r.iteration,
                "accepted": r.accepted,
                "v1": [float(x) for x in r.fv.v1],
                "v2": [float(x) for x in r.fv.v2],
                "acc_exact": [float(x) for x in r.acc_exact],
                "acc_approx": [float(x) for x in r.acc_approx],
                "energy_gain": r.energy_gain,
                "rhs_robustness": r.rhs_robustness,
                "satisfied": r.satisfied,
            }, sort_keys=True))
            fh.write("\n")


def read_log(path: str | Path) -> list[TestRecord]:
    path = Path(path)
    records = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read mining log: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            exact = np.array(doc["acc_exact"], dtype=np.float64)
            approx = np.array(doc["acc_approx"], dtype=np.float64)
            record = TestRecord(
                fv=FractionVectors(np.array(doc["v1"]), np.array(doc["v2"])),
                acc_exact=exact, acc_approx=approx,
                trace=Trace.from_accuracies(exact, approx, float(doc["energy_gain"])),
                rhs_robustness=float(doc["rhs_robustness"]),
                energy_gain=float(doc["energy_gain"]),
                satisfied=bool(doc["satisfied"]),
                iteration=int(doc["iteration"]),
                accepted=bool(doc["accepted"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: bad AXLOG record: {exc}") from exc
        records.append(record)
    if not records:
        raise FormatError(f"{path}: empty AXLOG")
    return records
