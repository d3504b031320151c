"""Acceptance suite: one test per criterion, each ending in a PASS line.

P6/P7 run the full desk-scale experiment through the CLI against the
checked-in model/dataset fixtures (tests/fixtures); everything else is
self-contained. Stated runtime bounds are asserted.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from axmap import (
    FractionVectors,
    MiningConfig,
    builtin_truncation,
    default_multiplier,
    error_profile,
    evaluate_mapping,
    exact_mul,
    exact_table,
    infer_batch,
    parse_query,
    robustness,
    satisfies,
    utilization,
    energy_gain,
)
from axmap.cli import main as axmap_main
from axmap.mapping import model_ranges, ranges_from_fractions
from axmap.mining import anneal, assemble_result, read_log
from axmap.queries import Always, Atom, Trace, conjuncts, consequent, to_text

from conftest import FIXTURES
from oracles import (
    bool_eval,
    check_interval_minimal,
    interval_mass,
    random_formula,
    random_trace,
    sorted_kth_largest,
)
from test_mining import surrogate_evaluator, surrogate_grid_optimum

Q7_1PCT = ("param theta; assert always (energy_gain <= theta) -> "
           "always (avg_acc_drop <= 1.0);")
Q6_SHAPE = ("param theta; assert always (energy_gain <= theta) -> ("
            "always[80%] (acc_diff <= 5.0) and always (acc_diff <= 15.0) "
            "and always (avg_acc_drop <= 1.0));")
Q3_SHAPE_RHS_THRESHOLDS = (3.0, 15.0, 1.0)

MINING_SEED = 0  # the pinned experiment seed; the run is bit-deterministic


def _passline(name: str, detail: str) -> None:
    print(f"\n{name} PASS: {detail}")


# ---------------------------------------------------------------------------
# P1 robustness semantics oracle


def test_p1_robustness_semantics_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(20240701)
    sign_checked = 0
    for _ in range(1000):
        trace = random_trace(rng, max_len=200)
        with_param = rng.random() < 0.3
        formula = random_formula(rng, with_param=with_param)
        theta = float(rng.uniform(0, 1)) if with_param else None
        rho = robustness(formula, theta, trace)
        expected = bool_eval(formula, trace, theta)
        assert satisfies(formula, theta, trace) == expected
        if abs(rho) > 1e-12:
            sign_checked += 1
            assert (rho >= 0) == expected

        # relaxed_always(100) must equal always exactly
        bound = float(rng.uniform(-20, 20))
        plain = robustness(Always(Atom("acc_diff", bound), None), None, trace)
        relaxed = robustness(Always(Atom("acc_diff", bound), 100.0), None, trace)
        assert plain == relaxed
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0, f"P1 exceeded its runtime bound: {elapsed:.1f}s"
    _passline("P1", f"1000 randomized formula/trace pairs, {sign_checked} "
                    f"nonzero-robustness sign checks, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# P2 multiplier exactness and profiles


def test_p2_multiplier_exactness_and_profiles():
    start = time.perf_counter()
    ops = np.arange(256, dtype=np.int64)
    full_products = np.multiply.outer(ops, ops)
    assert np.array_equal(exact_table().astype(np.int64), full_products)

    for k in (1, 2, 3, 4, 6, 8):
        mode = builtin_truncation(k)
        masked = ops & ((0xFF << k) & 0xFF)
        errors = np.multiply.outer(masked, masked) - full_products
        profile = error_profile(mode)
        assert abs(profile.mean_error - errors.mean()) <= 1e-9
        assert abs(profile.mean_absolute_error - np.abs(errors).mean()) <= 1e-9
        assert profile.max_absolute_error == int(np.abs(errors).max())
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0, f"P2 exceeded its runtime bound: {elapsed:.1f}s"
    _passline("P2", f"65536-pair exactness sweep plus 6 truncation profiles, "
                    f"{elapsed:.2f}s")


# ---------------------------------------------------------------------------
# P3 range construction


def _random_histogram(rng: np.random.Generator) -> np.ndarray:
    shape = rng.integers(3)
    counts = np.zeros(256, dtype=np.int64)
    if shape == 0:  # dense unimodal
        center = rng.integers(40, 216)
        width = rng.uniform(3, 50)
        bins = np.arange(256)
        counts += np.maximum(
            0, (1000 * np.exp(-0.5 * ((bins - center) / width) ** 2))).astype(np.int64)
    elif shape == 1:  # sparse with gaps
        support = rng.choice(256, size=rng.integers(1, 50), replace=False)
        counts[support] = rng.integers(1, 2000, size=support.size)
    else:  # uniform block
        lo = int(rng.integers(0, 200))
        hi = int(rng.integers(lo, 256))
        counts[lo:hi + 1] = int(rng.integers(1, 50))
    if counts.sum() == 0:
        counts[rng.integers(256)] = 1
    return counts


def test_p3_range_construction():
    from test_mapping import hist_from_counts

    start = time.perf_counter()
    rng = np.random.default_rng(777)
    for case in range(500):
        counts = _random_histogram(rng)
        hist = hist_from_counts(counts)
        v2 = float(rng.uniform(0, 1))
        v1 = float(rng.uniform(0, 1)) * (1 - v2)
        ranges = ranges_from_fractions(hist, v1, v2)
        total = hist.total
        slack = 1e-9 * total
        median = hist.median_bin
        if v2 > 0:
            assert ranges.m2 is not None
            assert ranges.m1 is not None
            assert ranges.m1[0] <= ranges.m2[0] <= ranges.m2[1] <= ranges.m1[1]
            assert interval_mass(counts, *ranges.m2) + slack >= v2 * total
            assert check_interval_minimal(counts, ranges.m2, v2 * total,
                                          (median, median))
        if v1 + v2 > 0:
            assert ranges.m1 is not None
            assert interval_mass(counts, *ranges.m1) + slack >= (v1 + v2) * total
            inner = ranges.m2 if ranges.m2 is not None else (median, median)
            assert check_interval_minimal(counts, ranges.m1, (v1 + v2) * total,
                                          inner)
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"P3 exceeded its runtime bound: {elapsed:.1f}s"
    _passline("P3", f"500 random histograms: nesting, achieved fraction, and "
                    f"enumerator-verified minimality, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# P4 utilization conservation and monotonicity


def test_p4_utilization_conservation_and_monotonicity(shipped_model, mult):
    from axmap.engine import count_multiplications

    start = time.perf_counter()
    rng = np.random.default_rng(4242)
    layer_count = shipped_model.mul_layer_count
    total_expected = 0
    for hist_total in count_multiplications(shipped_model):
        total_expected += int(hist_total)
    for case in range(200):
        v2 = rng.uniform(0, 1, size=layer_count)
        v1 = rng.uniform(0, 1, size=layer_count) * (1 - v2)
        fv = FractionVectors(v1, v2)
        util = utilization(shipped_model, fv)
        assert util.total == total_expected
        gain = energy_gain(util, mult)
        layer = case % layer_count
        bumped2 = v2.copy()
        bumped2[layer] = min(1.0 - v1[layer],
                             v2[layer] + float(rng.uniform(0.01, 0.3)))
        bumped = FractionVectors(v1, bumped2)
        bumped_util = utilization(shipped_model, bumped)
        assert bumped_util.total == total_expected
        assert bumped_util.ops_m2 >= util.ops_m2
        assert energy_gain(bumped_util, mult) >= gain - 1e-12
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"P4 exceeded its runtime bound: {elapsed:.1f}s"
    _passline("P4", f"200 random fraction vectors on the shipped model: "
                    f"conservation at {total_expected} muls and v2 monotonicity, "
                    f"{elapsed:.2f}s")


# ---------------------------------------------------------------------------
# P5 optimizer sanity on the analytic surrogate


def test_p5_optimizer_sanity_surrogate():
    start = time.perf_counter()
    phi = parse_query(Q7_1PCT)
    reference = surrogate_grid_optimum(phi, step=0.05)
    assert reference > 0
    for seed in range(5):
        cfg = MiningConfig(iterations=400, proposal_sigma=0.05, seed=seed)
        result = assemble_result(anneal(surrogate_evaluator(phi), 2, cfg))
        assert result.theta_star is not None, f"seed {seed} found nothing"
        assert abs(result.theta_star - reference) <= 0.02, \
            f"seed {seed}: {result.theta_star} vs grid {reference}"
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"P5 exceeded its runtime bound: {elapsed:.1f}s"
    _passline("P5", f"5 seeds within 0.02 of the 0.05-step grid optimum "
                    f"{reference:.4f}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# P6 end-to-end desk-scale mining, P7 determinism


@pytest.fixture(scope="module")
def experiment(tmp_path_factory, shipped_model):
    """The pinned desk-scale experiment, run through the CLI three times
    (twice single-threaded, once with four workers) plus the Q6-shape run."""
    root = tmp_path_factory.mktemp("experiment")
    q7 = root / "q7.pstl"
    q7.write_text(Q7_1PCT)
    q6 = root / "q6.pstl"
    q6.write_text(Q6_SHAPE)
    model = str(FIXTURES / "model.axqm")
    dataset = str(FIXTURES / "eval.axds")

    runs = {}
    start = time.perf_counter()
    for name, threads, query in (("a", 1, q7), ("b", 1, q7), ("c", 4, q7),
                                 ("q6", 1, q6)):
        out = root / name
        code = axmap_main([
            "mine", "--model", model, "--dataset", dataset,
            "--query", str(query), "--iterations", "50",
            "--seed", str(MINING_SEED), "--threads", str(threads),
            "--out", str(out),
        ])
        runs[name] = (code, out)
    return {"runs": runs, "elapsed": time.perf_counter() - start, "root": root}


def test_p6_end_to_end_desk_scale(experiment, shipped_model, shipped_batches, mult):
    start_extra = time.perf_counter()
    # the shipped fixture itself: exact-quantized accuracy floor, 25x100 batches
    exact_accs = [infer_batch(shipped_model, b, exact_mul()) for b in shipped_batches]
    assert len(shipped_batches) == 25
    assert all(b.images.shape[0] == 100 for b in shipped_batches)
    assert float(np.mean(exact_accs)) >= 0.95

    code, out = experiment["runs"]["a"]
    assert code == 0, "Q7 mining run failed"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["theta_star"] > 0
    assert summary["satisfied_on_full"] is True

    # fv = 0 baseline yields theta = 0 and a perfectly flat trace
    phi = parse_query(Q7_1PCT)
    baseline = evaluate_mapping(FractionVectors.zeros(shipped_model.mul_layer_count),
                                shipped_model, mult, shipped_batches, phi)
    assert baseline.energy_gain == 0.0
    assert baseline.satisfied
    assert np.all(baseline.trace.acc_diff == 0.0)

    # Q6-shape: either a satisfying mapping or a well-formed diagnostic
    q6_code, q6_out = experiment["runs"]["q6"]
    q6_summary = json.loads((q6_out / "summary.json").read_text())
    if q6_code == 0:
        assert q6_summary["theta_star"] > 0
    else:
        assert q6_code == 3
        assert "max constraint robustness" in q6_summary["diagnostic"]

    elapsed = experiment["elapsed"] + (time.perf_counter() - start_extra)
    assert elapsed < 600.0, f"P6 exceeded its runtime bound: {elapsed:.1f}s"
    q6_state = (f"theta*={q6_summary['theta_star']:.4f}" if q6_code == 0
                else "infeasibility diagnostic")
    _passline("P6", f"theta*={summary['theta_star']:.4f} satisfied on all 25 "
                    f"batches; baseline gain 0; Q6-shape: {q6_state}; "
                    f"{elapsed:.1f}s incl. determinism reruns")


def test_p7_determinism(experiment):
    (code_a, out_a) = experiment["runs"]["a"]
    (code_b, out_b) = experiment["runs"]["b"]
    (code_c, out_c) = experiment["runs"]["c"]
    assert code_a == code_b == code_c == 0
    parts = ("mining.axlog", "best.axmap", "best.axtr", "best.axtr.json",
             "summary.json")
    for part in parts:
        bytes_a = (out_a / part).read_bytes()
        assert bytes_a == (out_b / part).read_bytes(), f"rerun differs in {part}"
        assert bytes_a == (out_c / part).read_bytes(), f"threads=4 differs in {part}"
    records = read_log(out_a / "mining.axlog")
    assert len(records) == 51  # initial point plus 50 proposals
    _passline("P7", f"byte-identical rerun and threads=4 across {len(parts)} "
                    f"artifacts ({len(records)} logged tests)")


# ---------------------------------------------------------------------------
# P8 qualitative motivation reproduction


def test_p8_per_conjunct_monitoring(capsys, tmp_path):
    from axmap.queries import write_trace

    # 10-batch synthetic trace: satisfies the coarse average constraint but
    # hides a single 16pp batch drop (hand-computed margins below)
    diffs = np.array([0.0, 0.0, 0.0, 0.5, 16.0, -7.0, 0.0, -1.0, 0.5, 0.0])
    exact = np.full(10, 95.0)
    trace = Trace(acc_diff=diffs, energy_gain=0.15, avg_acc_drop=float(diffs.mean()))
    assert trace.avg_acc_drop == 0.9

    q7 = parse_query(Q7_1PCT)
    assert satisfies(consequent(q7), None, trace)         # Q7 holds: 1 - 0.9 >= 0

    thr_batch, thr_total, thr_avg = Q3_SHAPE_RHS_THRESHOLDS
    q3 = parse_query(
        "param theta; assert always (energy_gain <= theta) -> ("
        f"always[80%] (acc_diff <= {thr_batch}) and always (acc_diff <= {thr_total}) "
        f"and always (avg_acc_drop <= {thr_avg}));")
    rhs_parts = conjuncts(consequent(q3))

    # hand-computed per-batch margins
    margins_batch = [3.0 - d for d in diffs]
    assert margins_batch == [3.0, 3.0, 3.0, 2.5, -13.0, 10.0, 3.0, 4.0, 2.5, 3.0]
    expected_relaxed = sorted_kth_largest(margins_batch, 80.0)
    assert expected_relaxed == 2.5
    margins_total = [15.0 - d for d in diffs]
    assert min(margins_total) == -1.0

    rho_relaxed = robustness(rhs_parts[0], None, trace)
    rho_total = robustness(rhs_parts[1], None, trace)
    rho_avg = robustness(rhs_parts[2], None, trace)
    assert rho_relaxed == expected_relaxed and satisfies(rhs_parts[0], None, trace)
    assert rho_total == -1.0 and not satisfies(rhs_parts[1], None, trace)
    assert rho_avg == pytest.approx(0.1) and satisfies(rhs_parts[2], None, trace)
    assert robustness(consequent(q3), None, trace) == -1.0

    # the CLI monitor reports the same per-conjunct verdicts
    trace_path = tmp_path / "p8.axtr"
    write_trace(trace_path, exact, exact - diffs, 0.15)
    q3_path = tmp_path / "q3.pstl"
    q3_path.write_text(q3.text)
    code = axmap_main(["robustness", "--query", str(q3_path),
                       "--trace", str(trace_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert f"{to_text(rhs_parts[0])}: robustness +2.500000 -> satisfied" in out
    assert f"{to_text(rhs_parts[1])}: robustness -1.000000 -> violated" in out
    assert f"{to_text(rhs_parts[2])}: robustness +0.100000 -> satisfied" in out
    _passline("P8", "per-conjunct verdicts and per-batch margins match the "
                    "hand-computed table; coarse query passes, fine query "
                    "pinpoints the violating conjunct")
