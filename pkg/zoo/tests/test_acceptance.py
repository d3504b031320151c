"""S1: exported artifacts round-trip into the main package, and the
independent interpreter agrees with its engine bit for bit.

The main package is exercised only through its external interfaces: the
``axmap`` CLI and the AXQM/AXDS/AXMAP/AXTR file formats.
"""

import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from axmap_zoo import parse_mapping, reference_infer

PERMISSIVE_QUERY = ("param theta; assert always (energy_gain <= theta) -> "
                    "always (avg_acc_drop <= 100.0);")


def run_axmap(*args: str) -> subprocess.CompletedProcess:
    return subprocess.run(["axmap", *args], capture_output=True, text=True)


def read_axtr(path: Path) -> tuple[np.ndarray, np.ndarray]:
    exact, approx = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        assert header == ["batch", "acc_exact", "acc_approx", "acc_diff"]
        for row in reader:
            exact.append(float(row[1]))
            approx.append(float(row[2]))
    return np.array(exact), np.array(approx)


@pytest.fixture(scope="module")
def mined_bundle(export, tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    query = out / "q.pstl"
    query.write_text(PERMISSIVE_QUERY)
    proc = run_axmap("mine", "--model", str(export.model_path),
                     "--dataset", str(export.dataset_path),
                     "--query", str(query), "--iterations", "6",
                     "--seed", "1", "--out", str(out))
    assert proc.returncode == 0, proc.stderr
    return out


def test_s1_exports_load_without_warnings(export):
    proc = run_axmap("infer", "--model", str(export.model_path),
                     "--dataset", str(export.dataset_path))
    assert proc.returncode == 0, proc.stderr
    assert "overall: accuracy" in proc.stdout
    assert proc.stderr.strip() == ""  # zero warnings on load


def test_s1_exact_inference_agrees_bit_for_bit(export, tmp_path):
    trace_path = tmp_path / "exact.axtr"
    proc = run_axmap("trace", "--model", str(export.model_path),
                     "--dataset", str(export.dataset_path),
                     "--fv", "0", "--out", str(trace_path))
    assert proc.returncode == 0, proc.stderr
    engine_exact, engine_approx = read_axtr(trace_path)
    assert np.array_equal(engine_exact, engine_approx)  # fv=0 is exact

    oracle = reference_infer(export.model_path, export.dataset_path) * 100.0
    assert oracle.shape == (25,)
    assert np.array_equal(engine_exact, oracle)


def test_s1_approximate_mapping_agrees_bit_for_bit(export, mined_bundle):
    mapping_path = mined_bundle / "best.axmap"
    _, engine_approx = read_axtr(mined_bundle / "best.axtr")

    oracle = reference_infer(export.model_path, export.dataset_path,
                             mapping_path=mapping_path) * 100.0
    assert oracle.shape == (25,)
    assert np.array_equal(engine_approx, oracle)

    # the mapping actually routes work to approximate modes
    mapping = parse_mapping(mapping_path)
    summary = json.loads((mined_bundle / "summary.json").read_text())
    assert summary["theta_star"] > 0
    assert any(m.max() > 0 for m in mapping.mode_of)
