import json
import struct
from pathlib import Path

import numpy as np
import pytest

from axmap_zoo import first_divergence, parse_mapping, parse_model, reference_infer
from axmap_zoo.reference import ReferenceError, tables_from_sources


def test_parse_model_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.axqm"
    bad.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ReferenceError):
        parse_model(bad)


def test_reference_accuracies_shape(export):
    accs = reference_infer(export.model_path, export.dataset_path)
    assert accs.shape == (25,)
    assert np.all((0.0 <= accs) & (accs <= 1.0))
    assert accs.mean() == pytest.approx(export.quantized_accuracy, abs=1e-12)


def test_truncation_tables_rebuild():
    tables = tables_from_sources(["trunc:0", "trunc:1", "trunc:2"])
    assert tables[0][7, 6] == 42
    assert tables[1][7, 6] == (7 & 254) * (6 & 254)
    assert tables[2][7, 6] == (7 & 252) * (6 & 252)
    with pytest.raises(ReferenceError):
        tables_from_sources(["mystery:3"])


def test_perturbed_weight_divergence_names_first_layer(export, tmp_path):
    raw = bytearray(Path(export.model_path).read_bytes())
    version, manifest_len = struct.unpack_from("<II", raw, 4)
    manifest = json.loads(bytes(raw[12:12 + manifest_len]))
    first_conv = manifest["layers"][0]
    assert first_conv["kind"] == "conv2d"
    blob_start = 12 + manifest_len
    weight_pos = blob_start + first_conv["weights"]["offset"]
    raw[weight_pos] = (raw[weight_pos] + 128) % 256
    perturbed = tmp_path / "perturbed.axqm"
    perturbed.write_bytes(bytes(raw))

    report = first_divergence(export.model_path, perturbed, export.dataset_path)
    assert report is not None
    assert report.layer == 0
    assert report.kind == "conv2d"
    assert report.value_a != report.value_b
    assert "layer 0" in str(report)


def test_identical_models_have_no_divergence(export):
    assert first_divergence(export.model_path, export.model_path,
                            export.dataset_path) is None
