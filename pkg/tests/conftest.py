import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from axmap import (
    Layer,
    QuantModel,
    QuantTensor,
    batches_for,
    default_multiplier,
    load_dataset,
    load_model,
)

FIXTURES = Path(__file__).parent / "fixtures"


def make_small_model(rng: np.random.Generator, *, padding: int = 0,
                     with_avgpool: bool = False) -> QuantModel:
    """A random 6x6 conv+dense model small enough for the scalar oracle."""
    conv_w = QuantTensor(rng.integers(0, 256, size=(2, 1, 3, 3), dtype=np.uint8),
                         float(rng.uniform(0.005, 0.05)), int(rng.integers(100, 156)))
    conv_bias = rng.integers(-300, 300, size=2, dtype=np.int32)
    pool_kind = "avgpool2d" if with_avgpool else "maxpool2d"
    conv_out = 6 + 2 * padding - 2  # 3x3 kernel, stride 1
    flat = 2 * (conv_out // 2) ** 2
    dense_w = QuantTensor(rng.integers(0, 256, size=(3, flat), dtype=np.uint8),
                          float(rng.uniform(0.005, 0.05)), int(rng.integers(100, 156)))
    layers = [
        Layer(kind="conv2d", weights=conv_w, bias=conv_bias, stride=1, padding=padding,
              out_scale=float(rng.uniform(0.02, 0.2)), out_zero_point=int(rng.integers(0, 256))),
        Layer(kind="relu"),
        Layer(kind=pool_kind, kernel=2, stride=2),
        Layer(kind="flatten"),
        Layer(kind="dense", weights=dense_w,
              bias=rng.integers(-300, 300, size=3, dtype=np.int32),
              out_scale=float(rng.uniform(0.05, 0.3)), out_zero_point=int(rng.integers(0, 256))),
    ]
    return QuantModel(layers=layers, input_shape=(1, 6, 6),
                      input_scale=1 / 255.0, input_zero_point=0, class_count=3)


@pytest.fixture
def small_model():
    return make_small_model(np.random.default_rng(7))


@pytest.fixture(scope="session")
def mult():
    return default_multiplier()


def _fixture_path(name: str) -> Path:
    path = FIXTURES / name
    if not path.exists():
        pytest.skip(f"checked-in fixture {name} not present")
    return path


@pytest.fixture(scope="session")
def shipped_model():
    return load_model(_fixture_path("model.axqm"))


@pytest.fixture(scope="session")
def shipped_dataset():
    return load_dataset(_fixture_path("eval.axds"))


@pytest.fixture(scope="session")
def shipped_batches(shipped_model, shipped_dataset):
    return batches_for(shipped_model, shipped_dataset, 100)
