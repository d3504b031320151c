import numpy as np
import pytest

from axmap import (
    Batch,
    Layer,
    QuantModel,
    QuantTensor,
    UniformMul,
    ValidationError,
    builtin_truncation,
    conv2d_q,
    count_multiplications,
    exact_mul,
    infer_batch,
    products_per_weight,
)
from axmap.engine import as_mul, forward

from conftest import make_small_model
from oracles import ref_accuracy, ref_forward

# independently computed with the zoo reference interpreter on the shipped
# fixtures (exact multiplier, batch 0 of eval.axds)
SHIPPED_BATCH0_EXACT_ACCURACY = 0.97


def _identity_model():
    w = np.eye(4, dtype=np.uint8) * 9
    return QuantModel(
        layers=[Layer(kind="dense", weights=QuantTensor(w, 0.5, 0),
                      out_scale=1.0, out_zero_point=0)],
        input_shape=(4,), input_scale=1.0, input_zero_point=0, class_count=4)


def _one_hot_batch():
    images = np.zeros((4, 4), dtype=np.uint8)
    for i in range(4):
        images[i, i] = 10
    return Batch(images=QuantTensor(images, 1.0, 0), labels=np.arange(4))


def test_identity_model_classifies_perfectly():
    assert infer_batch(_identity_model(), _one_hot_batch(), exact_mul()) == 1.0


def test_inference_is_deterministic():
    model = make_small_model(np.random.default_rng(3))
    rng = np.random.default_rng(11)
    images = rng.integers(0, 256, size=(16, 1, 6, 6), dtype=np.uint8)
    batch = Batch(images=QuantTensor(images, model.input_scale, model.input_zero_point),
                  labels=rng.integers(0, 3, size=16))
    first = infer_batch(model, batch, exact_mul())
    second = infer_batch(model, batch, exact_mul())
    assert first == second
    approx = UniformMul(builtin_truncation(4))
    assert infer_batch(model, batch, approx) == infer_batch(model, batch, approx)


def test_conv2d_single_product():
    # 1x1 input [5] against 1x1 kernel [3], unit scales, zero zero-points
    layer = Layer(kind="conv2d",
                  weights=QuantTensor(np.array([[[[3]]]], dtype=np.uint8), 1.0, 0),
                  out_scale=1.0, out_zero_point=0)
    layer.layer_index = 0
    x = QuantTensor(np.array([[[5]]], dtype=np.uint8), 1.0, 0)
    out = conv2d_q(x, layer, exact_mul())
    assert out.values.reshape(()) == 15

    truncated = conv2d_q(x, layer, UniformMul(builtin_truncation(2)))
    assert truncated.values.reshape(()) == (5 & 252) * (3 & 252)  # 4 * 0 = 0


def test_conv2d_zero_input_gives_requantized_bias():
    weights = QuantTensor(np.arange(8, dtype=np.uint8).reshape(2, 1, 2, 2), 1.0, 0)
    layer = Layer(kind="conv2d", weights=weights,
                  bias=np.array([7, -3], dtype=np.int32),
                  out_scale=1.0, out_zero_point=100)
    layer.layer_index = 0
    x = QuantTensor(np.zeros((1, 2, 2), dtype=np.uint8), 1.0, 0)
    out = conv2d_q(x, layer, exact_mul())
    assert out.values[0, 0, 0] == 107
    assert out.values[1, 0, 0] == 97


def test_conv2d_kernel_too_large():
    weights = QuantTensor(np.zeros((1, 1, 5, 5), dtype=np.uint8), 1.0, 0)
    layer = Layer(kind="conv2d", weights=weights, out_scale=1.0, out_zero_point=0)
    layer.layer_index = 0
    x = QuantTensor(np.zeros((1, 3, 3), dtype=np.uint8), 1.0, 0)
    with pytest.raises(ValidationError):
        conv2d_q(x, layer, exact_mul())


def test_count_multiplications_dense():
    w = QuantTensor(np.zeros((4, 10), dtype=np.uint8), 1.0, 0)
    model = QuantModel(
        layers=[Layer(kind="dense", weights=w, out_scale=1.0, out_zero_point=0)],
        input_shape=(10,), input_scale=1.0, input_zero_point=0, class_count=4)
    assert count_multiplications(model).tolist() == [40]


def test_count_multiplications_conv():
    conv_w = QuantTensor(np.zeros((2, 1, 3, 3), dtype=np.uint8), 1.0, 0)
    dense_w = QuantTensor(np.zeros((2, 128), dtype=np.uint8), 1.0, 0)
    model = QuantModel(
        layers=[
            Layer(kind="conv2d", weights=conv_w, out_scale=1.0, out_zero_point=0),
            Layer(kind="flatten"),
            Layer(kind="dense", weights=dense_w, out_scale=1.0, out_zero_point=0),
        ],
        input_shape=(1, 10, 10), input_scale=1.0, input_zero_point=0, class_count=2)
    # 3*3*1*2 * 8*8 output positions = 1152
    assert count_multiplications(model).tolist() == [1152, 256]
    assert products_per_weight(model).tolist() == [64, 1]


@pytest.mark.parametrize("seed,padding,with_avgpool", [
    (1, 0, False), (2, 1, False), (3, 0, True),
])
def test_vectorized_engine_matches_scalar_reference(seed, padding, with_avgpool):
    model = make_small_model(np.random.default_rng(seed), padding=padding,
                             with_avgpool=with_avgpool)
    rng = np.random.default_rng(seed + 100)
    images = rng.integers(0, 256, size=(6, 1, 6, 6), dtype=np.uint8)
    for mode_k in (0, 4):
        mode = builtin_truncation(mode_k)
        fast = forward(model, images, UniformMul(mode))
        mul_call = lambda w, a, li: int(mode.table[w, a])
        for idx in range(images.shape[0]):
            slow = ref_forward(model, images[idx], mul_call)
            assert np.array_equal(fast[idx], slow), f"image {idx} diverged"


def test_every_product_routed_through_mul(small_model):
    # instrumented scalar run: call count must equal the static counts
    counts = [0] * small_model.mul_layer_count
    exact = builtin_truncation(0)
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, size=(1, 6, 6), dtype=np.uint8)
    ref_forward(small_model, image,
                lambda w, a, li: int(exact.table[w, a]), counter=counts)
    assert counts == count_multiplications(small_model).tolist()


def test_callable_mul_adapter_matches_tables(small_model):
    mode = builtin_truncation(3)
    adapted = as_mul(lambda w, a, li: int(mode.table[w, a]),
                     small_model.mul_layer_count)
    for li in range(small_model.mul_layer_count):
        assert np.array_equal(adapted.table_for(li), mode.table)


def test_requantization_saturates_to_uint8():
    # large products with a tiny out_scale force saturation at 255
    w = QuantTensor(np.full((2, 4), 255, dtype=np.uint8), 1.0, 0)
    model = QuantModel(
        layers=[Layer(kind="dense", weights=w, out_scale=0.001, out_zero_point=0)],
        input_shape=(4,), input_scale=1.0, input_zero_point=0, class_count=2)
    images = np.full((1, 4), 255, dtype=np.uint8)
    out = forward(model, images, exact_mul())
    assert out.dtype == np.uint8
    assert out.max() == 255


def test_shape_mismatch_is_structural_error():
    model = _identity_model()
    images = np.zeros((2, 3), dtype=np.uint8)
    batch = Batch(images=QuantTensor(images, 1.0, 0), labels=np.zeros(2, dtype=np.int64))
    with pytest.raises(ValidationError):
        infer_batch(model, batch, exact_mul())


def test_accumulator_overflow_rejected():
    # 40000 input features of worst-case magnitude exceed the 32-bit budget
    w = QuantTensor(np.zeros((2, 40000), dtype=np.uint8), 1.0, 0)
    with pytest.raises(ValidationError):
        QuantModel(
            layers=[Layer(kind="dense", weights=w, out_scale=1.0, out_zero_point=0)],
            input_shape=(40000,), input_scale=1.0, input_zero_point=0, class_count=2)


def test_misordered_layers_rejected():
    w = QuantTensor(np.zeros((2, 8), dtype=np.uint8), 1.0, 0)
    with pytest.raises(ValidationError):
        QuantModel(
            layers=[Layer(kind="dense", weights=w, out_scale=1.0, out_zero_point=0)],
            input_shape=(1, 4, 2),  # dense needs a flat input
            input_scale=1.0, input_zero_point=0, class_count=2)


def test_shipped_model_matches_reference_interpreter(shipped_model, shipped_batches):
    acc = infer_batch(shipped_model, shipped_batches[0], exact_mul())
    assert acc == SHIPPED_BATCH0_EXACT_ACCURACY


def test_shipped_model_scalar_oracle_spot_check(shipped_model, shipped_batches):
    # full scalar inference is slow; check a 4-image slice bit-for-bit
    batch = shipped_batches[0]
    sliced = Batch(images=QuantTensor(batch.images.values[:4], batch.images.scale,
                                      batch.images.zero_point),
                   labels=batch.labels[:4])
    exact = builtin_truncation(0)
    fast = forward(shipped_model, sliced.images.values, exact_mul())
    for idx in range(4):
        slow = ref_forward(shipped_model, sliced.images.values[idx],
                           lambda w, a, li: int(exact.table[w, a]))
        assert np.array_equal(fast[idx], slow)
