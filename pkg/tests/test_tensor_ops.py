import numpy as np
import pytest

from app.numcore import functional as F
from app.numcore.module import BatchNorm, ParamFactory
from app.numcore.tensor import (
    Tensor,
    clamp_min,
    concat,
    exp,
    get_default_dtype,
    getitem,
    log,
    no_grad,
    set_default_dtype,
    sqrt,
    square,
    swapaxes,
    tsum,
)
from app.utils.helper import DimensionError, NonFiniteError


def _leaf(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def _off_zero(values, margin=0.1):
    return values + np.sign(values) * margin


def _positive(rng, shape):
    return 0.5 + rng.random(shape)


OP_CASES = {
    "add_broadcast": lambda r: ([r.standard_normal((3, 4)), r.standard_normal(4)], lambda a, b: a + b),
    "sub_broadcast": lambda r: ([r.standard_normal((2, 3)), r.standard_normal((2, 1))], lambda a, b: a - b),
    "mul_broadcast": lambda r: ([r.standard_normal((2, 3, 4)), r.standard_normal((3, 1))], lambda a, b: a * b),
    "div": lambda r: ([r.standard_normal((3, 4)), _positive(r, (3, 4))], lambda a, b: a / b),
    "neg": lambda r: ([r.standard_normal((4,))], lambda a: -a),
    "exp": lambda r: ([r.standard_normal((3, 3))], exp),
    "log": lambda r: ([_positive(r, (3, 3))], log),
    "sqrt": lambda r: ([_positive(r, (3, 3))], sqrt),
    "square": lambda r: ([r.standard_normal((3, 3))], square),
    "sum_axis": lambda r: ([r.standard_normal((2, 3, 4))], lambda a: tsum(a, axis=1)),
    "mean_keepdims": lambda r: ([r.standard_normal((2, 3, 4))], lambda a: a.mean(axis=-1, keepdims=True)),
    "reshape_transpose": lambda r: ([r.standard_normal((2, 3, 4))], lambda a: a.reshape(4, 6).transpose()),
    "swapaxes": lambda r: ([r.standard_normal((2, 3, 4))], lambda a: swapaxes(a, 0, 2)),
    "getitem_slice": lambda r: ([r.standard_normal((4, 5))], lambda a: a[1:, ::2]),
    "getitem_repeated_index": lambda r: (
        [r.standard_normal((2, 4))],
        lambda a: getitem(a, (Ellipsis, np.array([[0, 1], [1, 2]]))),
    ),
    "concat": lambda r: ([r.standard_normal((2, 3)), r.standard_normal((2, 2))],
                         lambda a, b: concat([a, b], axis=-1)),
    "matmul_weight": lambda r: ([r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))], lambda a, b: a @ b),
    "matmul_batched": lambda r: ([r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 5))], lambda a, b: a @ b),
    "dense": lambda r: (
        [r.standard_normal((2, 5, 3)), r.standard_normal((3, 4)), r.standard_normal(4)],
        F.dense,
    ),
    "depthwise_conv1d": lambda r: (
        [r.standard_normal((2, 7, 3)), r.standard_normal((3, 3)), r.standard_normal(3)],
        lambda z, k, b: F.depthwise_conv1d(z, k, dilation=2, bias=b),
    ),
    "instance_norm": lambda r: (
        [r.standard_normal((2, 6, 3)), _positive(r, 3), r.standard_normal(3)],
        F.instance_norm,
    ),
    "layer_norm": lambda r: (
        [r.standard_normal((2, 6, 3)), _positive(r, 3), r.standard_normal(3)],
        F.layer_norm,
    ),
    "batch_norm_train": lambda r: (
        [r.standard_normal((2, 6, 3)), _positive(r, 3), r.standard_normal(3)],
        lambda z, g, b: F.batch_norm(z, g, b, F.RunningStats(), training=True),
    ),
    "batch_norm_eval": lambda r: (
        [r.standard_normal((2, 6, 3)), _positive(r, 3), r.standard_normal(3)],
        lambda z, g, b: F.batch_norm(z, g, b, F.RunningStats(mean=np.full(3, 0.3), var=np.full(3, 2.0)),
                                     training=False),
    ),
    "sigmoid": lambda r: ([r.standard_normal((3, 4))], F.sigmoid),
    "relu": lambda r: ([_off_zero(r.standard_normal((3, 4)))], F.relu),
    "prelu": lambda r: ([_off_zero(r.standard_normal((3, 4))), _positive(r, 4)], F.prelu),
    "swish": lambda r: ([r.standard_normal((3, 4))], F.swish),
    "glu": lambda r: ([r.standard_normal((3, 6))], F.glu),
    "softmax": lambda r: ([r.standard_normal((2, 3, 5))], F.softmax),
    "scale": lambda r: ([r.standard_normal((3, 4)), np.array([0.7])], F.scale),
    "overlap_add": lambda r: ([r.standard_normal((2, 4, 6))], lambda f: F.overlap_add(f, 4)),
    "clamp_min": lambda r: ([_off_zero(r.standard_normal((3, 4)))], lambda a: clamp_min(a, 0.0)[0]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_central_difference(name, gradcheck):
    arrays, op = OP_CASES[name](np.random.default_rng(7))
    tensors = [_leaf(a) for a in arrays]
    assert gradcheck(lambda: op(*tensors), tensors) < 1e-6


def test_composed_dense_prelu_sum_gradient(gradcheck):
    rng = np.random.default_rng(3)
    z, w, b, a = (_leaf(rng.standard_normal((5, 3))), _leaf(rng.standard_normal((3, 4))),
                  _leaf(rng.standard_normal(4)), _leaf(np.full(4, 0.25)))
    assert gradcheck(lambda: tsum(F.prelu(F.dense(z, w, b), a)), [z, w, b, a]) < 1e-6


# ---------- backward contract ----------

def test_backward_of_sum_of_squares_is_twice_input():
    x = _leaf([1.0, -2.0, 3.0])
    tsum(square(x)).backward()
    assert np.allclose(x.grad, [2.0, -4.0, 6.0])


def test_backward_accumulates_until_zeroed():
    x = _leaf([1.0, 2.0])
    tsum(x * 3.0).backward()
    tsum(x * 3.0).backward()
    assert np.allclose(x.grad, [6.0, 6.0])
    x.zero_grad()
    tsum(x * 3.0).backward()
    assert np.allclose(x.grad, [3.0, 3.0])


def test_backward_rejects_non_scalar_loss():
    x = _leaf([1.0, 2.0])
    with pytest.raises(DimensionError):
        (x * 2.0).backward()


def test_backward_rejects_non_finite_loss():
    x = _leaf([0.0])
    with pytest.raises(NonFiniteError):
        tsum(log(x)).backward()


def test_parameters_must_be_finite():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.nan]), requires_grad=True)


def test_no_grad_skips_graph():
    x = _leaf([1.0, 2.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_default_dtype_switch_and_rejection():
    previous = get_default_dtype()
    try:
        set_default_dtype(np.float32)
        assert Tensor([1.0, 2.0]).dtype == np.float32
        with pytest.raises(ValueError):
            set_default_dtype(np.float16)
    finally:
        set_default_dtype(previous)


# ---------- dense ----------

def test_dense_identity_and_zero_input():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((4, 3))
    assert np.allclose(F.dense(z, np.eye(3), np.zeros(3)).data, z)
    b = rng.standard_normal(2)
    out = F.dense(np.zeros((4, 3)), rng.standard_normal((3, 2)), b).data
    assert np.allclose(out, np.tile(b, (4, 1)))


def test_dense_matches_triple_loop():
    rng = np.random.default_rng(1)
    z, w, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)
    expected = np.zeros((4, 2))
    for n in range(4):
        for j in range(2):
            expected[n, j] = sum(z[n, i] * w[i, j] for i in range(3)) + b[j]
    assert np.max(np.abs(F.dense(z, w, b).data - expected)) < 1e-12


def test_dense_shape_mismatch_reports_both_shapes():
    with pytest.raises(DimensionError) as exc:
        F.dense(np.zeros((4, 3)), np.zeros((5, 2)))
    assert "(4, 3)" in str(exc.value) and "(5, 2)" in str(exc.value)


# ---------- depthwise convolution ----------

@pytest.mark.parametrize("dilation", [1, 2, 7])
def test_depthwise_identity_kernel(dilation):
    z = np.random.default_rng(2).standard_normal((9, 4))
    kernel = np.zeros((3, 4))
    kernel[1] = 1.0
    assert np.allclose(F.depthwise_conv1d(z, kernel, dilation=dilation).data, z)


def test_depthwise_matches_direct_sum():
    rng = np.random.default_rng(4)
    z, kernel = rng.standard_normal((12, 2)), rng.standard_normal((3, 2))
    dilation, half = 4, 1
    expected = np.zeros_like(z)
    for n in range(12):
        for c in range(2):
            for j in range(3):
                t = n + (j - half) * dilation
                if 0 <= t < 12:
                    expected[n, c] += z[t, c] * kernel[j, c]
    assert np.max(np.abs(F.depthwise_conv1d(z, kernel, dilation=dilation).data - expected)) < 1e-12


def test_depthwise_rejects_even_kernel_and_bad_dilation():
    with pytest.raises(ValueError):
        F.depthwise_conv1d(np.zeros((5, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        F.depthwise_conv1d(np.zeros((5, 2)), np.zeros((3, 2)), dilation=0)


def test_receptive_field_formula():
    assert F.receptive_field(5, 1) == 5
    assert F.receptive_field(5, 8) == 33


# ---------- normalizations ----------

def test_instance_norm_constant_input_is_zero():
    out = F.instance_norm(np.full((6, 2), 3.5), np.ones(2), np.zeros(2)).data
    assert np.allclose(out, 0.0)


def test_instance_norm_statistics_and_oracle():
    z = np.random.default_rng(5).standard_normal((6, 2))
    out = F.instance_norm(z, np.ones(2), np.zeros(2)).data
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    assert np.allclose(out.var(axis=0), 1.0, atol=1e-6)
    mean = z.sum(axis=0) / 6
    var = ((z - mean) ** 2).sum(axis=0) / 6
    assert np.max(np.abs(out - (z - mean) / np.sqrt(var + 1e-8))) < 1e-10


def test_layer_norm_examples():
    beta = np.array([0.4])
    assert np.allclose(F.layer_norm(np.random.default_rng(6).standard_normal((5, 1)), np.ones(1), beta).data, 0.4)
    out = F.layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2)).data
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-7)


def test_norms_are_shift_invariant():
    z = np.random.default_rng(7).standard_normal((6, 3))
    g, b = np.ones(3), np.zeros(3)
    assert np.max(np.abs(F.layer_norm(z + 4.0, g, b).data - F.layer_norm(z, g, b).data)) < 1e-9
    assert np.max(np.abs(F.instance_norm(z + 4.0, g, b).data - F.instance_norm(z, g, b).data)) < 1e-9


def test_batch_norm_training_statistics_and_running_update():
    z = np.random.default_rng(8).standard_normal((1, 200, 3)) * 2.0 + 1.0
    stats = F.RunningStats()
    out = F.batch_norm(z, np.ones(3), np.zeros(3), stats, training=True).data
    assert np.allclose(out.reshape(-1, 3).mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(out.reshape(-1, 3).var(axis=0), 1.0, atol=1e-6)
    frames = z[0]
    assert np.allclose(stats.mean, frames.mean(axis=0))
    assert np.allclose(stats.var, ((frames - frames.mean(axis=0)) ** 2).mean(axis=0))
    first_mean = stats.mean.copy()
    F.batch_norm(z * 0.0, np.ones(3), np.zeros(3), stats, training=True)
    assert np.allclose(stats.mean, 0.99 * first_mean)


def test_batch_norm_eval_uses_running_stats():
    z = np.random.default_rng(9).standard_normal((2, 4, 3))
    m, v = np.array([0.1, -0.2, 0.3]), np.array([1.5, 0.5, 2.0])
    out = F.batch_norm(z, np.ones(3), np.zeros(3), F.RunningStats(mean=m, var=v), training=False).data
    assert np.allclose(out, (z - m) / np.sqrt(v + 1e-8))


def test_batch_norm_eval_before_update_fails():
    with pytest.raises(ValueError, match="uninitialized running stats"):
        F.batch_norm(np.zeros((1, 4, 2)), np.ones(2), np.zeros(2), F.RunningStats(), training=False)


def test_batch_norm_module_seeds_unit_stats_until_first_update():
    z = np.random.default_rng(10).standard_normal((1, 5, 4))
    norm = BatchNorm(ParamFactory(np.random.default_rng(0)), 4).eval()
    assert np.allclose(norm(z).data, z / np.sqrt(1.0 + 1e-8))
    norm.stats = F.RunningStats()
    with pytest.raises(ValueError, match="uninitialized running stats"):
        norm(z)
    norm.train()
    norm(z)
    assert norm.stats.initialized
    assert np.isfinite(norm.eval()(z).data).all()


# ---------- activations, scale, dropout ----------

def test_activation_examples():
    assert F.sigmoid(np.array([0.0])).data[0] == 0.5
    assert F.prelu(np.array([[-2.0]]), np.array([0.25])).data[0, 0] == -0.5
    v = np.array([[1.0, -3.0]])
    assert np.allclose(F.glu(np.concatenate([v, np.zeros((1, 2))], axis=-1)).data, v * 0.5)
    assert np.allclose(F.swish(np.array([0.0, 2.0])).data, [0.0, 2.0 / (1.0 + np.exp(-2.0))])
    assert np.array_equal(F.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])


def test_glu_rejects_odd_width():
    with pytest.raises(DimensionError):
        F.glu(np.zeros((2, 3)))


def test_scale_identity_and_zero():
    z = np.random.default_rng(10).standard_normal((3, 2))
    assert np.array_equal(F.scale(z, np.array([1.0])).data, z)
    assert np.array_equal(F.scale(z, np.array([0.0])).data, np.zeros_like(z))


def test_scale_gradient_is_sum_of_input_times_upstream():
    rng = np.random.default_rng(11)
    z, upstream = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    gamma = _leaf([0.5])
    tsum(F.scale(z, gamma) * Tensor(upstream)).backward()
    assert np.isclose(gamma.grad[0], np.sum(z * upstream))


def test_dropout_modes_and_survivor_fraction():
    rng = np.random.default_rng(12)
    z = Tensor(np.ones(100000))
    assert F.dropout(z, 0.5, training=False, rng=rng) is z
    assert F.dropout(z, 0.0, training=True, rng=rng) is z
    out = F.dropout(z, 0.5, training=True, rng=rng).data
    survivors = np.count_nonzero(out) / out.size
    assert 0.49 <= survivors <= 0.51
    assert np.allclose(out[out != 0], 2.0)
    with pytest.raises(ValueError):
        F.dropout(z, 1.0, training=True, rng=rng)


def test_overlap_add_counts_overlaps():
    out = F.overlap_add(np.ones((3, 4)), 2).data
    assert np.array_equal(out, [1, 1, 2, 2, 2, 2, 1, 1])
