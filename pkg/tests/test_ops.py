"""Network primitives: stability, analytic values, finite-difference checks."""

import numpy as np
import pytest

from speechlm import ops
from speechlm.errors import ContractError, ShapeError
from speechlm.tensor import Parameter, Tensor, grad_check


def rand_param(rng, shape):
    return Parameter(rng.normal(size=shape), dtype=np.float64)


def test_logsumexp_analytic():
    out = ops.logsumexp(Tensor([[0.0, 0.0]], dtype=np.float64), axis=-1)
    np.testing.assert_allclose(out.data, [np.log(2.0)], rtol=1e-12)


def test_logsumexp_stable_for_large_inputs():
    out = ops.logsumexp(Tensor([[1000.0, 1000.0]], dtype=np.float64), axis=-1)
    np.testing.assert_allclose(out.data, [1000.0 + np.log(2.0)])


def test_softmax_rows_normalized_and_nonnegative():
    rng = np.random.default_rng(0)
    for seed in range(20):
        x = Tensor(np.random.default_rng(seed).normal(scale=5.0, size=(6, 9)))
        y = ops.softmax(x, axis=-1).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 4)), dtype=np.float64)
    for target in range(4):
        val = ops.cross_entropy(logits, np.array([target] * 3)).item()
        np.testing.assert_allclose(val, np.log(4.0), rtol=1e-12)


def test_cross_entropy_ignore_index_and_empty_error():
    logits = Tensor(np.zeros((2, 4)), dtype=np.float64)
    with pytest.raises(ContractError, match="no loss positions"):
        ops.cross_entropy(logits, np.array([-1, -1]))


def test_cross_entropy_out_of_vocab_target():
    logits = Tensor(np.zeros((1, 4)), dtype=np.float64)
    with pytest.raises(ContractError):
        ops.cross_entropy(logits, np.array([7]))


def test_conv2d_length_arithmetic():
    rng = np.random.default_rng(1)
    kernel = Tensor(rng.normal(size=(2, 1, 3, 3)), dtype=np.float64)
    for length in (1, 2, 3, 7, 8, 40, 41):
        x = Tensor(rng.normal(size=(1, 1, length, 6)), dtype=np.float64)
        out = ops.conv2d(x, kernel, stride=2, padding=1)
        assert out.shape[2] == -(-length // 2), length


def test_rope_identity_at_zero_and_norm_preserved():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 5, 8))
    out0 = ops.rope(Tensor(x, dtype=np.float64), np.zeros((1, 5)))
    np.testing.assert_allclose(out0.data, x, atol=1e-15)
    out = ops.rope(Tensor(x, dtype=np.float64), np.arange(5)[None])
    np.testing.assert_allclose(
        np.linalg.norm(out.data, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12
    )


def test_rope_inner_product_depends_on_relative_position_only():
    rng = np.random.default_rng(3)
    q = Tensor(rng.normal(size=(1, 1, 7, 16)), dtype=np.float64)
    k = Tensor(rng.normal(size=(1, 1, 7, 16)), dtype=np.float64)
    base_pos = np.arange(7)[None]
    q1, k1 = ops.rope_apply(q, k, base_pos)
    q2, k2 = ops.rope_apply(q, k, base_pos + 5)
    for m, n in [(6, 1), (3, 2), (0, 5)]:
        ip1 = float(q1.data[0, 0, m] @ k1.data[0, 0, n])
        ip2 = float(q2.data[0, 0, m] @ k2.data[0, 0, n])
        assert abs(ip1 - ip2) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients_match_finite_differences(seed):
    """Every differentiable primitive against fp64 central differences."""
    rng = np.random.default_rng(seed)
    x = rand_param(rng, (3, 6))
    w = Tensor(rng.normal(size=(3, 6)), dtype=np.float64)
    checks = [
        lambda: (ops.softmax(x, axis=-1) * w).sum(),
        lambda: (ops.log_softmax(x, axis=-1) * w).sum(),
        lambda: ops.logsumexp(x, axis=-1).sum(),
        lambda: (ops.silu(x) * w).sum(),
    ]
    for f in checks:
        x.zero_grad()
        assert grad_check(f, [x]) < 1e-6

    gain = rand_param(rng, (6,))
    x.zero_grad()
    assert grad_check(lambda: (ops.rmsnorm(x, gain) * w).sum(), [x, gain]) < 1e-6

    logits = rand_param(rng, (5, 7))
    targets = rng.integers(0, 7, size=5)
    targets[rng.integers(0, 5)] = -1
    assert grad_check(lambda: ops.cross_entropy(logits, targets), [logits]) < 1e-6

    img = rand_param(rng, (2, 2, 5, 4))
    ker = rand_param(rng, (3, 2, 3, 3))
    bias = rand_param(rng, (3,))
    wc = Tensor(rng.normal(size=(2, 3, 3, 2)), dtype=np.float64)
    err = grad_check(
        lambda: (ops.conv2d(img, ker, bias, stride=2, padding=1) * wc).sum(),
        [img, ker, bias],
    )
    assert err < 1e-6

    sig = rand_param(rng, (2, 3, 7))
    k1 = rand_param(rng, (4, 3, 3))
    w1 = Tensor(rng.normal(size=(2, 4, 4)), dtype=np.float64)
    err = grad_check(
        lambda: (ops.conv1d(sig, k1, stride=2, padding=1) * w1).sum(), [sig, k1]
    )
    assert err < 1e-6

    q = rand_param(rng, (1, 2, 4, 8))
    wr = Tensor(rng.normal(size=(1, 2, 4, 8)), dtype=np.float64)
    err = grad_check(lambda: (ops.rope(q, np.arange(4)[None]) * wr).sum(), [q])
    assert err < 1e-6

    table = rand_param(rng, (9, 4))
    ids = rng.integers(0, 9, size=(3, 5))
    we = Tensor(rng.normal(size=(3, 5, 4)), dtype=np.float64)
    err = grad_check(lambda: (ops.embedding_lookup(table, ids) * we).sum(), [table])
    assert err < 1e-6


def test_masked_fill_blocks_influence_and_gradient():
    rng = np.random.default_rng(4)
    x = Parameter(rng.normal(size=(3, 3)), dtype=np.float64)
    mask = np.array([[True, False, True]] * 3)
    out = ops.masked_fill(x, mask)
    assert (out.data[:, 1] == ops.MASK_FILL).all()
    out.sum().backward()
    assert (x.grad[:, 1] == 0).all()
    assert (x.grad[:, 0] == 1).all()


def test_embedding_rejects_out_of_range_ids():
    table = Tensor(np.zeros((4, 2)))
    with pytest.raises(ContractError):
        ops.embedding_lookup(table, np.array([4]))


def test_axis_validation():
    with pytest.raises(ShapeError):
        ops.softmax(Tensor(np.zeros((2, 2))), axis=5)
