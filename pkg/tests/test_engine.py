import numpy as np
import pytest

from conftest import finite_diff, rel_err, rng_for
from permsplit import engine as e
from permsplit.engine import GraphError, ShapeError, Tensor


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def p64(arr, name):
    return e.parameter(np.asarray(arr, dtype=np.float64), name)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
    out = e.matmul(e.tensor(np.eye(2, dtype=np.float32)), e.tensor(a))
    assert np.array_equal(out.data, a)


def test_matmul_zero_annihilates():
    z = e.tensor(np.zeros((2, 3), np.float32))
    b = e.tensor(rng_for(1).normal(size=(3, 4)).astype(np.float32))
    out = e.matmul(z, b)
    assert out.shape == (2, 4)
    assert np.all(out.data == 0)


def test_matmul_hand_product():
    a = e.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = e.tensor([[5.0], [6.0]])
    assert np.array_equal(e.matmul(a, b).data, np.array([[17.0], [39.0]], np.float32))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        e.matmul(e.tensor(np.zeros((2, 3), np.float32)),
                 e.tensor(np.zeros((4, 2), np.float32)))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matmul_associativity_on_random_chains():
    rng = rng_for(7)
    for _ in range(20):
        a, b, c = (rng.uniform(-1, 1, (8, 8)).astype(np.float32) for _ in range(3))
        left = e.matmul(e.matmul(e.tensor(a), e.tensor(b)), e.tensor(c)).data
        right = e.matmul(e.tensor(a), e.matmul(e.tensor(b), e.tensor(c))).data
        # relative in the matrix norm; elementwise is ill-posed under
        # cancellation to near-zero entries
        assert (np.linalg.norm(left - right) / np.linalg.norm(right)) < 1e-5


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_input():
    out = e.softmax(e.tensor([0.0, 0.0, 0.0]), axis=0)
    assert np.allclose(out.data, 1.0 / 3, atol=1e-7)


def test_softmax_shift_invariance():
    rng = rng_for(2)
    for _ in range(20):
        x = rng.uniform(-3, 3, (4, 5)).astype(np.float32)
        c = np.float32(rng.uniform(-10, 10))
        base = e.softmax(e.tensor(x), axis=-1).data
        shifted = e.softmax(e.tensor(x + c), axis=-1).data
        assert np.abs(base - shifted).max() < 1e-6


def test_softmax_forced_exponentials():
    x = np.log(np.array([1.0, 2.0, 3.0], np.float32))
    out = e.softmax(e.tensor(x), axis=0).data
    assert np.abs(out - np.array([1, 2, 3]) / 6.0).max() < 1e-6


def test_softmax_rows_sum_to_one():
    rng = rng_for(3)
    for _ in range(50):
        x = rng.uniform(-8, 8, (6, 9)).astype(np.float32)
        out = e.softmax(e.tensor(x), axis=-1).data
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-6
        assert (out >= 0).all()


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_constant_row_absorbed_by_eps():
    x = e.tensor(np.full((3, 4), 5.0, np.float32))
    out = e.layer_norm(x, e.tensor(np.ones(4, np.float32)),
                       e.tensor(np.zeros(4, np.float32)), eps=1e-5)
    assert np.abs(out.data).max() == 0.0


def test_layer_norm_already_normalized_row():
    out = e.layer_norm(e.tensor([[1.0, -1.0]]), e.tensor([1.0, 1.0]),
                       e.tensor([0.0, 0.0]), eps=1e-12)
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_hand_computation():
    out = e.layer_norm(e.tensor([[0.0, 2.0]]), e.tensor([2.0, 2.0]),
                       e.tensor([1.0, 1.0]), eps=1e-12)
    assert np.allclose(out.data, [[-1.0, 3.0]], atol=1e-5)


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ValueError):
        e.layer_norm(e.tensor([[1.0, 2.0]]), e.tensor([1.0, 1.0]),
                     e.tensor([0.0, 0.0]), eps=0.0)


# ---------------------------------------------------------------------------
# backward contracts


def test_backward_linear_map_broadcasts_input():
    x = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
    w = e.parameter(np.ones((2, 2), np.float32), "w")
    grads = e.backward(e.tsum(e.matmul(w, e.tensor(x))))
    expected = np.tile(x.sum(axis=1), (2, 1))
    assert np.allclose(grads["w"], expected)


def test_backward_unreachable_leaf_gets_no_gradient():
    w = e.parameter(np.ones((2,), np.float32), "w")
    other = e.parameter(np.ones((2,), np.float32), "other")
    grads = e.backward(e.tsum(e.mul(w, w)))
    assert "other" not in grads
    assert other.grad is None


def test_backward_frozen_leaf_gets_no_gradient():
    frozen = e.parameter(np.ones((2,), np.float32), "frozen", trainable=False)
    live = e.parameter(np.ones((2,), np.float32), "live")
    grads = e.backward(e.tsum(e.mul(frozen, live)))
    assert set(grads) == {"live"}
    assert frozen.grad is None


def test_backward_rejects_non_scalar_loss():
    w = e.parameter(np.ones((2,), np.float32), "w")
    with pytest.raises(GraphError):
        e.backward(e.mul(w, w))


# ---------------------------------------------------------------------------
# finite-difference oracle for every differentiable op (float64 mode)


def _fd_check(build, arrays, n_probes=1, seed=0, rtol=1e-4):
    """build(tensors) -> scalar Tensor; checks all grads elementwise."""
    rng = rng_for(seed)
    for probe in range(n_probes):
        vals = [rng.uniform(-1, 1, shp).astype(np.float64) for shp in arrays]
        params = [p64(v, f"p{i}") for i, v in enumerate(vals)]
        grads = e.backward(build(params))
        analytic = [grads[f"p{i}"] for i in range(len(params))]

        def scalar():
            with e.no_grad():
                return build([t64(v) for v in vals]).item()

        numeric = finite_diff(scalar, vals)
        for a, n in zip(analytic, numeric):
            assert rel_err(a, n, floor=1e-6).max() < rtol


def _weighted(x, seed=99):
    r = rng_for(seed).uniform(0.2, 1.0, x.shape).astype(np.float64)
    return e.tsum(e.mul(x, Tensor(r)))


OP_CASES = {
    "add": (lambda ps: _weighted(e.add(ps[0], ps[1])), [(3, 4), (3, 4)]),
    "add_broadcast": (lambda ps: _weighted(e.add(ps[0], ps[1])), [(3, 4), (4,)]),
    "sub": (lambda ps: _weighted(e.sub(ps[0], ps[1])), [(3, 4), (3, 4)]),
    "mul": (lambda ps: _weighted(e.mul(ps[0], ps[1])), [(3, 4), (3, 4)]),
    "div": (lambda ps: _weighted(e.div(ps[0], e.add(ps[1], Tensor(np.full((3, 4), 2.0))))), [(3, 4), (3, 4)]),
    "neg": (lambda ps: _weighted(e.neg(ps[0])), [(3, 4)]),
    "matmul": (lambda ps: _weighted(e.matmul(ps[0], ps[1])), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda ps: _weighted(e.matmul(ps[0], ps[1])), [(2, 3, 4), (4, 5)]),
    "relu": (lambda ps: _weighted(e.relu(ps[0])), [(3, 4)]),
    "sigmoid": (lambda ps: _weighted(e.sigmoid(ps[0])), [(3, 4)]),
    "gelu": (lambda ps: _weighted(e.gelu(ps[0])), [(3, 4)]),
    "softplus": (lambda ps: _weighted(e.softplus(ps[0])), [(3, 4)]),
    "exp": (lambda ps: _weighted(e.exp(ps[0])), [(3, 4)]),
    "log": (lambda ps: _weighted(e.log(e.add(ps[0], Tensor(np.full((3, 4), 2.0))))), [(3, 4)]),
    "sqrt": (lambda ps: _weighted(e.sqrt(e.add(ps[0], Tensor(np.full((3, 4), 2.0))))), [(3, 4)]),
    "pow_const": (lambda ps: _weighted(e.pow_const(e.add(ps[0], Tensor(np.full((3, 4), 2.0))), 2.5)), [(3, 4)]),
    "softmax": (lambda ps: _weighted(e.softmax(ps[0], axis=-1)), [(3, 4)]),
    "tsum_axis": (lambda ps: _weighted(e.tsum(ps[0], axis=1)), [(3, 4)]),
    "tmean": (lambda ps: _weighted(e.tmean(ps[0], axis=-1, keepdims=True)), [(3, 4)]),
    "reshape": (lambda ps: _weighted(e.reshape(ps[0], (4, 3))), [(3, 4)]),
    "transpose": (lambda ps: _weighted(e.transpose(ps[0], (1, 0))), [(3, 4)]),
    "gather_rows": (lambda ps: _weighted(e.gather_rows(ps[0], np.array([2, 0, 1, 2]))), [(3, 4)]),
    "im2col": (lambda ps: _weighted(e.im2col(ps[0], 3, 3, stride=2, pad=1)), [(2, 2, 6, 6)]),
    "upsample": (lambda ps: _weighted(e.upsample_nearest(ps[0], 2)), [(2, 2, 3, 3)]),
    "layer_norm": (lambda ps: _weighted(e.layer_norm(ps[0], ps[1], ps[2], eps=1e-5)), [(3, 4), (4,), (4,)]),
    "bce_with_logits": (lambda ps: _weighted(e.bce_with_logits(ps[0], e.sigmoid(ps[1]))), [(3, 4), (3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradients_match_finite_differences(name):
    build, shapes = OP_CASES[name]
    probes = {"gather_rows": 3}.get(name, 4)
    _fd_check(build, shapes, n_probes=probes, seed=hash(name) % 2**31)


def _weighted_from(name):
    build, shapes = OP_CASES[name]
    return build, shapes


def test_gradients_weighted_output_note():
    # the weighted-sum wrapper makes the FD oracle sensitive to every output
    build, shapes = OP_CASES["matmul"]
    assert callable(build) and shapes


def test_random_two_layer_net_vs_finite_differences():
    rng = rng_for(42)
    x = rng.uniform(-1, 1, (5, 6))
    y = rng.uniform(0, 1, (5, 2))

    def build(params):
        w1, b1, w2, b2 = params
        h = e.relu(e.add(e.matmul(Tensor(x), w1), b1))
        out = e.add(e.matmul(h, w2), b2)
        return e.tmean(e.mul(e.sub(out, Tensor(y)), e.sub(out, Tensor(y))))

    _fd_check(build, [(6, 4), (4,), (4, 2), (2,)], n_probes=3, seed=43)


def test_gather_rows_with_bijection_is_exact_row_move():
    rng = rng_for(5)
    x = rng.uniform(-1, 1, (6, 3)).astype(np.float32)
    idx = rng.permutation(6)
    out = e.gather_rows(e.tensor(x), idx)
    assert np.array_equal(out.data, x[idx])
    leaf = Tensor(x, requires_grad=True)
    moved = e.gather_rows(leaf, idx)
    e.backward(e.tsum(e.mul(moved, moved)))
    assert leaf.grad is not None


def test_finiteness_preserved_on_finite_inputs():
    rng = rng_for(11)
    x = rng.uniform(-50, 50, (8, 8)).astype(np.float32)
    checks = [
        e.softmax(e.tensor(x), axis=-1).data,
        e.sigmoid(e.tensor(x)).data,
        e.softplus(e.tensor(x)).data,
        e.gelu(e.tensor(x)).data,
        e.bce_with_logits(e.tensor(x), e.tensor(np.ones_like(x))).data,
        e.layer_norm(e.tensor(np.zeros((4, 8), np.float32)),
                     e.tensor(np.ones(8, np.float32)),
                     e.tensor(np.zeros(8, np.float32))).data,
    ]
    for arr in checks:
        assert np.isfinite(arr).all()


def test_no_grad_suppresses_graph():
    w = e.parameter(np.ones((2, 2), np.float32), "w")
    with e.no_grad():
        out = e.matmul(w, w)
    assert out._vjp is None and not out.requires_grad
