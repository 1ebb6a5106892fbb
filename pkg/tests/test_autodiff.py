import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sidsearch import autodiff as ad
from sidsearch.autodiff import Tape, Tensor, parameter

from helpers import check_op

SHAPES = [(3,), (2, 4), (3, 2, 5)]
SEEDS = [0, 1, 2]


def proj(out, seed=99):
    """Random linear functional so every output element reaches the scalar."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum_(out * w)


def away_from(x, points, margin=0.05):
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, p + np.sign(x - p + 1e-12) * margin * 2, x)
    return x


UNARY = {
    "neg": (lambda a: ad.neg(a), None),
    "exp": (lambda a: ad.exp(a), None),
    "log": (lambda a: ad.log(a), "positive"),
    "tanh": (lambda a: ad.tanh(a), None),
    "relu": (lambda a: ad.relu(a), "kink"),
    "gelu": (lambda a: ad.gelu(a), None),
    "abs": (lambda a: ad.abs_(a), "kink"),
    "clip": (lambda a: ad.clip(a, -0.5, 0.5), "clip"),
    "power": (lambda a: ad.power(a, 3.0), None),
    "sqrt_power": (lambda a: ad.power(a, 0.5), "positive"),
    "softmax": (lambda a: ad.softmax(a), None),
    "log_softmax": (lambda a: ad.log_softmax(a), None),
    "sum_axis": (lambda a: ad.sum_(a, axis=-1), None),
    "mean_keep": (lambda a: ad.mean(a, axis=0, keepdims=True), None),
    "reshape": (lambda a: ad.reshape(a, (-1,)), None),
    "transpose": (lambda a: ad.transpose(a), None),
    "getitem_slice": (lambda a: a[..., :1], None),
    "getitem_fancy": (lambda a: ad.getitem(a, (np.array([0, 0, -1]),)), None),
}


def _input(kind, shape, seed):
    x = np.random.default_rng(seed).normal(size=shape)
    if kind == "positive":
        return np.abs(x) + 0.5
    if kind == "kink":
        return away_from(x, [0.0])
    if kind == "clip":
        return away_from(x, [-0.5, 0.5])
    return x


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_ops_match_finite_differences(name, shape, seed):
    fn, kind = UNARY[name]
    x = _input(kind, shape, seed)
    assert check_op(lambda a: proj(fn(a)), [x]) < 1e-3


BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul,
    "div": lambda a, b: ad.div(a, b * b + 1.0),
    "minimum": ad.minimum,
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("seed", SEEDS)
def test_binary_ops_with_broadcasting(name, shape, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=shape)
    b = rng.normal(size=shape[-1:])          # broadcast along leading axes
    if name == "minimum":
        b = b + np.where(np.abs(a - b).min(axis=tuple(range(a.ndim - 1))) < 0.05, 0.2, 0.0)
    fn = BINARY[name]
    assert check_op(lambda x, y: proj(fn(x, y)), [a, b]) < 1e-3


@pytest.mark.parametrize("shapes", [((3, 3), (3, 3)), ((2, 4), (4, 5)), ((2, 3, 4), (4, 2)), ((2, 3, 4), (2, 4, 3))])
@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradients(shapes, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=shapes[0]), rng.normal(size=shapes[1])
    assert check_op(lambda x, y: proj(ad.matmul(x, y)), [a, b]) < 1e-3


def test_matmul_values_and_shape_errors():
    eye = Tensor(np.eye(2))
    m = Tensor(np.array([[2.0, 3.0], [4.0, 5.0]]))
    assert np.array_equal((eye @ m).data, m.data)
    assert (Tensor(np.array([[1.0, 2.0]])) @ Tensor(np.array([[3.0], [4.0]]))).data.tolist() == [[11.0]]
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_sum_of_product_gradient_is_b_transposed():
    rng = np.random.default_rng(5)
    A, B = parameter(rng.normal(size=(3, 3))), rng.normal(size=(3, 3))
    with Tape() as tape:
        tape.backward(ad.sum_(A @ Tensor(B)))
    assert np.allclose(A.grad, np.ones((3, 3)) @ B.T)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("axis", [0, 1])
def test_concat_gradients(seed, axis):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    assert check_op(lambda x, y: proj(ad.concat([x, y], axis=axis)), [a, b]) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("ids_shape", [(4,), (2, 3), (2, 2, 2)])
def test_embedding_scatter_add(seed, ids_shape):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(5, 3))
    ids = rng.integers(0, 5, size=ids_shape)
    ids.flat[0] = ids.flat[-1]                # force a repeated row
    assert check_op(lambda t: proj(ad.embedding(t, ids)), [table]) < 1e-3


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(IndexError):
        ad.embedding(parameter(np.zeros((3, 2))), np.array([3]))


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shape", [(4,), (2, 5), (2, 3, 6)])
def test_layer_norm_gradients(seed, shape):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    g = rng.normal(size=shape[-1:])
    b = rng.normal(size=shape[-1:])
    assert check_op(lambda x_, g_, b_: proj(ad.layer_norm(x_, g_, b_)), [x, g, b]) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shape", SHAPES)
def test_dropout_gradient_uses_the_same_mask(seed, shape):
    x = np.random.default_rng(seed).normal(size=shape)
    assert check_op(lambda a: proj(ad.dropout(a, 0.3, (seed, "d"))), [x]) < 1e-3


def test_dropout_masks_are_reproducible_and_independent_across_seeds():
    m1 = ad.dropout_mask((50, 40), 0.3, (1, "a"))
    m2 = ad.dropout_mask((50, 40), 0.3, (1, "a"))
    m3 = ad.dropout_mask((50, 40), 0.3, (1, "b"))
    assert m1.tobytes() == m2.tobytes()
    assert not np.array_equal(m1, m3)
    assert abs((m1 > 0).mean() - 0.7) < 0.05
    x = Tensor(np.ones(3))
    assert ad.dropout(x, 0.5, None) is x


# ----------------------------------------------------------------- losses

def _loss_inputs(seed, n=5, v=7):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, v))
    targets = rng.integers(0, v, size=n)
    mask = rng.random(n) < 0.7
    mask[0] = True
    return logits, targets, mask


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shape", [(5, 7), (2, 3, 4), (1, 9)])
def test_cross_entropy_gradient(seed, shape):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=shape)
    t = rng.integers(0, shape[-1], size=shape[:-1])
    m = np.ones(shape[:-1], bool)
    m.flat[-1] = False
    assert check_op(lambda z: ad.softmax_cross_entropy(z, t, m), [logits]) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("alpha,gamma", [(2.0, 3.0), (1.0, 0.0), (0.5, 1.5)])
def test_focal_loss_gradient(seed, alpha, gamma):
    logits, t, m = _loss_inputs(seed)
    assert check_op(lambda z: ad.focal_loss(z, t, m, alpha, gamma), [logits]) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("tau", [1.0, 2.0, 0.5])
def test_kl_gradient_both_sides(seed, tau):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    m = np.array([1, 1, 0, 1], bool)
    assert check_op(lambda a, b: ad.kl_from_logits(a, b, m, tau), [p, q]) < 1e-3


def test_cross_entropy_values():
    assert float(ad.softmax_cross_entropy(Tensor(np.zeros((1, 4))), [2], [True]).data) == pytest.approx(np.log(4))
    sat = np.zeros((1, 4))
    sat[0, 1] = 1e4
    assert float(ad.softmax_cross_entropy(Tensor(sat), [1], [True]).data) == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(3)
    z = rng.normal(size=(5, 16))
    t = rng.integers(0, 16, 5)
    direct = np.mean([np.log(np.sum(np.exp(z[i]))) - z[i, t[i]] for i in range(5)])
    assert float(ad.softmax_cross_entropy(Tensor(z), t, np.ones(5, bool)).data) == pytest.approx(direct, abs=1e-9)


def test_all_masked_losses_are_zero_with_zero_gradient():
    z = parameter(np.random.default_rng(0).normal(size=(3, 4)))
    for fn in (lambda: ad.softmax_cross_entropy(z, [0, 1, 2], [False] * 3),
               lambda: ad.focal_loss(z, [0, 1, 2], [False] * 3),
               lambda: ad.kl_from_logits(z, Tensor(np.zeros((3, 4))), [False] * 3)):
        z.grad = None
        with Tape() as tape:
            loss = fn()
            tape.backward(loss)
        assert float(loss.data) == 0.0
        assert z.grad is not None and not z.grad.any()


def test_focal_loss_closed_forms():
    z = np.random.default_rng(1).normal(size=(6, 5))
    t = np.arange(6) % 5
    m = np.ones(6, bool)
    assert float(ad.focal_loss(Tensor(z), t, m, 1.0, 0.0).data) == float(ad.softmax_cross_entropy(Tensor(z), t, m).data)
    half = np.array([[0.0, 0.0, -np.inf]])
    half[0, 2] = -1e9                         # p_t = 0.5 exactly up to e^-1e9
    assert float(ad.focal_loss(Tensor(half), [0], [True], 2.0, 3.0).data) == pytest.approx(2 * 0.5 ** 3 * np.log(2), abs=1e-12)
    sat = np.array([[1e4, 0.0, 0.0]])
    assert float(ad.focal_loss(Tensor(sat), [0], [True], 2.0, 3.0).data) == 0.0
    with pytest.raises(ValueError):
        ad.focal_loss(Tensor(z), t, m, 0.0, 1.0)


def test_tape_backward_twice_raises():
    x = parameter(np.ones(2))
    with Tape() as tape:
        y = ad.sum_(x * x)
        tape.backward(y)
    with pytest.raises(RuntimeError):
        tape.backward(y)


def test_no_tape_records_nothing():
    x = parameter(np.ones(2))
    y = ad.sum_(x * 2.0)
    assert not y.requires_grad and x.grad is None


def test_tape_nodes_are_topologically_ordered():
    x = parameter(np.ones((2, 2)))
    with Tape() as tape:
        y = ad.tanh(x @ x) + x
        ad.sum_(y)
        seen = {id(x)}
        for node in tape.nodes:
            for p in node.parents:
                if isinstance(p, Tensor) and p.requires_grad:
                    assert id(p) in seen
            seen.add(id(node.out))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_gradient_shapes_match_data(r, c, seed):
    rng = np.random.default_rng(seed)
    a = parameter(rng.normal(size=(r, c)))
    b = parameter(rng.normal(size=(c, r)))
    with Tape() as tape:
        tape.backward(ad.sum_(ad.gelu(a @ b) * ad.softmax(a @ b)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
