import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dv2ir import tensor as T
from dv2ir.errors import ContractError, NumericError, ShapeError
from dv2ir.tensor import Tensor


def t64(rng, *shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------- primitives


def test_add_elementwise():
    out = T.eval_primitive("add", [Tensor([1.0, 2.0]), Tensor([3.0, 4.0])])
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_conv_ones_is_window_sum():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = T.eval_primitive("conv2d", [x, w], pad=0)
    np.testing.assert_array_equal(out.data, [[[[9.0]]]])


def test_concat_channel_shape():
    out = T.eval_primitive("concat", [Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((1, 2, 8, 8)))], axis=1)
    assert out.shape == (1, 6, 8, 8)


def _conv_reference(x, w, b, stride, pad):
    # direct summation over every output position
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, _, h, wd = xp.shape
    o, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[bi, oc, i, j] = np.sum(patch * w[oc]) + b[oc]
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_direct_summation(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w, b = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, _conv_reference(x, w, b, stride, pad), rtol=0, atol=1e-12)


def test_group_norm_layouts_agree():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 8, 5, 4))
    g, b = Tensor(rng.standard_normal(8)), Tensor(rng.standard_normal(8))
    nchw = T.group_norm(Tensor(x), g, b, 4).data
    nhwc = T.group_norm(Tensor(x.transpose(0, 2, 3, 1)), g, b, 4, channels_last=True).data
    np.testing.assert_allclose(nhwc.transpose(0, 3, 1, 2), nchw, atol=1e-12)


def test_attention_matches_softmax_composition():
    rng = np.random.default_rng(4)
    q, k, v = (Tensor(rng.standard_normal(s)) for s in ((2, 5, 4), (2, 3, 4), (2, 3, 6)))
    scores = T.matmul(q, T.transpose(k, (0, 2, 1)))
    ref = T.matmul(T.softmax(T.scale(scores, 0.5)), v)
    np.testing.assert_allclose(T.attention(q, k, v).data, ref.data, atol=1e-12)


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 4)))], axis=1)


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        T.scale(Tensor([1e308]), 10.0)
    with pytest.raises(NumericError):
        T.mul(Tensor([1e200]), Tensor([1e200]))


def test_unknown_primitive():
    with pytest.raises(ContractError):
        T.eval_primitive("fft", [Tensor([1.0])])


def test_eval_primitive_is_pure():
    rng = np.random.default_rng(5)
    x, w, b = Tensor(rng.standard_normal((2, 3, 6, 6))), Tensor(rng.standard_normal((4, 3, 3, 3))), Tensor(np.zeros(4))
    a = T.eval_primitive("conv2d", [x, w, b], stride=2, pad=1)
    c = T.eval_primitive("conv2d", [x, w, b], stride=2, pad=1)
    assert a.data.tobytes() == c.data.tobytes()


def test_graph_recorded_only_when_needed():
    a = Tensor([1.0])
    assert T.add(a, a).is_leaf
    b = Tensor([1.0], requires_grad=True)
    assert not T.add(b, a).is_leaf
    with T.no_grad():
        assert T.add(b, a).is_leaf


# ---------------------------------------------------------------- backprop


def test_backprop_sum_gives_ones():
    w = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    grads = T.backprop(T.sum_all(w))
    np.testing.assert_array_equal(grads[id(w)], [1.0, 1.0, 1.0])


def test_backprop_mean_square_hand_derivative():
    w = Tensor(np.array([2.0]), requires_grad=True)
    loss = T.mean_square(T.sub(w, Tensor([0.0])))
    np.testing.assert_array_equal(T.backprop(loss)[id(w)], [4.0])


def test_backprop_detached_leaf_gets_zeros():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    u = Tensor(np.array([3.0]), requires_grad=True)
    grads = T.backprop(T.sum_all(u), params=[w, u])
    np.testing.assert_array_equal(grads[id(w)], [0.0, 0.0])


def test_backprop_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backprop(T.scale(w, 2.0))


def test_graph_topological_and_visited_once():
    rng = np.random.default_rng(6)
    x = t64(rng, 3, 4)
    y = T.silu(x)
    loss = T.mean(T.mul(y, y) + y)
    g = T.ComputationGraph(loss)
    pos = {id(t): i for i, t in enumerate(g.order)}
    assert len(pos) == len(g.order)
    for node in g.nodes:
        assert all(pos[i] < pos[node.output_id] for i in node.input_ids)
    assert g.leaves == [x]


def test_backprop_linearity_exact():
    rng = np.random.default_rng(7)
    w = t64(rng, 4, 3)
    x = Tensor(rng.standard_normal((5, 4)))

    def f():
        return T.mean_square(T.matmul(x, w))

    def g():
        return T.sum_all(T.silu(w))

    gf = T.backprop(f())[id(w)].copy()
    gg = T.backprop(g())[id(w)].copy()
    both = T.backprop(T.add(f(), g()))[id(w)]
    np.testing.assert_array_equal(both, gf + gg)


# ---------------------------------------------------------------- finite differences


def test_fd_linear_layer():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((4, 5)))
    w, b = t64(rng, 5, 3), t64(rng, 3)
    err = T.finite_diff_check(lambda: T.mean_square(T.add(T.matmul(x, w), b)), [w, b])
    assert err < 1e-6


def test_fd_conv_groupnorm_silu_stack():
    rng = np.random.default_rng(9)
    x = t64(rng, 2, 3, 6, 6)
    w, b = t64(rng, 4, 3, 3, 3), t64(rng, 4)
    gamma, beta = t64(rng, 4), t64(rng, 4)

    def build():
        h = T.conv2d(x, w, b, stride=1, pad=1)
        return T.mean_square(T.silu(T.group_norm(h, gamma, beta, 2)))

    assert T.finite_diff_check(build, [x, w, b, gamma, beta]) < 1e-4


def test_fd_identity_function():
    x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    assert T.finite_diff_check(lambda: T.sum_all(x), [x]) < 1e-10


def test_fd_rejects_nondeterministic_builder():
    x = Tensor(np.array([1.0]), requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        T.finite_diff_check(lambda: T.sum_all(T.scale(x, rng.random())), [x])


def test_fd_requires_64_bit():
    x = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    with pytest.raises(ContractError):
        T.finite_diff_check(lambda: T.sum_all(x), [x])


def _primitive_case(kind, rng):
    """(builder, inputs) for one random instance of a primitive, reduced to a scalar."""
    r = lambda *s: t64(rng, *s)
    n = int(rng.integers(2, 5))
    if kind in ("add", "sub", "mul"):
        a, b = r(n, 3), r(1, 3)
        return (lambda: T.mean_square(T.eval_primitive(kind, [a, b]))), [a, b]
    if kind == "scale":
        a = r(n, 2)
        return (lambda: T.mean_square(T.scale(a, -1.7))), [a]
    if kind == "matmul":
        a, b = r(2, n, 3), r(3, 4)
        return (lambda: T.mean_square(T.matmul(a, b))), [a, b]
    if kind == "conv2d":
        x, w, b = r(1, 2, n + 3, 5), r(3, 2, 3, 3), r(3)
        stride = int(rng.integers(1, 3))
        return (lambda: T.mean_square(T.conv2d(x, w, b, stride=stride, pad=1))), [x, w, b]
    if kind == "upsample_nearest":
        x = r(1, 2, n, 3)
        return (lambda: T.mean_square(T.mul(T.upsample_nearest(x, 2), T.upsample_nearest(x, 2)))), [x]
    if kind == "group_norm":
        x, g, b = r(2, 4, n, 3), r(4), r(4)
        return (lambda: T.mean_square(T.mul(T.group_norm(x, g, b, 2), Tensor(np.arange(4.0).reshape(1, 4, 1, 1))))), [x, g, b]
    if kind == "silu":
        x = r(n, 4)
        return (lambda: T.mean_square(T.silu(x))), [x]
    if kind == "softmax":
        x = r(n, 4)
        wts = Tensor(rng.standard_normal((n, 4)))
        return (lambda: T.sum_all(T.mul(T.softmax(x), wts))), [x]
    if kind == "attention":
        q, k, v = r(2, n, 4), r(2, 3, 4), r(2, 3, 5)
        return (lambda: T.mean_square(T.attention(q, k, v))), [q, k, v]
    if kind == "mean_square":
        x = r(n, 3)
        return (lambda: T.mean_square(x)), [x]
    if kind == "concat":
        a, b = r(1, 2, n, 2), r(1, 3, n, 2)
        wts = Tensor(rng.standard_normal((1, 5, n, 2)))
        return (lambda: T.sum_all(T.mul(T.concat([a, b], axis=1), wts))), [a, b]
    if kind == "conv2d_nhwc":
        x, w, b = r(1, n + 3, 5, 2), r(3, 2, 3, 3), r(3)
        stride = int(rng.integers(1, 3))
        return (lambda: T.mean_square(T.conv2d_nhwc(x, w, b, stride=stride, pad=1))), [x, w, b]
    if kind == "group_norm_nhwc":
        x, g, b = r(2, n, 3, 4), r(4), r(4)
        wts = Tensor(rng.standard_normal((2, n, 3, 4)))
        return (lambda: T.sum_all(T.mul(T.group_norm(x, g, b, 2, channels_last=True), wts))), [x, g, b]
    if kind == "mean":
        x = r(n, 3)
        return (lambda: T.mean(T.mul(x, x))), [x]
    if kind == "sum":
        x = r(n, 3)
        return (lambda: T.sum_all(T.silu(x))), [x]
    if kind in ("reshape", "transpose", "getitem"):
        x = r(2, n, 3)
        wts = Tensor(rng.standard_normal((3, n, 2)))
        if kind == "reshape":
            f = lambda: T.reshape(x, (3, n, 2))
        elif kind == "transpose":
            f = lambda: T.transpose(x, (2, 1, 0))
        else:
            return (lambda: T.mean_square(x[:, 1:, ::2])), [x]
        return (lambda: T.sum_all(T.mul(f(), wts))), [x]
    if kind == "embedding":
        table = r(7, 3)
        ids = rng.integers(0, 7, (2, n))
        wts = Tensor(rng.standard_normal((2, n, 3)))
        return (lambda: T.sum_all(T.mul(T.embedding(table, ids), wts))), [table]
    raise AssertionError(kind)


NETWORK_PRIMITIVES = ("add", "sub", "mul", "scale", "matmul", "conv2d", "conv2d_nhwc", "upsample_nearest",
                      "group_norm", "group_norm_nhwc", "silu", "softmax", "attention", "mean_square", "mean", "sum",
                      "concat", "reshape", "transpose", "getitem", "embedding")


@pytest.mark.parametrize("kind", NETWORK_PRIMITIVES)
def test_every_primitive_gradient_over_random_cases(kind):
    for seed in range(20):
        rng = np.random.default_rng([seed, len(kind)])
        build, inputs = _primitive_case(kind, rng)
        assert T.finite_diff_check(build, inputs, eps=1e-5, max_per_input=12, seed=seed) < 1e-4, (kind, seed)


# ---------------------------------------------------------------- optimizer


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = T.AdamState(lr=0.1)
    T.adam_step([p], {id(p): np.zeros(2)}, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_closed_form():
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = T.AdamState(lr=0.1)
    T.adam_step([p], {id(p): np.array([1.0])}, state)
    # m_hat / sqrt(v_hat) == 1 on the first step
    np.testing.assert_allclose(p.data, [-0.1 / (1.0 + 1e-8)], rtol=1e-12)


def test_adam_missing_gradient():
    p = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(ContractError):
        T.adam_step([p], {}, T.AdamState())


def test_adam_deterministic_and_leaves_frozen_alone():
    def run():
        rng = np.random.default_rng(1)
        p = Tensor(rng.standard_normal(4), requires_grad=True)
        frozen = Tensor(rng.standard_normal(4))
        before = frozen.data.copy()
        state = T.AdamState(lr=0.01)
        for _ in range(5):
            loss = T.mean_square(T.mul(p, frozen))
            T.adam_step([p], T.backprop(loss), state)
        np.testing.assert_array_equal(frozen.data, before)
        return p.data.copy(), state.step

    (a, sa), (b, sb) = run(), run()
    assert sa == sb == 5
    assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.lists(st.floats(-10, 10), min_size=1, max_size=6))
def test_add_gradient_unbroadcasts(xs, ys):
    a = Tensor(np.array(xs), requires_grad=True)
    b = Tensor(np.array(ys[:1]), requires_grad=True)
    grads = T.backprop(T.sum_all(T.add(a, b)))
    np.testing.assert_array_equal(grads[id(a)], np.ones(len(xs)))
    np.testing.assert_array_equal(grads[id(b)], [float(len(xs))])
