import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egif import diffcore as dc
from egif.diffcore import Tensor


def _weighted_mean(out: Tensor, rng) -> Tensor:
    # random projection so every output entry matters to the scalar loss
    w = dc.constant(rng.standard_normal(out.shape))
    return dc.mean_reduce(dc.channelwise_multiply(out, w))


def _case(kind, rng):
    """(function of params, input arrays) for one randomized primitive case."""
    n, m, c = (int(x) for x in rng.integers(1, 5, size=3))
    if kind == "matmul":
        arrs = {"a": rng.standard_normal((n, m, c)), "b": rng.standard_normal((c, 3))}
        return lambda p: dc.matmul(p["a"], p["b"]), arrs
    if kind in ("add", "subtract", "channelwise_multiply"):
        arrs = {"a": rng.standard_normal((n, 3, c)), "b": rng.standard_normal((1, 3, c))}
        return lambda p: dc.PRIMITIVES[kind](p["a"], p["b"]), arrs
    if kind == "scalar_multiply":
        s = float(rng.normal())
        return lambda p: dc.scalar_multiply(p["a"], s), {"a": rng.standard_normal((n, c))}
    if kind == "safe_normalize":
        return lambda p: dc.safe_normalize(p["a"], axis=-2), {"a": rng.standard_normal((n, 3, c))}
    if kind in ("relu", "sigmoid"):
        return lambda p: dc.PRIMITIVES[kind](p["a"]), {"a": rng.standard_normal((n, m, c))}
    if kind == "mean_reduce":
        return lambda p: dc.mean_reduce(p["a"], axis=1), {"a": rng.standard_normal((n, m, c))}
    if kind == "max_reduce":
        return lambda p: dc.max_reduce(p["a"], axis=1), {"a": rng.standard_normal((n, m + 1, c))}
    if kind == "concat":
        arrs = {"a": rng.standard_normal((n, c)), "b": rng.standard_normal((n, m))}
        return lambda p: dc.concat([p["a"], p["b"]], axis=-1), arrs
    if kind == "gather_rows":
        idx = rng.integers(0, n, size=(m, 2))
        return lambda p: dc.gather_rows(p["a"], idx), {"a": rng.standard_normal((n, 3, c))}
    if kind == "inner_product_rows":
        arrs = {"a": rng.standard_normal((n, 3, c)), "b": rng.standard_normal((n, 3, 1))}
        return lambda p: dc.inner_product_rows(p["a"], p["b"], axis=-2), arrs
    raise AssertionError(kind)


KINDS = sorted(k for k in dc.PRIMITIVES if k not in ("transpose", "reshape", "bce"))


def test_primitive_list_covers_required_kinds():
    required = {
        "matmul", "add", "subtract", "channelwise_multiply", "safe_normalize", "relu", "sigmoid",
        "mean_reduce", "max_reduce", "concat", "gather_rows", "scalar_multiply", "inner_product_rows",
    }
    assert required <= set(dc.PRIMITIVES)


@pytest.mark.parametrize("kind", KINDS)
def test_primitive_gradients_match_central_differences(kind):
    # 8 seeds x 13 primitives > 100 randomized shape/seed combinations
    for seed in range(8):
        rng = np.random.default_rng([seed, KINDS.index(kind)])
        fn, arrs = _case(kind, rng)
        proj_rng_seed = int(rng.integers(1 << 30))

        def loss(p, fn=fn, s=proj_rng_seed):
            return _weighted_mean(fn(p), np.random.default_rng(s))

        err, where = dc.finite_difference_check(loss, arrs, step=1e-5, tolerance=1e-4)
        assert where is None, f"{kind} seed {seed}: {where}"


def test_sigmoid_at_zero():
    assert dc.sigmoid(Tensor([0.0])).data.tolist() == [0.5]


def test_matmul_identity_on_vector():
    v = np.array([0.3, -1.2, 2.5])
    assert np.array_equal(dc.matmul(Tensor(np.eye(3)), Tensor(v)).data, v)


def test_safe_normalize_hand_value():
    np.testing.assert_allclose(dc.safe_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=0, atol=1e-15)


def test_safe_normalize_zero_guard_has_zero_output_and_gradient():
    x = dc.param(np.zeros(3), "x")
    with dc.Tape() as tape:
        y = dc.safe_normalize(x)
        loss = dc.mean_reduce(y)
    assert np.array_equal(y.data, np.zeros(3))
    assert np.array_equal(dc.backward(tape, loss, [x])["x"], np.zeros(3))


def test_shape_error_names_kind_and_shapes():
    with pytest.raises(dc.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_non_finite_input_rejected():
    with pytest.raises(dc.NonFiniteError):
        dc.relu(Tensor(np.array([1.0, np.nan])))


def test_backward_sigmoid_derivative_at_zero():
    x = dc.param(np.array([0.0]), "x")
    with dc.Tape() as tape:
        loss = dc.mean_reduce(dc.sigmoid(x))
    assert dc.backward(tape, loss, [x])["x"].tolist() == [0.25]


def test_backward_linear_sum_gives_ones():
    v = dc.param(np.array([1.0, -2.0, 0.5]), "v")
    with dc.Tape() as tape:
        # sum = 3 * mean
        loss = dc.scalar_multiply(dc.mean_reduce(dc.matmul(dc.constant(np.eye(3)), v)), 3.0)
    np.testing.assert_allclose(dc.backward(tape, loss, [v])["v"], np.ones(3), rtol=0, atol=1e-15)


def test_gradient_of_unit_norm_is_zero():
    x = dc.param(np.array([0.4, -1.3, 2.0]), "x")
    with dc.Tape() as tape:
        y = dc.safe_normalize(x)
        loss = dc.inner_product_rows(y, y)
    g = dc.backward(tape, loss, [x])["x"]
    assert np.max(np.abs(g)) < 1e-12


def test_backward_requires_scalar_loss():
    x = dc.param(np.ones(3), "x")
    with dc.Tape() as tape:
        y = dc.relu(x)
    with pytest.raises(dc.ShapeError):
        dc.backward(tape, y, [x])


def test_unreachable_parameter_gets_zero_gradient():
    x = dc.param(np.ones(3), "x")
    z = dc.param(np.ones((2, 2)), "z")
    with dc.Tape() as tape:
        loss = dc.mean_reduce(x)
    g = dc.backward(tape, loss, [x, z])
    assert np.array_equal(g["z"], np.zeros((2, 2)))


def test_relu_boundary_takes_active_branch():
    x = dc.param(np.array([0.0, -1.0, 2.0]), "x")
    with dc.Tape() as tape:
        loss = dc.scalar_multiply(dc.mean_reduce(dc.relu(x)), 3.0)
    assert dc.backward(tape, loss, [x])["x"].tolist() == [1.0, 0.0, 1.0]


def test_max_reduce_tie_routes_to_lowest_index():
    x = dc.param(np.array([[1.0, 3.0, 3.0]]), "x")
    with dc.Tape() as tape:
        loss = dc.mean_reduce(dc.max_reduce(x, axis=1))
    assert dc.backward(tape, loss, [x])["x"].tolist() == [[0.0, 1.0, 0.0]]


def test_linear_function_fd_error_tiny():
    rng = np.random.default_rng(3)
    W = rng.standard_normal((4, 5))
    err, _ = dc.finite_difference_check(
        lambda p: dc.mean_reduce(dc.matmul(p["x"], dc.constant(W.T))), {"x": rng.standard_normal((3, 5))}
    )
    assert err <= 1e-9


def test_two_layer_perceptron_bce_fd():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((10, 4))
    y = (rng.random(10) > 0.5).astype(float)
    arrs = {"W1": rng.standard_normal((6, 4)), "b1": rng.standard_normal(6), "W2": rng.standard_normal((1, 6))}

    def loss(p):
        h = dc.relu(dc.add(dc.matmul(dc.constant(x), dc.transpose(p["W1"])), p["b1"]))
        out = dc.reshape(dc.sigmoid(dc.matmul(h, dc.transpose(p["W2"]))), (10,))
        return dc.bce(out, y)

    err, where = dc.finite_difference_check(loss, arrs, step=1e-5, tolerance=1e-4)
    assert where is None and err <= 1e-4


def test_fd_check_reports_offending_entry():
    # a deliberately wrong gradient: detach half of the input through a constant
    def loss(p):
        frozen = dc.constant(p["x"].data.copy())
        return dc.mean_reduce(dc.channelwise_multiply(p["x"], frozen))

    err, where = dc.finite_difference_check(loss, {"x": np.array([1.0, 2.0])}, tolerance=1e-4)
    assert err > 0.1 and where is not None and where.startswith("x[")


def test_backward_is_linear_in_losses():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((3, 4))
    W = dc.param(rng.standard_normal((2, 4)), "W")

    def run(which):
        with dc.Tape() as tape:
            h = dc.sigmoid(dc.matmul(dc.constant(a), dc.transpose(W)))
            l1 = dc.mean_reduce(h)
            l2 = dc.mean_reduce(dc.relu(h))
            loss = {"1": l1, "2": l2, "sum": dc.add(l1, l2)}[which]
        return dc.backward(tape, loss, [W])["W"]

    np.testing.assert_allclose(run("sum"), run("1") + run("2"), rtol=0, atol=1e-12)


def test_replay_is_bit_identical():
    rng = np.random.default_rng(5)
    arrs = {"W": rng.standard_normal((3, 3)), "x": rng.standard_normal((7, 3))}

    def run():
        p = {k: dc.param(v, k) for k, v in arrs.items()}
        with dc.Tape() as tape:
            loss = dc.mean_reduce(dc.safe_normalize(dc.matmul(p["x"], p["W"])))
        return loss.data, dc.backward(tape, loss, p)

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_primitive_forward_dispatch():
    out = dc.primitive_forward("relu", [Tensor([-1.0, 2.0])])
    assert out.data.tolist() == [0.0, 2.0]
    with pytest.raises(ValueError, match="softmax"):
        dc.primitive_forward("softmax", [Tensor([1.0])])


def test_matmul_rows_independent_of_batch_size():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((700, 40))
    W = dc.constant(rng.standard_normal((40, 32)))
    full = dc.matmul(Tensor(A), W).data
    for lo, n in [(0, 1), (5, 1), (3, 7), (100, 300)]:
        assert np.array_equal(dc.matmul(Tensor(A[lo : lo + n]), W).data, full[lo : lo + n])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_sigmoid_output_in_unit_interval(xs):
    # beyond |x| ~ 37 the float64 result rounds to exactly 0 or 1
    y = dc.sigmoid(Tensor(np.array(xs))).data
    assert np.all((y > 0) & (y < 1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=6))
def test_safe_normalize_unit_or_zero(xs):
    x = np.array(xs)
    n = np.linalg.norm(dc.safe_normalize(Tensor(x)).data)
    if np.linalg.norm(x) >= 1e-12:
        assert abs(n - 1) < 1e-12
    else:
        assert n == 0
