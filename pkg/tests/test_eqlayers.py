import numpy as np
import pytest

from egif import diffcore as dc
from egif.diffcore import Tensor
from egif.eqlayers import (
    HybridFeature,
    HybridLinearWeights,
    Segment,
    block_to_vectors,
    hybrid_act,
    hybrid_linear,
    init_hybrid_linear,
    init_split_linear,
    invariance_map,
    scalar_relu,
    split_hybrid_linear,
    vec_relu,
    vectors_to_block,
    weights_from,
)
from egif.geometry import random_orthogonal

T = Tensor


def _rand_feature(rng, n, c_h, c_v):
    h = T(rng.standard_normal((n, c_h))) if c_h else None
    V = T(rng.standard_normal((n, 3, c_v))) if c_v else None
    return HybridFeature(h, V)


def _rand_weights(rng, c_h, c_v, c_h2, c_v2):
    return weights_from({k: T(v) for k, v in init_hybrid_linear(rng, c_h, c_v, c_h2, c_v2).items()})


def _act(Q, s, f):
    """Apply ``V -> s Q V`` to the vector block."""
    V = None if f.V is None else T(s * np.einsum("ij,njc->nic", Q, f.V.data))
    return HybridFeature(f.h, V)


# ------------------------------------------------------------ invariance map


def test_invariance_map_examples():
    V = vectors_to_block([[1.0, 0, 0], [1.0, 0, 0]])
    assert invariance_map(T(V)).data.tolist() == [1.0, 1.0]
    V = vectors_to_block([[1.0, 0, 0], [0, 1.0, 0]])
    np.testing.assert_allclose(invariance_map(T(V)).data, [0.70711, 0.70711], atol=1e-5)


def test_invariance_map_orthogonal_and_scale_invariance():
    rng = np.random.default_rng(0)
    for _ in range(500):
        V = rng.standard_normal((4, 3, 5))
        Q = random_orthogonal(rng)
        s = float(np.exp(rng.uniform(np.log(0.2), np.log(5))))
        QV = np.einsum("ij,njc->nic", Q, V)
        base = invariance_map(T(V)).data
        np.testing.assert_allclose(invariance_map(T(QV)).data, base, rtol=0, atol=1e-12)
        nb = invariance_map(T(V), normalized=True).data
        np.testing.assert_allclose(invariance_map(T(s * QV), normalized=True).data, nb, rtol=0, atol=1e-12)


def test_invariance_map_of_zero_block_is_zero():
    assert np.array_equal(invariance_map(T(np.zeros((3, 4)))).data, np.zeros(4))


# ------------------------------------------------------------ hybrid linear


def test_hybrid_linear_hand_example():
    W = HybridLinearWeights(W_h=T([[2.0]]), W_v=T([[1.0]]), W_hv=T([[1.0]]), W_vh=T([[1.0]]))
    f = HybridFeature(T([3.0]), T(vectors_to_block([[1.0, 0, 0]])))
    out = hybrid_linear(f, W)
    assert out.h.data.tolist() == [7.0]
    assert block_to_vectors(out.V.data).tolist() == [[1.0, 0.0, 0.0]]


def test_hybrid_linear_zero_vectors():
    rng = np.random.default_rng(1)
    W = _rand_weights(rng, 3, 2, 4, 2)
    h = rng.standard_normal(3)
    out = hybrid_linear(HybridFeature(T(h), T(np.zeros((3, 2)))), W)
    np.testing.assert_allclose(out.h.data, h @ W.W_h.data.T, rtol=0, atol=1e-15)
    assert np.array_equal(out.V.data, np.zeros((3, 2)))


@pytest.mark.parametrize("normalized", [False, True])
def test_hybrid_linear_equivariance_500_cases(normalized):
    rng = np.random.default_rng(2)
    for _ in range(500):
        c_h, c_v, c_h2, c_v2 = (int(x) for x in rng.integers(1, 6, size=4))
        f = _rand_feature(rng, 3, c_h, c_v)
        W = _rand_weights(rng, c_h, c_v, c_h2, c_v2)
        Q = random_orthogonal(rng)
        s = float(np.exp(rng.uniform(np.log(0.2), np.log(5)))) if normalized else 1.0
        a = hybrid_linear(f, W, normalized)
        b = hybrid_linear(_act(Q, s, f), W, normalized)
        np.testing.assert_allclose(b.h.data, a.h.data, rtol=0, atol=1e-10)
        want = s * np.einsum("ij,njc->nic", Q, a.V.data)
        assert np.max(np.abs(b.V.data - want)) <= 1e-10 * max(1.0, np.max(np.abs(want)))


def test_hybrid_linear_without_scalars_is_pure_vector_map():
    rng = np.random.default_rng(3)
    W = _rand_weights(rng, 0, 3, 2, 4)
    V = rng.standard_normal((5, 3, 3))
    out = hybrid_linear(HybridFeature(None, T(V)), W)
    np.testing.assert_allclose(out.V.data, V @ W.W_v.data.T, rtol=0, atol=1e-14)
    assert out.h.shape == (5, 2)


def test_split_linear_equals_concatenated_linear():
    rng = np.random.default_rng(4)
    n, m = 6, 9
    A = _rand_feature(rng, n, 2, 3)
    B = _rand_feature(rng, m, 4, 1)
    idx_a = rng.integers(0, n, size=(m,))
    raw = init_split_linear(rng, "L", [("a", 2), ("b", 4)], [("a", 3), ("b", 1)], 5, 2, bias=True)
    params = {k: T(v) for k, v in raw.items()}
    out = split_hybrid_linear([Segment("a", A, idx_a), Segment("b", B)], params, "L", normalized=True)
    # reference: explicit concatenation and full weight matrices
    h_cat = T(np.concatenate([A.h.data[idx_a], B.h.data], axis=-1))
    V_cat = T(np.concatenate([A.V.data[idx_a], B.V.data], axis=-1))
    full = HybridLinearWeights(
        W_h=T(np.concatenate([raw["L.W_h.a"], raw["L.W_h.b"]], axis=1)),
        W_v=T(np.concatenate([raw["L.W_v.a"], raw["L.W_v.b"]], axis=1)),
        W_hv=T(np.concatenate([raw["L.W_hv.a"], raw["L.W_hv.b"]], axis=1)),
        W_vh=T(raw["L.W_vh"]),
        bias=T(raw["L.bias"]),
    )
    ref = hybrid_linear(HybridFeature(h_cat, V_cat), full, normalized=True)
    np.testing.assert_allclose(out.h.data, ref.h.data, rtol=0, atol=1e-13)
    np.testing.assert_allclose(out.V.data, ref.V.data, rtol=0, atol=1e-13)


# ------------------------------------------------------------ nonlinearities


def test_vec_relu_examples():
    v = vectors_to_block([[0.3, -1.0, 2.0]])
    assert np.array_equal(vec_relu(T(v), T([[1.0]])).data, v)
    # two channels; W_q picks channel 1 as the direction
    V = vectors_to_block([[-1.0, 0, 0], [1.0, 0, 0]])
    out = block_to_vectors(vec_relu(T(V), T([[0.0, 1.0]])).data)
    assert out.tolist() == [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
    V = vectors_to_block([[1.0, 1.0, 0], [1.0, 0, 0]])
    out = block_to_vectors(vec_relu(T(V), T([[0.0, 1.0]])).data)
    assert out[0].tolist() == [1.0, 1.0, 0.0]


def test_vec_relu_equivariance_away_from_switching_plane():
    rng = np.random.default_rng(5)
    done = 0
    while done < 500:
        c = int(rng.integers(1, 6))
        V = rng.standard_normal((2, 3, c))
        Wq = rng.standard_normal((1, c))
        q = V @ Wq.T
        qh = q / np.linalg.norm(q, axis=-2, keepdims=True)
        if np.min(np.abs((V * qh).sum(axis=-2))) < 1e-6:
            continue
        Q = random_orthogonal(rng)
        s = float(np.exp(rng.uniform(np.log(0.2), np.log(5))))
        a = vec_relu(T(V), T(Wq)).data
        b = vec_relu(T(s * np.einsum("ij,njc->nic", Q, V)), T(Wq)).data
        want = s * np.einsum("ij,njc->nic", Q, a)
        assert np.max(np.abs(b - want)) <= 1e-10 * max(1.0, np.max(np.abs(want)))
        done += 1


def test_vec_relu_output_never_points_against_direction():
    rng = np.random.default_rng(6)
    V = rng.standard_normal((50, 3, 4))
    Wq = rng.standard_normal((1, 4))
    q = V @ Wq.T
    qh = q / np.linalg.norm(q, axis=-2, keepdims=True)
    out = vec_relu(T(V), T(Wq)).data
    assert np.min((out * qh).sum(axis=-2)) >= -1e-12


def test_scalar_relu():
    assert scalar_relu(T([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert not scalar_relu(T(-np.arange(1.0, 5.0))).data.any()


def test_hybrid_act_passes_none_blocks():
    out = hybrid_act(HybridFeature(T([-1.0, 1.0]), None), None)
    assert out.V is None and out.h.data.tolist() == [0.0, 1.0]


# ------------------------------------------------------------ gradients


def test_layer_gradients_pass_fd_check():
    rng = np.random.default_rng(7)
    h = rng.standard_normal((3, 2))
    V = rng.standard_normal((3, 3, 3))
    arrs = {k: v for k, v in init_hybrid_linear(rng, 2, 3, 4, 3).items()}
    arrs["Wq"] = rng.standard_normal((1, 3))
    arrs["V"] = V
    proj = rng.standard_normal((3, 3, 3))

    for normalized in (False, True):

        def loss(p):
            W = weights_from(p)
            f = hybrid_linear(HybridFeature(T(h), p["V"]), W, normalized)
            Vr = vec_relu(f.V, p["Wq"])
            a = dc.mean_reduce(dc.relu(f.h))
            b = dc.mean_reduce(dc.channelwise_multiply(Vr, T(proj)))
            c = dc.mean_reduce(invariance_map(p["V"], normalized))
            return dc.add(dc.add(a, b), c)

        err, where = dc.finite_difference_check(loss, arrs, step=1e-5, tolerance=1e-4)
        assert where is None, where
