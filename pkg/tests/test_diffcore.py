import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fewtrain import diffcore as dc
from fewtrain.errors import InputError, NonFiniteError, ShapeError, UsageError

from oracles import finite_difference_grad, relative_error, softmax_highprec


def check_grad(build, arrays, tol=1e-4, step=1e-5):
    """Compare autodiff gradients of scalar build(*tensors) to central FD."""
    tensors = [dc.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    assert loss.size == 1
    grads = dc.grad(loss, tensors)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [arrays[j] if j != i else x for j in range(len(arrays))]
            with dc.no_grad():
                return build(*[dc.Tensor(v) for v in args]).item()

        fd = finite_difference_grad(f, a.copy(), step=step)
        err = relative_error(grads[i].data, fd)
        assert err <= tol, f"input {i}: rel err {err:.2e} > {tol}"


def weighted_sum(t, seed):
    w = dc.Tensor(np.random.default_rng(seed).normal(size=t.shape))
    return dc.tensor_sum(dc.mul(t, w))


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = dc.Tensor(np.eye(2))
    b = dc.Tensor([[2.0, 3.0], [4.0, 5.0]])
    assert np.array_equal(dc.matmul(a, b).data, b.data)


def test_matmul_inner_product():
    out = dc.matmul(dc.Tensor([[1.0, 2.0]]), dc.Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))

    def build(ta, tb):
        return dc.tensor_sum(dc.mul(dc.matmul(ta, tb), dc.Tensor(w)))

    check_grad(build, [a, b], tol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))


def test_matmul_batched_matches_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 3, 4))
    b = rng.normal(size=(5, 4, 2))
    out = dc.matmul(dc.Tensor(a), dc.Tensor(b)).data
    stacked = np.stack([a[i] @ b[i] for i in range(5)])
    np.testing.assert_allclose(out, stacked, rtol=0, atol=0)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_logits():
    out = dc.softmax(dc.Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_logits_stable():
    out = dc.softmax(dc.Tensor([1000.0, 1000.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5], atol=0)


def test_softmax_matches_high_precision_oracle():
    out = dc.softmax(dc.Tensor([1.0, 2.0, 3.0]))
    want = softmax_highprec([1.0, 2.0, 3.0])
    np.testing.assert_allclose(out.data, want, atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    out = dc.softmax(dc.Tensor(rng.normal(size=(7, 5)) * 5.0), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out.data > 0.0) and np.all(out.data < 1.0)


def test_softmax_empty_axis():
    with pytest.raises(ShapeError):
        dc.softmax(dc.Tensor(np.ones((2, 0))))


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8),
       st.randoms(use_true_random=False))
def test_softmax_permutation_equivariant_exactly(vals, rnd):
    perm = list(range(len(vals)))
    rnd.shuffle(perm)
    x = np.array(vals)
    base = dc.softmax(dc.Tensor(x)).data
    permuted = dc.softmax(dc.Tensor(x[perm])).data
    assert np.array_equal(base[perm], permuted)


def test_softmax_gradient():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))

    def build(t):
        return weighted_sum(dc.softmax(t, axis=-1), 9)

    check_grad(build, [x], tol=1e-6)


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform_logits_one_hot():
    logits = dc.Tensor(np.zeros((1, 4)))
    target = dc.Tensor([[1.0, 0.0, 0.0, 0.0]])
    assert abs(dc.cross_entropy(logits, target).item() - np.log(4)) < 1e-12


def test_cross_entropy_self_target_is_entropy():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(3, 5))
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    got = dc.cross_entropy(dc.Tensor(logits), dc.Tensor(p)).item()
    entropy = float(np.mean(-np.sum(p * np.log(p), axis=-1)))
    assert abs(got - entropy) < 1e-12


def test_cross_entropy_gradient_vs_finite_differences():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(2, 3))
    target = np.abs(rng.normal(size=(2, 3)))
    target /= target.sum(-1, keepdims=True)

    def build(t):
        return dc.cross_entropy(t, dc.Tensor(target))

    check_grad(build, [logits], tol=1e-6)


def test_cross_entropy_negative_target_rejected():
    with pytest.raises(InputError):
        dc.cross_entropy(dc.Tensor(np.zeros((1, 2))),
                         dc.Tensor([[-0.5, 1.5]]))


def test_cross_entropy_bad_row_sum_rejected():
    with pytest.raises(InputError):
        dc.cross_entropy(dc.Tensor(np.zeros((1, 2))),
                         dc.Tensor([[0.3, 0.3]]))


# ---------------------------------------------------------------------------
# backward


def test_backward_sum_gives_ones():
    x = dc.Tensor(np.random.default_rng(6).normal(size=(3, 4)),
                  requires_grad=True)
    dc.backward(dc.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_half_square_gives_identity():
    x = dc.Tensor(np.random.default_rng(7).normal(size=(5,)),
                  requires_grad=True)
    dc.backward(dc.scale(dc.tensor_sum(dc.mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, x.data, atol=0)


def test_backward_two_layer_mlp_vs_finite_differences():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 6))
    w1 = rng.normal(size=(6, 5))
    b1 = rng.normal(size=(5,))
    w2 = rng.normal(size=(5, 3))
    target = np.eye(3)[rng.integers(0, 3, size=4)]

    def build(tw1, tb1, tw2):
        h = dc.relu(dc.add(dc.matmul(dc.Tensor(x), tw1),
                           dc.broadcast_to(dc.reshape(tb1, (1, 5)), (4, 5))))
        return dc.cross_entropy(dc.matmul(h, tw2), dc.Tensor(target))

    check_grad(build, [w1, b1, w2], tol=1e-4)


def test_backward_rejects_non_scalar():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        dc.backward(dc.mul(x, x))


def test_backward_twice_bit_identical():
    rng = np.random.default_rng(9)
    x = dc.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    y = dc.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    loss = dc.tensor_sum(dc.mul(dc.softmax(dc.matmul(x, y)), x))
    first = {t: g.copy() for t, g in dc.backward(loss).items()}
    second = dc.backward(loss)
    for t, g in second.items():
        assert np.array_equal(first[t], g)


def test_backward_returns_gradient_map():
    x = dc.Tensor([1.0, 2.0], requires_grad=True)
    out = dc.backward(dc.tensor_sum(dc.mul(x, x)))
    assert set(out) == {x}
    np.testing.assert_allclose(out[x], 2 * x.data)


def test_grad_of_unreachable_source_is_zero():
    x = dc.Tensor([1.0], requires_grad=True)
    z = dc.Tensor([2.0], requires_grad=True)
    g = dc.grad(dc.tensor_sum(dc.mul(x, x)), [z])[0]
    np.testing.assert_array_equal(g.data, [0.0])


def test_graph_topological_order_by_construction():
    x = dc.Tensor(np.ones((2, 2)), requires_grad=True)
    y = dc.softmax(dc.matmul(x, dc.relu(x)))
    loss = dc.tensor_sum(y)
    for node in dc.topo_order(loss):
        for parent in node.parents:
            assert parent.idx < node.idx


def test_second_order_gradient():
    # d/dx of (d/dx sum(x^3)) = 6x
    x = dc.Tensor([1.5, -2.0, 0.5], requires_grad=True)
    loss = dc.tensor_sum(dc.mul(dc.mul(x, x), x))
    (gx,) = dc.grad(loss, [x], create_graph=True)
    (ggx,) = dc.grad(dc.tensor_sum(gx), [x])
    np.testing.assert_allclose(ggx.data, 6.0 * x.data, atol=1e-12)


# ---------------------------------------------------------------------------
# remaining ops: value + gradient spot checks


@pytest.mark.parametrize("seed", range(3))
def test_elementwise_ops_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    wseed = seed + 100

    check_grad(lambda t, u: weighted_sum(dc.add(t, u), wseed), [a, b], tol=1e-6)
    check_grad(lambda t, u: weighted_sum(dc.mul(t, u), wseed), [a, b], tol=1e-6)
    check_grad(lambda t: weighted_sum(dc.scale(t, -2.5), wseed), [a], tol=1e-6)
    check_grad(lambda t: weighted_sum(dc.relu(t), wseed), [a], tol=1e-4)
    check_grad(lambda t: weighted_sum(dc.exp(dc.scale(t, 0.3)), wseed), [a],
               tol=1e-6)
    check_grad(lambda t: weighted_sum(dc.log(dc.exp(t)), wseed), [a], tol=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_structural_ops_gradients(seed):
    rng = np.random.default_rng(seed + 10)
    a = rng.normal(size=(4, 6))
    wseed = seed + 200

    check_grad(lambda t: weighted_sum(dc.transpose(t), wseed), [a], tol=1e-6)
    check_grad(lambda t: weighted_sum(dc.reshape(t, (2, 12)), wseed), [a],
               tol=1e-6)
    check_grad(lambda t: weighted_sum(dc.narrow(t, 1, 2, 3), wseed), [a],
               tol=1e-6)
    check_grad(lambda t: weighted_sum(dc.slice_row(t, 2), wseed), [a], tol=1e-6)
    check_grad(lambda t: weighted_sum(dc.concat([t, dc.scale(t, 2.0)], 1),
                                      wseed), [a], tol=1e-6)
    check_grad(
        lambda t: weighted_sum(dc.broadcast_to(dc.reshape(t, (4, 6, 1)),
                                               (4, 6, 3)), wseed), [a],
        tol=1e-6)
    check_grad(lambda t: weighted_sum(dc.permute(dc.reshape(t, (2, 2, 6)),
                                                 (2, 0, 1)), wseed), [a],
               tol=1e-6)


def test_embedding_lookup_gradient():
    rng = np.random.default_rng(11)
    table = rng.normal(size=(7, 3))
    ids = np.array([[0, 3, 3], [6, 1, 0]])
    wseed = 300
    check_grad(lambda t: weighted_sum(dc.embedding_lookup(t, ids), wseed),
               [table], tol=1e-6)


def test_embedding_lookup_out_of_range():
    with pytest.raises(InputError):
        dc.embedding_lookup(dc.Tensor(np.ones((3, 2))), np.array([3]))


def test_gather_positions_gradient():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(3, 5, 4))
    pos = np.array([0, 4, 2])
    wseed = 301
    check_grad(lambda t: weighted_sum(dc.gather_positions(t, pos), wseed), [x],
               tol=1e-6)


def test_gather_cols_gradient():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(4, 9))
    ids = np.array([1, 7, 7])
    wseed = 302
    check_grad(lambda t: weighted_sum(dc.gather_cols(t, ids), wseed), [x],
               tol=1e-6)


def test_layer_norm_gradient():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(3, 6))
    gain = rng.normal(size=(6,))
    bias = rng.normal(size=(6,))
    wseed = 303
    check_grad(lambda t, g, b: weighted_sum(dc.layer_norm(t, g, b), wseed),
               [x, gain, bias], tol=1e-4)


def test_kl_divergence_gradient():
    rng = np.random.default_rng(15)
    p = np.abs(rng.normal(size=(3, 4))) + 0.1
    p /= p.sum(-1, keepdims=True)
    q_logits = rng.normal(size=(3, 4))

    def build(t):
        return dc.tensor_sum(dc.kl_divergence(dc.Tensor(p),
                                               dc.softmax(t, axis=-1)))

    check_grad(build, [q_logits], tol=1e-6)


# ---------------------------------------------------------------------------
# kl properties


@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=6))
def test_kl_self_is_zero(raw):
    p = np.array(raw)
    p /= p.sum()
    got = dc.kl_divergence(dc.Tensor(p), dc.Tensor(p.copy())).item()
    assert abs(got) <= 1e-12


@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=6),
       st.lists(st.floats(0.01, 10.0), min_size=6, max_size=6))
def test_kl_nonnegative(raw_p, raw_q):
    n = len(raw_p)
    p = np.array(raw_p)
    p /= p.sum()
    q = np.array(raw_q[:n])
    q /= q.sum()
    assert dc.kl_divergence(dc.Tensor(p), dc.Tensor(q)).item() >= -1e-12


# ---------------------------------------------------------------------------
# guards


def test_finite_guard_catches_overflow():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        dc.exp(dc.Tensor([1000.0]))


def test_log_requires_positive():
    with pytest.raises(InputError):
        dc.log(dc.Tensor([0.0]))


def test_safe_log_clamps():
    out = dc.safe_log(dc.Tensor([0.0, 1.0]))
    np.testing.assert_allclose(out.data, [np.log(1e-12), 0.0])


def test_no_grad_blocks_recording():
    x = dc.Tensor([1.0], requires_grad=True)
    with dc.no_grad():
        y = dc.mul(x, x)
    assert not y.requires_grad and y.parents == ()


def test_no_grad_scopes_are_thread_local():
    import threading

    results = {}

    def tracked_worker(barrier):
        x = dc.Tensor(np.ones(4), requires_grad=True)
        barrier.wait()
        for _ in range(200):
            loss = dc.tensor_sum(dc.mul(x, x))
        results["tracked"] = loss.requires_grad

    def no_grad_worker(barrier):
        x = dc.Tensor(np.ones(4), requires_grad=True)
        barrier.wait()
        with dc.no_grad():
            for _ in range(200):
                out = dc.mul(x, x)
        results["untracked"] = out.requires_grad

    barrier = threading.Barrier(2)
    threads = [threading.Thread(target=tracked_worker, args=(barrier,)),
               threading.Thread(target=no_grad_worker, args=(barrier,))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {"tracked": True, "untracked": False}
