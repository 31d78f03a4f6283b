import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vecmap import numerics as nm
from vecmap.numerics import ParamStore, ShapeError, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- forward values


def test_softmax_uniform_for_equal_logits(f64):
    out = nm.softmax(Tensor(np.full((3, 7), 2.5)), axis=-1).data
    np.testing.assert_allclose(out, 1 / 7, rtol=0, atol=1e-15)


@given(arrays(np.float64, (4, 6), elements=st.floats(-30, 30)))
def test_softmax_is_a_distribution(x):
    with nm.precision(np.float64):
        out = nm.softmax(Tensor(x), axis=-1).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_bilinear_gather_interpolation_nodes_and_midpoint(f64):
    grid = Tensor(np.arange(4 * 5 * 2, dtype=np.float64).reshape(4, 5, 2))
    out = nm.bilinear_gather(grid, Tensor([[2.0, 3.0], [1.5, 0.5]])).data
    np.testing.assert_array_equal(out[0], grid.data[2, 3])
    np.testing.assert_allclose(out[1], grid.data[1:3, 0:2].mean(axis=(0, 1)))


def test_bilinear_gather_zero_pads_outside(f64):
    grid = Tensor(np.ones((3, 3, 1)))
    out = nm.bilinear_gather(grid, Tensor([[-5.0, 1.0], [-0.5, 1.0], [2.5, 2.5]])).data[:, 0]
    np.testing.assert_allclose(out, [0.0, 0.5, 0.25])


@given(st.floats(0, 4, allow_nan=False), st.floats(0, 5, allow_nan=False), st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
def test_bilinear_gather_is_lipschitz(r, c, dr, dc):
    rng = np.random.default_rng(0)
    g = rng.normal(size=(5, 6, 2))
    with nm.precision(np.float64):
        a = nm.bilinear_gather(Tensor(g), Tensor([[r, c]])).data
        b = nm.bilinear_gather(Tensor(g), Tensor([[r + dr, c + dc]])).data
    # bounded by the grid value range (plus the zero padding) times the move
    span = max(np.abs(g).max(), 1e-12) * 2
    assert np.abs(a - b).max() <= span * (abs(dr) + abs(dc)) + 1e-12


def test_sigmoid_and_softplus_stay_finite(f64):
    x = Tensor([-800.0, -30.0, 0.0, 30.0, 800.0])
    s = nm.sigmoid(x).data
    sp = nm.softplus(x).data
    assert np.isfinite(s).all() and np.isfinite(sp).all()
    assert s[2] == 0.5 and sp[2] == pytest.approx(math.log(2))
    assert sp[-1] == 800.0


def test_l2_normalize_unit_rows_and_zero_guard(f64):
    out = nm.l2_normalize(Tensor([[3.0, 4.0], [0.0, 0.0]])).data
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0]])


def test_layer_norm_matches_numpy(f64):
    x = np.random.default_rng(1).normal(size=(3, 5))
    out = nm.layer_norm(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5))).data
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, ref, atol=1e-12)


# ---------------------------------------------------------------- shape policy


def test_leading_dimension_broadcast_only(f64):
    a = Tensor(np.ones((2, 3, 4)))
    assert (a + Tensor(np.ones(4))).shape == (2, 3, 4)
    assert (a * Tensor(np.ones((3, 4)))).shape == (2, 3, 4)
    with pytest.raises(ShapeError, match=r"\(2, 3, 4\).*\(3, 1\)"):
        a + Tensor(np.ones((3, 1)))
    with pytest.raises(ShapeError):
        a + Tensor(np.ones((2, 1, 4)))


def test_matmul_and_concat_report_shapes(f64):
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError):
        nm.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=-1)
    with pytest.raises(ShapeError):
        nm.broadcast_to(Tensor(np.ones((2, 3))), (4, 3))


def test_bilinear_gather_shape_check(f64):
    with pytest.raises(ShapeError):
        nm.bilinear_gather(Tensor(np.ones((2, 3, 3, 1))), Tensor(np.ones((3, 4, 2))))


# ---------------------------------------------------------------- backward


def test_backward_linear_and_quadratic(f64):
    w = leaf(np.arange(6.0).reshape(2, 3))
    nm.backward(nm.reduce_sum(w))
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))
    w.grad = None
    nm.backward(nm.reduce_sum(w * w))
    np.testing.assert_array_equal(w.grad, 2 * w.data)


def test_backward_accumulates_over_reuse(f64):
    w = leaf([1.0, -2.0])
    y = w * 3.0 + w * w + w
    nm.backward(nm.reduce_sum(y))
    np.testing.assert_allclose(w.grad, 4.0 + 2 * w.data)


def test_backward_requires_scalar(f64):
    with pytest.raises(ShapeError):
        nm.backward(leaf([1.0, 2.0]) * 2.0)


def test_backward_consumes_graph(f64):
    w = leaf([1.0, 2.0])
    h = w * 2.0
    nm.backward(nm.reduce_sum(h * h))
    assert h._parents == () and h._backward is None and h.grad is None
    assert w.grad is not None


def test_detach_blocks_gradient(f64):
    w = leaf([1.0, 2.0])
    nm.backward(nm.reduce_sum(w.detach() * w))
    np.testing.assert_array_equal(w.grad, w.data)


def test_take_advanced_scatter_adds(f64):
    w = leaf([1.0, 2.0, 3.0])
    nm.backward(nm.reduce_sum(nm.take(w, (np.array([0, 2, 2]),))))
    np.testing.assert_array_equal(w.grad, [1.0, 0.0, 2.0])


def test_item_requires_scalar(f64):
    assert Tensor(3.0).item() == 3.0
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


@given(st.integers(0, 2**32 - 1))
def test_random_composite_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    with nm.precision(np.float64):
        ta, tb = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))

        def f():
            h = nm.matmul(nm.sigmoid(ta), tb)
            return nm.reduce_sum(nm.softmax(h, axis=-1) * nm.exp(nm.mean(tb, axis=0) * 0.1)) + nm.reduce_sum(nm.softplus(h))

        assert nm.fd_check(f, [ta, tb]) < 1e-4


def test_fd_check_detects_wrong_rule(f64):
    x = leaf(np.linspace(-1, 1, 5))

    def wrong(a):
        out = nm.sigmoid(a)
        rule = out._backward
        out._backward = lambda g: tuple(v * 1.5 for v in rule(g))
        return nm.reduce_sum(out)

    assert nm.fd_check(wrong, x) > 0.1
    assert nm.fd_check(lambda a: nm.reduce_sum(nm.sigmoid(a)), x) < 1e-6


def test_dtype_follows_precision():
    with nm.precision(np.float32):
        assert Tensor([1.0]).data.dtype == np.float32
    with nm.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64


def test_rng_is_counter_keyed():
    a = nm.make_rng(7, 1).normal(size=4)
    assert np.array_equal(a, nm.make_rng(7, 1).normal(size=4))
    assert not np.array_equal(a, nm.make_rng(7, 2).normal(size=4))
    assert not np.array_equal(a, nm.make_rng(8, 1).normal(size=4))


# ---------------------------------------------------------------- optimizer and schedule


def _store(value, grad=None):
    s = ParamStore()
    with nm.precision(np.float64):
        p = s.add("w", np.asarray(value, dtype=np.float64))
    p.grad = None if grad is None else np.asarray(grad, dtype=np.float64)
    return s


def test_param_store_rejects_duplicates_and_zeroes_moments():
    s = _store([1.0, 2.0])
    with pytest.raises(KeyError):
        s.add("w", [0.0])
    assert not s.exp_avg["w"].any() and not s.exp_avg_sq["w"].any() and s.steps["w"] == 0


def test_adamw_zero_grad_no_decay_is_identity():
    s = _store([1.0, -2.0], [0.0, 0.0])
    nm.adamw_step(s, 1e-3, 0.0)
    np.testing.assert_array_equal(s["w"].data, [1.0, -2.0])
    assert s.steps["w"] == 1


def test_adamw_zero_grad_is_pure_decay():
    s = _store([1.0, -2.0], [0.0, 0.0])
    nm.adamw_step(s, 6e-4, 0.01)
    np.testing.assert_allclose(s["w"].data, np.array([1.0, -2.0]) * (1 - 6e-4 * 0.01), rtol=0, atol=1e-15)


def test_adamw_first_step_closed_form():
    # m_hat = g, v_hat = g^2 after one step, so the update is lr * g / (|g| + eps)
    p0, g, lr, wd, eps = np.array([0.5, -1.0, 2.0]), np.array([0.3, -4.0, 1e-3]), 1e-2, 0.01, 1e-8
    s = _store(p0, g)
    nm.adamw_step(s, lr, wd)
    expected = p0 * (1 - lr * wd) - lr * g / (np.abs(g) + eps)
    np.testing.assert_allclose(s["w"].data, expected, rtol=0, atol=1e-12)


def test_adamw_skips_and_reports_missing_grads():
    s = _store([1.0])
    s.add("v", np.ones(2)).grad = np.ones(2)
    assert nm.adamw_step(s, 1e-3, 0.0) == ["w"]
    assert s.steps == {"w": 0, "v": 1}


def test_cosine_schedule_endpoints():
    assert nm.cosine_lr(0, 100, 6e-4, 1e-6) == pytest.approx(6e-4)
    assert nm.cosine_lr(100, 100, 6e-4, 1e-6) == pytest.approx(1e-6)
    assert nm.cosine_lr(50, 100, 6e-4, 1e-6) == pytest.approx((6e-4 + 1e-6) / 2)
    with pytest.raises(ValueError):
        nm.cosine_lr(0, 0, 6e-4)
    with pytest.raises(ValueError):
        nm.cosine_lr(101, 100, 6e-4)


@given(st.integers(1, 500), st.data())
def test_cosine_schedule_is_monotone(total, data):
    step = data.draw(st.integers(0, total - 1))
    assert nm.cosine_lr(step + 1, total, 1.0, 0.1) <= nm.cosine_lr(step, total, 1.0, 0.1)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    s = ParamStore()
    s.add("a.w", np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32))
    s.add("a.b", np.float32(1.5))
    s.add("c", np.arange(5, dtype=np.float32))
    path = tmp_path / "x.params"
    nm.save_params(s, path)
    raw = path.read_bytes()
    assert raw.startswith(b"VECMAP-PARAMS 1\na.w 3x4 0\na.b scalar 48\nc 5 52\nEND\n")
    back = nm.load_params(path)
    for name, p in s.items():
        np.testing.assert_array_equal(back[name], p.data)
    t = ParamStore()
    t.add("a.w", np.zeros((3, 4)))
    t.add("a.b", np.float64(0))
    t.add("c", np.zeros(5))
    nm.load_into(t, path)
    np.testing.assert_array_equal(t["a.w"].data, s["a.w"].data)


def test_checkpoint_shape_mismatch(tmp_path):
    s = ParamStore()
    s.add("w", np.zeros((2, 2)))
    nm.save_params(s, tmp_path / "w.params")
    t = ParamStore()
    t.add("w", np.zeros(4))
    with pytest.raises(ShapeError):
        nm.load_into(t, tmp_path / "w.params")
    (tmp_path / "junk").write_bytes(b"hello")
    with pytest.raises(ValueError):
        nm.load_params(tmp_path / "junk")
