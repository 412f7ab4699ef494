import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from matres import tensor as T
from matres.gradcheck import GradCase, check_function, default_cases, format_table, run_suite
from matres.optim import AdamW
from matres.params import ParamRegistry, load_weights, save_weights
from matres.tensor import GraphConsumedError, ShapeError, Tensor, backward


def naive_conv(x, w, b):
    c_out, c_in, k, _ = w.shape
    p = k // 2
    _, h, wd = x.shape
    padded = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                acc = b[o]
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            acc += w[o, c, u, v] * padded[c, i + u, j + v]
                out[o, i, j] = acc
    return out


def test_relu_definition():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_matmul_identity(rng):
    a = rng.standard_normal((3, 3))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_conv2d_ramp_matches_loop_oracle():
    with T.default_dtype(np.float64):
        ramp = np.arange(25, dtype=np.float64).reshape(1, 5, 5)
        w = np.full((1, 1, 3, 3), 1 / 9)
        b = np.zeros(1)
        out = T.forward_op("conv2d", Tensor(ramp), Tensor(w), Tensor(b)).data
    assert np.abs(out - naive_conv(ramp, w, b)).max() < 1e-12


def test_nested_loop_oracles_small_inputs(rng):
    with T.default_dtype(np.float64):
        x = rng.standard_normal((3, 9, 7))
        w = rng.standard_normal((2, 3, 3, 3))
        b = rng.standard_normal(2)
        assert np.abs(T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data - naive_conv(x, w, b)).max() < 1e-10
        a, m = rng.standard_normal((4, 6)), rng.standard_normal((6, 5))
        loop = np.array([[sum(a[i, k] * m[k, j] for k in range(6)) for j in range(5)] for i in range(4)])
        assert np.abs(T.matmul(Tensor(a), Tensor(m)).data - loop).max() < 1e-10
        img = rng.standard_normal((2, 8, 6))
        pooled = T.avg_pool(Tensor(img), 2).data
        loop = np.array([[[img[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].mean() for j in range(3)] for i in range(4)]
                         for c in range(2)])
        assert np.abs(pooled - loop).max() < 1e-10


def test_shape_error_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_unknown_forward_op():
    with pytest.raises(ValueError, match="unknown op"):
        T.forward_op("softplus", Tensor([1.0]))


def test_backward_square():
    x = Tensor(np.array(3.0), requires_grad=True)
    backward(T.mul(x, x))
    assert float(x.grad) == 6.0


def test_frozen_parameter_excluded_from_gradient_map():
    reg = ParamRegistry()
    w = reg.register("w", np.array(2.0), trainable=False)
    a = reg.register("a", np.array(5.0), trainable=True)
    grads = backward(T.mul(w, a))
    assert set(grads) == {"a"}
    assert float(grads["a"]) == 2.0


def test_frozen_only_graph_gives_empty_map():
    reg = ParamRegistry()
    w = reg.register("w", np.array([1.0, 2.0]), trainable=False)
    assert backward(T.tsum(T.square(w))) == {}


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(T.mul(x, 2.0))


def test_second_backward_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    root = T.tsum(T.square(x))
    backward(root)
    with pytest.raises(GraphConsumedError):
        backward(root)


def test_every_op_passes_finite_differences():
    results = run_suite()
    assert {r.op for r in results} >= {"add", "mul", "matmul", "conv2d", "relu", "avg_pool", "l2_normalize",
                                       "bilinear_resize_up", "grid_sample"}
    bad = [r for r in results if not r.passed]
    assert not bad, format_table(bad)


def test_suite_reports_planted_wrong_gradient():
    def broken(x):
        out = T.square(x)
        out._backward = lambda g: (g * 3.0 * x.data,)  # wrong: should be 2x
        return out

    results = run_suite([GradCase("broken_square", broken, lambda r: [r.standard_normal((3, 2))], seed=5)])
    assert len(results) == 1 and not results[0].passed
    table = format_table(results)
    assert "broken_square" in table and "FAIL" in table and "    5" in table


def test_suite_records_crashing_op():
    def crash(x):
        raise RuntimeError("boom")

    (res,) = run_suite([GradCase("crash", crash, lambda r: [np.ones(2)])])
    assert not res.passed and "boom" in res.detail


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(-3, 3, allow_nan=False)))
def test_add_mul_gradients_property(a):
    err = check_function(lambda x, y: T.mul(T.add(x, y), y), [a, np.cos(a) + 2.0])
    assert err < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(1, 7), st.integers(1, 7), st.integers(0, 1000))
def test_bilinear_resize_gradient_property(h, w, oh, ow, seed):
    x = np.random.default_rng(seed).standard_normal((2, h, w))
    assert check_function(lambda t: T.bilinear_resize(t, (oh, ow)), [x], seed=seed) < 1e-6


def test_adamw_zero_gradient_no_decay_is_fixed_point():
    reg = ParamRegistry()
    p = reg.register("p", np.array([1.0, -2.0]), trainable=True)
    opt = AdamW([p], weight_decay=0.0)
    opt.step({"p": np.zeros(2)})
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adamw_decay_without_grad():
    with T.default_dtype(np.float64):
        reg = ParamRegistry()
        p = reg.register("p", np.array(1.0), trainable=True)
        q = reg.register("q", np.array(1.0), trainable=True)
    AdamW([p], lr=0.001, weight_decay=0.01, decay_without_grad=True).step({})
    assert float(p.data) == pytest.approx(0.99999, abs=1e-15)
    AdamW([q], lr=0.001, weight_decay=0.01).step({})
    assert float(q.data) == 1.0


def test_adamw_first_step_matches_scalar_reference():
    with T.default_dtype(np.float64):
        p = ParamRegistry().register("p", np.array(0.0), trainable=True)
    AdamW([p], lr=0.001, weight_decay=0.01).step({"p": np.array(1.0)})
    m_hat, v_hat = 0.1 / 0.1, 0.001 / 0.001
    assert float(p.data) == pytest.approx(-0.001 * m_hat / (np.sqrt(v_hat) + 1e-8), abs=1e-15)


def test_adamw_rejects_frozen_and_bad_shapes():
    reg = ParamRegistry()
    f = reg.register("f", np.zeros(2), trainable=False)
    with pytest.raises(ValueError, match="frozen"):
        AdamW([f])
    p = reg.register("p", np.zeros(2), trainable=True)
    with pytest.raises(ShapeError):
        AdamW([p]).step({"p": np.zeros(3)})


def test_frozen_values_bit_identical_across_steps(rng):
    reg = ParamRegistry()
    w = reg.register("w", rng.standard_normal((3, 3)), trainable=False)
    a = reg.register("a", rng.standard_normal((3, 1)), trainable=True)
    before = w.data.copy()
    opt = AdamW(reg.trainable())
    for _ in range(5):
        opt.step(backward(T.tsum(T.square(T.matmul(w, a)))))
    assert np.array_equal(w.data, before)


def test_weights_roundtrip_and_digest(tmp_path, rng):
    reg = ParamRegistry()
    reg.register("a.w", rng.standard_normal((2, 3)).astype(np.float32))
    reg.register("b", rng.standard_normal(4).astype(np.float32))
    save_weights(reg.arrays(), tmp_path / "m", {"kind": "test"})
    arrays, meta = load_weights(tmp_path / "m")
    assert meta["kind"] == "test"
    assert ParamRegistry.from_arrays(arrays).digest() == reg.digest()
    for name, arr in reg.arrays().items():
        assert np.array_equal(arrays[name], arr)
