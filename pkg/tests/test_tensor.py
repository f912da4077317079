"""
Tests for the tensor core: tape recording, broadcasting gradients, losses,
finite-difference checks and the Adam optimizer.
"""
import numpy as np
import pytest

from clinical_lm.errors import ClinicalLMError, NumericalError, ShapeError
from clinical_lm.tensor import (
    Adam,
    Tape,
    Tensor,
    WarmupConstantSchedule,
    adam_step,
    concat,
    cross_entropy,
    div,
    embedding_lookup,
    gelu,
    get_default_dtype,
    init_adam_state,
    layer_norm,
    matmul,
    mse,
    no_grad,
    reshape,
    set_default_dtype,
    slice_,
    softmax,
    softmax_cross_entropy,
    tanh,
    transpose,
)
from clinical_lm.tensor.gradcheck import check_gradients, relative_error


def _param(shape, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=shape), requires_grad=True)


@pytest.mark.unit
class TestTape:
    def test_records_ops_in_order(self):
        a = _param((2, 3))
        with Tape() as tape:
            out = (a * 2.0 + 1.0).sum()
        assert tape.ops == ["mul", "add", "sum"]
        assert out.requires_grad

    def test_no_grad_records_nothing(self):
        a = _param((2, 2))
        with Tape() as tape:
            with no_grad():
                out = matmul(a, a)
        assert len(tape) == 0
        assert not out.requires_grad

    def test_detached_tensor_is_not_recorded(self):
        a = _param((2, 2))
        with Tape() as tape:
            out = (a.detach() * 3.0).sum()
        assert len(tape) == 0
        assert not out.requires_grad

    def test_broadcast_gradient_is_summed_back(self):
        a = _param((2, 3))
        b = _param((3,), seed=1)
        with Tape() as tape:
            loss = (a + b).sum()
        tape.backward(loss)
        np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])
        np.testing.assert_allclose(a.grad, np.ones((2, 3)))

    def test_gradients_accumulate_across_backward_calls(self):
        a = _param((3,))
        for _ in range(2):
            with Tape() as tape:
                loss = (a * 3.0).sum()
            tape.backward(loss)
        np.testing.assert_allclose(a.grad, [6.0, 6.0, 6.0])

    def test_backward_requires_scalar(self):
        a = _param((2,))
        with Tape() as tape:
            out = a * 2.0
        with pytest.raises(ShapeError):
            tape.backward(out)

    def test_backward_rejects_leaf(self):
        with pytest.raises(ClinicalLMError):
            Tape().backward(Tensor(1.0, requires_grad=True))

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ShapeError):
            _param((2, 3)) + _param((4,))
        with pytest.raises(ShapeError):
            matmul(_param((2, 3)), _param((2, 3)))


@pytest.mark.unit
class TestDefaultDtype:
    def test_float32_by_default(self):
        assert get_default_dtype() is np.float32
        assert Tensor([1, 2]).dtype == np.float32

    def test_float64_fixture(self, float64):
        assert Tensor([1, 2]).dtype == np.float64

    def test_rejects_half_precision(self):
        with pytest.raises(ClinicalLMError) as exc:
            set_default_dtype("float16")
        assert exc.value.error_key == "config"


@pytest.mark.unit
class TestLosses:
    def test_softmax_rows_sum_to_one(self):
        p = softmax(Tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(p.data.sum(axis=-1), [1.0, 1.0], rtol=1e-6)
        np.testing.assert_allclose(p.data[1], [1 / 3] * 3, rtol=1e-6)

    def test_cross_entropy_on_probabilities(self, float64):
        t = np.array([0.0, 1.0, 0.0, 0.0])
        assert cross_entropy(Tensor(t), t).item() == pytest.approx(0.0)
        assert cross_entropy(Tensor(np.full(4, 0.25)), t).item() == pytest.approx(np.log(4.0), abs=1e-12)

    def test_softmax_then_cross_entropy_gradient(self, float64):
        logits = _param((2, 4))
        t = np.array([[0.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
        with Tape() as tape:
            loss = cross_entropy(softmax(logits), t)
        tape.backward(loss)
        p = softmax(Tensor(logits.data)).data
        np.testing.assert_allclose(logits.grad, (p - t) / 2, atol=1e-10)

    @pytest.mark.parametrize("target", [[0.5, 0.5, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    def test_cross_entropy_needs_one_hot(self, target):
        with pytest.raises(ShapeError):
            cross_entropy(Tensor(np.full(3, 1 / 3)), target)

    def test_cross_entropy_ignores_masked_rows(self, float64):
        logits = _param((3, 4))
        with Tape() as tape:
            loss = softmax_cross_entropy(logits, np.array([1, -100, 2]))
        tape.backward(loss)
        log_p = logits.data - np.log(np.exp(logits.data).sum(axis=-1, keepdims=True))
        expected = -(log_p[0, 1] + log_p[2, 2]) / 2
        assert loss.item() == pytest.approx(expected)
        np.testing.assert_allclose(logits.grad[1], np.zeros(4))

    def test_cross_entropy_gradient_is_p_minus_t(self, float64):
        logits = _param((1, 5))
        with Tape() as tape:
            loss = softmax_cross_entropy(logits, np.array([3]), reduction="sum")
        tape.backward(loss)
        p = softmax(Tensor(logits.data)).data
        t = np.zeros((1, 5))
        t[0, 3] = 1.0
        np.testing.assert_allclose(logits.grad, p - t, atol=1e-12)

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(ShapeError):
            softmax_cross_entropy(_param((2, 3)), np.array([0, 3]))

    def test_mse(self):
        assert mse(Tensor([1.0, 3.0]), [0.0, 1.0]).item() == pytest.approx(2.5)


@pytest.mark.unit
class TestGradcheck:
    def test_relative_error_of_equal_arrays_is_zero(self):
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0

    def test_dense_block(self, float64):
        params = {
            "x": _param((2, 3, 4)),
            "w": _param((4, 5), seed=1),
            "gamma": _param((5,), seed=2),
            "beta": _param((5,), seed=3),
        }

        def fn():
            h = gelu(matmul(params["x"], params["w"]))
            h = layer_norm(h, params["gamma"], params["beta"])
            return tanh(h).sum()

        errors = check_gradients(fn, params, n_points=6)
        assert max(errors.values()) < 1e-6

    def test_softmax_and_concat(self, float64):
        params = {"a": _param((2, 3)), "b": _param((2, 2), seed=1)}
        targets = np.array([4, 0])

        def fn():
            return softmax_cross_entropy(concat([params["a"], params["b"]], axis=-1), targets)

        errors = check_gradients(fn, params)
        assert max(errors.values()) < 1e-6


def _fixed(shape, rng):
    return Tensor(rng.normal(size=shape))


def _one_hot(rows, classes, rng):
    t = np.zeros((rows, classes))
    t[np.arange(rows), rng.integers(0, classes, size=rows)] = 1.0
    return t


def _transpose_case(rng):
    params = {"x": Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)}
    w = _fixed((4, 2, 3), rng)
    return params, lambda: (transpose(params["x"], (2, 0, 1)) * w).sum()


def _reshape_case(rng):
    params = {"x": Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)}
    w = _fixed((4, 6), rng)
    return params, lambda: (reshape(params["x"], (4, 6)) * w).sum()


def _slice_case(rng):
    params = {"x": Tensor(rng.normal(size=(3, 5)), requires_grad=True)}
    index = (np.array([0, 2, 0]), slice(1, 4))
    w = _fixed((3, 3), rng)
    return params, lambda: (slice_(params["x"], index) * w).sum()


def _embedding_case(rng):
    params = {"table": Tensor(rng.normal(size=(6, 4)), requires_grad=True)}
    ids = np.array([[1, 3, 1], [5, 0, 3]])
    w = _fixed((2, 3, 4), rng)
    return params, lambda: (embedding_lookup(params["table"], ids) * w).sum()


def _div_case(rng):
    params = {
        "a": Tensor(rng.normal(size=(3, 4)), requires_grad=True),
        "b": Tensor(rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4)), requires_grad=True),
    }
    return params, lambda: div(params["a"], params["b"]).sum()


def _mse_case(rng):
    params = {"pred": Tensor(rng.normal(size=(4, 3)), requires_grad=True)}
    target = rng.normal(size=(4, 3))
    return params, lambda: mse(params["pred"], target)


def _softmax_case(rng):
    params = {"x": Tensor(rng.normal(size=(3, 5)), requires_grad=True)}
    w = _fixed((3, 5), rng)
    return params, lambda: (softmax(params["x"]) * w).sum()


def _layer_norm_case(rng):
    params = {
        "x": Tensor(rng.normal(size=(3, 6)), requires_grad=True),
        "gamma": Tensor(rng.normal(size=(6,)), requires_grad=True),
        "beta": Tensor(rng.normal(size=(6,)), requires_grad=True),
    }
    w = _fixed((3, 6), rng)
    return params, lambda: (layer_norm(params["x"], params["gamma"], params["beta"]) * w).sum()


def _gelu_case(rng):
    params = {"x": Tensor(rng.normal(size=(4, 5)) * 2.0, requires_grad=True)}
    w = _fixed((4, 5), rng)
    return params, lambda: (gelu(params["x"]) * w).sum()


def _matmul_case(rng):
    params = {
        "a": Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True),
        "b": Tensor(rng.normal(size=(4, 5)), requires_grad=True),
    }
    w = _fixed((2, 3, 5), rng)
    return params, lambda: (matmul(params["a"], params["b"]) * w).sum()


def _cross_entropy_case(rng):
    params = {"p": Tensor(rng.uniform(0.2, 1.0, size=(4, 5)), requires_grad=True)}
    target = _one_hot(4, 5, rng)
    return params, lambda: cross_entropy(params["p"], target)


def _softmax_cross_entropy_case(rng):
    params = {"logits": Tensor(rng.normal(size=(4, 5)), requires_grad=True)}
    labels = rng.integers(0, 5, size=4)
    return params, lambda: softmax_cross_entropy(params["logits"], labels)


PRIMITIVE_CASES = {
    "transpose": _transpose_case,
    "reshape": _reshape_case,
    "slice": _slice_case,
    "embedding_lookup": _embedding_case,
    "div": _div_case,
    "mse": _mse_case,
    "softmax": _softmax_case,
    "layer_norm": _layer_norm_case,
    "gelu": _gelu_case,
    "matmul": _matmul_case,
    "cross_entropy": _cross_entropy_case,
    "softmax_cross_entropy": _softmax_cross_entropy_case,
}


@pytest.mark.unit
class TestPrimitiveGradients:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("op", sorted(PRIMITIVE_CASES))
    def test_matches_central_differences(self, float64, op, seed):
        rng = np.random.default_rng(seed)
        params, fn = PRIMITIVE_CASES[op](rng)
        errors = check_gradients(fn, params, n_points=8, rng=np.random.default_rng(seed + 100))
        assert max(errors.values()) < 1e-6

    def test_cross_entropy_matches_direct_sum(self, float64):
        rng = np.random.default_rng(11)
        probs = rng.dirichlet(np.ones(10), size=1000)
        targets = _one_hot(1000, 10, rng)
        direct = -(targets * np.log(probs)).sum(axis=-1)
        for p, t, expected in zip(probs, targets, direct):
            assert cross_entropy(Tensor(p), t).item() == pytest.approx(expected, rel=1e-10, abs=1e-10)
        batched = cross_entropy(Tensor(probs), targets).item()
        assert batched == pytest.approx(direct.mean(), rel=1e-10)


@pytest.mark.unit
class TestAdam:
    def test_warmup_schedule(self):
        schedule = WarmupConstantSchedule(lr=1e-3, warmup_steps=4)
        assert schedule(0) == pytest.approx(2.5e-4)
        assert schedule(3) == pytest.approx(1e-3)
        assert schedule(100) == pytest.approx(1e-3)

    def test_first_step_moves_by_lr(self, float64):
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        state = init_adam_state({"p": p})
        adam_step({"p": p}, {"p": np.array([0.5, -2.0])}, state, lr=0.1)
        # bias-corrected first step is lr * sign(g)
        np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)
        assert state.step == 1

    def test_non_finite_gradient_leaves_params_untouched(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        q = Tensor(np.array([3.0]), requires_grad=True)
        state = init_adam_state({"p": p, "q": q})
        with pytest.raises(NumericalError) as exc:
            adam_step({"p": p, "q": q}, {"p": np.array([0.1, 0.1]), "q": np.array([np.nan])}, state, lr=0.1)
        assert exc.value.step == 1
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        assert state.step == 0

    def test_optimizer_reduces_quadratic(self, float64):
        w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = Adam({"w": w}, WarmupConstantSchedule(lr=0.1, warmup_steps=0))
        for _ in range(300):
            opt.zero_grad()
            with Tape() as tape:
                loss = (w * w).sum()
            tape.backward(loss)
            opt.step()
        assert np.abs(w.data).max() < 0.2
