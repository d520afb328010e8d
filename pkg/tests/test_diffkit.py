"""Primitive kernels: hand-derived values, finite differences, Adam, codec."""

import numpy as np
import pytest

from deformkit.diffkit import (
    EmptyGroupError,
    GradCheckResult,
    KinkProximityError,
    NonFiniteError,
    Param,
    ParamStore,
    ShapeMismatchError,
    activation_backward,
    activation_forward,
    adam_step,
    decode_checkpoint,
    encode_checkpoint,
    grad_check,
    hadamard_backward,
    hadamard_forward,
    linear_backward,
    linear_forward,
    load_checkpoint,
    pool_backward,
    pool_forward,
    save_checkpoint,
    softmax_cross_entropy,
)

EPS = 1e-6
TOL = 1e-5


def linear_op(inputs):
    x, w, b = inputs
    out, cache = linear_forward(x, w, b)

    def vjp(g):
        gx, gw, gb = linear_backward(g, cache)
        return [gx, gw, gb]

    return out, vjp


def activation_op(kind):
    def op(inputs):
        out, cache = activation_forward(kind, inputs[0])
        return out, lambda g: [activation_backward(g, cache)]

    return op


def hadamard_op(inputs):
    out, cache = hadamard_forward(*inputs)
    return out, lambda g: list(hadamard_backward(g, cache))


def pool_op(kind, groups):
    def op(inputs):
        out, cache = pool_forward(kind, groups, inputs[0])
        return out, lambda g: [pool_backward(g, cache)]

    return op


class TestLinear:
    def test_identity_weight(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        out, _ = linear_forward(x, np.eye(3))
        assert np.array_equal(out, x)

    def test_zero_weight_constant_bias(self):
        x = np.ones((5, 3))
        b = np.array([2.0, -1.0])
        out, _ = linear_forward(x, np.zeros((2, 3)), b)
        assert np.array_equal(out, np.tile(b, (5, 1)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            linear_forward(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_gradients_match_finite_differences(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            inputs = [
                rng.standard_normal((2, 3)),
                rng.standard_normal((4, 3)),
                rng.standard_normal(4),
            ]
            res = grad_check(linear_op, inputs, eps=EPS, tolerance=TOL, seed=seed)
            assert res.passed, res


class TestActivations:
    def test_sigmoid_at_zero(self):
        out, _ = activation_forward("sigmoid", np.array([[0.0]]))
        assert out[0, 0] == 0.5

    def test_relu_dead_region(self):
        out, cache = activation_forward("relu", np.array([[-1.0]]))
        assert out[0, 0] == 0.0
        assert activation_backward(np.array([[1.0]]), cache)[0, 0] == 0.0

    def test_relu_prime_at_zero_is_zero(self):
        _, cache = activation_forward("relu", np.array([[0.0]]))
        assert activation_backward(np.array([[1.0]]), cache)[0, 0] == 0.0

    def test_tanh_reference_value(self):
        out, _ = activation_forward("tanh", np.array([[0.5]]))
        assert abs(out[0, 0] - 0.462117) < 5e-7

    @pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid"])
    def test_gradients_match_finite_differences(self, kind):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            # keep relu inputs away from its kink at 0
            x = rng.uniform(0.1, 2.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
            kink = (lambda ins: float(np.min(np.abs(ins[0])))) if kind == "relu" else None
            res = grad_check(
                activation_op(kind), [x], eps=EPS, tolerance=TOL, seed=seed,
                kink_distance=kink, name=kind,
            )
            assert res.passed, res


class TestHadamard:
    def test_ones_identity(self):
        a = np.random.default_rng(1).standard_normal((3, 3))
        out, _ = hadamard_forward(a, np.ones((3, 3)))
        assert np.array_equal(out, a)

    def test_zeros_annihilate(self):
        a = np.random.default_rng(2).standard_normal((3, 3))
        out, _ = hadamard_forward(a, np.zeros((3, 3)))
        assert np.array_equal(out, np.zeros((3, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            hadamard_forward(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_gradients_match_finite_differences(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            inputs = [rng.standard_normal((3, 5)), rng.standard_normal((3, 5))]
            res = grad_check(hadamard_op, inputs, eps=EPS, tolerance=TOL, seed=seed)
            assert res.passed, res


class TestPool:
    def test_mean_arithmetic(self):
        feats = np.array([[1.0], [3.0]])
        out, _ = pool_forward("mean", [np.array([0, 1])], feats)
        assert out[0, 0] == 2.0

    def test_max_singleton_passes_gradient_through(self):
        feats = np.array([[2.0, -1.0], [9.0, 9.0]])
        out, cache = pool_forward("max", [np.array([0])], feats)
        assert np.array_equal(out, [[2.0, -1.0]])
        grad = pool_backward(np.array([[0.5, 0.25]]), cache)
        assert np.array_equal(grad, [[0.5, 0.25], [0.0, 0.0]])

    def test_empty_group_requires_fallback(self):
        feats = np.zeros((2, 2))
        with pytest.raises(EmptyGroupError):
            pool_forward("mean", [np.array([], dtype=int)], feats)
        out, _ = pool_forward("max", [np.array([], dtype=int)], feats, allow_empty=True)
        assert np.array_equal(out, np.zeros((1, 2)))

    def test_max_tie_routes_to_lowest_index(self):
        feats = np.array([[1.0], [1.0], [0.0]])
        _, cache = pool_forward("max", [np.array([1, 0])], feats)
        grad = pool_backward(np.array([[1.0]]), cache)
        assert np.array_equal(grad, [[1.0], [0.0], [0.0]])

    def test_max_gradient_hits_exactly_one_row_per_component(self):
        rng = np.random.default_rng(21)
        feats = rng.standard_normal((10, 4))
        groups = [np.array([0, 3, 5]), np.array([1, 2, 7, 9])]
        _, cache = pool_forward("max", groups, feats)
        grad = pool_backward(np.ones((2, 4)), cache)
        for g in groups:
            assert np.count_nonzero(grad[g], axis=0).tolist() == [1, 1, 1, 1]

    def test_permutation_of_group_listing_is_bit_identical(self):
        rng = np.random.default_rng(22)
        feats = rng.standard_normal((8, 3))
        fwd = lambda order: pool_forward("mean", [np.array(order)], feats)[0]
        assert np.array_equal(fwd([5, 1, 7, 2]), fwd([2, 7, 1, 5]))

    @pytest.mark.parametrize("kind", ["mean", "max"])
    def test_gradients_match_finite_differences(self, kind):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            feats = rng.standard_normal((12, 4))
            groups = [
                rng.choice(12, size=int(rng.integers(1, 6)), replace=False)
                for _ in range(4)
            ]
            res = grad_check(
                pool_op(kind, groups), [feats], eps=EPS, tolerance=TOL, seed=seed
            )
            assert res.passed, res


class TestSoftmaxCrossEntropy:
    def test_uniform_scores_give_log4(self):
        loss, _ = softmax_cross_entropy(np.zeros((6, 4)), np.zeros(6, dtype=int))
        assert abs(loss - np.log(4.0)) < 1e-12

    def test_confident_logits_drive_loss_to_zero(self):
        prev = np.inf
        for margin in (2.0, 5.0, 10.0, 20.0):
            scores = np.full((1, 4), -margin)
            scores[0, 2] = margin
            loss, _ = softmax_cross_entropy(scores, np.array([2]))
            assert loss < prev
            prev = loss
        assert prev < 1e-8

    def test_gradient_matches_finite_differences(self):
        targets = np.array([0, 3, 1])

        def op(inputs):
            loss, grad = softmax_cross_entropy(inputs[0], targets)
            return np.array([loss]), lambda g: [g[0] * grad]

        for seed in range(20):
            rng = np.random.default_rng(seed)
            res = grad_check(op, [rng.standard_normal((3, 4))], eps=EPS, tolerance=TOL, seed=seed)
            assert res.passed, res

    def test_nonfinite_scores_rejected(self):
        with pytest.raises(NonFiniteError):
            softmax_cross_entropy(np.array([[np.nan, 0, 0, 0]]), np.array([0]))


class TestAdam:
    def test_first_step_delta_hand_case(self):
        store = ParamStore(seed=0)
        p = store.add_bias("w", 3)
        p.grad[...] = 1.0
        adam_step(store, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8)
        expected = -0.001 * (1.0 / (1.0 + 1e-8))
        assert np.allclose(p.value, expected, rtol=0, atol=1e-15)

    def test_zero_grad_keeps_values_but_counts_step(self):
        store = ParamStore(seed=0)
        p = store.add_weight("w", 2, 2)
        before = p.value.copy()
        adam_step(store)
        assert np.array_equal(p.value, before)
        assert p.step == 1

    def test_identical_stores_step_identically(self):
        def build():
            s = ParamStore(seed=42)
            s.add_weight("a", 3, 2)
            s.add_bias("b", 2)
            return s

        s1, s2 = build(), build()
        for s in (s1, s2):
            s["a"].grad[...] = 0.3
            s["b"].grad[...] = -0.1
            adam_step(s, lr=0.01)
        assert np.array_equal(s1["a"].value, s2["a"].value)
        assert np.array_equal(s1["b"].value, s2["b"].value)

    def test_grads_zeroed_after_step(self):
        store = ParamStore(seed=0)
        p = store.add_weight("w", 2, 2)
        p.grad[...] = 5.0
        adam_step(store)
        assert np.array_equal(p.grad, np.zeros((2, 2)))


class TestParamStore:
    def test_init_reproducible_from_seed(self):
        a = ParamStore(seed=7)
        b = ParamStore(seed=7)
        wa = a.add_weight("w", 5, 3).value
        wb = b.add_weight("w", 5, 3).value
        assert np.array_equal(wa, wb)

    def test_weight_bound_is_variance_preserving(self):
        store = ParamStore(seed=1)
        w = store.add_weight("w", 50, 30).value
        bound = np.sqrt(6.0 / 80.0)
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.8 * bound

    def test_duplicate_name_rejected(self):
        store = ParamStore(seed=0)
        store.add_bias("b", 2)
        with pytest.raises(ValueError):
            store.add_bias("b", 2)


class TestGradCheckHarness:
    def test_passes_on_correct_linear(self):
        rng = np.random.default_rng(0)
        inputs = [rng.standard_normal((2, 3)), rng.standard_normal((4, 3)), rng.standard_normal(4)]
        res = grad_check(linear_op, inputs, eps=1e-6, tolerance=1e-5)
        assert res.passed and res.max_rel_err < 1e-8

    def test_kink_proximity_guard(self):
        x = np.array([[0.0, 1.0]])
        with pytest.raises(KinkProximityError):
            grad_check(
                activation_op("relu"), [x],
                kink_distance=lambda ins: float(np.min(np.abs(ins[0]))),
            )

    def test_corrupted_backward_fails(self):
        def corrupted(inputs):
            out, cache = linear_forward(*inputs)

            def vjp(g):
                gx, gw, gb = linear_backward(g, cache)
                gw = gw.copy()
                gw.flat[0] *= 1.10
                return [gx, gw, gb]

            return out, vjp

        rng = np.random.default_rng(3)
        inputs = [rng.standard_normal((2, 3)), rng.standard_normal((4, 3)), rng.standard_normal(4)]
        res = grad_check(corrupted, inputs, eps=1e-6, tolerance=1e-5)
        assert not res.passed


class TestCheckpointCodec:
    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(5)
        values = {
            "head.w": rng.standard_normal((4, 8)),
            "enc.b": rng.standard_normal(8),
            "align.w": rng.standard_normal((3, 4)),
        }
        blob = encode_checkpoint(values)
        back = decode_checkpoint(blob)
        assert set(back) == set(values)
        for name in values:
            assert np.array_equal(back[name], values[name])
        assert encode_checkpoint(back) == blob

    def test_store_roundtrip_via_file(self, tmp_path):
        store = ParamStore(seed=9)
        store.add_weight("w", 6, 2)
        store.add_bias("b", 6)
        path = tmp_path / "model.dckpt"
        save_checkpoint(store, path)
        other = ParamStore(seed=123)
        other.add_weight("w", 6, 2)
        other.add_bias("b", 6)
        load_checkpoint(other, path)
        assert np.array_equal(other["w"].value, store["w"].value)
        assert np.array_equal(other["b"].value, store["b"].value)

    def test_name_mismatch_rejected(self, tmp_path):
        store = ParamStore(seed=0)
        store.add_bias("b", 2)
        path = tmp_path / "model.dckpt"
        save_checkpoint(store, path)
        other = ParamStore(seed=0)
        other.add_bias("c", 2)
        with pytest.raises(KeyError):
            load_checkpoint(other, path)

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError):
            decode_checkpoint(b"NOPE" + b"\x00" * 16)
