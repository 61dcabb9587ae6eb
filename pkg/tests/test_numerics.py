"""Autodiff core: forward oracles, gradient checks, RNG streams, parameters."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polyfuse import (
    ConfigError,
    MemoryProbe,
    NumericError,
    ParamStore,
    ShapeError,
    Tensor,
    conv1d,
    cross_entropy_with_logits,
    dropout,
    grad_check,
    layer_norm,
    linear,
    matmul,
    no_grad,
    relu,
    softmax_rows,
)
from polyfuse.numerics import (
    STREAM_BATCH,
    STREAM_INIT,
    add,
    concat,
    keyed_generator,
    mean_axis,
    mul,
    reduce_sum,
    reshape,
    scale,
    transpose,
)


def t(data, grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# Forward oracles
# ---------------------------------------------------------------------------


class TestMatmul:
    def test_identity_times_identity(self):
        eye = t(np.eye(2))
        np.testing.assert_array_equal(matmul(eye, eye).data, np.eye(2))

    def test_hand_case(self):
        a = t([[1.0, 2.0], [3.0, 4.0]])
        b = t([[1.0], [1.0]])
        np.testing.assert_array_equal(matmul(a, b).data, [[3.0], [7.0]])

    def test_against_triple_loop(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        got = matmul(t(a), t(b)).data
        np.testing.assert_allclose(got, expected, atol=1e-12, rtol=0)

    def test_batched_leading_dims(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 5))
        got = matmul(t(a), t(b)).data
        np.testing.assert_allclose(got, a @ b, atol=0, rtol=0)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(t(np.ones((2, 3))), t(np.ones((4, 2))))

    def test_leading_dim_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(t(np.ones((2, 3, 4))), t(np.ones((3, 4, 5))))

    def test_rejects_vectors(self):
        with pytest.raises(ShapeError):
            matmul(t(np.ones(3)), t(np.ones((3, 2))))


class TestSoftmax:
    def test_uniform_row(self):
        out = softmax_rows(t([0.0, 0.0, 0.0])).data
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)

    def test_large_logit_no_overflow(self):
        out = softmax_rows(t([1000.0, 0.0])).data
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)
        assert np.isfinite(out).all()

    def test_against_exp_sum_oracle(self, rng):
        x = rng.standard_normal((4, 6))
        expected = np.exp(x) / np.exp(x).sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(softmax_rows(t(x)).data, expected, atol=1e-12, rtol=0)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    def test_rows_are_distributions(self, row):
        out = softmax_rows(Tensor(np.asarray(row, dtype=np.float64))).data
        assert out.min() >= 0.0
        assert abs(out.sum() - 1.0) < 1e-9


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        # Variance 0: eps keeps the division finite, output collapses to bias.
        out = layer_norm(t([5.0, 5.0, 5.0, 5.0]), t(np.ones(4)), t(np.zeros(4))).data
        np.testing.assert_allclose(out, np.zeros(4), atol=1e-12)

    def test_standardizes_random_input(self, rng):
        x = rng.standard_normal((3, 32)) * 4.0 + 7.0
        out = layer_norm(t(x), t(np.ones(32)), t(np.zeros(32))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_zero_gain_returns_bias(self, rng):
        x = rng.standard_normal((5,))
        bias = np.arange(5.0)
        out = layer_norm(t(x), t(np.zeros(5)), t(bias)).data
        np.testing.assert_array_equal(out, bias)

    def test_affine_shape_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(t(np.ones((2, 4))), t(np.ones(3)), t(np.zeros(3)))

    def test_eps_must_be_positive(self):
        with pytest.raises(ConfigError):
            layer_norm(t(np.ones(4)), t(np.ones(4)), t(np.zeros(4)), eps=0.0)


class TestConv1d:
    def test_width_one_identity_kernel(self, rng):
        x = rng.standard_normal((3, 7))
        kernels = np.eye(3)[:, :, None]  # (C_out=3, C_in=3, k=1)
        out = conv1d(t(x), t(kernels), t(np.zeros(3))).data
        np.testing.assert_allclose(out, x, atol=0, rtol=0)

    def test_parameter_count_formula(self):
        # C_in=1, C_out=30, k=3 plus a bias per output channel.
        kernels = np.zeros((30, 1, 3))
        bias = np.zeros(30)
        assert kernels.size + bias.size == 120

    def test_against_sliding_window_oracle(self, rng):
        b, c_in, c_out, timesteps, k = 2, 3, 4, 9, 3
        x = rng.standard_normal((b, c_in, timesteps))
        kernels = rng.standard_normal((c_out, c_in, k))
        bias = rng.standard_normal(c_out)
        pad = (k - 1) // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
        expected = np.zeros((b, c_out, timesteps))
        for bi in range(b):
            for o in range(c_out):
                for ti in range(timesteps):
                    acc = bias[o]
                    for i in range(c_in):
                        for j in range(k):
                            acc += xp[bi, i, ti + j] * kernels[o, i, j]
                    expected[bi, o, ti] = acc
        got = conv1d(t(x), t(kernels), t(bias)).data
        np.testing.assert_allclose(got, expected, atol=1e-12, rtol=0)

    def test_unbatched_input(self, rng):
        x = rng.standard_normal((2, 5))
        kernels = rng.standard_normal((4, 2, 3))
        bias = rng.standard_normal(4)
        single = conv1d(t(x), t(kernels), t(bias)).data
        batched = conv1d(t(x[None]), t(kernels), t(bias)).data
        assert single.shape == (4, 5)
        np.testing.assert_array_equal(single, batched[0])

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            conv1d(t(np.ones((1, 4))), t(np.ones((2, 1, 2))), t(np.zeros(2)))

    def test_bias_shape_rejected(self):
        with pytest.raises(ShapeError):
            conv1d(t(np.ones((1, 4))), t(np.ones((2, 1, 3))), t(np.zeros(3)))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            conv1d(t(np.ones((3, 4))), t(np.ones((2, 1, 3))), t(np.zeros(2)))


class TestPointwise:
    def test_relu_negative_and_positive(self):
        out = relu(t([-2.0, -0.5, 0.0, 0.5, 2.0])).data
        np.testing.assert_array_equal(out, [0.0, 0.0, 0.0, 0.5, 2.0])

    def test_linear_formula(self, rng):
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal((3, 5))
        b = rng.standard_normal(5)
        got = linear(t(x), t(w), t(b)).data
        np.testing.assert_allclose(got, x @ w + b, atol=1e-12, rtol=0)

    def test_linear_weight_mismatch(self):
        with pytest.raises(ShapeError):
            linear(t(np.ones((2, 3))), t(np.ones((4, 5))))

    def test_cross_entropy_uniform_logits(self):
        loss = cross_entropy_with_logits(t(np.zeros((5, 3))), np.zeros(5, dtype=np.int64))
        assert abs(loss.item() - math.log(3)) < 1e-12

    def test_cross_entropy_label_validation(self):
        logits = t(np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            cross_entropy_with_logits(logits, np.array([0.0, 1.0]))
        with pytest.raises(ShapeError):
            cross_entropy_with_logits(logits, np.array([0, 3]))
        with pytest.raises(ShapeError):
            cross_entropy_with_logits(logits, np.array([0]))


class TestDropout:
    def test_rate_zero_is_identity(self, rng):
        x = t(rng.standard_normal((3, 4)))
        assert dropout(x, 0.0, True) is x

    def test_eval_mode_is_identity(self, rng):
        x = t(rng.standard_normal((3, 4)))
        assert dropout(x, 0.5, False) is x

    def test_same_key_same_mask(self, rng):
        x = t(rng.standard_normal((8, 8)))
        a = dropout(x, 0.4, True, seed=3, op_id=7, step=2).data
        b = dropout(x, 0.4, True, seed=3, op_id=7, step=2).data
        np.testing.assert_array_equal(a, b)

    def test_different_step_different_mask(self, rng):
        x = t(np.ones((16, 16)))
        a = dropout(x, 0.4, True, seed=3, op_id=7, step=0).data
        b = dropout(x, 0.4, True, seed=3, op_id=7, step=1).data
        assert not np.array_equal(a, b)

    def test_inverted_scaling(self):
        # Kept entries are scaled by 1/(1-p) so the expectation is preserved.
        x = t(np.ones((200, 200)))
        out = dropout(x, 0.25, True, seed=0, op_id=1, step=0).data
        kept = out[out != 0.0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert abs(out.mean() - 1.0) < 0.02

    def test_rate_out_of_range(self):
        with pytest.raises(ConfigError):
            dropout(t(np.ones(3)), 1.0, True)
        with pytest.raises(ConfigError):
            dropout(t(np.ones(3)), -0.1, True)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


class TestBackward:
    def test_sum_of_squares_gradient(self, rng):
        x = t(rng.standard_normal((4, 3)), grad=True)
        reduce_sum(mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2.0 * x.data, atol=1e-12, rtol=0)

    def test_constant_function_zero_gradient(self):
        x = t(np.ones(3), grad=True)
        c = t(np.zeros(3))
        reduce_sum(mul(x, c)).backward()
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_backward_twice_doubles_gradients(self, rng):
        x = t(rng.standard_normal((3, 3)), grad=True)
        loss = reduce_sum(mul(x, x))
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        np.testing.assert_array_equal(x.grad, 2.0 * first)

    def test_gradient_accumulates_across_losses(self, rng):
        x = t(rng.standard_normal(5), grad=True)
        reduce_sum(x).backward()
        reduce_sum(mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 1.0 + 2.0 * x.data, atol=1e-12, rtol=0)

    def test_shared_parent_fan_out(self):
        # x feeds both branches; contributions must sum along each path.
        x = t([2.0], grad=True)
        y = add(mul(x, x), scale(x, 3.0))  # x^2 + 3x, dy/dx = 2x + 3 = 7
        reduce_sum(y).backward()
        np.testing.assert_allclose(x.grad, [7.0], atol=1e-12)

    def test_backward_requires_scalar(self):
        x = t(np.ones(3), grad=True)
        with pytest.raises(ShapeError):
            relu(x).backward()

    def test_item_requires_single_element(self):
        with pytest.raises(ShapeError):
            t(np.ones(3)).item()

    def test_no_grad_blocks_graph_recording(self):
        x = t(np.ones(3), grad=True)
        with no_grad():
            y = relu(x)
        assert not y.requires_grad
        assert y._parents == ()

    def test_broadcast_add_gradient_shapes(self, rng):
        a = t(rng.standard_normal((4, 3)), grad=True)
        b = t(rng.standard_normal((3,)), grad=True)
        reduce_sum(add(a, b)).backward()
        assert a.grad.shape == (4, 3)
        assert b.grad.shape == (3,)
        np.testing.assert_array_equal(b.grad, np.full(3, 4.0))


def _store_with(seed: int, entries: dict[str, tuple[int, ...]]) -> ParamStore:
    store = ParamStore()
    for name, shape in entries.items():
        store.register(name, shape, seed=seed, fan_in=int(np.prod(shape)))
    return store


class TestGradCheckPrimitives:
    """Central finite differences against every op's vjp."""

    def test_matmul_linear_chain(self):
        store = _store_with(0, {"a": (3, 4), "b": (4, 2)})

        def fn():
            return reduce_sum(matmul(store["a"], store["b"]))

        assert grad_check(fn, store) < 1e-8

    def test_softmax_layer_norm_relu(self):
        store = _store_with(1, {"x": (3, 6), "gain": (6,), "bias": (6,)})

        def fn():
            h = layer_norm(store["x"], store["gain"], store["bias"])
            return reduce_sum(mul(softmax_rows(h), relu(h)))

        assert grad_check(fn, store) < 1e-6

    def test_conv1d(self):
        store = _store_with(2, {"x": (2, 2, 5), "k": (3, 2, 3), "b": (3,)})

        def fn():
            return reduce_sum(conv1d(store["x"], store["k"], store["b"]))

        assert grad_check(fn, store) < 1e-8

    def test_linear_with_bias(self):
        store = _store_with(3, {"x": (4, 3), "w": (3, 2), "b": (2,)})

        def fn():
            return reduce_sum(relu(linear(store["x"], store["w"], store["b"])))

        assert grad_check(fn, store) < 1e-8

    def test_cross_entropy_with_logits(self):
        store = _store_with(4, {"z": (5, 3)})
        labels = np.array([0, 1, 2, 1, 0])

        def fn():
            return cross_entropy_with_logits(store["z"], labels)

        assert grad_check(fn, store) < 1e-8

    def test_concat_mean_transpose_reshape(self):
        store = _store_with(5, {"a": (2, 3, 4), "b": (2, 2, 4)})

        def fn():
            merged = concat([store["a"], store["b"]], axis=1)
            flipped = transpose(merged, (0, 2, 1))
            pooled = mean_axis(flipped, axis=2)
            return reduce_sum(mul(reshape(pooled, (8,)), reshape(pooled, (8,))))

        assert grad_check(fn, store) < 1e-8

    def test_dropout_mask_is_constant_through_vjp(self):
        store = _store_with(6, {"x": (4, 4)})

        def fn():
            return reduce_sum(dropout(store["x"], 0.3, True, seed=9, op_id=1, step=0))

        assert grad_check(fn, store) < 1e-8

    def test_eps_outside_stable_range_rejected(self):
        store = _store_with(7, {"x": (2,)})

        def fn():
            return reduce_sum(store["x"])

        with pytest.raises(ConfigError):
            grad_check(fn, store, eps=1e-7)
        with pytest.raises(ConfigError):
            grad_check(fn, store, eps=1e-3)

    def test_non_finite_loss_rejected(self):
        store = _store_with(8, {"x": (2,)})
        inf = Tensor(np.array([np.inf, 1.0]))

        def fn():
            return reduce_sum(mul(store["x"], inf))

        with pytest.raises(NumericError):
            grad_check(fn, store)

    def test_max_coords_subsamples(self):
        store = _store_with(9, {"x": (10, 10)})

        def fn():
            return reduce_sum(mul(store["x"], store["x"]))

        assert grad_check(fn, store, max_coords=7) < 1e-8


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------


class TestKeyedGenerator:
    def test_same_key_same_draws(self):
        a = keyed_generator(42, STREAM_BATCH, 3).random(8)
        b = keyed_generator(42, STREAM_BATCH, 3).random(8)
        np.testing.assert_array_equal(a, b)

    def test_streams_are_independent(self):
        a = keyed_generator(42, STREAM_BATCH).random(8)
        b = keyed_generator(42, STREAM_INIT).random(8)
        assert not np.array_equal(a, b)

    def test_extra_key_splits_stream(self):
        a = keyed_generator(42, STREAM_BATCH, 0).random(8)
        b = keyed_generator(42, STREAM_BATCH, 1).random(8)
        assert not np.array_equal(a, b)


# ---------------------------------------------------------------------------
# ParamStore and MemoryProbe
# ---------------------------------------------------------------------------


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.register("w", (2, 2), seed=0, fan_in=2)
        with pytest.raises(ConfigError):
            store.register("w", (2, 2), seed=0, fan_in=2)

    def test_iteration_is_name_sorted(self):
        store = ParamStore()
        for name in ("zeta", "alpha", "mid"):
            store.register(name, (1,), seed=0, init="zeros")
        assert [name for name, _ in store] == ["alpha", "mid", "zeta"]

    def test_init_independent_of_registration_order(self):
        first = ParamStore()
        first.register("a", (3, 3), seed=7, fan_in=3)
        first.register("b", (3, 3), seed=7, fan_in=3)
        second = ParamStore()
        second.register("b", (3, 3), seed=7, fan_in=3)
        second.register("a", (3, 3), seed=7, fan_in=3)
        np.testing.assert_array_equal(first["a"].data, second["a"].data)
        np.testing.assert_array_equal(first["b"].data, second["b"].data)

    def test_uniform_init_respects_fan_in_bound(self):
        store = ParamStore()
        w = store.register("w", (50, 50), seed=0, fan_in=25)
        assert np.abs(w.data).max() <= math.sqrt(1.0 / 25)

    def test_uniform_init_requires_fan_in(self):
        store = ParamStore()
        with pytest.raises(ConfigError):
            store.register("w", (2, 2), seed=0)

    def test_unknown_init_rejected(self):
        store = ParamStore()
        with pytest.raises(ConfigError):
            store.register("w", (2,), seed=0, init="normal")

    def test_total_count(self):
        store = _store_with(0, {"a": (3, 4), "b": (5,)})
        assert store.total_count == 17

    def test_state_dict_round_trip(self):
        store = _store_with(0, {"a": (3, 4), "b": (5,)})
        state = store.state_dict()
        store["a"].data[...] = 0.0
        store.load_state_dict(state)
        np.testing.assert_array_equal(store["a"].data, state["a"])

    def test_state_dict_missing_key_rejected(self):
        store = _store_with(0, {"a": (2,), "b": (2,)})
        with pytest.raises(ConfigError):
            store.load_state_dict({"a": np.zeros(2)})

    def test_state_dict_shape_mismatch_rejected(self):
        store = _store_with(0, {"a": (2,)})
        with pytest.raises(ShapeError):
            store.load_state_dict({"a": np.zeros(3)})

    def test_zero_grad_clears_accumulation(self):
        store = _store_with(0, {"a": (3,)})
        reduce_sum(store["a"]).backward()
        store.zero_grad()
        np.testing.assert_array_equal(store["a"].grad, np.zeros(3))


class TestMemoryProbe:
    def test_tracks_allocations_and_peak(self):
        with MemoryProbe() as probe:
            x = Tensor(np.zeros(1000))  # 8000 bytes
            assert probe.current_bytes >= 8000
            del x
        assert probe.peak_bytes >= 8000
        assert probe.peak_mb == probe.peak_bytes / 1e6

    def test_frees_reduce_current_but_not_peak(self):
        with MemoryProbe() as probe:
            x = Tensor(np.zeros(1000))
            peak_before = probe.peak_bytes
            del x
            assert probe.current_bytes < peak_before
            assert probe.peak_bytes == peak_before

    def test_no_probe_no_tracking(self):
        probe = MemoryProbe()
        Tensor(np.zeros(100))
        assert probe.peak_bytes == 0
