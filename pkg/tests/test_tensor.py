import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routeseg.tensor import (
    ConfigError,
    ContractError,
    NonFiniteError,
    Parameter,
    ShapeError,
    StateError,
    Tape,
    Tensor,
    add,
    backward,
    batch_norm,
    concat,
    conv2d,
    conv2d_depthwise,
    conv2d_pointwise,
    crop,
    div,
    embedding,
    finite_diff_check,
    global_avg_pool,
    layer_norm,
    masked_softmax,
    matmul,
    mul,
    mul_scalar,
    pow_scalar,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt_eps,
    sub,
    tmean,
    transpose,
    tsum,
    upsample_bilinear,
)


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


class TestTensorBasics:
    def test_shape_matches_data(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.size == 4
        assert np.prod(t.shape) == t.data.size

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])
        with pytest.raises(NonFiniteError):
            Tensor([np.inf])

    def test_parameter_kinds(self):
        p = Parameter(np.zeros(3), "w", kind="weight")
        assert p.trainable
        with pytest.raises(ConfigError):
            Parameter(np.zeros(3), "k", kind="fixed_kernel", trainable=True)
        fk = Parameter(np.zeros(3), "k", kind="fixed_kernel", trainable=False)
        with pytest.raises(ConfigError):
            fk.set_trainable(True)
        with pytest.raises(ConfigError):
            Parameter(np.zeros(3), "x", kind="mystery")


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_hand_evaluation(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data[0, 0] == pytest.approx(11.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_vs_finite_differences(self):
        a = Parameter(rand((3, 4), 1), "a")
        b = Parameter(rand((4, 2), 2), "b")
        err = finite_diff_check(lambda: tsum(matmul(a, b)), [a, b])
        assert err < 1e-6

    def test_batched_against_loop(self):
        a = rand((3, 2, 4), 5)
        b = rand((4, 5), 6)
        out = matmul(Tensor(a), Tensor(b)).data
        for i in range(3):
            assert np.allclose(out[i], a[i] @ b)


class TestElementwise:
    def test_relu(self):
        assert np.array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_sqrt_eps(self):
        assert sqrt_eps(Tensor([0.0]), 1e-6).data[0] == pytest.approx(1e-3)

    def test_sigmoid_symmetry(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extreme_stability(self):
        out = sigmoid(Tensor([-800.0, 800.0])).data
        assert out[0] == 0.0 and out[1] == 1.0

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_broadcast_backward(self):
        a = Parameter(rand((3, 4), 3), "a")
        bias = Parameter(rand(4, 4), "b")
        err = finite_diff_check(lambda: tsum(pow_scalar(add(a, bias), 2.0)), [a, bias])
        assert err < 1e-6

    def test_softplus_matches_log1p_exp(self):
        x = np.array([-3.0, -0.5, 0.0, 2.0])
        assert np.allclose(softplus(Tensor(x)).data, np.log1p(np.exp(x)))


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_worked_example(self):
        out = softmax(Tensor([2.0, 1.0, 0.0, -1.0])).data
        assert np.allclose(out, [0.6439, 0.2369, 0.0871, 0.0321], atol=1e-4)

    def test_rows_sum_to_one(self):
        out = softmax(Tensor(rand((5, 7), 4)), axis=-1).data
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12

    def test_shift_invariance_bitwise(self):
        # Integer-valued logits keep the shift exact, so max-subtraction
        # reproduces identical arithmetic bit for bit.
        x = np.random.default_rng(8).integers(-4, 5, size=(3, 5)).astype(np.float64)
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + 123.0)).data
        assert np.array_equal(a, b)

    def test_non_finite_input_rejected(self):
        t = Tensor([0.0, 1.0])
        t.data[0] = np.nan
        with pytest.raises(NonFiniteError):
            softmax(t)

    def test_masked_dense_is_bitwise_softmax(self):
        x = rand((4, 6), 9)
        dense = softmax(Tensor(x), axis=-1).data
        masked = masked_softmax(Tensor(x), np.ones((4, 6), dtype=bool), axis=-1).data
        assert np.array_equal(dense, masked)

    def test_masked_zeroes_excluded(self):
        mask = np.array([[True, False, True, False]])
        out = masked_softmax(Tensor([[1.0, 5.0, 2.0, 5.0]]), mask).data
        assert out[0, 1] == 0.0 and out[0, 3] == 0.0
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    def test_masked_empty_row_rejected(self):
        with pytest.raises(ContractError):
            masked_softmax(Tensor([[1.0, 2.0]]), np.array([[False, False]]))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_softmax_properties_random(self, seed):
        x = np.random.default_rng(seed).normal(scale=5.0, size=(2, 6))
        out = softmax(Tensor(x), axis=-1).data
        assert (out > 0).all()
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12


class TestReductionsAndShapes:
    def test_sum_backward_ones(self):
        x = Parameter(rand((2, 3), 10), "x")
        with Tape() as tape:
            loss = tsum(x)
        backward(loss, tape)
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_relu_subgradient(self):
        x = Parameter(np.array([-1.0, 2.0]), "x")
        with Tape() as tape:
            loss = tsum(relu(x))
        backward(loss, tape)
        assert np.array_equal(x.grad, [0.0, 1.0])

    def test_backward_requires_scalar(self):
        x = Parameter(rand((2, 2), 11), "x")
        with Tape() as tape:
            y = relu(x)
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_repeated_backward_accumulates(self):
        x = Parameter(np.array([1.0, 2.0]), "x")
        with Tape() as tape:
            loss = tsum(x)
        backward(loss, tape)
        backward(loss, tape)
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_grid_roundtrip_bitwise(self):
        x = Tensor(rand((2, 5, 6), 12))
        grid = reshape(transpose(x, (0, 2, 1)), (2, 6, 5 * 1, 1))
        back = transpose(reshape(grid, (2, 6, 5)), (0, 2, 1))
        assert np.array_equal(back.data, x.data)

    def test_concat_crop_inverse(self):
        a, b = Tensor(rand((2, 3), 13)), Tensor(rand((2, 4), 14))
        joined = concat([a, b], axis=1)
        part = crop(joined, (slice(None), slice(3, 7)))
        assert np.array_equal(part.data, b.data)

    def test_mean_axis(self):
        x = Tensor(np.arange(12.0).reshape(3, 4))
        assert np.allclose(tmean(x, axis=0).data, x.data.mean(axis=0))

    def test_embedding_lookup_and_grad(self):
        table = Parameter(rand((7, 3), 15), "t")
        ids = np.array([[1, 2], [2, 6]])
        out = embedding(table, ids)
        assert out.shape == (2, 2, 3)
        with Tape() as tape:
            loss = tsum(embedding(table, ids))
        backward(loss, tape)
        assert table.grad[2].sum() == pytest.approx(6.0)  # id 2 appears twice
        assert table.grad[0].sum() == 0.0

    def test_embedding_out_of_range(self):
        with pytest.raises(ShapeError):
            embedding(Parameter(rand((4, 2), 16), "t"), np.array([4]))


class TestConv2d:
    def test_zero_kernel_zero_output(self):
        x = Tensor(rand((2, 3, 5, 5), 20))
        k = Tensor(np.zeros((3, 3, 3)))
        assert np.array_equal(conv2d_depthwise(x, k).data, np.zeros((2, 3, 5, 5)))

    def test_pointwise_identity(self):
        x = Tensor(rand((2, 3, 4, 4), 21))
        out = conv2d_pointwise(x, Tensor(np.eye(3)))
        assert np.array_equal(out.data, x.data)

    def test_sobel_ramp_interior(self):
        sobel = np.broadcast_to([[-1.0, 0, 1], [-2, 0, 2], [-1, 0, 1]], (1, 3, 3)).copy()
        ramp = np.broadcast_to(np.arange(6.0), (1, 1, 6, 6)).copy()
        out = conv2d_depthwise(Tensor(ramp), Tensor(sobel), padding="replicate")
        assert np.allclose(out.data[0, 0, :, 1:5], 8.0)

    def test_even_kernel_unsupported(self):
        with pytest.raises(ConfigError):
            conv2d_depthwise(Tensor(rand((1, 2, 4, 4), 22)), Tensor(np.zeros((2, 2, 2))))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d_depthwise(Tensor(rand((1, 2, 4, 4), 23)), Tensor(np.zeros((3, 3, 3))))

    def test_4d_kernel_dispatch(self):
        x = Tensor(rand((1, 2, 4, 4), 24))
        dw = Tensor(rand((2, 1, 3, 3), 25))
        pw = Tensor(rand((5, 2, 1, 1), 26))
        assert conv2d(x, dw, "depthwise", "same_replicate").shape == (1, 2, 4, 4)
        assert conv2d(x, pw, "pointwise").shape == (1, 5, 4, 4)

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_same_padding_preserves_shape(self, k):
        x = Tensor(rand((2, 3, 6, 7), 27))
        kern = Tensor(rand((3, k, k), 28))
        for padding in ("zero", "replicate"):
            assert conv2d_depthwise(x, kern, padding=padding).shape == (2, 3, 6, 7)

    @pytest.mark.parametrize("padding", ["zero", "replicate"])
    def test_gradients(self, padding):
        x = Parameter(rand((2, 2, 4, 5), 29), "x")
        k = Parameter(rand((2, 3, 3), 30), "k")
        b = Parameter(rand(2, 31), "b", kind="bias")
        probe = Tensor(rand((2, 2, 4, 5), 32))

        def f():
            return tsum(mul(conv2d_depthwise(x, k, b, padding=padding), probe))

        assert finite_diff_check(f, [x, k, b]) < 1e-6


class TestNormalization:
    def test_layer_norm_constant_input(self):
        out = layer_norm(Tensor([[1.0, 1.0, 1.0, 1.0]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.0)

    def test_layer_norm_two_values(self):
        out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-30)
        assert np.allclose(out.data, [[-1.0, 1.0]])

    def test_batch_norm_train_standardizes(self):
        # eps -> 0 limit: the pre-affine output is exactly standardized.
        x = Tensor(rand((4, 3, 5, 5), 33))
        rm, rv = np.zeros(3), np.ones(3)
        out, tracked = batch_norm(
            x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True, eps=1e-300
        )
        assert tracked == 1
        assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-10
        assert np.abs(out.data.var(axis=(0, 2, 3)) - 1.0).max() < 1e-10

    def test_batch_norm_eval_without_stats_is_state_error(self):
        x = Tensor(rand((2, 3, 4, 4), 34))
        with pytest.raises(StateError):
            batch_norm(
                x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                np.zeros(3), np.ones(3), training=False, batches_tracked=0,
            )

    def test_global_avg_pool(self):
        x = np.zeros((1, 4, 2, 2))
        x[0, :, 0, 0] = [0.0, 2.0, 4.0, 6.0]
        x[0] += np.array([0.0, 2.0, 4.0, 6.0])[:, None, None] * 0 + x[0]
        x = np.broadcast_to(np.array([0.0, 2.0, 4.0, 6.0])[None, :, None, None], (1, 4, 2, 2)).copy()
        out = global_avg_pool(Tensor(x))
        assert np.array_equal(out.data, [[0.0, 2.0, 4.0, 6.0]])
        assert out.data.mean() == pytest.approx(3.0)

    def test_global_avg_pool_degenerate(self):
        x = rand((2, 3, 1, 1), 35)
        assert np.array_equal(global_avg_pool(Tensor(x)).data, x[:, :, 0, 0])


class TestUpsample:
    def test_constant_from_single_pixel(self):
        out = upsample_bilinear(Tensor(np.full((1, 1, 1, 1), 2.5)), 8)
        assert np.array_equal(out.data, np.full((1, 1, 8, 8), 2.5))

    def test_output_shape(self):
        out = upsample_bilinear(Tensor(rand((2, 3, 4, 5), 36)), 3)
        assert out.shape == (2, 3, 12, 15)

    def test_gradient(self):
        x = Parameter(rand((1, 2, 3, 3), 37), "x")
        probe = Tensor(rand((1, 2, 6, 6), 38))
        err = finite_diff_check(lambda: tsum(mul(upsample_bilinear(x, 2), probe)), [x])
        assert err < 1e-6


class TestFiniteDiff:
    def test_square_function(self):
        p = Parameter(np.array([3.0]), "p")
        err = finite_diff_check(lambda: tsum(pow_scalar(p, 2.0)), [p])
        assert err < 1e-9

    def test_constant_function(self):
        p = Parameter(np.array([1.0, 2.0]), "p")
        c = Tensor(np.array(4.0))
        assert finite_diff_check(lambda: mul(c, c), [p]) == 0.0

    def test_softmax_sum_is_constant(self):
        # softmax sums to one, so its sum has an identically zero gradient.
        p = Parameter(rand(5, 39), "p")
        with Tape() as tape:
            loss = tsum(softmax(p))
        backward(loss, tape)
        assert np.abs(p.grad).max() < 1e-12
        h = 1e-5
        for i in range(p.size):
            orig = p.data[i]
            p.data[i] = orig + h
            fp = tsum(softmax(p)).item()
            p.data[i] = orig - h
            fm = tsum(softmax(p)).item()
            p.data[i] = orig
            assert abs(fp - fm) / (2 * h) < 1e-9

    def test_nondeterministic_function_rejected(self):
        p = Parameter(np.array([1.0]), "p")
        state = {"calls": 0}

        def noisy():
            state["calls"] += 1
            return add_noise(p, state["calls"])

        def add_noise(t, c):
            return mul_scalar(t, float(c))

        with pytest.raises(ContractError):
            finite_diff_check(lambda: tsum(noisy()), [p])


class TestTapeSemantics:
    def test_replay_bitwise_deterministic(self):
        x = Parameter(rand((3, 4), 40), "x")
        w = Parameter(rand((4, 2), 41), "w")

        def run():
            x.grad = None
            w.grad = None
            with Tape() as tape:
                loss = tsum(sigmoid(matmul(x, w)))
            backward(loss, tape)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)

    def test_untaped_ops_do_not_track(self):
        x = Parameter(rand(3, 42), "x")
        y = relu(x)  # no tape active
        assert not y.requires_grad

    def test_frozen_leaf_receives_no_grad(self):
        x = Parameter(rand(3, 43), "x", trainable=False)
        y = Parameter(rand(3, 44), "y")
        with Tape() as tape:
            loss = tsum(mul(x, y))
        backward(loss, tape)
        assert x.grad is None
        assert y.grad is not None

    def test_division_gradient(self):
        a = Parameter(rand(4, 45) + 3.0, "a")
        b = Parameter(rand(4, 46) + 3.0, "b")
        err = finite_diff_check(lambda: tsum(div(a, b)), [a, b])
        assert err < 1e-6

    def test_sub_and_scalar_ops(self):
        a = Parameter(rand(4, 47), "a")
        err = finite_diff_check(lambda: tsum(mul_scalar(sub(a, 0.5), 2.0)), [a])
        assert err < 1e-8


PER_OP_CASES = [
    ("relu", lambda p, probe: tsum(mul(relu(p), probe)), (2, 4, 6, 6)),
    ("sigmoid", lambda p, probe: tsum(mul(sigmoid(p), probe)), (2, 4, 6, 6)),
    ("softplus", lambda p, probe: tsum(mul(softplus(p), probe)), (2, 4, 6, 6)),
    ("softmax", lambda p, probe: tsum(mul(softmax(p, axis=-1), probe)), (2, 4, 6, 6)),
    ("sqrt_eps", lambda p, probe: tsum(mul(sqrt_eps(add(mul(p, p), Tensor(np.full((2, 4, 6, 6), 0.5))), 1e-6), probe)), (2, 4, 6, 6)),
    ("mean", lambda p, probe: tsum(mul(tmean(p, axis=(2, 3)), tmean(probe, axis=(2, 3)))), (2, 4, 6, 6)),
    ("transpose", lambda p, probe: tsum(mul(transpose(p, (0, 2, 3, 1)), transpose(probe, (0, 2, 3, 1)))), (2, 4, 6, 6)),
    ("crop", lambda p, probe: tsum(mul(crop(p, (slice(None), slice(1, 3))), crop(probe, (slice(None), slice(1, 3))))), (2, 4, 6, 6)),
]


@pytest.mark.parametrize("name,fn,shape", PER_OP_CASES, ids=[c[0] for c in PER_OP_CASES])
def test_per_op_gradients_random_small_inputs(name, fn, shape):
    p = Parameter(rand(shape, hash(name) % 1000), name)
    probe = Tensor(rand(shape, hash(name) % 1000 + 1))
    assert finite_diff_check(lambda: fn(p, probe), [p]) < 1e-5
