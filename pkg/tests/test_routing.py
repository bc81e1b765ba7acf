import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routeseg.nn import rng_for
from routeseg.routing import (
    MoeLossWeights,
    RouterConfig,
    RoutingDecision,
    SoftRouter,
    TopKRouter,
    aggregate_experts,
    balance_loss,
    moe_loss,
    routing_stats,
    token_fraction_loss,
    topk_select,
    write_routing_stats_csv,
    z_loss,
)
from routeseg.tensor import ConfigError, ContractError, Tape, Tensor, backward, finite_diff_check, mul, softmax, tsum


def make_decision(weights, selected, logits=None):
    w = np.asarray(weights, dtype=np.float64)
    logits = np.zeros_like(w) if logits is None else np.asarray(logits, dtype=np.float64)
    return RoutingDecision(
        logits=Tensor(logits),
        noisy_logits=Tensor(logits),
        weights=Tensor(w),
        selected=np.asarray(selected, dtype=np.int64),
    )


class TestRouterConfig:
    def test_valid(self):
        RouterConfig(num_experts=4, top_k=2)

    @pytest.mark.parametrize("kwargs", [
        {"top_k": 0},
        {"top_k": 5},
        {"temperature": 0.0},
        {"noise_std": -1.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            RouterConfig(num_experts=4, **kwargs)


class TestSoftRouter:
    def test_zero_init_uniform(self):
        router = SoftRouter(6, rng_for(0, "t.soft"))
        router.linear.weight.data[:] = 0.0
        out = router(Tensor(np.random.default_rng(0).normal(size=(3, 5, 6))))
        assert np.allclose(out.data, 0.5)

    def test_softmax_closed_form(self):
        router = SoftRouter(2, rng_for(0, "t.soft2"))
        router.linear.weight.data[:] = 0.0
        router.linear.bias.data[:] = [np.log(3.0), 0.0]
        out = router(Tensor(np.zeros((1, 4, 2))))
        assert np.allclose(out.data, [[0.75, 0.25]], atol=1e-10)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        router = SoftRouter(6, rng_for(0, "t.soft3"))
        tokens = rng.normal(size=(2, 7, 6))
        perm = rng.permutation(7)
        a = router(Tensor(tokens)).data
        b = router(Tensor(tokens[:, perm])).data
        assert np.allclose(a, b, atol=1e-12)

    def test_empty_tokens_rejected(self):
        router = SoftRouter(6, rng_for(0, "t.soft4"))
        with pytest.raises(ContractError):
            router(Tensor(np.zeros((2, 0, 6))))


class TestTopKRouter:
    def make(self, k, noise=0.0, tau=1.0, bias=(2.0, 1.0, 0.0, -1.0)):
        cfg = RouterConfig(num_experts=4, top_k=k, noise_std=noise, temperature=tau)
        router = TopKRouter(8, cfg, rng_for(0, "t.topk"))
        router.fc1.weight.data[:] = 0.0
        router.fc2.weight.data[:] = 0.0
        router.fc2.bias.data[:] = bias
        return router

    def x(self, b=1):
        return Tensor(np.random.default_rng(1).normal(size=(b, 8, 3, 3)))

    def test_worked_example_k2(self):
        decision = self.make(2)(self.x(), training=False)
        assert np.allclose(decision.weights.data, [[0.7311, 0.2689, 0.0, 0.0]], atol=1e-4)
        assert set(decision.selected[0]) == {0, 1}

    def test_k1_one_hot(self):
        decision = self.make(1)(self.x(), training=False)
        assert np.array_equal(decision.weights.data, [[1.0, 0.0, 0.0, 0.0]])

    def test_k4_matches_dense_softmax(self):
        decision = self.make(4)(self.x(), training=False)
        oracle = softmax(Tensor([[2.0, 1.0, 0.0, -1.0]]), axis=-1)
        assert np.abs(decision.weights.data - oracle.data).max() < 1e-12

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_sparsity_exact_k_nonzeros(self, k):
        cfg = RouterConfig(num_experts=4, top_k=k, noise_std=0.0)
        router = TopKRouter(8, cfg, rng_for(3, "t.topk2"))
        decision = router(Tensor(np.random.default_rng(4).normal(size=(32, 8, 3, 3))), training=False)
        nonzeros = (decision.weights.data != 0).sum(axis=1)
        assert np.array_equal(nonzeros, np.full(32, k))
        sums = decision.weights.data.sum(axis=1)
        assert np.abs(sums - 1.0).max() < 1e-10
        mask = np.zeros((32, 4), dtype=bool)
        np.put_along_axis(mask, decision.selected, True, axis=1)
        assert np.array_equal(decision.weights.data != 0, mask)

    def test_eval_bitwise_deterministic(self):
        cfg = RouterConfig(num_experts=4, top_k=2, noise_std=0.5)
        router = TopKRouter(8, cfg, rng_for(5, "t.topk3"))
        x = self.x(4)
        a = router(x, training=False)
        b = router(x, training=False)
        assert np.array_equal(a.weights.data, b.weights.data)
        assert np.array_equal(a.selected, b.selected)

    def test_training_noise_needs_rng(self):
        cfg = RouterConfig(num_experts=4, top_k=2, noise_std=0.5)
        router = TopKRouter(8, cfg, rng_for(6, "t.topk4"))
        with pytest.raises(ContractError):
            router(self.x(), training=True, rng=None)

    def test_noise_perturbs_logits_training_only(self):
        cfg = RouterConfig(num_experts=4, top_k=2, noise_std=0.5)
        router = TopKRouter(8, cfg, rng_for(7, "t.topk5"))
        x = self.x(4)
        noisy = router(x, training=True, rng=np.random.default_rng(0))
        clean = router(x, training=False)
        assert not np.allclose(noisy.noisy_logits.data, clean.noisy_logits.data)
        assert np.array_equal(noisy.logits.data, clean.logits.data)

    def test_temperature_scales_logits(self):
        hot = self.make(4, tau=2.0)(self.x(), training=False)
        assert np.allclose(hot.noisy_logits.data, [[1.0, 0.5, 0.0, -0.5]])

    def test_tie_break_lowest_index(self):
        sel = topk_select(np.array([[1.0, 1.0, 1.0, 0.0]]), 2)
        assert np.array_equal(sel, [[0, 1]])

    def test_router_gradient_flow(self):
        cfg = RouterConfig(num_experts=4, top_k=2, noise_std=0.0)
        router = TopKRouter(6, cfg, rng_for(8, "t.topk6"))
        x = Tensor(np.random.default_rng(9).normal(size=(3, 6, 2, 2)))
        probe = Tensor(np.random.default_rng(10).normal(size=(3, 4)))

        def f():
            return tsum(mul(router(x, training=False).weights, probe))

        params = [p for p in router.parameters() if p.requires_grad]
        assert finite_diff_check(f, params) < 1e-5


class TestAggregate:
    def test_one_hot_selection_exact(self):
        outs = [Tensor(np.random.default_rng(i).normal(size=(2, 3, 2, 2))) for i in range(4)]
        d = make_decision([[0.0, 1.0, 0.0, 0.0]] * 2, [[1]] * 2)
        agg = aggregate_experts(outs, d)
        assert np.array_equal(agg.data, outs[1].data)

    def test_cancellation(self):
        x = np.random.default_rng(3).normal(size=(1, 2, 2, 2))
        outs = [Tensor(x), Tensor(-x)]
        d = make_decision([[0.5, 0.5]], [[0, 1]])
        assert np.allclose(aggregate_experts(outs, d).data, 0.0)

    def test_constant_experts_dot_product(self):
        outs = [Tensor(np.full((1, 2, 2, 2), v)) for v in (1.0, 2.0, 3.0, 4.0)]
        d = make_decision([[0.7310585786300049, 0.2689414213699951, 0.0, 0.0]], [[0, 1]])
        assert np.allclose(aggregate_experts(outs, d).data, 1.2689, atol=1e-4)

    def test_lazy_none_for_unselected(self):
        outs = [Tensor(np.ones((1, 2, 2, 2))), None, None, None]
        d = make_decision([[1.0, 0.0, 0.0, 0.0]], [[0]])
        assert np.array_equal(aggregate_experts(outs, d).data, np.ones((1, 2, 2, 2)))

    def test_shape_mismatch_rejected(self):
        outs = [Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 2, 3, 3)))]
        d = make_decision([[0.5, 0.5]], [[0, 1]])
        with pytest.raises(Exception):
            aggregate_experts(outs, d)


class TestLosses:
    def test_z_loss_zero(self):
        assert z_loss(Tensor(np.zeros((3, 4))), 1.0).item() == 0.0

    def test_z_loss_worked_example(self):
        assert z_loss(Tensor([[2.0, 1.0, 0.0, -1.0]]), 1.0).item() == pytest.approx(1.5, abs=1e-12)

    def test_z_loss_quadratic_scaling(self):
        r = Tensor(np.random.default_rng(11).normal(size=(2, 4)))
        base = z_loss(r, 1.0).item()
        scaled = z_loss(Tensor(3.0 * r.data), 1.0).item()
        assert scaled == pytest.approx(9.0 * base, rel=1e-12)

    def test_balance_uniform_zero(self):
        w = Tensor(np.full((6, 4), 0.25))
        assert balance_loss(w, 1.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_balance_one_hot(self):
        w = np.zeros((5, 4))
        w[:, 2] = 1.0
        assert balance_loss(Tensor(w), 1.0).item() == pytest.approx(3.0, abs=1e-12)

    def test_balance_batch_permutation_invariant(self):
        rng = np.random.default_rng(12)
        w = rng.dirichlet(np.ones(4), size=8)
        a = balance_loss(Tensor(w), 1.0).item()
        b = balance_loss(Tensor(w[rng.permutation(8)]), 1.0).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_balance_positive_unless_uniform(self):
        w = np.full((4, 4), 0.25)
        w[0] = [0.4, 0.2, 0.2, 0.2]
        assert balance_loss(Tensor(w), 1.0).item() > 0.0

    def test_balance_rejects_zero_mass(self):
        with pytest.raises(ContractError):
            balance_loss(Tensor(np.zeros((2, 4))), 1.0)

    def test_token_fraction_all_selected(self):
        sel = np.tile(np.arange(4), (6, 1))
        assert token_fraction_loss(sel, 4, 1.0).item() == 0.0

    def test_token_fraction_balanced_k1(self):
        sel = np.array([[0], [1], [2], [3]])
        assert token_fraction_loss(sel, 4, 1.0).item() == 0.0

    def test_token_fraction_collapsed_k1(self):
        sel = np.zeros((4, 1), dtype=np.int64)
        assert token_fraction_loss(sel, 4, 1.0).item() == pytest.approx(3.0, abs=1e-12)

    def test_moe_loss_zero_weights(self):
        d = make_decision([[0.25] * 4] * 2, [[0, 1, 2, 3]] * 2)
        weights = MoeLossWeights(z=0.0, logit=0.0, balance=0.0, token=0.0)
        assert moe_loss(d, weights, training=True).item() == 0.0

    def test_moe_loss_uniform_routing_zero_logits(self):
        d = make_decision([[0.25] * 4] * 3, [[0, 1, 2, 3]] * 3)
        weights = MoeLossWeights(z=0.0, logit=1.0, balance=1.0, token=1.0)
        assert moe_loss(d, weights, training=True).item() == pytest.approx(0.0, abs=1e-12)

    def test_moe_loss_worked_sum(self):
        w = np.zeros((1, 4))
        w[0, 0] = 1.0
        d = make_decision(w, [[0]], logits=[[2.0, 1.0, 0.0, -1.0]])
        weights = MoeLossWeights(z=0.0, logit=1.0, balance=1.0, token=1.0)
        assert moe_loss(d, weights, training=True).item() == pytest.approx(7.5, abs=1e-12)

    def test_moe_loss_eval_mode_rejected(self):
        d = make_decision([[1.0, 0.0, 0.0, 0.0]], [[0]])
        with pytest.raises(ContractError):
            moe_loss(d, MoeLossWeights(), training=False)

    def test_moe_loss_differentiable(self):
        cfg = RouterConfig(num_experts=4, top_k=2, noise_std=0.0)
        router = TopKRouter(6, cfg, rng_for(20, "t.moe"))
        x = Tensor(np.random.default_rng(21).normal(size=(4, 6, 2, 2)))

        def f():
            decision = router(x, training=False)
            return moe_loss(decision, MoeLossWeights(logit=1.0, balance=1.0, token=1.0), training=True)

        params = [p for p in router.parameters() if p.requires_grad]
        assert finite_diff_check(f, params) < 1e-5


class TestRoutingStats:
    def test_single_one_hot(self):
        d = make_decision([[0.0, 0.0, 1.0, 0.0]], [[2]])
        stats = routing_stats([d])
        assert stats.selection_freq[2] == 1.0
        assert stats.mean_weight[2] == 1.0

    def test_uniform(self):
        d = make_decision([[0.25] * 4] * 8, [[0, 1, 2, 3]] * 8)
        stats = routing_stats([d])
        assert np.allclose(stats.mean_weight, 0.25)
        assert np.allclose(stats.selection_freq, 1.0)

    def test_two_sample_mean(self):
        d = make_decision([[1.0, 0.0], [0.0, 1.0]], [[0], [1]])
        stats = routing_stats([d])
        assert np.allclose(stats.mean_weight, [0.5, 0.5])

    def test_mean_weights_sum_to_one(self):
        rng = np.random.default_rng(30)
        decisions = []
        for _ in range(5):
            w = rng.dirichlet(np.ones(4), size=6)
            decisions.append(make_decision(w, np.tile(np.arange(4), (6, 1))))
        stats = routing_stats(decisions)
        assert abs(stats.mean_weight.sum() - 1.0) < 1e-8

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            routing_stats([])

    def test_csv_roundtrip(self, tmp_path):
        d = make_decision([[0.7, 0.3, 0.0, 0.0]], [[0, 1]])
        stats = routing_stats([d])
        path = tmp_path / "stats.csv"
        write_routing_stats_csv(stats, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "expert_id,mean_weight,selection_freq"
        assert len(lines) == 5


@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_sparse_weights_property(k, seed):
    cfg = RouterConfig(num_experts=4, top_k=k, noise_std=0.0)
    router = TopKRouter(5, cfg, rng_for(31, "t.prop"))
    x = Tensor(np.random.default_rng(seed).normal(size=(3, 5, 2, 2)))
    decision = router(x, training=False)
    w = decision.weights.data
    assert ((w != 0).sum(axis=1) == k).all()
    assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-10
    assert (w >= 0).all()
