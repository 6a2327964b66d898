"""Loss composition, BPTT gradients, Adam, and the epoch loop."""

import numpy as np
import pytest

from ltgate.autodiff import value_of
from ltgate.errors import ParameterError
from ltgate.network import ForwardTrace, build_network, forward
from ltgate.training import (
    AdamState,
    GradientReport,
    LossConfig,
    TaskData,
    TrainConfig,
    adam_step,
    backward,
    compare_gradients,
    firing_stats,
    gradcheck,
    loss_value,
    total_loss,
    train_task,
    trainable_params,
    variance_loss,
)


def trace_from_rasters(rasters, accumulator=None):
    """Assemble a ForwardTrace around hand-built [T, B, U] rasters."""
    t, b, _ = rasters[0].shape
    units = np.array([r.shape[2] for r in rasters])
    counts = np.array([float(r.sum()) for r in rasters])
    if accumulator is None:
        accumulator = np.zeros((b, rasters[-1].shape[2]))
    return ForwardTrace(
        accumulator=accumulator,
        spike_counts=counts,
        layer_units=units,
        batch_size=b,
        n_steps=t,
        spike_sums=[r.sum(axis=0) for r in rasters],
        spike_sqsums=[(r ** 2).sum(axis=0) for r in rasters],
        rasters=rasters,
    )


class TestFiringStats:
    def test_silent_layer_is_zero_mean_zero_std(self):
        trace = trace_from_rasters([np.zeros((6, 2, 3))])
        mu, sigma = firing_stats(trace, 0)
        assert np.array_equal(mu, np.zeros(3))
        assert np.array_equal(sigma, np.zeros(3))

    def test_every_step_firing_is_mean_one_std_zero(self):
        trace = trace_from_rasters([np.ones((6, 2, 3))])
        mu, sigma = firing_stats(trace, 0)
        assert np.array_equal(mu, np.ones(3))
        assert np.array_equal(sigma, np.zeros(3))

    def test_one_spike_in_four_steps(self):
        # indicator sequence {1,0,0,0}: mean 1/4, population std sqrt(3/16)
        raster = np.zeros((4, 1, 2))
        raster[0, 0, 0] = 1.0
        raster[2, 0, 1] = 1.0
        mu, sigma = firing_stats(trace_from_rasters([raster]), 0)
        assert mu == pytest.approx([0.25, 0.25], abs=0)
        assert sigma == pytest.approx([0.4330127018922193] * 2, abs=1e-15)

    def test_requires_recorded_rasters(self):
        net = build_network((3,), [("dense", 2)], seed=0)
        trace = forward(net, np.zeros((1, 2, 3)))
        with pytest.raises(ValueError):
            firing_stats(trace, 0)


class TestVarianceLoss:
    def test_zero_at_targets(self):
        cfg = LossConfig(lambda_var=0.5, mu_star=0.02, sigma_star=0.015)
        stats = [(np.full(4, 0.02), np.full(4, 0.015))]
        assert variance_loss(stats, cfg) == 0.0

    def test_single_neuron_offset(self):
        # 0.01 * ((0.03-0.02)^2 + 0) evaluated in float64
        cfg = LossConfig(lambda_var=0.01)
        got = variance_loss([(np.array([0.03]), np.array([0.015]))], cfg)
        assert got == pytest.approx(9.999999999999997e-07, abs=1e-21)

    def test_lambda_zero_disables(self):
        stats = [(np.array([0.9]), np.array([0.4]))]
        assert variance_loss(stats, LossConfig(lambda_var=0.0)) == 0.0

    def test_sums_over_layers(self):
        cfg = LossConfig(lambda_var=1.0, mu_star=0.0, sigma_star=0.0)
        stats = [(np.array([0.1]), np.array([0.0])),
                 (np.array([0.2]), np.array([0.0]))]
        assert variance_loss(stats, cfg) == pytest.approx(0.05, rel=1e-12)


class TestTotalLoss:
    def test_uniform_logits_give_log_n_classes(self):
        # zero accumulator -> uniform softmax -> CE = ln(10)
        trace = trace_from_rasters([np.zeros((3, 4, 10))],
                                   accumulator=np.zeros((4, 10)))
        loss = total_loss(trace, np.arange(4) % 10, LossConfig(lambda_var=0.0))
        assert float(loss) == pytest.approx(2.302585092994046, abs=1e-12)

    def test_huge_margin_leaves_only_variance_term(self):
        acc = np.full((2, 3), -1e3)
        acc[0, 1] = 1e3
        acc[1, 2] = 1e3
        raster = np.zeros((4, 2, 3))
        raster[0, :, 0] = 1.0  # one hidden-look-alike spike pattern
        trace = trace_from_rasters([raster, np.zeros((4, 2, 3))],
                                   accumulator=acc)
        cfg = LossConfig(lambda_var=0.01)
        mu, sigma = firing_stats(trace, 0)
        expected = variance_loss([(mu, sigma)], cfg)
        got = float(total_loss(trace, np.array([1, 2]), cfg))
        assert got == pytest.approx(expected, abs=1e-12)

    def test_lambda_zero_is_pure_cross_entropy(self):
        rng = np.random.default_rng(0)
        acc = rng.normal(size=(5, 4))
        raster = (rng.random((6, 5, 4)) < 0.3).astype(float)
        trace = trace_from_rasters([raster, raster], accumulator=acc)
        labels = rng.integers(0, 4, size=5)
        shifted = acc - acc.max(axis=1, keepdims=True)
        p = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        ce = float(-np.log(p[np.arange(5), labels]).mean())
        assert float(total_loss(trace, labels, LossConfig(lambda_var=0.0))) \
            == pytest.approx(ce, rel=1e-12)

    def test_label_out_of_range_rejected(self):
        trace = trace_from_rasters([np.zeros((2, 1, 3))],
                                   accumulator=np.zeros((1, 3)))
        with pytest.raises(ParameterError):
            total_loss(trace, np.array([3]), LossConfig())
        with pytest.raises(ParameterError):
            total_loss(trace, np.array([-1]), LossConfig())


class TestBackwardClosedForm:
    def test_two_step_subthreshold_matches_hand_derivation(self):
        # One dense readout, never spiking: the accumulator is linear in
        # the parameters, so CE gradients have an exact closed form.
        #   acc_c = w_c (A x1 + x2) + b_c (A + 1)
        #   A = 1 + g rho_s + (1 - g) rho_f
        net = build_network((1,), [("dense", 2)], seed=11, v_th=1e9)
        lay = net.layers[0]
        w = lay.weights.copy()
        b = lay.bias.copy()
        gam = 1.0 / (1.0 + np.exp(-lay.raw_gamma))
        rf, rs = lay.decays.rho_fast, lay.decays.rho_slow
        x1, x2 = 1.0, 1.0
        batch = np.array([[[x1], [x2]]], dtype=float)
        labels = np.array([1])

        loss, grads, _ = backward(net, batch, labels,
                                  LossConfig(lambda_var=0.0))

        a_coef = 1.0 + gam * rs + (1.0 - gam) * rf
        acc = w[:, 0] * (a_coef * x1 + x2) + b * (a_coef + 1.0)
        shifted = acc - acc.max()
        p = np.exp(shifted) / np.exp(shifted).sum()
        dacc = p - np.array([0.0, 1.0])
        i1 = w[:, 0] * x1 + b

        assert loss == pytest.approx(-np.log(p[1]), abs=1e-14)
        assert grads["layer0.weights"][:, 0] == pytest.approx(
            dacc * (a_coef * x1 + x2), abs=1e-14)
        assert grads["layer0.bias"] == pytest.approx(
            dacc * (a_coef + 1.0), abs=1e-14)
        assert grads["layer0.raw_gamma"] == pytest.approx(
            dacc * i1 * (rs - rf) * gam * (1.0 - gam), abs=1e-14)


class TestZeroInputGradients:
    def make(self, slope):
        return build_network((4,), [("dense", 3), ("dense", 2)], seed=0,
                             surrogate_slope=slope, weight_scale=0.5)

    def test_weight_and_gate_gradients_vanish_exactly(self):
        # zero drive: every weight gradient is d*input = 0, and both
        # compartments agree at 0 so the gate has nothing to trade off
        net = self.make(0.4)
        _, grads, _ = backward(net, np.zeros((2, 5, 4)), np.array([0, 0]),
                               LossConfig(lambda_var=0.01))
        for name in ("layer0.weights", "layer1.weights",
                     "layer0.raw_gamma", "layer1.raw_gamma"):
            assert np.all(grads[name] == 0.0), name

    def test_open_window_passes_gradient_to_hidden_bias(self):
        # slope 0.4: half-width 1.25 covers |0 - v_th| = 1
        net = self.make(0.4)
        _, grads, _ = backward(net, np.zeros((2, 5, 4)), np.array([0, 0]),
                               LossConfig(lambda_var=0.01))
        assert np.abs(grads["layer0.bias"]).max() > 0.0
        assert np.abs(grads["layer1.bias"]).max() > 0.0

    def test_closed_window_blocks_hidden_layer(self):
        # slope 10: half-width 0.05 excludes the resting membrane, so no
        # gradient crosses the spike nonlinearity; the readout bias still
        # reaches the loss directly through the accumulator
        net = self.make(10.0)
        _, grads, _ = backward(net, np.zeros((2, 5, 4)), np.array([0, 0]),
                               LossConfig(lambda_var=0.01))
        assert np.all(grads["layer0.bias"] == 0.0)
        assert np.abs(grads["layer1.bias"]).max() > 0.0


class TestVariancePenaltyGradient:
    """The penalty's contribution isolated as g(lambda) - g(0)."""

    def setup_method(self):
        self.net = build_network((4,), [("dense", 3), ("dense", 2)], seed=3,
                                 surrogate_slope=0.5, weight_scale=2.0)
        rng = np.random.default_rng(1)
        self.x = (rng.random((4, 8, 4)) < 0.8).astype(float)
        self.y = np.array([0, 1, 0, 1])

    def grad_at(self, lam):
        _, grads, trace = backward(self.net, self.x, self.y,
                                   LossConfig(lambda_var=lam))
        return grads["layer0.bias"], trace

    def test_linear_in_lambda(self):
        g0, _ = self.grad_at(0.0)
        g1, _ = self.grad_at(1.0)
        g2, _ = self.grad_at(2.0)
        assert np.max(np.abs((g2 - g0) - 2.0 * (g1 - g0))) < 1e-12

    def test_overactive_neurons_are_pushed_down(self):
        # neurons firing above mu_star get a positive bias gradient
        # (descent lowers their drive); the silent neuron sees none
        g0, _ = self.grad_at(0.0)
        g1, trace = self.grad_at(1.0)
        gvar = g1 - g0
        mu = value_of(trace.spike_sums[0]).mean(axis=0) / trace.n_steps
        assert mu[0] > 0.02 and gvar[0] > 0.0
        assert mu[2] > 0.02 and gvar[2] > 0.0
        assert mu[1] == 0.0 and gvar[1] == 0.0


class TestGradcheck:
    def batch(self):
        rng = np.random.default_rng(0)
        return (rng.random((3, 3, 4)) < 0.5).astype(float), np.array([0, 1, 0])

    def test_no_spike_regime(self):
        net = build_network((4,), [("dense", 4), ("dense", 2)], seed=0,
                            v_th=1e9)
        x, y = self.batch()
        report = gradcheck(net, x, y, LossConfig(), smoothed=False)
        assert report.regime == "no-spike"
        assert report.passed
        assert report.max_rel_err <= 1e-4

    def test_smoothed_surrogate_regime(self):
        net = build_network((4,), [("dense", 4), ("dense", 2)], seed=0,
                            v_th=0.6, weight_scale=1.0)
        x, y = self.batch()
        report = gradcheck(net, x, y, LossConfig(), tol=1e-3, smoothed=True)
        assert report.regime == "surrogate-smoothed"
        assert report.passed
        assert report.max_rel_err <= 1e-3

    def test_corrupted_gradient_is_flagged_by_group(self):
        # fault injection: scale one analytic gradient by 1.1 and the
        # checker must blame exactly that parameter group
        net = build_network((4,), [("dense", 3)], seed=2, v_th=1e9)
        x, y = self.batch()
        cfg = LossConfig(lambda_var=0.0)
        y3 = np.array([0, 1, 2])
        _, grads, _ = backward(net, x, y3, cfg)
        assert np.abs(grads["layer0.weights"]).max() > 0.0
        grads["layer0.weights"] = grads["layer0.weights"] * 1.1
        params = trainable_params(net)

        def loss_fn():
            return loss_value(net, x, y3, cfg, smoothed=False)

        report = compare_gradients(loss_fn, params, grads,
                                   epsilon=1e-5, tol=1e-4, regime="no-spike")
        assert isinstance(report, GradientReport)
        assert not report.passed
        assert report.failed_groups == ["layer0.weights"]


class TestAdam:
    def test_first_step_matches_hand_formula(self):
        # independent oracle: after one step from zero moments the update
        # is -lr * g / (|g| + eps) regardless of g's magnitude
        params = {"w": np.array([0.0])}
        adam_step(params, {"w": np.array([1.0])}, AdamState(lr=0.001))
        expected = -0.001 / (1.0 + 1e-8)
        assert params["w"][0] == pytest.approx(expected, abs=1e-18)
        assert abs(params["w"][0] + 0.001) < 1e-11

    def test_zero_gradient_is_a_fixed_point(self):
        params = {"w": np.array([1.5, -2.0])}
        state = AdamState()
        adam_step(params, {"w": np.zeros(2)}, state)
        assert np.array_equal(params["w"], np.array([1.5, -2.0]))
        assert state.step == 1

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            params = {"w": np.linspace(-1, 1, 4)}
            state = AdamState(lr=0.01)
            rng = np.random.default_rng(7)
            for _ in range(20):
                adam_step(params, {"w": rng.normal(size=4)}, state)
            runs.append(params["w"].copy())
        assert np.array_equal(runs[0], runs[1])

    def test_convex_quadratic_reaches_tiny_gradient(self):
        # f(x) = x^T A x / 2 - b^T x with A = diag(1..10)
        a_diag = np.arange(1.0, 11.0)
        b = np.linspace(-1.0, 1.0, 10)
        params = {"x": np.zeros(10)}
        state = AdamState(lr=0.01)
        for _ in range(5000):
            grad = a_diag * params["x"] - b
            if np.linalg.norm(grad) < 1e-6:
                break
            adam_step(params, {"x": grad}, state)
        assert np.linalg.norm(a_diag * params["x"] - b) < 1e-6


class TestTrainTask:
    def toy_batches(self):
        from ltgate.encoding import EncodingSpec, encode, make_toy_dataset
        train = make_toy_dataset(classes=2, n_per_class=40, feature_dim=16,
                                 separation=8.0, noise=0.1, seed=7,
                                 split="train")
        test = make_toy_dataset(classes=2, n_per_class=20, feature_dim=16,
                                separation=8.0, noise=0.1, seed=7,
                                split="test")
        spec = EncodingSpec(frequency_hz=1000.0, seed=3)
        return encode(train, spec), train.labels, encode(test, spec), test.labels

    def fresh_net(self):
        return build_network((16,), [("dense", 12), ("dense", 2)], seed=1,
                             surrogate_slope=0.5, weight_scale=0.5)

    def test_zero_epochs_changes_nothing(self):
        net = build_network((4,), [("dense", 2)], seed=0)
        before = net.layers[0].weights.copy()
        task = TaskData(train_spikes=np.zeros((4, 3, 4), dtype=np.uint8),
                        train_labels=np.zeros(4, dtype=int), eval_sets={})
        record, state = train_task(net, task, epochs=0, cfg=TrainConfig())
        assert record.rows == []
        assert state.step == 0
        assert np.array_equal(net.layers[0].weights, before)

    def test_learns_separable_toy_task(self):
        # sanity bound from a linear model on time-summed spike counts:
        # the task is linearly separable, so the network should be too
        tr, tr_y, te, te_y = self.toy_batches()
        from sklearn.linear_model import LogisticRegression
        clf = LogisticRegression(max_iter=2000)
        clf.fit(tr.spikes.sum(axis=1), tr_y)
        assert clf.score(te.spikes.sum(axis=1), te_y) >= 0.99

        net = self.fresh_net()
        cfg = TrainConfig(lr=0.01, batch_size=16, loss=LossConfig(), seed=5)
        task = TaskData(train_spikes=tr.spikes, train_labels=tr_y,
                        eval_sets={"test": (te.spikes, te_y)})
        record, state = train_task(net, task, epochs=10, cfg=cfg)
        assert record.rows[-1]["eval_test_acc"] >= 0.95
        assert state.step == 10 * 5  # 80 samples / batch 16

    def test_row_schema_and_callbacks(self):
        tr, tr_y, te, te_y = self.toy_batches()
        net = self.fresh_net()
        cfg = TrainConfig(lr=0.01, batch_size=16, loss=LossConfig(), seed=5)
        task = TaskData(train_spikes=tr.spikes, train_labels=tr_y,
                        eval_sets={"test": (te.spikes, te_y)})
        seen = []
        record, _ = train_task(
            net, task, epochs=2, cfg=cfg,
            callbacks=[lambda epoch, row, n: seen.append((epoch, row))])
        assert len(record.rows) == 2
        assert [r["epoch"] for r in record.rows] == [1, 2]
        for key in ("train_acc", "train_loss", "spikes_per_inference",
                    "rate_l0", "rate_l1", "eval_test_acc", "eval_test_loss"):
            assert key in record.rows[0], key
        # callback index is 0-based; the logged epoch column is 1-based
        assert seen == [(0, record.rows[0]), (1, record.rows[1])]

    def test_same_seed_reproduces_series(self):
        tr, tr_y, _, _ = self.toy_batches()
        outs = []
        for _ in range(2):
            net = self.fresh_net()
            cfg = TrainConfig(lr=0.01, batch_size=16, loss=LossConfig(),
                              seed=5)
            task = TaskData(train_spikes=tr.spikes, train_labels=tr_y,
                            eval_sets={})
            record, _ = train_task(net, task, epochs=3, cfg=cfg)
            outs.append(record.series("train_loss"))
        assert outs[0] == outs[1]

    def test_penalty_narrows_rate_spread(self):
        # stronger homeostatic pressure must not widen the spread of
        # hidden firing rates on the same data and seed
        tr, tr_y, _, _ = self.toy_batches()

        def rate_std(lam):
            net = self.fresh_net()
            cfg = TrainConfig(lr=0.01, batch_size=16,
                              loss=LossConfig(lambda_var=lam), seed=5)
            task = TaskData(train_spikes=tr.spikes, train_labels=tr_y,
                            eval_sets={})
            train_task(net, task, epochs=30, cfg=cfg)
            trace = forward(net, tr.spikes, record=True)
            mu, _ = firing_stats(trace, 0)
            return float(np.std(mu))

        assert rate_std(0.1) <= rate_std(0.0)
