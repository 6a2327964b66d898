"""Sequential-task protocol: metrics, gates, exposure, artifacts."""

import json

import numpy as np
import pytest

import ltgate.continual as continual
from ltgate.calibration import CalibrationConfig
from ltgate.continual import (
    ABLATION_MODES,
    ContinualMetrics,
    ExposureConfig,
    TaskDef,
    TaskSchedule,
    ablation_suite,
    gate_analysis,
    hidden_rate_std,
    run_continual,
    unsupervised_exposure_eval,
)
from ltgate.encoding import EncodingSpec, encode, make_toy_dataset
from ltgate.errors import ParameterError
from ltgate.network import build_network, forward
from ltgate.training import (
    LossConfig,
    TrainConfig,
    TrainRecord,
    evaluate,
    firing_stats,
)


def toy_pair(seed=7, n_train=30, n_test=15, features=16, separation=8.0):
    kw = dict(classes=2, feature_dim=features, separation=separation,
              noise=0.1, seed=seed)
    train = make_toy_dataset(split="train", n_per_class=n_train, **kw)
    test = make_toy_dataset(split="test", n_per_class=n_test, **kw)
    return train, test


def small_net(mode="ltgate", seed=1):
    return build_network((16,), [("dense", 12), ("dense", 2)], seed=seed,
                         mode=mode, surrogate_slope=0.5, weight_scale=0.5)


def two_task_schedule(epochs=(4, 4), freqs=(1000.0, 1000.0)):
    train, test = toy_pair()
    return TaskSchedule(tasks=[
        TaskDef(name="first", train_images=train, test_images=test,
                encoding=EncodingSpec(frequency_hz=freqs[0], seed=3),
                epochs=epochs[0]),
        TaskDef(name="second", train_images=train, test_images=test,
                encoding=EncodingSpec(frequency_hz=freqs[1], seed=4),
                epochs=epochs[1]),
    ])


def train_cfg(seed=5, lam=0.01):
    return TrainConfig(lr=0.01, batch_size=16,
                       loss=LossConfig(lambda_var=lam), seed=seed)


class TestScheduleValidation:
    def test_task_name_must_be_lowercase_identifier(self):
        train, test = toy_pair()
        enc = EncodingSpec(frequency_hz=100.0)
        with pytest.raises(ParameterError):
            TaskDef(name="Fast", train_images=train, test_images=test,
                    encoding=enc, epochs=1)
        with pytest.raises(ParameterError):
            TaskDef(name="1st", train_images=train, test_images=test,
                    encoding=enc, epochs=1)

    def test_epochs_and_head_policy(self):
        train, test = toy_pair()
        enc = EncodingSpec(frequency_hz=100.0)
        with pytest.raises(ParameterError):
            TaskDef(name="a", train_images=train, test_images=test,
                    encoding=enc, epochs=0)
        with pytest.raises(ParameterError):
            TaskDef(name="a", train_images=train, test_images=test,
                    encoding=enc, epochs=1, head_policy="grow_head")

    def test_schedule_needs_tasks_and_unique_names(self):
        with pytest.raises(ParameterError):
            TaskSchedule(tasks=[])
        train, test = toy_pair()
        enc = EncodingSpec(frequency_hz=100.0)
        t = TaskDef(name="a", train_images=train, test_images=test,
                    encoding=enc, epochs=1)
        with pytest.raises(ParameterError, match="duplicate"):
            TaskSchedule(tasks=[t, t])

    def test_shared_head_requires_one_class_set(self):
        train, test = toy_pair()
        other = make_toy_dataset(classes=3, n_per_class=5, feature_dim=16,
                                 separation=1.0, seed=0)
        enc = EncodingSpec(frequency_hz=100.0)
        with pytest.raises(ParameterError, match="class set"):
            TaskSchedule(tasks=[
                TaskDef(name="a", train_images=train, test_images=test,
                        encoding=enc, epochs=1),
                TaskDef(name="b", train_images=other, test_images=other,
                        encoding=enc, epochs=1),
            ])

    def test_switch_epochs_are_cumulative(self):
        sched = two_task_schedule(epochs=(2, 4))
        assert sched.switch_epochs == [2, 6]


class TestMetricFormulas:
    def run_with_series(self, monkeypatch, acc_a, acc_b, epochs):
        """Drive run_continual with scripted per-epoch accuracies."""
        phases = iter(range(len(epochs)))
        cursor = [0]

        def scripted(net, data, n_epochs, cfg, adam=None):
            rec = TrainRecord()
            for e in range(n_epochs):
                i = cursor[0]
                cursor[0] += 1
                rec.rows.append({
                    "epoch": e + 1,
                    "train_acc": 1.0,
                    "train_loss": 0.0,
                    "spikes_per_inference": 1.0,
                    "eval_first_acc": acc_a[i],
                    "eval_first_loss": 0.0,
                    "eval_second_acc": acc_b[i],
                    "eval_second_loss": 0.0,
                })
            return rec, adam

        monkeypatch.setattr(continual, "train_task", scripted)
        sched = two_task_schedule(epochs=epochs)
        return run_continual(small_net(), sched, train_cfg(),
                             calibrate_first=False)

    def test_forgetting_is_peak_minus_final_in_points(self, monkeypatch):
        # task A peaks at 0.90 during its own phase, ends at 0.858
        m = self.run_with_series(
            monkeypatch,
            acc_a=[0.88, 0.90, 0.87, 0.858],
            acc_b=[0.30, 0.35, 0.60, 0.80],
            epochs=(2, 2),
        )
        assert m.task_a_peak_acc == 0.90
        assert m.task_a_final_acc == 0.858
        assert m.forgetting == pytest.approx(4.2, abs=1e-9)

    def test_peak_spans_both_phases(self, monkeypatch):
        # a late bump in phase 2 counts toward the peak
        m = self.run_with_series(
            monkeypatch,
            acc_a=[0.80, 0.85, 0.95, 0.70],
            acc_b=[0.30, 0.35, 0.60, 0.80],
            epochs=(2, 2),
        )
        assert m.task_a_peak_acc == 0.95
        assert m.forgetting == pytest.approx(25.0, abs=1e-9)

    def test_convergence_is_first_epoch_at_ninety_percent_of_final(
            self, monkeypatch):
        # final 0.8 -> bar 0.72; series crosses at epoch 2 of phase 2
        m = self.run_with_series(
            monkeypatch,
            acc_a=[0.9, 0.9, 0.9, 0.9, 0.9, 0.9],
            acc_b=[0.20, 0.25, 0.50, 0.71, 0.75, 0.80],
            epochs=(2, 4),
        )
        assert m.task_b_final_acc == 0.80
        assert m.convergence_epochs_task_b == 3

    def test_metrics_reject_inconsistent_forgetting(self):
        with pytest.raises(ParameterError):
            ContinualMetrics(
                final_combined_acc=0.5, task_a_peak_acc=0.9,
                task_a_final_acc=0.8, forgetting=5.0,
                task_b_final_acc=0.5, convergence_epochs_task_b=1,
                per_task_final_acc={}, trajectory=[],
                spikes_per_inference={}, rate_std_hidden=0.0,
                gate_means={}, mode="ltgate", seed=0,
            )


class TestProtocolPurity:
    def test_one_pass_per_task_no_replay_no_reset(self, monkeypatch):
        calls = []

        def spy(net, data, n_epochs, cfg, adam=None):
            calls.append({
                "net": net,
                "spikes": data.train_spikes.spikes,
                "adam_in": adam,
                "epochs": n_epochs,
            })
            rec = TrainRecord()
            rec.rows.append({
                "epoch": 1, "train_acc": 1.0, "train_loss": 0.0,
                "spikes_per_inference": 1.0,
                "eval_first_acc": 0.5, "eval_first_loss": 0.0,
                "eval_second_acc": 0.5, "eval_second_loss": 0.0,
            })
            return rec, "adam_token"

        monkeypatch.setattr(continual, "train_task", spy)
        sched = two_task_schedule(epochs=(1, 1), freqs=(1000.0, 50.0))
        net = small_net()
        run_continual(net, sched, train_cfg(), calibrate_first=False)

        assert len(calls) == 2
        # same network object throughout: no reinitialization between tasks
        assert calls[0]["net"] is net and calls[1]["net"] is net
        # each phase sees only its own task's encoding (no replay mixing)
        expected = [encode(t.train_images, t.encoding).spikes
                    for t in sched.tasks]
        assert np.array_equal(calls[0]["spikes"], expected[0])
        assert np.array_equal(calls[1]["spikes"], expected[1])
        # optimizer state flows from phase 1 into phase 2
        assert calls[0]["adam_in"] is None
        assert calls[1]["adam_in"] == "adam_token"


class TestGateAnalysis:
    def test_fresh_gates_sit_mid_range(self):
        hists = gate_analysis(small_net())
        for h in hists:
            assert h.mass_mid == 1.0
            assert h.mass_low == 0.0 and h.mass_high == 0.0
            assert h.masses.sum() == pytest.approx(1.0, abs=1e-9)
            assert h.counts.sum() in (12, 2)

    def test_frozen_modes_pin_the_gate(self):
        for h in gate_analysis(small_net(mode="single_fast")):
            assert h.mass_low == 1.0
        for h in gate_analysis(small_net(mode="single_slow")):
            assert h.mass_high == 1.0

    def test_histogram_rows(self):
        h = gate_analysis(small_net(), bins=10)[0]
        rows = h.to_rows("init")
        assert len(rows) == 10
        assert rows[0]["stage"] == "init"
        assert sum(r["count"] for r in rows) == 12
        assert rows[0]["bin_lo"] == 0.0 and rows[-1]["bin_hi"] == 1.0


class TestHiddenRateStd:
    def test_single_layer_network_has_no_hidden_layers(self):
        net = build_network((16,), [("dense", 2)], seed=0)
        spikes = np.zeros((2, 5, 16), dtype=np.uint8)
        assert hidden_rate_std(net, spikes) == 0.0

    def test_matches_direct_raster_statistics(self):
        net = small_net()
        rng = np.random.default_rng(0)
        spikes = (rng.random((6, 50, 16)) < 0.5).astype(np.uint8)
        trace = forward(net, spikes, record=True)
        mu, _ = firing_stats(trace, 0)
        assert hidden_rate_std(net, spikes) == pytest.approx(
            float(np.std(mu)), abs=0)


class TestExposure:
    def trained_setup(self):
        train, test = toy_pair()
        enc_fast = EncodingSpec(frequency_hz=1000.0, seed=3)
        enc_slow = EncodingSpec(frequency_hz=10.0, seed=9)
        net = small_net()
        sched = TaskSchedule(tasks=[
            TaskDef(name="only", train_images=train, test_images=test,
                    encoding=enc_fast, epochs=3),
        ])
        run_continual(net, sched, train_cfg())
        stream = encode(train, enc_slow)
        eval_batch = encode(test, enc_slow)
        return net, stream, eval_batch, test.labels

    def test_flag_off_equals_plain_evaluation(self):
        net, stream, eval_batch, labels = self.trained_setup()
        res = unsupervised_exposure_eval(net, stream, eval_batch.spikes,
                                         labels, recalibrate=False)
        direct = evaluate(net, eval_batch.spikes, labels)
        assert res.accuracy == direct["accuracy"]
        assert not res.recalibrated
        assert res.calibration_converged is None

    def test_recalibration_never_mutates_the_input_net(self):
        net, stream, eval_batch, labels = self.trained_setup()
        before = [lay.threshold.v_th for lay in net.layers]
        res = unsupervised_exposure_eval(net, stream, eval_batch.spikes,
                                         labels, recalibrate=True,
                                         calibration=CalibrationConfig())
        assert [lay.threshold.v_th for lay in net.layers] == before
        assert isinstance(res.recalibrated, bool)

    def test_silent_stream_falls_back_to_zero_shot(self):
        # an untrained net has zero bias, so a silent stream leaves every
        # layer silent at any threshold and recalibration cannot reach
        # the band; the evaluation must proceed without it
        _, _, eval_batch, labels = self.trained_setup()
        net = small_net(seed=2)
        silent = np.zeros_like(eval_batch.spikes)
        res = unsupervised_exposure_eval(net, silent, eval_batch.spikes,
                                         labels, recalibrate=True,
                                         calibration=CalibrationConfig())
        assert not res.recalibrated
        assert res.calibration_converged is False
        direct = evaluate(net, eval_batch.spikes, labels)
        assert res.accuracy == direct["accuracy"]


class TestRunContinual:
    def test_same_domain_control_does_not_forget(self):
        # both phases train on the same distribution: first-task accuracy
        # must hold to within a couple of points
        sched = two_task_schedule(epochs=(4, 4))
        m = run_continual(small_net(), sched, train_cfg())
        assert abs(m.forgetting) <= 2.0
        assert m.final_combined_acc >= 0.9

    def test_untrained_net_scores_near_chance(self):
        train, test = toy_pair()
        batch = encode(test, EncodingSpec(frequency_hz=1000.0, seed=3))
        stats = evaluate(small_net(), batch.spikes, test.labels)
        assert 0.3 <= stats["accuracy"] <= 0.7

    def test_seed_reproducibility(self):
        outs = []
        for _ in range(2):
            m = run_continual(small_net(), two_task_schedule(), train_cfg())
            outs.append(m.to_dict())
        assert outs[0] == outs[1]

    def test_artifacts(self, tmp_path):
        sched = two_task_schedule(epochs=(2, 2), freqs=(1000.0, 50.0))
        exposure = ExposureConfig(
            encoding=EncodingSpec(frequency_hz=10.0, seed=8),
            recalibrate=True, after_task=0)
        out = tmp_path / "run"
        m = run_continual(small_net(), sched, train_cfg(),
                          exposure=exposure, out_dir=out,
                          config_hash="abc123")
        expected = {
            "metrics.csv", "summary.json", "gates_layer0.csv",
            "gates_layer1.csv", "checkpoint_task1.ltgc",
            "checkpoint_task2.ltgc", "run_manifest.json",
        }
        assert {p.name for p in out.iterdir()} == expected

        summary = json.loads((out / "summary.json").read_text())
        assert summary["forgetting"] == m.forgetting
        assert summary["exposure"] is not None
        assert len(summary["trajectory"]) == 4

        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["config_hash"] == "abc123"
        assert manifest["switch_epochs"] == [2, 4]
        assert sorted(manifest["artifacts"]) == sorted(
            expected - {"run_manifest.json"})

        # metrics.csv: one row per epoch per eval set
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 4 * 2

        gates = (out / "gates_layer0.csv").read_text()
        for stage in ("init", "after_task1", "after_task2"):
            assert stage in gates

    def test_gate_stages_track_every_boundary(self):
        m = run_continual(small_net(), two_task_schedule(epochs=(1, 1)),
                          train_cfg())
        assert set(m.gate_means) == {"init", "after_task1", "after_task2"}
        assert len(m.gate_means["init"]) == 2

    def test_rerun_writes_identical_summary(self, tmp_path):
        sched = two_task_schedule(epochs=(2, 2))
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            run_continual(small_net(), sched, train_cfg(), out_dir=out)
            blobs.append((out / "summary.json").read_bytes())
        assert blobs[0] == blobs[1]


class TestAblationSuite:
    def test_modes_and_table(self, tmp_path):
        sched = two_task_schedule(epochs=(1, 1))

        def build(mode):
            return small_net(mode=mode)

        table = ablation_suite(build, sched, train_cfg(),
                               out_dir=tmp_path / "abl")
        assert set(table.metrics) == set(ABLATION_MODES)
        assert [r["mode"] for r in table.rows] == list(ABLATION_MODES)
        baseline = table.metrics["single_fast"]
        for mode in ABLATION_MODES:
            ratios = table.metrics[mode].spike_ratios
            assert ratios is not None
            for name, value in ratios.items():
                if baseline.spikes_per_inference[name] > 0:
                    assert value == pytest.approx(
                        table.metrics[mode].spikes_per_inference[name]
                        / baseline.spikes_per_inference[name])
        # baseline's ratio against itself is unity wherever it spikes
        for name, value in baseline.spike_ratios.items():
            if baseline.spikes_per_inference[name] > 0:
                assert value == pytest.approx(1.0)

        assert (tmp_path / "abl" / "ablation_table.csv").exists()
        for mode in ABLATION_MODES:
            blob = json.loads(
                (tmp_path / "abl" / mode / "summary.json").read_text())
            assert blob["spike_ratios"] is not None

    def test_no_var_reg_runs_full_gate_architecture(self, tmp_path):
        sched = two_task_schedule(epochs=(1, 1))
        seen = {}

        def build(mode):
            net = small_net(mode=mode)
            seen[mode] = seen.get(mode, 0) + 1
            return net

        table = ablation_suite(build, sched, train_cfg(),
                               modes=("ltgate", "no_var_reg"))
        # the ablated cell asks for the ltgate architecture twice
        assert seen == {"ltgate": 2}
        assert table.metrics["no_var_reg"].mode == "ltgate"
