import csv
import json

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from hamp import autodiff as ad
from hamp.synth import SynthSpec, generate
from hamp.trainer import (
    ConfigError,
    HampModel,
    TrainConfig,
    ablation_configs,
    complexity_probe,
    config_from_dict,
    default_probe_sizes,
    depth_sweep,
    evaluate,
    gradcheck,
    load_config,
    load_data,
    time_step,
    time_steps,
    train,
    train_seed,
)

from oracles import logistic_regression


@pytest.fixture(scope="module")
def small_data():
    spec = SynthSpec(n1=30, n2=30, intra_edges=30, intra_size=3, cross_edges=15, cross_size=3, d=4, seed=0)
    return generate(spec).dataset


def quick_config(**kw):
    base = dict(mode="hamp1", steps=3, hidden_dim=8, classifier_hidden=8, epochs=15, patience=5,
                lr=0.01, seeds=[0], dynamics=dict(tau=0.1, delta=1.0, gamma=0.1, activation="tanh"))
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(patience=0), dict(epochs=5, patience=6),
                                    dict(mode="gcn"), dict(dropout=1.0), dict(lr=0.0), dict(seeds=[]),
                                    dict(steps=0), dict(gate_norm="max")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.patience, c.lr) == (500, 50, 1e-3)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="hiden_dim"):
            config_from_dict({"hiden_dim": 4})

    def test_unknown_dynamics_key(self):
        with pytest.raises(ConfigError):
            config_from_dict({"dynamics": {"tua": 0.1}})

    def test_unknown_synthetic_key(self):
        with pytest.raises(ConfigError):
            config_from_dict({"synthetic": {"n3": 5}})

    def test_steps_set_total_time(self):
        c = config_from_dict({"steps": 16, "dynamics": {"tau": 0.25}})
        assert c.num_steps == 16 and c.dynamics.total_time == pytest.approx(4.0)
        assert c.replace(steps=4).dynamics.total_time == pytest.approx(1.0)

    def test_load_relative_paths(self, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"dataset": {"hypergraph": "h.txt"}}))
        c = load_config(tmp_path / "cfg.json")
        assert c.dataset["hypergraph"] == str(tmp_path / "h.txt")

    def test_invalid_json(self, tmp_path):
        (tmp_path / "cfg.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "cfg.json")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "missing.json")

    def test_load_synthetic(self):
        data = load_data(config_from_dict({"synthetic": {"n1": 10, "n2": 10, "intra_edges": 10,
                                                          "intra_size": 3, "cross_edges": 5}}))
        assert data.hypergraph.num_nodes == 20


class TestTrain:
    def test_reaches_planted_signal(self):
        data = generate(SynthSpec(n1=50, n2=50, gap=2.0, seed=0)).dataset
        tr, te = data.split["train"], data.split["test"]
        pred = logistic_regression(data.features[tr], data.labels[tr], data.features[te])
        assert np.mean(pred == data.labels[te]) >= 0.9
        cfg = TrainConfig(mode="hamp1", steps=8, epochs=200, patience=50, lr=0.01, hidden_dim=16,
                          classifier_hidden=16, seeds=[0, 1, 2], dynamics=dict(tau=0.1))
        res = train(cfg, data)
        assert res.num_failed == 0
        assert res.mean >= 0.9

    @pytest.mark.parametrize("mode", ["hamp1", "hamp2", "diffusion"])
    def test_deterministic(self, small_data, mode):
        cfg = quick_config(mode=mode, dropout=0.3, dynamics=dict(tau=0.1, delta=1.0, epsilon=0.1,
                                                                 gamma=0.1, activation="tanh"))
        a = train(cfg, small_data, single_thread=True).seeds[0]
        b = train(cfg, small_data, single_thread=True).seeds[0]
        assert a.losses == b.losses and a.val_curve == b.val_curve
        assert a.test_acc == b.test_acc

    def test_seed_isolation(self, small_data):
        both = train(quick_config(seeds=[0, 1]), small_data, jobs=2)
        alone = train(quick_config(seeds=[1]), small_data)
        assert both.seeds[1].losses == alone.seeds[0].losses
        assert both.seeds[1].test_acc == alone.seeds[0].test_acc

    def test_early_stopping_restores_best(self, small_data):
        cfg = quick_config(epochs=60, patience=5)
        res = train_seed(cfg, small_data, 0, keep_params=True)
        assert res.epochs_run <= res.best_epoch + cfg.patience + 1
        assert res.val_acc == max(res.val_curve) == res.val_curve[res.best_epoch]
        model = HampModel(cfg, 4, 2, small_data.hypergraph, np.random.default_rng(99))
        model.load_state_dict(res.params)
        assert evaluate(model, small_data, 0, small_data.split["val"]) == res.val_acc

    def test_result_fields(self, small_data):
        res = train(quick_config(seeds=[0, 1]), small_data)
        d = res.to_dict()
        assert len(d["seeds"]) == 2 and d["num_failed"] == 0
        assert all(0.0 <= a <= 1.0 for a in res.accuracies)
        assert res.std >= 0.0
        assert len(res.trace) == 4
        assert "seed" in res.summary()

    def test_divergence_marks_seed_failed(self, small_data):
        cfg = quick_config(steps=20, learn_coefficients=False,
                           dynamics=dict(tau=1.0, delta=40.0, activation="identity"))
        with np.errstate(over="ignore", invalid="ignore"):
            res = train(cfg, small_data)
        assert res.num_failed == 1 and res.seeds[0].failed
        assert "step" in res.seeds[0].error
        assert np.isnan(res.mean)


class TestModeParity:
    def test_frozen_second_order_matches_classifier_on_mapped_features(self, small_data):
        cfg = quick_config(mode="hamp2", dynamics=dict(tau=0.1, omega=0.0, activation="identity"))
        model = HampModel(cfg, 4, 2, small_data.hypergraph, np.random.default_rng(0))
        for t in model.mp.tensors().values():
            t.data[...] = 0.0
        model.params["velocity.w"].data[...] = np.eye(cfg.hidden_dim)
        model.params["velocity.b"].data[...] = 0.0
        x = small_data.features
        with ad.no_grad():
            mapped = ad.add(ad.as_tensor(x) @ model.params["input.w"], model.params["input.b"])
            np.testing.assert_array_equal(model.embed(x).data, mapped.data)
            np.testing.assert_array_equal(model.forward(x).data, model.classify(mapped).data)


class TestSweeps:
    def test_single_depth_equals_train(self, small_data):
        cfg = quick_config()
        [(depth, res)] = depth_sweep(cfg, small_data, [5])
        direct = train(cfg.replace(steps=5), small_data)
        assert depth == 5 and res.accuracies == direct.accuracies
        assert res.seeds[0].losses == direct.seeds[0].losses

    def test_sweep_csv(self, small_data, tmp_path):
        depth_sweep(quick_config(), small_data, [1, 2], out_csv=tmp_path / "s.csv")
        rows = list(csv.reader(open(tmp_path / "s.csv")))
        assert rows[0] == ["depth", "mode", "total_time", "mean_acc", "std_acc", "num_failed"]
        assert [r[0] for r in rows[1:]] == ["1", "2"]
        assert float(rows[2][2]) == pytest.approx(0.2)

    def test_empty_depths(self, small_data):
        with pytest.raises(ConfigError):
            depth_sweep(quick_config(), small_data, [])

    def test_noise_grid_gives_three_runs(self):
        cells = ablation_configs(quick_config(), ["noise"], (0.0, 0.1, 0.3))
        assert [c.dynamics.epsilon for *_, c in cells] == [0.0, 0.1, 0.3]

    def test_empty_toggles_single_baseline(self):
        cells = ablation_configs(quick_config(), [])
        assert len(cells) == 1 and cells[0][:3] == (None, None, None)

    def test_full_grid(self):
        cells = ablation_configs(quick_config(), ["repulsion", "allen_cahn", "noise"])
        assert len(cells) == 12
        off = [c for r, a, e, c in cells if r is False and a is False]
        assert all(c.dynamics.gamma == 0.0 and c.dynamics.delta == 0.0 for c in off)
        on = [c for r, a, e, c in cells if r and a]
        assert all(c.dynamics.gamma == 0.1 and c.dynamics.delta == 1.0 for c in on)

    def test_unknown_toggle(self):
        with pytest.raises(ConfigError):
            ablation_configs(quick_config(), ["dropout"])


class TestComplexityProbe:
    def test_single_size_has_no_fit(self):
        with pytest.warns(RuntimeWarning):
            res = complexity_probe(default_probe_sizes(50, (1,)), channels=4, repeats=2)
        assert res.slope is None and len(res.rows) == 1
        # 12 intra edges per group plus 25 cross edges, five members each, counted from both sides
        assert res.rows[0].incidences == 2 * (2 * 12 + 25) * 5

    def test_sizes_scale_incidences(self):
        specs = default_probe_sizes(100, (1, 2, 4, 10))
        counts = [generate(s).hypergraph.num_incidences for s in specs]
        assert counts[-1] / counts[0] == pytest.approx(10.0, rel=0.05)

    def test_doubling_incidences_doubles_time(self):
        with threadpool_limits(1):
            res = complexity_probe(default_probe_sizes(4000, (1, 2)), channels=32, repeats=7)
        ratio = res.rows[1].seconds_per_step / res.rows[0].seconds_per_step
        assert 1.6 <= ratio <= 2.6

    def test_doubling_channels_quadruples_time(self):
        h = generate(default_probe_sizes(400, (1,))[0]).hypergraph
        with threadpool_limits(1):
            small, large = time_steps([(h, 1024, 0), (h, 2048, 0)], repeats=5)
        assert 3.0 <= large / small <= 5.5

    def test_timing_positive(self):
        h = generate(default_probe_sizes(50, (1,))[0]).hypergraph
        assert time_step(h, 4, repeats=3) > 0


class TestGradcheck:
    @pytest.mark.parametrize("mode", ["hamp1", "hamp2", "diffusion"])
    def test_modes(self, mode):
        out = gradcheck(0, mode)
        assert out["max"] < 1e-4
        assert out["num_params"] >= len(out["per_tensor"]) > 0
