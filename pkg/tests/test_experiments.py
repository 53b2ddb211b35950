import json

import numpy as np
import pytest

from egnn.experiments import (
    ConfigError,
    ExperimentConfig,
    deterministic_view,
    dumps_report,
    evaluate,
    generate_splits,
    invariant_target,
    load_data,
    read_splits,
    run_experiment,
    write_splits,
)
from egnn.harness import random_transform

NBODY_SMALL = {"total_steps": 300, "burn_in": 200, "slice_len": 100}


def small(task, **kw):
    base = {
        "nbody": dict(data_params=NBODY_SMALL, n_train=8, n_val=4, n_test=4, hidden_dim=8, num_layers=2, epochs=2, batch_size=4),
        "autoencoder": dict(n_train=6, n_val=2, n_test=3, hidden_dim=8, num_layers=2, epochs=2, batch_size=3),
        "invariant": dict(n_train=12, n_val=4, n_test=6, hidden_dim=8, num_layers=2, epochs=2, batch_size=6),
    }[task]
    return ExperimentConfig(task=task, **{**base, **kw})


class TestConfig:
    @pytest.mark.parametrize(
        "field,value",
        [("epochs", -1), ("epochs", 0), ("batch_size", 0), ("lr", 0.0), ("n_val", -2), ("weight_decay", -1.0),
         ("noise_sigma", -0.5), ("lr_schedule", "step"), ("task", "qm9"), ("model", "schnet"), ("epochs", 1.5)],
    )
    def test_invalid_values_name_the_field(self, field, value):
        with pytest.raises(ConfigError, match=field):
            ExperimentConfig.from_dict({field: value})

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="epoch"):
            ExperimentConfig.from_dict({"epoch": 3})

    def test_early_stopping_needs_validation(self):
        with pytest.raises(ConfigError, match="early_stopping"):
            ExperimentConfig(early_stopping=True, n_val=0)

    def test_defaults_per_task(self):
        assert ExperimentConfig(task="nbody").model == "egnn_velocity"
        cfg = ExperimentConfig(task="autoencoder")
        assert (cfg.model, cfg.n_train, cfg.n_val, cfg.n_test) == ("egnn", 500, 100, 100)

    def test_json_round_trip_and_digest(self, tmp_path):
        cfg = small("nbody")
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        back = ExperimentConfig.from_json(tmp_path / "c.json")
        assert back == cfg and back.digest() == cfg.digest()
        assert small("nbody", seed=1).digest() != cfg.digest()

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(ConfigError, match="invalid JSON"):
            ExperimentConfig.from_json(tmp_path / "c.json")
        with pytest.raises(ConfigError, match="not found"):
            ExperimentConfig.from_json(tmp_path / "missing.json")


class TestData:
    def test_invariant_target_is_invariant(self, rng):
        pts = rng.standard_normal((6, 3))
        T = random_transform(3, rng, reflect=True)
        assert invariant_target(T.apply_points(pts)) == pytest.approx(invariant_target(pts), rel=1e-13)
        assert invariant_target(np.zeros((3, 2))) == 3.0

    @pytest.mark.parametrize("task", ["nbody", "autoencoder", "invariant"])
    def test_write_read_round_trip(self, tmp_path, task):
        cfg = small(task)
        splits = generate_splits(cfg)
        write_splits(task, splits, tmp_path)
        back = read_splits(task, tmp_path)
        assert set(back) == {"train", "val", "test"}
        assert load_data(small(task, dataset=str(tmp_path))).keys() == back.keys()

    def test_splits_are_disjoint_and_seeded(self):
        a, b = generate_splits(small("nbody")), generate_splits(small("nbody"))
        assert np.array_equal(a["train"][0].p0, b["train"][0].p0)
        seeds = [t.meta["seed"] for s in ("train", "val", "test") for t in a[s]]
        assert len(set(seeds)) == len(seeds)

    def test_bad_data_params(self):
        with pytest.raises(ConfigError, match="data_params"):
            generate_splits(small("nbody", data_params={"particles": 3}))
        with pytest.raises(ConfigError, match="family"):
            generate_splits(small("autoencoder", data_params={"family": "grid"}))

    def test_missing_dataset_directory(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            read_splits("nbody", tmp_path / "nope")
        with pytest.raises(ConfigError, match="no train split"):
            read_splits("nbody", tmp_path)


class TestRunners:
    @pytest.mark.parametrize("task", ["nbody", "autoencoder", "invariant"])
    def test_report_shape_and_determinism(self, task):
        r1, model = run_experiment(small(task))
        r2, _ = run_experiment(small(task))
        assert dumps_report(deterministic_view(r1)) == dumps_report(deterministic_view(r2))
        assert set(r1) == {"config_digest", "per_epoch", "best_epoch", "test", "timing", "meta"}
        assert len(r1["per_epoch"]) == 2 and r1["timing"]["fwd_ms_per_batch"] > 0
        assert evaluate(small(task), model) == r1["test"]

    def test_nbody_metrics(self):
        report, _ = run_experiment(small("nbody"))
        assert {"mse", "linear_mse", "linear_t"} == set(report["test"])

    def test_autoencoder_baseline_fields(self):
        report, _ = run_experiment(small("autoencoder", noise_sigma=0.5))
        assert report["test"]["baseline_f1"] == 0.0 and report["meta"]["noise_sigma"] == 0.5

    def test_early_stopping_records_best_epoch(self):
        report, _ = run_experiment(small("invariant", epochs=4, early_stopping=True))
        vals = [v for _, v in report["per_epoch"]]
        assert report["best_epoch"] == int(np.argmin(vals))
