import json

import numpy as np
import pytest

from hgpss.ep_frame import EPDivergedError, GaussianBelief, ep_frame_run
from hgpss.experiment import (
    VARIANTS,
    BlobSpec,
    ConfigError,
    EmptyCSVError,
    ExperimentConfig,
    NonNumericCSVError,
    RaggedCSVError,
    execute,
    generate_blob_sequence,
    ingest_csv_frames,
    load_truth,
    run_comparison,
    run_experiment,
    write_matrix_csv,
)
from hgpss.model import make_sensing_matrix, observe


def small(**sections):
    base = ExperimentConfig().updated(data={"n": 32, "t_steps": 3, "num_blobs": 2, "blob_width": 4})
    return base.updated(**sections)


class TestBlobs:
    def test_no_drift_keeps_support(self):
        b = generate_blob_sequence(BlobSpec(drift_std=0.0), 4) != 0
        assert all(np.array_equal(b[0], row) for row in b)

    def test_single_blob_width(self):
        frames = generate_blob_sequence(BlobSpec(n=64, num_blobs=1, blob_width=5, t_steps=15), 2)
        assert all(np.count_nonzero(row) == 5 for row in frames)

    def test_consecutive_overlap(self):
        overlaps = []
        for seed in range(50):
            b = generate_blob_sequence(BlobSpec(drift_std=1.0, t_steps=20), seed) != 0
            overlaps += [np.sum(b[t] & b[t + 1]) / np.sum(b[t] | b[t + 1]) for t in range(19)]
        assert np.mean(overlaps) >= 0.6

    def test_deterministic(self):
        np.testing.assert_array_equal(generate_blob_sequence(BlobSpec(), 9), generate_blob_sequence(BlobSpec(), 9))

    @pytest.mark.parametrize("kw", [{"blob_width": 0}, {"num_blobs": 7, "blob_width": 5}, {"drift_std": -1.0}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ConfigError):
            BlobSpec(**kw)


class TestCSV:
    def test_parse(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("0,1,0\n0,0,2\n")
        np.testing.assert_array_equal(ingest_csv_frames(p), [[0, 1, 0], [0, 0, 2]])

    def test_ragged_names_row(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("0,1,0\n0,0\n")
        with pytest.raises(RaggedCSVError, match="row 2") as info:
            ingest_csv_frames(p)
        assert info.value.line == 2

    def test_non_numeric(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("0,1\n0,x\n")
        with pytest.raises(NonNumericCSVError, match="row 2"):
            ingest_csv_frames(p)

    def test_empty(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("")
        with pytest.raises(EmptyCSVError):
            ingest_csv_frames(p)

    def test_round_trip(self, tmp_path):
        frames = generate_blob_sequence(BlobSpec(), 5)
        write_matrix_csv(tmp_path / "b.csv", frames)
        assert np.max(np.abs(ingest_csv_frames(tmp_path / "b.csv") - frames)) <= 1e-12


class TestConfig:
    def test_round_trip_through_dict(self):
        cfg = small(variant="one_level", seeds={"data": 11})
        again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again.to_dict() == cfg.to_dict()
        assert again.threshold == pytest.approx(0.1)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"bogus": 1})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"ep": {"sweeps": 3}})

    @pytest.mark.parametrize("kw", [
        {"measurement_ratio": 0.0}, {"measurement_ratio": 1.5}, {"variant": "deep"},
        {"threshold": -1.0}, {"mask_source": "oracle"},
    ])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw)

    def test_csv_source_needs_path(self):
        with pytest.raises(ConfigError):
            small(data={"source": "csv"})

    def test_load_errors(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(p)
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "missing.json")

    def test_shipped_default_config_matches(self):
        from pathlib import Path

        shipped = Path(__file__).resolve().parents[1] / "configs" / "default.json"
        assert json.loads(shipped.read_text()) == ExperimentConfig().to_dict()


class TestExecute:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_noiseless_square_system_recovers(self, variant):
        cfg = small(measurement_ratio=1.0, variant=variant, model={"noise_var": 1e-6, "data_noise_var": 0.0})
        assert execute(cfg).report.nmse <= 1e-3

    def test_one_level_is_direct_frame_loop(self):
        cfg = small(variant="one_level")
        res = execute(cfg)
        beta = load_truth(cfg)
        hyper = cfg.model.hyper(32, 13, 3)
        x = make_sensing_matrix(hyper, cfg.seeds.sensing)
        y = observe(x, beta, hyper.noise_var, cfg.seeds.noise)
        prior = GaussianBelief(np.zeros(32), hyper.spatial_cov())
        for t in range(3):
            direct = ep_frame_run(y[t], x, hyper, prior, cfg.ep)
            np.testing.assert_array_equal(res.beta_hat[t], direct.beta_belief.mean)
        assert res.mu_smoothed is None and "outer_iters" not in res.diagnostics

    def test_csv_source(self, tmp_path):
        frames = generate_blob_sequence(BlobSpec(n=32, t_steps=2, num_blobs=2, blob_width=4), 0)
        write_matrix_csv(tmp_path / "b.csv", frames)
        cfg = small(data={"source": "csv", "csv_path": str(tmp_path / "b.csv")}, variant="independent")
        res = execute(cfg)
        np.testing.assert_array_equal(res.beta_true, frames)

    def test_model_source(self):
        res = execute(small(data={"source": "model"}, variant="one_level"))
        assert res.beta_true.shape == (3, 32)

    def test_inclusion_mask_source(self):
        a = execute(small(variant="one_level"))
        b = execute(small(variant="one_level", mask_source="inclusion"))
        assert a.report.nmse == b.report.nmse
        assert 0 <= b.report.f_measure <= 1


class TestArtifacts:
    def test_layout_and_determinism(self, tmp_path):
        cfg = small()
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b")
        names = {p.name for p in (tmp_path / "a").iterdir()}
        assert names == {"config.resolved.json", "metrics.json", "metrics.csv", "beta_true.csv",
                         "beta_hat.csv", "inclusion_prob.csv", "mu_smoothed.csv", "diagnostics.json"}
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert (tmp_path / "a" / "metrics.csv").read_text().startswith("metric,value\n")

    def test_rerun_from_echoed_config(self, tmp_path):
        first = run_experiment(small(variant="independent"), tmp_path / "a")
        echoed = ExperimentConfig.load(tmp_path / "a" / "config.resolved.json")
        again = run_experiment(echoed, tmp_path / "b")
        np.testing.assert_array_equal(first.beta_hat, again.beta_hat)
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()

    def test_no_mu_file_for_baselines(self, tmp_path):
        run_experiment(small(variant="one_level"), tmp_path)
        assert not (tmp_path / "mu_smoothed.csv").exists()

    def test_diagnostics_content(self, tmp_path):
        run_experiment(small(), tmp_path)
        diag = json.loads((tmp_path / "diagnostics.json").read_text())
        assert diag["indicator_means_spike"] is True
        assert diag["rng_algorithm"] == "numpy.random.PCG64"
        assert isinstance(diag["clip_events_total"], int)
        assert len(diag["frames"]["sweeps"]) == 3 and diag["outer_iters"] >= 1

    def test_divergence_still_writes_diagnostics(self, tmp_path):
        cfg = small(ep={"min_cavity_var": 1e6})
        with pytest.raises(EPDivergedError):
            run_experiment(cfg, tmp_path)
        diag = json.loads((tmp_path / "diagnostics.json").read_text())
        assert "error" in diag and diag["details"]["frame"] == 0
        assert (tmp_path / "config.resolved.json").exists()


def test_comparison_outputs(tmp_path):
    cfg = small(data={"t_steps": 2})
    table, summary = run_comparison(cfg, n_seeds=2, variants=("hierarchical", "one_level"), out_dir=tmp_path)
    assert table.labels == ["hierarchical", "one_level"]
    assert 0 <= summary["hierarchical_nmse_wins"]["one_level"] <= 2
    assert len(summary["per_seed"]["hierarchical"]) == 2
    for name in ("compare.csv", "compare.txt", "compare.json", "config.resolved.json"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "seed_001" / "one_level" / "metrics.json").exists()
