import json
import subprocess
import sys

import numpy as np
import pytest

from hgpss.cli import EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, build_parser, main, resolve_config
from hgpss.experiment import ExperimentConfig, ingest_csv_frames

SMALL = {"data": {"n": 32, "t_steps": 2, "num_blobs": 2, "blob_width": 4}}


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_generate(tmp_path):
    out = tmp_path / "beta.csv"
    assert main(["generate", "--n", "40", "--t-steps", "4", "--seed-data", "3", "--out", str(out)]) == EXIT_OK
    assert ingest_csv_frames(out).shape == (4, 40)


def test_generate_into_directory(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "d")]) == EXIT_OK
    assert (tmp_path / "d" / "beta_true.csv").exists()


def test_precedence_flags_over_file(small_config):
    args = build_parser().parse_args(["run", "--config", str(small_config), "--ratio", "0.5",
                                      "--seed-noise", "9", "--variant", "one_level"])
    cfg = resolve_config(args)
    assert cfg.data.n == 32 and cfg.measurement_ratio == 0.5
    assert cfg.seeds.noise == 9 and cfg.seeds.data == 0 and cfg.variant == "one_level"


def test_run_writes_artifacts_and_is_deterministic(tmp_path, small_config, capsys):
    for name in ("a", "b"):
        rc = main(["run", "--config", str(small_config), "--variant", "one_level", "--out", str(tmp_path / name)])
        assert rc == EXIT_OK
    assert "NMSE=" in capsys.readouterr().out
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    echoed = ExperimentConfig.load(tmp_path / "a" / "config.resolved.json")
    assert echoed.output_dir == str(tmp_path / "a")


def test_run_from_csv(tmp_path):
    main(["generate", "--n", "24", "--t-steps", "2", "--num-blobs", "1", "--out", str(tmp_path / "b.csv")])
    rc = main(["run", "--data-csv", str(tmp_path / "b.csv"), "--variant", "independent", "--out", str(tmp_path / "r")])
    assert rc == EXIT_OK
    np.testing.assert_array_equal(ingest_csv_frames(tmp_path / "r" / "beta_true.csv"),
                                  ingest_csv_frames(tmp_path / "b.csv"))


def test_compare(tmp_path, small_config, capsys):
    rc = main(["compare", "--config", str(small_config), "--seeds", "2",
               "--variants", "hierarchical", "one_level", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "nmse" in out and "on" in out and "/2 seeds" in out
    assert (tmp_path / "compare.csv").read_text().startswith("metric,hierarchical,one_level,best")


def test_eval(tmp_path, capsys):
    truth = tmp_path / "t.csv"
    est = tmp_path / "e.csv"
    truth.write_text("0,1,0\n0,0,2\n")
    est.write_text("0,1,0\n0,0,0\n")
    rc = main(["eval", "--truth", str(truth), "--estimate", str(est), "--estimate", str(truth),
               "--label", "partial", "--label", "exact", "--out", str(tmp_path / "m")])
    assert rc == EXIT_OK
    metrics = json.loads((tmp_path / "m" / "metrics.json").read_text())
    assert metrics[0]["nmse"] == pytest.approx(0.8) and metrics[1]["nmse"] == 0.0
    assert "exact" in capsys.readouterr().out


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == EXIT_USAGE

    def test_bad_value(self):
        assert main(["run", "--ratio", "2.0"]) == EXIT_USAGE

    def test_bad_csv(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("1,2\n3\n")
        assert main(["run", "--data-csv", str(p)]) == EXIT_USAGE

    def test_label_count_mismatch(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("1,0\n")
        assert main(["eval", "--truth", str(p), "--estimate", str(p), "--label", "a", "--label", "b"]) == EXIT_USAGE

    def test_usage_error(self):
        with pytest.raises(SystemExit) as info:
            main(["run", "--variant", "deep"])
        assert info.value.code == EXIT_USAGE

    def test_divergence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({**SMALL, "ep": {"min_cavity_var": 1e6}}))
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == EXIT_DIVERGED
        assert (tmp_path / "r" / "diagnostics.json").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hgpss", "generate", "--out", str(tmp_path / "x.csv")],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0, proc.stderr
