import json

import pytest

from platevol.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    args = ["synth", str(root), "--preset", "mixed", "--fractions", "0", "0.5", "1", "--seed", "3"]
    assert main(["-q"] + args) == 0
    return root


def test_synth_layout(dataset):
    dirs = sorted(p.name for p in dataset.iterdir())
    assert dirs == ["mixed_P1", "mixed_P2", "mixed_P3"]
    assert (dataset / "mixed_P2" / "truth.json").exists()


def test_run_json(dataset, capsys):
    assert main(["run", str(dataset / "mixed_P2"), "--format", "json", "--no-refine"]) == 0
    rep = json.loads(capsys.readouterr().out)
    row = rep[0] if isinstance(rep, list) else rep
    assert row["scene_id"] == "mixed_P2" and row["method_tag"] == "GT"
    assert row["intake_ml"] > 0


def test_run_verbose(dataset, capsys):
    assert main(["run", str(dataset / "mixed_P1"), "-v"]) == 0
    err = capsys.readouterr().err
    assert "plate_circle" in err and "tilt_correction" in err


def test_eval_outputs_deterministic(dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["eval", str(dataset), "--out-dir", str(out)]) == 0
    for name in ("reports.csv", "table1.csv", "plates.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "table1.csv").read_text().splitlines()[1].startswith("GT,")


def test_config_error_exit(dataset, capsys):
    assert main(["run", str(dataset / "mixed_P1"), "--r-min", "70", "--r-max", "60"]) == 2
    assert "config error" in capsys.readouterr().err


def test_data_error_exit(tmp_path, capsys):
    (tmp_path / "manifest.json").write_text("{}")
    assert main(["run", str(tmp_path)]) == 3
    assert main(["run", str(tmp_path / "nope")]) == 3


def test_no_circle_exit(dataset, tmp_path):
    assert main(["run", str(dataset / "mixed_P1"), "--r-min", "5", "--r-max", "8", "--min-votes", "0.99"]) == 3


def test_seeds_check(dataset, capsys):
    assert main(["seeds-check", str(dataset / "mixed_P1")]) == 0
    assert "ok" in capsys.readouterr().out
    # the fully eaten plate has no food stroke
    assert main(["seeds-check", str(dataset / "mixed_P3")]) == 3
