import json

import pytest

from dcbrs.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main, read_config_file
from dcbrs.samplers import ConfigurationError
from dcbrs.streams import Blob, format_synthetic


@pytest.fixture
def spec_file(tmp_path):
    blobs = [Blob(0, (0.2, 0.2), 0.001, 30), Blob(0, (0.2, 0.8), 0.001, 10),
             Blob(1, (0.8, 0.5), 0.001, 30)]
    path = tmp_path / "blobs.ini"
    path.write_text(format_synthetic(blobs))
    return path


def base_args(spec_file):
    return ["--dataset", "synthetic", "--synthetic-spec", str(spec_file), "--memory-size", "10",
            "--runs", "2", "--replay-steps", "1", "--retention", "1.0"]


def test_run_writes_report(spec_file, tmp_path, capsys):
    out = tmp_path / "report.json"
    code = main(["run", *base_args(spec_file), "--policy", "rs,cbrs", "--out", str(out)])
    assert code == EXIT_OK
    report = json.loads(out.read_text())
    assert [a["policy"] for a in report["aggregates"]] == ["reservoir", "cbrs"]
    assert report["config"]["memory_size"] == 10
    printed = capsys.readouterr().out
    assert "seed=0" in printed and "scenario=base" in printed and str(out) in printed


def test_csv_format(spec_file, tmp_path):
    out = tmp_path / "report.txt"
    assert main(["run", *base_args(spec_file), "--policy", "cbrs", "--out", str(out),
                 "--format", "csv"]) == EXIT_OK
    assert out.read_text().startswith("row,scenario,dataset")


def test_config_file_with_flag_override(spec_file, tmp_path):
    cfg = tmp_path / "run.conf"
    cfg.write_text(f"# experiment\ndataset = synthetic\nsynthetic_spec = {spec_file}\n"
                   "memory-size = 12\nruns = 1\nreplay_steps = 1\nretention = 1.0\n"
                   "policies = cbrs\nseed = 3\n")
    out = tmp_path / "r.json"
    assert main(["run", "--config", str(cfg), "--seed", "4", "--out", str(out)]) == EXIT_OK
    config = json.loads(out.read_text())["config"]
    assert config["memory_size"] == 12 and config["seed"] == 4 and config["policies"] == ["cbrs"]


def test_read_config_file_errors(tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text("no_such_field = 1\n")
    with pytest.raises(ConfigurationError):
        read_config_file(bad)
    bad.write_text("runs = many\n")
    with pytest.raises(ConfigurationError):
        read_config_file(bad)


@pytest.mark.parametrize("args", [
    ["run", "--scenario", "dreamy"],
    ["run", "--policy", "lru"],
    ["run", "--runs", "0"],
    ["run", "--timing", "maybe"],
])
def test_configuration_errors(args, capsys):
    assert main(args) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_missing_data_is_io_error(tmp_path, capsys):
    assert main(["run", "--data-dir", str(tmp_path), "--runs", "1"]) == EXIT_IO
    assert "I/O error" in capsys.readouterr().err


def test_unwritable_output_is_io_error(spec_file, tmp_path):
    out = tmp_path / "nope" / "r.json"
    assert main(["run", *base_args(spec_file), "--policy", "cbrs", "--out", str(out)]) == EXIT_IO


def test_gen_and_report(spec_file, tmp_path, capsys):
    gen_dir = tmp_path / "gen"
    assert main(["gen", *base_args(spec_file), "--scenario", "realistic", "--merge-target", "1",
                 "--out", str(gen_dir)]) == EXIT_OK
    manifest = json.loads((gen_dir / "manifest.json").read_text())
    assert manifest["merge_map"] == {"0": 0, "1": 0}
    lines = (gen_dir / "stream.csv").read_text().splitlines()
    assert lines[0] == "stream_id,batch,source_id,label,sub_label"
    assert len(lines) - 1 == manifest["n_instances"] == 70

    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["run", *base_args(spec_file), "--policy", "cbrs", "--out", str(a)])
    main(["run", *base_args(spec_file), "--policy", "cbrs", "--seed", "1", "--out", str(b)])
    merged = tmp_path / "merged.json"
    assert main(["report", str(a), str(b), "--out", str(merged)]) == EXIT_OK
    assert len(json.loads(merged.read_text())["runs"]) == 4
    assert main(["report", str(tmp_path / "missing.json")]) == EXIT_IO
