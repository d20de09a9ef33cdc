"""End-to-end runs of the ``sitsr`` command line, in process."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from sitsr.cli import apply_overrides, main, resolve_config
from sitsr.core import ConfigError, Raster, SRSample, TimedSeries, Timestamp, load_series, save_sample
from sitsr.datapipe import DiskDataset, write_dataset

TINY = {
    "synth": {"n_samples": 24, "lr_size": 8, "series_min": 3, "series_max": 6},
    "train": {"steps": 3, "batch_size": 2, "val_interval": 3, "val_samples": 4, "series_length": 4,
              "model": {"kind": "highresnet_ltae", "base_channels": 8, "n_rrdb_blocks": 1}},
}


def files(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_synth_writes_manifest_and_resolved_config(workspace):
    data = workspace / "data"
    assert (data / "manifest.json").exists()
    resolved = json.loads((data / "config.resolved.json").read_text())
    assert resolved["synth"]["n_samples"] == 24
    assert sum(len(DiskDataset(data, s)) for s in ("train", "val", "test")) == 24


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "checkpoints" / "final.pt").exists()
    rows = list(csv.DictReader(open(run / "reports" / "train_log.csv")))
    assert [r["step"] for r in rows] == ["1", "2", "3"]
    assert rows[-1]["val_MAE"] != ""
    resolved = json.loads((run / "config.resolved.json").read_text())
    assert resolved["train"]["steps"] == 3


def test_synth_is_byte_identical(workspace, tmp_path):
    cfg = workspace / "tiny.json"
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a == b and len(a) > 3


def test_seed_flag_changes_data(workspace, tmp_path):
    cfg = workspace / "tiny.json"
    main(["synth", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "a")])
    assert files(tmp_path / "a") != files(workspace / "data")
    resolved = json.loads((tmp_path / "a" / "config.resolved.json").read_text())
    assert resolved["synth"]["seed"] == 1


def test_train_is_byte_identical_in_checkpoint_weights(workspace, tmp_path):
    import torch

    cfg = workspace / "tiny.json"
    main(["train", "--config", str(cfg), "--data", str(workspace / "data"), "--out", str(tmp_path / "r")])
    a = torch.load(workspace / "run" / "checkpoints" / "final.pt", weights_only=True)
    b = torch.load(tmp_path / "r" / "checkpoints" / "final.pt", weights_only=True)
    for k in a["model"]:
        assert torch.equal(a["model"][k], b["model"][k])
    assert a["meta"] == b["meta"]
    assert (tmp_path / "r" / "reports" / "train_log.csv").read_bytes() == \
        (workspace / "run" / "reports" / "train_log.csv").read_bytes()


def test_eval_and_report(workspace, tmp_path):
    ck = str(workspace / "run" / "checkpoints" / "final.pt")
    argv = ["eval", "--checkpoint", ck, "--data", str(workspace / "data"), "--split", "train",
            "--series-length", "8", "--series-length", "4", "--series-length", "2", "--no-perceptual"]
    assert main(argv + ["--out", str(tmp_path / "ev")]) == 0
    assert main(argv + ["--out", str(tmp_path / "ev2")]) == 0
    assert files(tmp_path / "ev") == files(tmp_path / "ev2")

    report = json.loads((tmp_path / "ev" / "reports" / "report.json").read_text())
    assert sorted(report["runs"]) == ["2", "4", "8"]
    rows = list(csv.DictReader(open(tmp_path / "ev" / "reports" / "report.csv")))
    assert {r["group"] for r in rows} == {"all", "<10", "10-30", ">30"}
    assert len(rows) == 12

    assert main(["report", str(tmp_path / "ev" / "reports" / "report.json"), "--out", str(tmp_path / "rep")]) == 0
    ablation = list(csv.DictReader(open(tmp_path / "rep" / "reports" / "series_length_ablation.csv")))
    assert [r["series_length"] for r in ablation] == ["8", "4", "2"]
    table = list(csv.DictReader(open(tmp_path / "rep" / "reports" / "metrics_table.csv")))
    assert len(table) == 1 and "mae" in table[0]
    for ext in ("png", "svg"):
        assert (tmp_path / "rep" / "figures" / f"mae_by_gap.{ext}").exists()
    assert (tmp_path / "rep" / "config.resolved.json").exists()
    main(["report", str(tmp_path / "ev" / "reports" / "report.json"), "--out", str(tmp_path / "rep2")])
    assert files(tmp_path / "rep") == files(tmp_path / "rep2")


def test_report_footnotes_empty_stratum(workspace, tmp_path):
    rep = {"kind": "highresnet_ltae", "label": "m", "step": 1, "runs": {"8": {
        "per_sample": [{"mae": 10.0, "stratum": "<10"}, {"mae": 12.0, "stratum": "10-30"}],
        "aggregates": {"mae": 11.0},
        "strata": {"<10": {"count": 1, "mae": 10.0}, "10-30": {"count": 1, "mae": 12.0}, ">30": {"count": 0}},
        "meta": {}}}}
    path = tmp_path / "r.json"
    path.write_text(json.dumps(rep))
    assert main(["report", str(path), "--out", str(tmp_path / "out")]) == 0
    md = (tmp_path / "out" / "reports" / "tables.md").read_text()
    assert "no samples with closest gap >30 days" in md
    assert not (tmp_path / "out" / "reports" / "series_length_ablation.csv").exists()


def test_report_malformed_is_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"runs": {"8": {"per_sample": 3}}}')
    assert main(["report", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text("not json")
    assert main(["report", str(bad), "--out", str(tmp_path / "o")]) == 2


def sample_dir(workspace) -> Path:
    ds = DiskDataset(workspace / "data", "test")
    return workspace / "data" / ds.records[0].path


def test_super_resolve_two_dates(workspace, tmp_path):
    ck = str(workspace / "run" / "checkpoints" / "final.pt")
    series = load_series(sample_dir(workspace))
    d1, d2 = Timestamp(int(series.days.min())), Timestamp(int(series.days.max()))
    for d in (d1, d2):
        assert main(["super-resolve", "--checkpoint", ck, "--series", str(sample_dir(workspace)),
                     "--at-date", str(d), "--out", str(tmp_path)]) == 0
    a = np.load(tmp_path / f"sr_{d1}.npz")
    b = np.load(tmp_path / f"sr_{d2}.npz")
    assert a["sr"].shape == (3, 32, 32)
    assert not np.array_equal(a["sr"], b["sr"])
    assert int(a["t_ref"]) == d1.epoch_day
    assert a["attention"].shape[1] == len(series)
    assert (tmp_path / "figures" / f"sr_{d1}.png").exists()
    assert (tmp_path / "figures" / f"sr_{d1}_attention.png").exists()


def test_super_resolve_at_frame_date_matches_stored_reference(workspace, tmp_path):
    """Static scene whose stored target date is one of the frame dates."""
    ck = str(workspace / "run" / "checkpoints" / "final.pt")
    series = load_series(sample_dir(workspace))
    frame_day = Timestamp(int(series.days[1]))
    frozen = series.stack()[:1].repeat(len(series), axis=0)
    static = TimedSeries.from_arrays(frozen, series.days, frame_day)
    save_sample(SRSample(static, Raster(np.zeros((3, 32, 32), np.float32)), 0, 4), tmp_path / "s")
    assert main(["super-resolve", "--checkpoint", ck, "--series", str(tmp_path / "s"),
                 "--out", str(tmp_path / "plain")]) == 0
    assert main(["super-resolve", "--checkpoint", ck, "--series", str(tmp_path / "s"),
                 "--at-date", str(frame_day), "--out", str(tmp_path / "dated")]) == 0
    name = f"sr_{frame_day}.npz"
    assert (tmp_path / "plain" / name).read_bytes() == (tmp_path / "dated" / name).read_bytes()


def test_super_resolve_outside_span_is_exit_2(workspace, tmp_path):
    ck = str(workspace / "run" / "checkpoints" / "final.pt")
    series = load_series(sample_dir(workspace))
    far = Timestamp(int(series.days.max()) + series.slack + 1)
    assert main(["super-resolve", "--checkpoint", ck, "--series", str(sample_dir(workspace)),
                 "--at-date", str(far), "--out", str(tmp_path)]) == 2
    assert main(["super-resolve", "--checkpoint", ck, "--series", str(sample_dir(workspace)),
                 "--at-date", "2018-02-30", "--out", str(tmp_path)]) == 2


def test_missing_checkpoint_is_exit_2(workspace, tmp_path):
    assert main(["super-resolve", "--checkpoint", str(tmp_path / "nope.pt"),
                 "--series", str(sample_dir(workspace)), "--out", str(tmp_path)]) == 2


def test_unknown_override_is_exit_2(workspace, tmp_path):
    assert main(["synth", "--set", "synth.n_sampels=3", "--out", str(tmp_path / "x")]) == 2
    assert main(["synth", "--set", "nonsense", "--out", str(tmp_path / "x")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lr_rate": 1}}))
    assert main(["train", "--config", str(bad), "--data", str(workspace / "data"), "--out", str(tmp_path / "y")]) == 2


def test_usage_errors_are_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert main(["describe"]) == 2
    assert main(["synth", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2


def test_unreadable_checkpoint_is_exit_2(tmp_path):
    junk = tmp_path / "junk.pt"
    junk.write_bytes(b"\x00" * 64)
    assert main(["describe", "--checkpoint", str(junk)]) == 2


def test_scale_mismatch_is_exit_2(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "tiny.json"), "--set", "train.model.scale=2",
                 "--data", str(workspace / "data"), "--out", str(tmp_path / "t")]) == 2


def test_divergence_is_exit_1_and_keeps_checkpoint(workspace, tmp_path):
    ds = DiskDataset(workspace / "data")
    bad = []
    for s in ds[:6]:
        hr = s.hr.data.copy()
        hr[:, 0, 0] = np.nan
        bad.append(SRSample(s.lr_series, Raster(hr), s.block_id, s.scale))
    write_dataset(bad, tmp_path / "d", {"train": 1.0})
    assert main(["train", "--config", str(workspace / "tiny.json"), "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "t")]) == 1
    assert (tmp_path / "t" / "checkpoints" / "last_finite.pt").exists()


def test_describe(workspace, tmp_path, capsys):
    assert main(["describe", "--checkpoint", str(workspace / "run" / "checkpoints" / "final.pt")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["kind"] == "highresnet_ltae" and info["step"] == 3 and info["parameters"] > 0
    assert main(["describe", "--data", str(workspace / "data"), "--out", str(tmp_path)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["samples"] == 24
    assert (tmp_path / "config.resolved.json").exists()


def test_overrides_parse_json_values():
    doc = resolve_config(None, ["train.steps=7", "train.model.kind=rrdb_sisr", "eval.perceptual=false"], 5)
    assert doc["train"]["steps"] == 7 and doc["train"]["model"]["kind"] == "rrdb_sisr"
    assert doc["eval"]["perceptual"] is False
    assert doc["synth"]["seed"] == doc["train"]["seed"] == doc["eval"]["seed"] == 5
    with pytest.raises(ConfigError):
        apply_overrides({"a": {"b": 1}}, ["a.c=2"])


def test_sisr_checkpoint_on_series_is_exit_2(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "tiny.json"), "--set", "train.model.kind=rrdb_sisr",
                 "--set", "train.steps=1", "--data", str(workspace / "data"), "--out", str(tmp_path / "r")]) == 0
    assert main(["super-resolve", "--checkpoint", str(tmp_path / "r" / "checkpoints" / "final.pt"),
                 "--series", str(sample_dir(workspace)), "--out", str(tmp_path / "o")]) == 2
