import csv
import json

import pytest

from intervalref.cli import ABLATION_COLUMNS, ABLATION_GRID, RunConfig, main, variant_name

TINY = ["--hidden", "32", "--depth", "1", "--heads", "2"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _frame_score(path):
    return [(r["frame"], r["score"]) for r in _rows(path)]


def test_profile_mid_ambiguity(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["profile", "--variant", "mid", "--t0", "8", "--t1", "10", "--frames", "18", "--out", str(a)]) == 0
    assert main(["profile", "--variant", "mid", "--t0", "1", "--t1", "17", "--frames", "18", "--out", str(b)]) == 0
    assert _frame_score(a) == _frame_score(b)


def test_profile_we_without_negatives_is_mid(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["profile", "--variant", "we", "--wp", "1", "--wn", "0", "--t0", "3", "--t1", "9", "--frames", "16", "--out", str(a)])
    main(["profile", "--variant", "mid", "--t0", "3", "--t1", "9", "--frames", "16", "--out", str(b)])
    assert _frame_score(a) == _frame_score(b)


def test_profile_we_peaks_inside(tmp_path):
    out = tmp_path / "p.csv"
    assert main(["profile", "--variant", "we", "--t0", "6", "--t1", "12", "--frames", "24", "--out", str(out)]) == 0
    rows = _rows(out)
    best = max(rows, key=lambda r: float(r["score"]))
    assert 6 <= int(best["frame"]) <= 12


@pytest.mark.parametrize("t0,t1,frames", [(5, 3, 10), (0, 11, 10), (-1, 2, 10)])
def test_profile_invalid_interval_exit_2(tmp_path, t0, t1, frames, capsys):
    code = main(["profile", "--variant", "we", "--t0", str(t0), "--t1", str(t1), "--frames", str(frames),
                 "--out", str(tmp_path / "x.csv")])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["profile", "--variant", "sideways"])
    assert info.value.code == 2


def test_train_zero_steps_writes_checkpoint(tmp_path):
    assert main(["train", "--root", str(tmp_path), "--name", "r", "--steps", "0", *TINY]) == 0
    run = tmp_path / "r"
    assert (run / "ckpt" / "last.ckpt").exists()
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["train"]["steps"] == 0 and cfg["model"]["hidden"] == 32


def test_config_file_merge_and_rejection(tmp_path):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"model": {"depth": 1, "heads": 2}, "train": {"steps": 0, "lr": 0.01}}))
    assert main(["train", "--root", str(tmp_path), "--name", "g", "--config", str(good), "--hidden", "32", "--lr", "0.002"]) == 0
    cfg = RunConfig.from_dict(json.loads((tmp_path / "g" / "config.json").read_text()))
    assert cfg.model.depth == 1 and cfg.model.hidden == 32 and cfg.train.lr == 0.002
    for bad in ({"model": {"bogus": 1}}, {"nonsense": {}}, {"train": {"steps": "many"}}):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(bad))
        assert main(["train", "--root", str(tmp_path), "--name", "b", "--config", str(p)]) == 2
    assert main(["train", "--root", str(tmp_path), "--name", "b", "--config", str(tmp_path / "missing.json")]) == 2


def test_missing_inputs_exit_2(tmp_path):
    assert main(["eval", "--root", str(tmp_path), "--name", "nothing"]) == 2
    assert main(["sample", "--root", str(tmp_path), "--name", "nothing"]) == 2


def test_eval_oracle(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"eval": {"n_per_count": 4}}))
    assert main(["eval", "--root", str(tmp_path), "--name", "o", "--oracle", "--config", str(cfg)]) == 0
    rows = _rows(tmp_path / "o" / "report.csv")
    assert len(rows) == 4 + 8
    assert all(float(r["t_iou"]) == 1.0 for r in rows)
    agg = json.loads((tmp_path / "o" / "report.json").read_text())
    assert agg["splits"]["all"]["t_iou"] == 1.0


def test_numeric_failure_exit_3(tmp_path, monkeypatch, capsys):
    from intervalref import cli
    from intervalref.flow import NumericError

    def boom(*a, **k):
        raise NumericError("loss went non-finite", step=17)

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--root", str(tmp_path), "--name", "n", "--steps", "1", *TINY]) == 3
    assert "step 17" in capsys.readouterr().err


def test_ablation_grid_shape():
    assert len(ABLATION_GRID) == 6 and len(ABLATION_COLUMNS) - 1 == 3
    assert {variant_name(m, t) for m, t in ABLATION_GRID} == {
        "none-tags", "none-notags", "mid-tags", "mid-notags", "we-tags", "we-notags"}


def test_ablate_table(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"eval": {"n_per_count": 1}, "sampler": {"steps": 2}, "train": {"batch_size": 2}}))
    code = main(["ablate", "--root", str(tmp_path), "--name", "abl", "--config", str(cfg), "--steps", "1", *TINY])
    assert code == 0
    rows = _rows(tmp_path / "abl" / "ablation.csv")
    assert len(rows) == 6
    assert list(rows[0].keys()) == list(ABLATION_COLUMNS)
