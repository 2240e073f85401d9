import numpy as np
import pytest
import torch

from intervalref.benchmark import case_scene, make_manifest, read_manifest, run_benchmark, write_manifest
from intervalref.flow import NumericError, SamplerConfig
from intervalref.metrics import EvalReport
from intervalref.model import ModelConfig, ToyDiT
from intervalref.synth import SynthConfig

SCFG = SynthConfig()


@pytest.fixture(scope="module")
def manifest():
    return make_manifest(30, SCFG)


def test_manifest_roundtrip(tmp_path, manifest):
    write_manifest(manifest, tmp_path / "m.json")
    back = read_manifest(tmp_path / "m.json")
    assert back["cases"] == manifest["cases"]
    assert SynthConfig.from_dict(back["synth_config"]) == SCFG
    assert [c["ref_count"] for c in back["cases"]].count(2) == 30
    for c in back["cases"][:5]:
        case_scene(c, SCFG)


def test_manifest_tamper_detected(manifest):
    case = dict(manifest["cases"][0], tags=["zzz"])
    with pytest.raises(ValueError):
        case_scene(case, SCFG)


def test_oracle_is_perfect(manifest):
    agg = run_benchmark("oracle", manifest).aggregates()
    assert agg["n_failed_cases"] == 0
    for split in ("1", "2", "all"):
        assert agg["splits"][split]["t_iou"] == 1.0
        assert agg["splits"][split]["t_l2"] == 0.0


def test_noise_scores_low(manifest):
    agg = run_benchmark("noise", manifest).aggregates()
    assert agg["splits"]["all"]["n"] >= 50
    assert agg["splits"]["all"]["t_iou"] < 0.2


def test_aggregates_match_rows(tmp_path, manifest):
    rep = run_benchmark("noise", manifest)
    rep.write(tmp_path / "r.csv", tmp_path / "r.json")
    back = EvalReport.read_csv(tmp_path / "r.csv")
    agg = back.aggregates()
    for split, n in (("1", 1), ("2", 2)):
        rows = [r for r in back.rows if r.ref_count == n]
        assert agg["splits"][split]["n"] == len(rows)
        assert agg["splits"][split]["t_iou"] == pytest.approx(np.mean([r.t_iou for r in rows]))
        assert agg["splits"][split]["t_l2"] == pytest.approx(np.mean([r.t_l2 for r in rows]))


def test_failed_cases_excluded():
    man = make_manifest(3, SCFG)

    def flaky(scenes, cases):
        if cases[0]["ref_count"] == 2:
            raise NumericError("boom", step=3)
        return np.stack([s.video for s in scenes])

    agg = run_benchmark(flaky, man).aggregates()
    assert agg["n_failed_cases"] == 3
    assert agg["splits"]["1"]["t_iou"] == 1.0
    assert agg["splits"]["all"]["n"] == 3


def test_untrained_model_runs():
    man = make_manifest(2, SCFG)
    torch.manual_seed(0)
    model = ToyDiT(ModelConfig(hidden=32, depth=1, heads=2, tag_hidden=16))
    rep = run_benchmark(model, man, None, SamplerConfig(steps=2))
    assert rep.n_failed == 0
    assert len(rep.rows) == 2 + 4
