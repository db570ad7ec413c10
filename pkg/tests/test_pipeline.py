import json

import numpy as np
import pytest

from driveby import cli, io, pipeline
from driveby.errors import BundleCorrupt, ConfigInvalid, SchemaMismatch
from driveby.preprocess import minmax_normalize
from driveby.spectral import MultiChannelRecord, SingularSpectrum


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """Tiny Case-I bundle plus its fdd output."""
    root = tmp_path_factory.mktemp("run")
    assert cli.main(["simulate", "--case", "unsw", "--crossings", "12", "--n-damaged", "3",
                     "--out", str(root / "sim")]) == 0
    assert cli.main(["fdd", str(root / "sim"), "--out", str(root / "fdd")]) == 0
    return root


def test_record_round_trip(tmp_path, rng):
    rec = MultiChannelRecord(rng.standard_normal((3, 50)), 500.0, "r1")
    io.write_record(rec, tmp_path / "r1.csv")
    back = io.read_record(tmp_path / "r1.csv")
    assert np.array_equal(back.data, rec.data)
    assert back.sample_rate == 500.0 and back.label == "r1"
    header = (tmp_path / "r1.csv").read_text().splitlines()[0]
    assert header == "time_s,ch1,ch2,ch3"


def test_spectrum_and_sample_round_trip(tmp_path, rng):
    spec = SingularSpectrum(np.arange(100) * 0.01, rng.uniform(size=100), 0.01, "s")
    io.write_spectrum(spec, tmp_path / "s.csv")
    back = io.read_spectrum(tmp_path / "s.csv")
    assert np.array_equal(back.values, spec.values) and back.df == 0.01
    sample = minmax_normalize(spec)
    io.write_sample(sample, tmp_path / "x.csv", seed=3, set_size=5)
    again = io.read_sample(tmp_path / "x.csv")
    assert np.array_equal(again.values, sample.values)
    assert json.loads((tmp_path / "x.json").read_text())["set_size"] == 5


def test_bundle_digest_mismatch(small_run, tmp_path):
    import shutil

    copy = tmp_path / "sim"
    shutil.copytree(small_run / "sim", copy)
    target = sorted((copy / "records").glob("*.csv"))[0]
    text = target.read_text().splitlines()
    text[1] = text[1][:-1] + ("1" if text[1][-1] != "1" else "2")
    target.write_text("\n".join(text) + "\n")
    with pytest.raises(BundleCorrupt):
        io.load_bundle(copy)


def test_empty_bundle(tmp_path):
    io.write_json({"schema_version": io.SCHEMA_VERSION, "files": []}, tmp_path / "manifest.json")
    with pytest.raises(BundleCorrupt):
        io.load_bundle(tmp_path)
    assert cli.main(["fdd", str(tmp_path), "--out", str(tmp_path / "o")]) == 3


def test_fdd_report(small_run):
    rep = json.loads((small_run / "fdd" / "report.json").read_text())
    assert rep["f_b1"] == pytest.approx(6.65, abs=0.05)
    assert 13 <= rep["f_vd"] <= 17
    assert rep["peaks"]["damaged"]["bridge"]["peak_freq"] < rep["f_b1"]


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scenario": {"speeed": 1}}))
    with pytest.raises(ConfigInvalid, match="scenario.speeed"):
        pipeline.load_config(bad)
    assert cli.main(["--config", str(bad), "simulate", "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["--config", str(tmp_path / "missing.json"), "simulate", "--out", str(tmp_path)]) == 2
    with pytest.raises(ConfigInvalid):
        pipeline.config_from_dict({"case": "nowhere"})


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"case": "bulli", "mp": {"trials": 7}}))
    args = cli.build_parser().parse_args(
        ["--config", str(path), "detect-mp", "src", "--out", "o", "--set", "mp.set_size=4",
         "--composition", "20+10"]
    )
    cfg, _ = cli.resolve_config(args)
    assert cfg.case == "bulli" and cfg.mp.trials == 7
    assert cfg.mp.set_size == 4 and cfg.mp.composition == "20+10"


def test_parse_composition():
    assert pipeline.parse_composition("30") == (30, 0)
    assert pipeline.parse_composition("20+10") == (20, 10)
    for bad in ("x", "0", "1+2+3", "5+-1"):
        with pytest.raises(ConfigInvalid):
            pipeline.parse_composition(bad)


def test_stream_seeds():
    assert pipeline.stream_seed(1, "a") == pipeline.stream_seed(1, "a")
    assert pipeline.stream_seed(1, "a") != pipeline.stream_seed(1, "b")
    assert pipeline.stream_seed(1, "a") != pipeline.stream_seed(2, "a")


def test_case_presets():
    cfg = pipeline.RunConfig(case="bulli")
    scen = pipeline.case_scenario(cfg)
    assert scen.crossings == 39 and scen.n_damaged == 0
    cfg = pipeline.RunConfig(case="unsw")
    scen = pipeline.case_scenario(cfg)
    assert scen.crossings == 49 and scen.n_damaged == 10
    beam, _, damaged = pipeline.case_models(cfg)
    assert sum(m for _, m in damaged.added_masses) == 375.0


def test_aae_too_few_crossings(small_run, tmp_path):
    code = cli.main(["detect-aae", str(small_run / "fdd"), "--out", str(tmp_path / "a"),
                     "--set", "aae.n_samples=4"])
    assert code == 3


def test_aae_report_consistent_with_detections(small_run, tmp_path):
    out = tmp_path / "aae"
    assert cli.main(["detect-aae", str(small_run / "fdd"), "--epochs", "2", "--out", str(out),
                     "--set", "aae.n_samples=20", "--set", "aae.n_damaged_samples=4"]) == 0
    rep = json.loads((out / "report.json").read_text())
    counts = rep["aae"]["confusion"]
    assert counts == pipeline.confusion_from_detections(out / "detections.csv")
    assert sum(counts.values()) == rep["aae"]["n_test"] + rep["aae"]["n_changed"]


def test_mp_single_trial_and_report_merge(small_run, tmp_path):
    mp_out = tmp_path / "mp"
    assert cli.main(["detect-mp", str(small_run / "fdd"), "--trials", "1", "--composition", "4+2",
                     "--set", "mp.set_size=2", "--out", str(mp_out)]) == 0
    rows = (mp_out / "cac_surface.csv").read_text().splitlines()
    assert len(rows) == 2
    rep_out = tmp_path / "rep"
    assert cli.main(["report", str(small_run / "fdd"), str(mp_out), "--out", str(rep_out)]) == 0
    merged = json.loads((rep_out / "consolidated.json").read_text())
    assert set(merged["cases"]["unsw"]) >= {"f_b1", "cac"}
    bad = tmp_path / "bad_report.json"
    bad.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(SchemaMismatch):
        pipeline.run_report(pipeline.RunConfig(), [bad], tmp_path / "r2")
    assert cli.main(["report", str(bad), "--out", str(tmp_path / "r3")]) == 3


def test_out_required(capsys):
    assert cli.main(["simulate"]) == 2


def test_aae_five_crossing_bundle(tmp_path):
    assert cli.main(["simulate", "--case", "unsw", "--crossings", "5", "--n-damaged", "0",
                     "--out", str(tmp_path / "sim")]) == 0
    assert cli.main(["detect-aae", str(tmp_path / "sim"), "--out", str(tmp_path / "a")]) == 3
