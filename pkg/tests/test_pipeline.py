import csv
import io
import json
import math
import re

import numpy as np
import pytest

from emeralds import cli
from emeralds.annotations import FEATURE_NAMES
from emeralds.emr import EmrBiasConfig
from emeralds.errors import ConfigError, KOutOfRange, MissingRocPoints, NoOverlapInInputs
from emeralds.fusion import DetectedMask, DetectionResponse, mask_from_array
from emeralds.pipeline import (
    EMR_COLUMNS,
    CadxDataset,
    PipelineConfig,
    Report,
    assemble_dataset,
    classification_metrics,
    cmd_ablate,
    cmd_cade_eval,
    cmd_cadx_eval,
    cmd_cadx_train,
    cmd_emr_gen,
    cmd_plot_roc,
    load_config,
    segmentation_summary,
)
from emeralds.volume_io import MhdHeader, Volume3D, write_mhd


# --- configuration --------------------------------------------------------

def test_config_file_and_env(tmp_path, monkeypatch):
    (tmp_path / "data").mkdir()
    path = tmp_path / "run.conf"
    path.write_text("# comment\nscans_dir = data\nseed = 7\nk_features = 3\n"
                    "window_lo = -900\nwindow_hi = 300\ngbdt_n_trees = 25\nuse_emr = false\n")
    cfg = load_config(path)
    assert cfg.scans_dir == (tmp_path / "data").resolve()
    assert (cfg.seed, cfg.k_features, cfg.use_emr) == (7, 3, False)
    assert cfg.window == (-900.0, 300.0)
    assert cfg.gbdt.n_trees == 25 and cfg.gbdt.seed == 7
    monkeypatch.setenv("EMERALDS_CONFIG", str(path))
    assert load_config() == cfg
    assert load_config(seed=9).seed == 9


@pytest.mark.parametrize("text", ["bogus = 1\n", "k_features = 8\n", "seed = x\n",
                                  "no equals sign\n", "backend = s3\n"])
def test_config_errors(tmp_path, text):
    path = tmp_path / "bad.conf"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_missing_paths(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, scans_dir=tmp_path / "nope").require("scans_dir")
    with pytest.raises(ConfigError):
        PipelineConfig().require("annotations")


def test_fingerprint_tracks_config():
    assert PipelineConfig().fingerprint() == PipelineConfig().fingerprint()
    assert PipelineConfig(seed=1).fingerprint() != PipelineConfig().fingerprint()


# --- cade-eval ------------------------------------------------------------

def block(shape_zyx, x0, x1):
    m = np.zeros(shape_zyx, dtype=bool)
    m[2:6, 4:8, x0:x1] = True
    return m


@pytest.fixture
def overlap_suite(tmp_path):
    """Three scans whose staged predictions cover half of each truth block."""
    h = MhdHeader(3, (16, 16, 8), "MET_SHORT", (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), "LOCAL")
    truth = block(h.shape, 2, 10)
    half = block(h.shape, 6, 14)
    for name in ("scans", "masks", "same", "half", "empty", "nothing"):
        (tmp_path / name).mkdir()
    for i in range(3):
        sid = f"S{i}"
        write_mhd(tmp_path / "scans" / f"{sid}.mhd",
                  Volume3D(h, np.full(h.shape, -800, dtype=np.int16)))
        write_mhd(tmp_path / "masks" / f"{sid}.mhd", mask_from_array(truth, h))
        for d, arr in (("same", truth), ("half", half)):
            DetectionResponse(sid, [DetectedMask(mask_from_array(arr, h), 0.9)]).write(tmp_path / d)
        DetectionResponse(sid, []).write(tmp_path / "empty")

    def cfg(backend_dir, **kw):
        return load_config(None, scans_dir=tmp_path / "scans", masks_dir=tmp_path / "masks",
                           out_dir=tmp_path / "out", backend="file",
                           backend_dir=tmp_path / backend_dir, **kw)
    return cfg


def test_cade_identity(overlap_suite):
    rep = cmd_cade_eval(overlap_suite("same"))
    for mode in ("3d", "2d"):
        for m in ("dice", "iou", "precision", "recall"):
            assert rep.metrics[f"{mode}_{m}"] == 1.0
    assert rep.metrics["3d_cases"] == 3 and rep.metrics["2d_cases"] == 12


def test_cade_half_overlap(overlap_suite):
    rep = cmd_cade_eval(overlap_suite("half"))
    assert abs(rep.metrics["3d_dice"] - 0.5) <= 1e-12
    assert abs(rep.metrics["2d_dice"] - 0.5) <= 1e-12
    assert rep.metrics["3d_iou"] == pytest.approx(1 / 3, abs=1e-12)
    union = cmd_cade_eval(overlap_suite("half", slices_2d="union"))
    assert union.metrics["2d_cases"] == 12


def test_cade_no_inputs(overlap_suite):
    with pytest.raises(NoOverlapInInputs):
        cmd_cade_eval(overlap_suite("nothing"))


def test_cade_undefined_precision(overlap_suite):
    rep = cmd_cade_eval(overlap_suite("empty"))
    assert rep.metrics["3d_dice"] == 0.0
    assert math.isnan(rep.metrics["3d_precision"])
    assert rep.has_undefined_metric()


def test_cade_report_files(overlap_suite, tmp_path):
    rep = cmd_cade_eval(overlap_suite("half"))
    first = (tmp_path / "out" / "cade_eval.json").read_bytes()
    back = Report.read(tmp_path / "out" / "cade_eval.json")
    assert back.fingerprint == rep.fingerprint and back.rows == rep.rows
    assert segmentation_summary(back.rows) == rep.metrics
    rows = list(csv.DictReader(io.StringIO((tmp_path / "out" / "cade_eval.csv").read_text())))
    assert len(rows) == len(rep.rows)
    cmd_cade_eval(overlap_suite("half"))
    assert (tmp_path / "out" / "cade_eval.json").read_bytes() == first


def test_cade_toy_backend(small_cfg):
    rep = cmd_cade_eval(small_cfg(backend="toy"))
    assert rep.metrics["3d_cases"] == 12
    assert rep.metrics["3d_dice"] > 0.8


# --- emr-gen --------------------------------------------------------------

def test_emr_gen_default(small_cfg, tmp_path):
    cfg = small_cfg()
    rep, ok = cmd_emr_gen(cfg)
    assert ok and rep.metrics["status"] == "directional biases confirmed"
    assert all(rep.metrics[k] > 3 for k in rep.metrics if k.endswith("_z"))
    first = (tmp_path / "out" / "emr_cohort.csv").read_bytes()
    cmd_emr_gen(cfg)
    assert (tmp_path / "out" / "emr_cohort.csv").read_bytes() == first


def test_emr_gen_zero_bias(small_cfg, tmp_path):
    conf = tmp_path / "null.conf"
    conf.write_text(EmrBiasConfig.zero_bias().to_text())
    rep, ok = cmd_emr_gen(small_cfg(emr_config=conf))
    assert ok and rep.metrics["status"] == "no bias detected"


def test_emr_gen_weak_bias_fails(small_cfg, tmp_path):
    conf = tmp_path / "weak.conf"
    conf.write_text(EmrBiasConfig.zero_bias(p_smoker_given_high_spiculation=0.36).to_text())
    rep, ok = cmd_emr_gen(small_cfg(emr_config=conf))
    assert not ok and rep.metrics["status"] == "directional check failed"


# --- cadx -----------------------------------------------------------------

@pytest.fixture(scope="module")
def small_ds(small_phantom):
    return assemble_dataset(load_config(None, scans_dir=small_phantom / "scans",
                                        annotations=small_phantom / "annotations.csv"))


def recomputed(rep):
    y = [r["label"] for r in rep.rows]
    return classification_metrics(y, [r["score"] for r in rep.rows],
                                  [r["prediction"] for r in rep.rows])


def test_cadx_schema_difference(small_cfg, small_ds, tmp_path):
    with_emr = cmd_cadx_train(small_cfg(), small_ds)
    without = cmd_cadx_train(small_cfg(use_emr=False), small_ds)
    a, b = with_emr.extra["columns"], without.extra["columns"]
    assert [c for c in a if c not in b] == list(EMR_COLUMNS)
    assert [c for c in a if c in b] == b
    assert (tmp_path / "out" / "cadx_train.json").is_file()
    assert (tmp_path / "out" / "cadx_train_no_emr.json").is_file()
    assert (tmp_path / "out" / "cadx_model_no_emr.json").is_file()


def test_cadx_report_self_consistent(small_cfg, small_ds, tmp_path):
    rep = cmd_cadx_train(small_cfg(), small_ds)
    back = Report.read(tmp_path / "out" / "cadx_train.json")
    for k, v in recomputed(back).items():
        assert back.metrics[k] == v
    assert len(back.rows) == len(small_ds) == rep.metrics["n_samples"]
    assert sorted({r["fold"] for r in back.rows}) == list(range(5))


def test_cadx_planted_rule(small_cfg, small_ds):
    rng = np.random.default_rng(0)
    n = 300
    radiomics = rng.uniform(1, 5, size=(n, 7))
    labels = (radiomics[:, FEATURE_NAMES.index("spiculation")] > 3).astype(int)
    ds = CadxDataset([f"P{i // 3:04d}" for i in range(n)], [i % 3 for i in range(n)], labels,
                     radiomics, rng.normal(size=(n, 32)), small_ds.emr[rng.integers(0, len(small_ds), n)])
    rep = cmd_cadx_train(small_cfg(), ds)
    assert rep.metrics["accuracy"] >= 0.95
    assert rep.extra["ranking"][0] == "spiculation"


def test_cadx_eval_round_trip(small_cfg, small_ds, tmp_path):
    cfg = small_cfg()
    cmd_cadx_train(cfg)
    rep = cmd_cadx_eval(cfg, tmp_path / "out" / "cadx_model.json")
    assert rep.metrics["n_samples"] == len(small_ds)
    assert recomputed(rep) == {k: rep.metrics[k] for k in recomputed(rep)}


def test_ablate_nested_and_complete(small_cfg, small_ds):
    cfg = small_cfg(k_features=7)
    rep = cmd_ablate(cfg, [1, 3, 7], ds=small_ds)
    assert [r["k"] for r in rep.rows] == [1, 3, 7]
    feats = [r["features"] for r in rep.rows]
    for small, big in zip(feats, feats[1:]):
        assert big[:len(small)] == small
    assert feats[-1] == rep.extra["ranking"]
    full = cmd_cadx_train(cfg, small_ds)
    for m in ("precision", "f1", "auc", "accuracy"):
        assert rep.rows[-1][m] == full.metrics[m]
    with pytest.raises(KOutOfRange):
        cmd_ablate(cfg, [0, 3], ds=small_ds)


# --- plot-roc -------------------------------------------------------------

def roc_report(fpr, tpr):
    return Report("x", {}, [], "f", extra={"roc": {"fpr": fpr, "tpr": tpr}})


def polylines(svg):
    return re.findall(r'<polyline points="([^"]*)"', svg)


def test_plot_roc_perfect_curve(tmp_path):
    svg = cmd_plot_roc([("perfect", roc_report([0.0, 0.0, 1.0], [0.0, 1.0, 1.0]))],
                       tmp_path / "roc.svg")
    lines = polylines(svg)
    assert len(lines) == 2
    assert lines[1] == "50.000,450.000 50.000,50.000 450.000,50.000"
    assert "perfect (AUC = 1.000)" in svg
    assert (tmp_path / "roc.svg").read_text() == svg


def test_plot_roc_duplicates_and_determinism(tmp_path):
    rep = roc_report([0.0, 0.25, 1.0], [0.0, 0.75, 1.0])
    a = cmd_plot_roc([("m1", rep), ("m2", rep)], tmp_path / "a.svg")
    b = cmd_plot_roc([("m1", rep), ("m2", rep)], tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    lines = polylines(a)
    assert len(lines) == 3 and lines[1] == lines[2]
    assert "m1 (AUC" in a and "m2 (AUC" in a
    assert a == b


def test_plot_roc_missing_points():
    with pytest.raises(MissingRocPoints):
        cmd_plot_roc([("bare", Report("x", {}, [], "f"))])


# --- command line ---------------------------------------------------------

def write_conf(path, phantom, out):
    path.write_text(f"scans_dir = {phantom / 'scans'}\nmasks_dir = {phantom / 'masks'}\n"
                    f"annotations = {phantom / 'annotations.csv'}\nout_dir = {out}\n")
    return path


def test_cli_exit_codes(small_phantom, tmp_path, overlap_suite, capsys):
    conf = write_conf(tmp_path / "c.conf", small_phantom, tmp_path / "o")
    assert cli.main(["cade-eval", "--config", str(conf)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["stage"] == "cade-eval"
    assert cli.main(["emr-gen", "--config", str(conf)]) == 0

    weak = tmp_path / "weak.conf"
    weak.write_text(EmrBiasConfig.zero_bias(p_smoker_given_high_spiculation=0.36).to_text())
    assert cli.main(["emr-gen", "--config", str(conf), "--emr-config", str(weak)]) == 2
    assert cli.main(["cadx-train", "--config", str(conf), "--k", "9"]) == 2
    assert cli.main(["cade-eval", "--config", str(tmp_path / "missing.conf")]) == 2
    assert cli.main(["cade-eval", "--config", str(conf), "--backend", "file",
                     "--backend-dir", str(tmp_path / "absent")]) == 3
    assert cli.main(["ablate", "--config", str(conf), "--k-list", "0,1"]) == 2

    suite = overlap_suite("empty")
    assert cli.main(["cade-eval", "--out", str(suite.out_dir), "--backend", "file",
                     "--backend-dir", str(suite.backend_dir)] + _paths(suite)) == 4


def _paths(cfg):
    conf = cfg.out_dir.parent / "suite.conf"
    conf.write_text(f"scans_dir = {cfg.scans_dir}\nmasks_dir = {cfg.masks_dir}\n")
    return ["--config", str(conf)]


def test_cli_malformed_backend_response(small_phantom, tmp_path):
    staged = tmp_path / "staged"
    staged.mkdir()
    (staged / "PH0000.json").write_text("[]")
    conf = write_conf(tmp_path / "c.conf", small_phantom, tmp_path / "o")
    assert cli.main(["cade-eval", "--config", str(conf), "--backend", "file",
                     "--backend-dir", str(staged)]) == 3


def test_cli_plot_and_eval(small_phantom, tmp_path, capsys):
    conf = write_conf(tmp_path / "c.conf", small_phantom, tmp_path / "o")
    assert cli.main(["cadx-train", "--config", str(conf), "--seed", "3"]) == 0
    assert cli.main(["cadx-eval", "--config", str(conf),
                     "--model", str(tmp_path / "o" / "cadx_model.json")]) == 0
    assert cli.main(["plot-roc", "--config", str(conf), str(tmp_path / "o" / "cadx_train.json"),
                     str(tmp_path / "o" / "cadx_eval.json")]) == 0
    assert (tmp_path / "o" / "roc.svg").read_text().count("<polyline") == 3
    Report("emr-gen", {}, [], "f").write(tmp_path / "o", "no_roc")
    assert cli.main(["plot-roc", "--config", str(conf), str(tmp_path / "o" / "no_roc.json")]) == 2
    capsys.readouterr()


def test_cli_make_phantom(tmp_path, capsys):
    assert cli.main(["make-phantom", str(tmp_path / "ph"), "--scans", "2",
                     "--nodules-per-scan", "1"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_scans"] == 2
    assert len(list((tmp_path / "ph" / "scans").glob("*.mhd"))) == 2
