from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from extruflow.cli import main
from extruflow.dynamics import WidthProfile
from extruflow.plotting import autoscale, plot_profiles
from extruflow.synthetic import acceptance_scene, render
from extruflow.vision.image import save_image

from corpus import square_tower, straight_line
from oracles import ALPHA, DECEL, TAU_EXPAND, TAU_SHRINK, V_CORNER

TRUTH = {"alpha": ALPHA, "tau_expand": TAU_EXPAND, "tau_shrink": TAU_SHRINK, "xi_low": 0.03, "xi_high": 0.05,
         "v_const": V_CORNER, "decel": DECEL, "provenance": {}}


def write(path: Path, text: str) -> str:
    path.write_text(text)
    return str(path)


@pytest.fixture
def files(tmp_path):
    cfg = {"target_speed": 3960, "w_nominal": 0.5, "bounds": [-2, 2]}
    return {
        "cfg": write(tmp_path / "cfg.json", json.dumps(cfg)),
        "truth": write(tmp_path / "truth.json", json.dumps(TRUTH)),
        "dir": tmp_path,
    }


def run_pipeline(d: Path, cfg: str, truth: str, seed: int = 7) -> list[Path]:
    """pattern -> simulated measurement -> identify -> optimize -> simulate -> plot."""
    d.mkdir(parents=True, exist_ok=True)
    steps = [
        ["pattern", "extrusion", "--config", cfg, "--out", f"{d}/ext.gcode"],
        ["simulate", f"{d}/ext.gcode", "--model", truth, "--measure", "--seed", str(seed), "--config", cfg,
         "--out", f"{d}/ext_prof"],
        ["pattern", "corner", "--model", truth, "--config", cfg, "--out", f"{d}/corner.gcode"],
        ["simulate", f"{d}/corner.gcode", "--model", truth, "--measure", "--seed", str(seed), "--config", cfg,
         "--out", f"{d}/cor_prof"],
        ["identify", "--config", cfg, "--pattern", f"{d}/ext.gcode",
         "--profiles", *[f"{d}/ext_prof/line{i}.csv" for i in range(1, 5)],
         "--corner-pattern", f"{d}/corner.gcode",
         "--corner-profiles", *[f"{d}/cor_prof/line{i}.csv" for i in range(1, 5)], "--out", f"{d}/model.json"],
        ["optimize", f"{d}/corner.gcode", "--model", f"{d}/model.json", "--config", cfg, "--out", f"{d}/opt.gcode"],
        ["simulate", f"{d}/opt.gcode", "--model", f"{d}/model.json", "--target", f"{d}/corner.gcode",
         "--config", cfg, "--out", f"{d}/opt.csv"],
        ["simulate", f"{d}/corner.gcode", "--model", f"{d}/model.json", "--config", cfg, "--out", f"{d}/base.csv"],
        ["plot", f"{d}/base.csv", f"{d}/opt.csv", "--out", f"{d}/cmp.png"],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return sorted(p for p in d.rglob("*") if p.is_file())


def test_full_pipeline_runs_and_improves(files):
    out = run_pipeline(files["dir"] / "run", files["cfg"], files["truth"])
    names = {p.name for p in out}
    assert {"model.json", "opt.gcode", "opt.gcode.json", "opt.csv", "opt.csv.json", "cmp.png"} <= names
    d = files["dir"] / "run"
    model = json.loads((d / "model.json").read_text())
    assert model["alpha"] == pytest.approx(ALPHA, rel=0.02)
    base = json.loads((d / "base.csv.json").read_text())
    opt = json.loads((d / "opt.csv.json").read_text())
    assert opt["corner_max_error_mm"] < base["corner_max_error_mm"]


def test_pipeline_is_deterministic(files):
    a = run_pipeline(files["dir"] / "a", files["cfg"], files["truth"])
    b = run_pipeline(files["dir"] / "b", files["cfg"], files["truth"])
    assert [p.relative_to(files["dir"] / "a") for p in a] == [p.relative_to(files["dir"] / "b") for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes(), pa.name


def test_no_command_is_usage_error(capsys):
    assert main([]) == 2


def test_invalid_pattern_kind(files):
    assert main(["pattern", "spiral", "--out", str(files["dir"] / "x.gcode")]) == 2


def test_corner_pattern_needs_model(files):
    assert main(["pattern", "corner", "--out", str(files["dir"] / "x.gcode")]) == 2


def test_missing_input_is_usage_error(files):
    assert main(["optimize", str(files["dir"] / "nope.gcode"), "--model", files["truth"],
                 "--out", str(files["dir"] / "o.gcode")]) == 2
    assert main(["simulate", str(files["dir"] / "nope.gcode"), "--model", files["truth"],
                 "--out", str(files["dir"] / "o.csv")]) == 2


def test_bad_config_is_usage_error(files):
    bad = write(files["dir"] / "bad.json", '{"speed": 1}')
    assert main(["pattern", "extrusion", "--config", bad, "--out", str(files["dir"] / "p.gcode")]) == 2


def test_malformed_gcode_is_data_error(files, capsys):
    src = write(files["dir"] / "bad.gcode", "G1 X1 E0.1\nG1 Xfoo\n")
    assert main(["optimize", src, "--model", files["truth"], "--out", str(files["dir"] / "o.gcode")]) == 1
    assert "line 2" in capsys.readouterr().err


def test_missing_corner_params_is_data_error(files, capsys):
    partial = dict(TRUTH, v_const=None, decel=None)
    model = write(files["dir"] / "partial.json", json.dumps(partial))
    src = write(files["dir"] / "tower.gcode", square_tower(layers=1))
    assert main(["optimize", src, "--model", model, "--out", str(files["dir"] / "o.gcode")]) == 1
    assert "corner" in capsys.readouterr().err


def test_optimize_writes_report_and_warns_on_reoptimize(files, capsys):
    src = write(files["dir"] / "line.gcode", straight_line())
    out = files["dir"] / "o.gcode"
    assert main(["optimize", src, "--model", files["truth"], "--out", str(out)]) == 0
    report = json.loads((files["dir"] / "o.gcode.json").read_text())
    assert report["regions"] == 1 and report["segments"] == 400
    capsys.readouterr()
    assert main(["optimize", str(out), "--model", files["truth"], "--out", str(files["dir"] / "oo.gcode")]) == 0
    assert "already optimized" in capsys.readouterr().out


def test_identify_wrong_profile_count_is_usage_error(files):
    d = files["dir"]
    assert main(["pattern", "extrusion", "--out", str(d / "ext.gcode")]) == 0
    assert main(["simulate", str(d / "ext.gcode"), "--model", files["truth"], "--measure", "--out",
                 str(d / "prof")]) == 0
    argv = ["identify", "--pattern", str(d / "ext.gcode"), "--out", str(d / "m.json"), "--profiles"]
    assert main(argv + [str(d / f"prof/line{i}.csv") for i in range(1, 4)]) == 2
    assert main(argv + [str(d / f"prof/line{i}.csv") for i in (1, 2, 3)] + [str(d / "missing.csv")]) == 2
    two = ["--profiles", *[str(d / f"prof/line{i}.csv") for i in range(1, 5)]]
    assert main(argv + [str(d / f"prof/line{i}.csv") for i in range(1, 5)] + two) == 0
    prov = json.loads((d / "m.json").read_text())["provenance"]
    assert prov["runs"] == 2


def measure_setup(d: Path, blank: bool = False):
    scene = acceptance_scene()
    img, _, truth = render(scene, seed=1)
    data = np.full_like(img.data, 0.5) if blank else img.data
    save_image(data, d / "photo.png")
    rois = [{"name": f"line{i}", "rect_mm": [28.0, b.y - 1.5, 52.0, b.y + 1.5]} for i, b in enumerate(scene.beads)]
    cfg = {"vision": {"checkerboard": {"rows": 7, "cols": 10, "square_size_mm": 2.0}, "rois": rois}}
    write(d / "vcfg.json", json.dumps(cfg))
    np.savetxt(d / "corners.csv", truth, delimiter=",", header="x_px,y_px", comments="")
    return scene


def test_measure_photo_to_csvs(files):
    d = files["dir"]
    scene = measure_setup(d)
    assert main(["measure", str(d / "photo.png"), "--config", str(d / "vcfg.json"), "--out", str(d / "m")]) == 0
    summary = json.loads((d / "m" / "measure.json").read_text())
    assert summary["pixel_scale_mm"] == pytest.approx(0.05, rel=0.01)
    for i, b in enumerate(scene.beads):
        prof = WidthProfile.from_csv(d / "m" / f"line{i}.csv")
        # one 0.05 mm pixel, plus slack for the estimated pixel scale
        assert abs(np.median(prof.w) - b.width) <= 0.05 * 1.001
    assert (d / "m" / "rectified.png").is_file()


def test_missing_checkerboard_exit_two(files, capsys):
    d = files["dir"]
    measure_setup(d, blank=True)
    assert main(["measure", str(d / "photo.png"), "--config", str(d / "vcfg.json"), "--out", str(d / "m")]) == 2
    assert "corner" in capsys.readouterr().err


def test_external_corners_bypass_detection(files):
    d = files["dir"]
    measure_setup(d)
    assert main(["measure", str(d / "photo.png"), "--config", str(d / "vcfg.json"), "--corners",
                 str(d / "corners.csv"), "--method", "kmeans", "--out", str(d / "m")]) == 0
    summary = json.loads((d / "m" / "measure.json").read_text())
    assert {r["method"] for r in summary["rois"].values()} == {"kmeans"}


def test_plot_overlay_and_autoscale(files):
    d = files["dir"]
    a = WidthProfile(np.linspace(0, 10, 50), np.linspace(0.4, 0.6, 50))
    b = WidthProfile(np.linspace(2, 14, 50), np.linspace(0.5, 0.9, 50))
    a.to_csv(d / "a.csv")
    b.to_csv(d / "b.csv")
    assert main(["plot", str(d / "a.csv"), str(d / "b.csv"), "--labels", "base,opt", "--out", str(d / "p.png")]) == 0
    assert Image.open(d / "p.png").size == (800, 400)
    ax = autoscale([a, b])
    assert ax.contains(a.x, a.w) and ax.contains(b.x, b.w)
    assert ax.x0 <= 0 and ax.x1 >= 14 and ax.y0 <= 0.4 and ax.y1 >= 0.9
    img, _ = plot_profiles([a])
    assert img.size == (800, 400)


def test_plot_empty_csv_is_error(files):
    d = files["dir"]
    write(d / "empty.csv", "x_mm,w_mm\n")
    assert main(["plot", str(d / "empty.csv"), "--out", str(d / "p.png")]) == 1
    with pytest.raises(ValueError):
        plot_profiles([])


def test_plot_label_count_mismatch(files):
    d = files["dir"]
    WidthProfile(np.arange(5.0), np.ones(5)).to_csv(d / "a.csv")
    assert main(["plot", str(d / "a.csv"), "--labels", "x,y", "--out", str(d / "p.png")]) == 2
