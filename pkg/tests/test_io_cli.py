import csv
import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest
import torch
from PIL import Image

from styledraw.io_cli import (
    FORMAT_VERSION,
    Checkpoint,
    CheckpointSchemaError,
    CheckpointVersionError,
    cli_main,
    decode_optimizer_state,
    encode_optimizer_state,
    export_png,
    export_svg,
    import_svg,
    load_checkpoint,
    load_style_image,
    losses_csv,
    read_losses_csv,
    save_checkpoint,
)
from styledraw.objective import LossReport
from styledraw.raster import RasterImage
from styledraw.stroke_model import (
    Drawing,
    InvariantError,
    OptimizationConfig,
    StrokePath,
    random_drawing,
)

SVG = "{http://www.w3.org/2000/svg}"


# ------------------------------------------------------------ SVG


def test_svg_exact_attributes(tmp_path):
    s = StrokePath(((0.1, 0.2), (0.25, 0.5), (0.5, 0.75), (0.9, 0.125)), (1.0, 0.5, 0.0), 0.75, 2.5)
    export_svg(Drawing((s,), 200, 100, (1.0, 1.0, 1.0)), tmp_path / "a.svg")
    root = ET.parse(tmp_path / "a.svg").getroot()
    assert root.get("width") == "200" and root.get("height") == "100"
    rect, path = list(root)
    assert rect.tag == SVG + "rect" and rect.get("fill") == "#FFFFFF"
    assert rect.get("width") == "200" and rect.get("height") == "100"
    assert path.get("d") == "M 20.0000 20.0000 C 50.0000 50.0000, 100.0000 75.0000, 180.0000 12.5000"
    assert path.get("stroke") == "#FF8000"
    assert path.get("stroke-opacity") == "0.7500"
    assert path.get("stroke-width") == "2.5000"
    assert path.get("fill") == "none"
    assert path.get("stroke-linecap") == "round"


def test_svg_multi_segment_path_data(tmp_path):
    pts = tuple((i / 10, 0.5) for i in range(7))
    export_svg(Drawing((StrokePath(pts, (0, 0, 0), 1.0, 1.0),), 10, 10), tmp_path / "b.svg")
    d = list(ET.parse(tmp_path / "b.svg").getroot())[1].get("d")
    assert d == ("M 0.0000 5.0000 C 1.0000 5.0000, 2.0000 5.0000, 3.0000 5.0000 "
                 "C 4.0000 5.0000, 5.0000 5.0000, 6.0000 5.0000")


def test_svg_roundtrip(tmp_path):
    d = random_drawing(12, 2, (96, 64), seed=3, background_color=(0.2, 0.4, 1.0))
    export_svg(d, tmp_path / "r.svg")
    back = import_svg(tmp_path / "r.svg")
    assert (back.canvas_width, back.canvas_height) == (96, 64)
    assert len(back.strokes) == 12
    for a, b in zip(d.strokes, back.strokes):
        assert np.abs(np.subtract(a.control_points, b.control_points)).max() <= 1e-4
        assert np.abs(np.subtract(a.color, b.color)).max() <= 0.5 / 255 + 1e-12
        assert abs(a.opacity - b.opacity) <= 5e-5 and abs(a.width - b.width) <= 5e-5
    assert np.allclose(back.background_color, d.background_color, atol=0.5 / 255)


def test_svg_structure(tmp_path):
    export_svg(random_drawing(5, 1, (32, 32), seed=0), tmp_path / "s.svg")
    root = ET.parse(tmp_path / "s.svg").getroot()
    assert root.tag == SVG + "svg"
    paths = [el for el in root if el.tag == SVG + "path"]
    assert len(paths) == 5
    for p in paths:
        for attr in ("d", "stroke", "stroke-opacity", "stroke-width", "fill", "stroke-linecap"):
            assert p.get(attr) is not None


def test_empty_drawing_rejected():
    with pytest.raises(InvariantError):
        Drawing((), 32, 32)


def test_svg_write_error_has_path(tmp_path):
    with pytest.raises(OSError, match="missing"):
        export_svg(random_drawing(1, 1, (16, 16), 0), tmp_path / "missing" / "x.svg")


# ------------------------------------------------------------ PNG and style images


@pytest.mark.parametrize("value,byte", [(1.0, 255), (0.0, 0), (0.5, 128), (0.25, 64), (0.998, 254)])
def test_png_quantization(tmp_path, value, byte):
    export_png(RasterImage.constant(4, 6, (value,) * 3), tmp_path / "p.png")
    arr = np.asarray(Image.open(tmp_path / "p.png"))
    assert arr.shape == (4, 6, 3) and arr.dtype == np.uint8
    assert (arr == byte).all()


def test_style_image_center_crop(tmp_path):
    arr = np.zeros((20, 40, 3), np.uint8)
    arr[:, 10:30] = 255  # the centred square is all white
    Image.fromarray(arr).save(tmp_path / "s.png")
    img = load_style_image(tmp_path / "s.png", 16)
    assert img.pixels.shape == (16, 16, 3)
    assert torch.equal(img.pixels, torch.ones_like(img.pixels))
    Image.fromarray(arr[..., 0], mode="L").save(tmp_path / "g.png")
    assert load_style_image(tmp_path / "g.png", 8).pixels.shape == (8, 8, 3)


# ------------------------------------------------------------ losses.csv


def test_losses_csv_roundtrip(tmp_path):
    hist = [LossReport(0, 0.5, 0.25, 0.5, 0.0), LossReport(1, 0.4, 0.2, 0.5000001, 0.5)]
    (tmp_path / "l.csv").write_text(losses_csv(hist))
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "iteration,content,style,total,lambda"
    assert read_losses_csv(tmp_path / "l.csv") == hist


# ------------------------------------------------------------ checkpoints


def _checkpoint(opt_state=None):
    return Checkpoint(
        drawing=random_drawing(3, 2, (32, 32), seed=5),
        config=OptimizationConfig(iterations=10, seed=5),
        iteration=4,
        rng_state={"seed": 5, "next_iteration": 4},
        prompt="a cat",
        style_path=None,
        optimizer_state=opt_state,
        loss_history=(LossReport(0, 0.1, 0.2, 0.1, 0.0),),
    )


def test_checkpoint_roundtrip(tmp_path):
    p = torch.nn.Parameter(torch.rand(3, 2))
    opt = torch.optim.Adam([p], lr=0.1)
    p.sum().backward()
    opt.step()
    ckpt = _checkpoint(encode_optimizer_state(opt.state_dict()))
    save_checkpoint(ckpt, tmp_path / "c.json")
    back = load_checkpoint(tmp_path / "c.json")
    assert back == ckpt
    assert back.format_version == FORMAT_VERSION
    text = (tmp_path / "c.json").read_text()
    assert list(json.loads(text)) == sorted(json.loads(text))
    # optimizer state restores exactly
    restored = decode_optimizer_state(back.optimizer_state)
    opt2 = torch.optim.Adam([torch.nn.Parameter(p.detach().clone())], lr=0.1)
    opt2.load_state_dict(restored)
    for k in ("exp_avg", "exp_avg_sq", "step"):
        assert torch.equal(opt2.state_dict()["state"][0][k], opt.state_dict()["state"][0][k])


def test_checkpoint_floats_are_exact(tmp_path):
    ckpt = _checkpoint()
    save_checkpoint(ckpt, tmp_path / "c.json")
    assert load_checkpoint(tmp_path / "c.json").drawing == ckpt.drawing


def _tamper(tmp_path, edit):
    save_checkpoint(_checkpoint(), tmp_path / "c.json")
    doc = json.loads((tmp_path / "c.json").read_text())
    edit(doc)
    (tmp_path / "c.json").write_text(json.dumps(doc))
    return tmp_path / "c.json"


def test_checkpoint_invariant_violation(tmp_path):
    path = _tamper(tmp_path, lambda d: d["drawing"]["strokes"][0].update(opacity=2.0))
    with pytest.raises(InvariantError):
        load_checkpoint(path)
    path = _tamper(tmp_path, lambda d: d["config"].update(num_paths=0))
    with pytest.raises(InvariantError):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = _tamper(tmp_path, lambda d: d.update(format_version=2))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


@pytest.mark.parametrize(
    "edit",
    [
        lambda d: d.pop("drawing"),
        lambda d: d["drawing"]["strokes"][0].update(color=[0.1, 0.2]),
        lambda d: d["config"].update(unknown_field=1),
        lambda d: d.update(iteration="four"),
        lambda d: d["rng_state"].pop("seed"),
    ],
)
def test_checkpoint_schema_violation(tmp_path, edit):
    with pytest.raises(CheckpointSchemaError):
        load_checkpoint(_tamper(tmp_path, edit))


def test_checkpoint_error_kinds_are_distinct(tmp_path):
    assert not issubclass(CheckpointSchemaError, CheckpointVersionError)
    assert not issubclass(CheckpointVersionError, CheckpointSchemaError)
    assert not issubclass(InvariantError, (CheckpointSchemaError, CheckpointVersionError))
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(CheckpointSchemaError):
        load_checkpoint(tmp_path / "bad.json")


# ------------------------------------------------------------ CLI

FAST = ["--stub-encoders", "--size", "32", "--num-paths", "6", "--snapshot-every", "2"]


def test_cli_example_run(tmp_path):
    out = tmp_path / "x"
    assert cli_main(["--prompt", "a cat", "--iters", "5", "--seed", "1", "--out", str(out), *FAST]) == 0
    for name in ("final.svg", "final.png", "losses.csv", "checkpoint.json"):
        assert (out / name).is_file()
    assert sorted(p.name for p in (out / "snapshots").iterdir()) == [
        "iter_0000.png", "iter_0002.png", "iter_0004.png"
    ]
    with open(out / "losses.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 5
    assert np.asarray(Image.open(out / "final.png")).shape == (32, 32, 3)
    ckpt = load_checkpoint(out / "checkpoint.json")
    assert ckpt.iteration == 5 and ckpt.rng_state == {"seed": 1, "next_iteration": 5}


def test_cli_rows_satisfy_total(tmp_path, style_path):
    out = tmp_path / "s"
    args = ["--prompt", "a cat", "--style", str(style_path), "--iters", "4", "--warmup", "2"]
    assert cli_main([*args, "--out", str(out), *FAST]) == 0
    for r in read_losses_csv(out / "losses.csv"):
        assert abs(r.total_loss - (r.content_loss + r.style_weight_effective * r.style_loss)) <= 1e-6
    assert [r.style_weight_effective for r in read_losses_csv(out / "losses.csv")] == [0, 0.5, 1, 1]


@pytest.fixture
def style_path(tmp_path, style_image):
    path = tmp_path / "style.png"
    export_png(style_image, path)
    return path


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["--stub-encoders"],
        ["--prompt", "x", "--baseline", "decoupled", "--stub-encoders"],
        ["--prompt", "x", "--bogus"],
        ["--prompt", "x", "--iters", "many"],
        ["--prompt", "x", "--num-paths", "0", "--stub-encoders"],
        ["--prompt", "x", "--baseline", "sideways"],
    ],
)
def test_cli_usage_errors(argv, capsys):
    assert cli_main(argv) == 1
    assert "usage:" in capsys.readouterr().err


def test_cli_runtime_failures(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("STYLEDRAW_WEIGHTS", raising=False)
    assert cli_main(["--prompt", "x", "--out", str(tmp_path)]) == 2
    assert "--stub-encoders" in capsys.readouterr().err
    assert cli_main(["--prompt", "x", "--style", str(tmp_path / "nope.png"), *FAST,
                     "--out", str(tmp_path)]) == 2
    (tmp_path / "v2.json").write_text(json.dumps({"format_version": 2}))
    assert cli_main(["--resume", str(tmp_path / "v2.json"), *FAST]) == 2


def test_cli_help_exits_zero(capsys):
    assert cli_main(["--help"]) == 0
    assert "--baseline" in capsys.readouterr().out


def test_cli_decoupled(tmp_path, style_path):
    out = tmp_path / "d"
    argv = ["--prompt", "a cat", "--style", str(style_path), "--baseline", "decoupled",
            "--iters", "3", "--out", str(out), *FAST]
    assert cli_main(argv) == 0
    assert len(read_losses_csv(out / "losses.csv")) == 3
    assert (out / "stage2_style.csv").read_text().startswith("step,style\n")
    assert cli_main([*argv[:-len(FAST) - 2], "--resume", str(out / "checkpoint.json"), *FAST]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "styledraw", "--prompt", "x", "--iters", "2",
         "--out", str(tmp_path), *FAST],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "final.svg").exists()
