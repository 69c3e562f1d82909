"""File formats and the command-line entry point.

SVG export uses a small fixed dialect (one cubic path per stroke over a
background rect) that :func:`import_svg` reads back. Checkpoints are
canonical JSON: sorted keys, shortest round-trip float repr, and a
``format_version`` that is checked before anything else is read.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import re
import sys
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np
import torch
from PIL import Image

from .encoders import EncoderUnavailableError, load_encoders
from .objective import LossReport
from .optimize import NonFiniteError, decoupled_baseline, resume, synthesize
from .optimize import synthesize_content_only
from .raster import RasterImage, render
from .stroke_model import Drawing, InvariantError, OptimizationConfig, StrokePath

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SVG_NS = "http://www.w3.org/2000/svg"
LOSS_HEADER = ("iteration", "content", "style", "total", "lambda")


# ---------------------------------------------------------------- SVG


def _hex(color: Sequence[float]) -> str:
    return "#" + "".join(f"{_quantize(c):02X}" for c in color)


def _quantize(c: float) -> int:
    return int(min(max(math.floor(c * 255.0 + 0.5), 0), 255))


def _path_data(s: StrokePath, w: int, h: int) -> str:
    pts = [f"{x * w:.4f} {y * h:.4f}" for x, y in s.control_points]
    parts = [f"M {pts[0]}"]
    for k in range(s.num_segments):
        parts.append("C " + ", ".join(pts[3 * k + 1 : 3 * k + 4]))
    return " ".join(parts)


def svg_string(d: Drawing) -> str:
    w, h = d.canvas_width, d.canvas_height
    lines = [
        f'<svg xmlns="{SVG_NS}" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'  <rect x="0" y="0" width="{w}" height="{h}" fill="{_hex(d.background_color)}"/>',
    ]
    for s in d.strokes:
        lines.append(
            f'  <path d="{_path_data(s, w, h)}" fill="none" stroke="{_hex(s.color)}" '
            f'stroke-opacity="{s.opacity:.4f}" stroke-width="{s.width:.4f}" '
            'stroke-linecap="round"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def export_svg(d: Drawing, path: str | Path) -> None:
    d.validate()
    path = Path(path)
    try:
        path.write_text(svg_string(d), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write SVG to {path}: {exc}") from exc


_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


def _parse_path(data: str, w: int, h: int) -> tuple[tuple[float, float], ...]:
    tokens = re.findall(r"[MC]|" + _NUMBER.pattern, data)
    if not tokens or tokens[0] != "M":
        raise ValueError(f"path must start with M: {data[:40]!r}")
    coords, commands = [], []
    for tok in tokens:
        if tok in ("M", "C"):
            commands.append(tok)
        else:
            coords.append(float(tok))
    if commands.count("M") != 1 or len(coords) % 2:
        raise ValueError(f"unsupported path data: {data[:40]!r}")
    pts = tuple((coords[i] / w, coords[i + 1] / h) for i in range(0, len(coords), 2))
    if len(pts) != 1 + 3 * commands.count("C"):
        raise ValueError(f"each C command needs three points: {data[:40]!r}")
    return pts


def _unhex(s: str) -> tuple[float, float, float]:
    if not re.fullmatch(r"#[0-9A-Fa-f]{6}", s or ""):
        raise ValueError(f"expected #RRGGBB color, got {s!r}")
    return tuple(int(s[i : i + 2], 16) / 255.0 for i in (1, 3, 5))


def import_svg(path: str | Path) -> Drawing:
    """Read an SVG written by :func:`export_svg`.

    Colors come back quantized to 8 bits; coordinates, opacity and width to
    the four decimals of the file.
    """
    root = ET.parse(path).getroot()
    w, h = int(float(root.get("width"))), int(float(root.get("height")))
    background = (1.0, 1.0, 1.0)
    strokes = []
    for el in root:
        tag = el.tag.rsplit("}", 1)[-1]
        if tag == "rect":
            background = _unhex(el.get("fill"))
        elif tag == "path":
            strokes.append(
                StrokePath(
                    control_points=_parse_path(el.get("d", ""), w, h),
                    color=_unhex(el.get("stroke")),
                    opacity=float(el.get("stroke-opacity", "1")),
                    width=float(el.get("stroke-width", "1")),
                )
            )
    return Drawing(tuple(strokes), w, h, background)


# ---------------------------------------------------------------- PNG


def to_bytes(img: RasterImage) -> np.ndarray:
    """8-bit RGB with round-half-up quantization."""
    x = img.pixels.detach().to(torch.float64).cpu().numpy()
    return np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8)


def export_png(img: RasterImage, path: str | Path) -> None:
    Image.fromarray(to_bytes(img), mode="RGB").save(path, format="PNG")


def load_style_image(path: str | Path, size: int) -> RasterImage:
    """RGB in [0, 1], centre-cropped to a square and resized to ``size``."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        side = min(im.size)
        left, top = (im.width - side) // 2, (im.height - side) // 2
        im = im.crop((left, top, left + side, top + side))
        im = im.resize((size, size), Image.Resampling.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return RasterImage(torch.from_numpy(arr.copy()))


# ---------------------------------------------------------------- losses.csv


def losses_csv(history: Sequence[LossReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_HEADER)
    for r in history:
        writer.writerow(
            [r.iteration, repr(r.content_loss), repr(r.style_loss), repr(r.total_loss),
             repr(r.style_weight_effective)]
        )
    return buf.getvalue()


def read_losses_csv(path: str | Path) -> list[LossReport]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        LossReport(int(r["iteration"]), float(r["content"]), float(r["style"]),
                   float(r["total"]), float(r["lambda"]))
        for r in rows
    ]


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointSchemaError(CheckpointError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    """A resumable run state.

    ``rng_state`` is the counter the per-iteration seeds are derived from:
    the run seed and the next iteration to execute. ``optimizer_state`` is
    kept in its JSON form (see :func:`encode_optimizer_state`).
    """

    drawing: Drawing
    config: OptimizationConfig
    iteration: int
    rng_state: dict
    format_version: int = FORMAT_VERSION
    prompt: str = ""
    style_path: str | None = None
    optimizer_state: dict | None = None
    loss_history: tuple[LossReport, ...] = field(default_factory=tuple)


def encode_optimizer_state(obj: Any) -> Any:
    if isinstance(obj, torch.Tensor):
        t = obj.detach().cpu()
        return {
            "__tensor__": str(t.dtype).removeprefix("torch."),
            "shape": list(t.shape),
            "data": t.reshape(-1).tolist(),
        }
    if isinstance(obj, dict):
        return {str(k): encode_optimizer_state(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [encode_optimizer_state(v) for v in obj]
    return obj


def decode_optimizer_state(obj: Any) -> Any:
    """Inverse of :func:`encode_optimizer_state` for a torch optimizer state dict."""
    def dec(v):
        if isinstance(v, dict) and "__tensor__" in v:
            dtype = getattr(torch, v["__tensor__"])
            return torch.tensor(v["data"], dtype=dtype).reshape(v["shape"])
        if isinstance(v, dict):
            return {k: dec(x) for k, x in v.items()}
        if isinstance(v, list):
            return [dec(x) for x in v]
        return v

    out = dec(obj)
    out["state"] = {int(k): v for k, v in out["state"].items()}
    return out


_POINT = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_RGB = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}


def _config_property(default: Any) -> dict:
    if isinstance(default, bool):
        return {"type": "boolean"}
    if isinstance(default, int):
        return {"type": "integer"}
    if isinstance(default, float):
        return {"type": "number"}
    n = len(default)
    return {"type": "array", "items": {"type": "number"}, "minItems": n, "maxItems": n}


_CONFIG_PROPERTIES = {
    f.name: _config_property(f.default) for f in dataclasses.fields(OptimizationConfig)
}

CHECKPOINT_SCHEMA = {
    "type": "object",
    "required": ["format_version", "drawing", "config", "iteration", "rng_state"],
    "additionalProperties": False,
    "properties": {
        "format_version": {"type": "integer"},
        "iteration": {"type": "integer", "minimum": 0},
        "rng_state": {
            "type": "object",
            "required": ["seed", "next_iteration"],
            "additionalProperties": False,
            "properties": {"seed": {"type": "integer"}, "next_iteration": {"type": "integer"}},
        },
        "prompt": {"type": "string"},
        "style_path": {"type": ["string", "null"]},
        "optimizer_state": {"type": ["object", "null"]},
        "loss_history": {
            "type": "array",
            "items": {
                "type": "array", "items": {"type": "number"}, "minItems": 5, "maxItems": 5,
            },
        },
        "config": {
            "type": "object",
            "required": sorted(_CONFIG_PROPERTIES),
            "additionalProperties": False,
            "properties": _CONFIG_PROPERTIES,
        },
        "drawing": {
            "type": "object",
            "required": ["canvas_width", "canvas_height", "background_color", "strokes"],
            "additionalProperties": False,
            "properties": {
                "canvas_width": {"type": "integer"},
                "canvas_height": {"type": "integer"},
                "background_color": _RGB,
                "strokes": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["control_points", "color", "opacity", "width"],
                        "additionalProperties": False,
                        "properties": {
                            "control_points": {"type": "array", "items": _POINT},
                            "color": _RGB,
                            "opacity": {"type": "number"},
                            "width": {"type": "number"},
                        },
                    },
                },
            },
        },
    },
}


def _drawing_json(d: Drawing) -> dict:
    return {
        "canvas_width": d.canvas_width,
        "canvas_height": d.canvas_height,
        "background_color": list(d.background_color),
        "strokes": [
            {
                "control_points": [list(p) for p in s.control_points],
                "color": list(s.color),
                "opacity": s.opacity,
                "width": s.width,
            }
            for s in d.strokes
        ],
    }


def checkpoint_json(ckpt: Checkpoint) -> str:
    doc = {
        "format_version": ckpt.format_version,
        "drawing": _drawing_json(ckpt.drawing),
        "config": {
            k: list(v) if isinstance(v, tuple) else v
            for k, v in dataclasses.asdict(ckpt.config).items()
        },
        "iteration": ckpt.iteration,
        "rng_state": dict(ckpt.rng_state),
        "prompt": ckpt.prompt,
        "style_path": ckpt.style_path,
        "optimizer_state": ckpt.optimizer_state,
        "loss_history": [dataclasses.astuple(r) for r in ckpt.loss_history],
    }
    return json.dumps(doc, sort_keys=True, allow_nan=False, indent=1) + "\n"


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    text = checkpoint_json(ckpt)
    Path(path).write_text(text, encoding="utf-8")


def parse_checkpoint(text: str) -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointSchemaError(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointSchemaError("missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint format_version {doc['format_version']!r} "
            f"(expected {FORMAT_VERSION})"
        )
    try:
        jsonschema.validate(doc, CHECKPOINT_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise CheckpointSchemaError(f"{where}: {exc.message}") from None

    dj = doc["drawing"]
    drawing = Drawing(
        tuple(
            StrokePath(tuple(map(tuple, s["control_points"])), tuple(s["color"]),
                       s["opacity"], s["width"])
            for s in dj["strokes"]
        ),
        dj["canvas_width"],
        dj["canvas_height"],
        tuple(dj["background_color"]),
    )
    drawing.validate()
    config = OptimizationConfig(**doc["config"])
    history = tuple(
        LossReport(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]))
        for r in doc.get("loss_history", [])
    )
    return Checkpoint(
        drawing=drawing,
        config=config,
        iteration=doc["iteration"],
        rng_state=doc["rng_state"],
        format_version=doc["format_version"],
        prompt=doc.get("prompt", ""),
        style_path=doc.get("style_path"),
        optimizer_state=doc.get("optimizer_state"),
        loss_history=history,
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- CLI


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="styledraw",
        description="Optimize Bezier strokes toward a text prompt and a style image.",
    )
    p.add_argument("--prompt", help="text the drawing should match (required unless --resume)")
    p.add_argument("--style", help="style image; omit for content-only synthesis")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--iters", type=int, help="total iterations (default 200, or 50 with stubs)")
    p.add_argument("--num-paths", type=int, default=256)
    p.add_argument("--segments", type=int, default=1, help="cubic segments per stroke")
    p.add_argument("--style-weight", type=float, default=1.0)
    p.add_argument("--warmup", type=int, default=50, help="style weight warm-up iterations")
    p.add_argument("--augments", type=int, default=4, help="augmented views per iteration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=224, help="canvas side in pixels")
    p.add_argument("--stub-encoders", action="store_true",
                   help="use the deterministic offline encoders instead of pretrained weights")
    p.add_argument("--baseline", choices=("coupled", "decoupled"), default="coupled")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from checkpoint.json")
    p.add_argument("--snapshot-every", type=int, default=10)
    p.add_argument("--weights", help="encoder weight directory (else $STYLEDRAW_WEIGHTS)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config_from_args(args) -> OptimizationConfig:
    iters = args.iters if args.iters is not None else (50 if args.stub_encoders else 200)
    return OptimizationConfig(
        num_paths=args.num_paths,
        segments_per_path=args.segments,
        iterations=iters,
        canvas_size=args.size,
        style_weight=args.style_weight,
        style_warmup_iters=args.warmup,
        num_augmentations=args.augments,
        seed=args.seed,
        snapshot_every=args.snapshot_every,
    )


def _write_outputs(out: Path, final_png: RasterImage, drawing: Drawing,
                   history: Sequence[LossReport], snapshots, ckpt: Checkpoint) -> None:
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    export_svg(drawing, out / "final.svg")
    export_png(final_png, out / "final.png")
    (out / "losses.csv").write_text(losses_csv(history), encoding="utf-8")
    save_checkpoint(ckpt, out / "checkpoint.json")
    for it, img in snapshots:
        export_png(img, out / "snapshots" / f"iter_{it:04d}.png")


def _progress(it: int, r: LossReport) -> None:
    if it % 10 == 0:
        log.info("iter %4d  content %.4f  style %.4f  total %.4f  lambda %.3f",
                 it, r.content_loss, r.style_loss, r.total_loss, r.style_weight_effective)


def _execute(args) -> None:
    out = Path(args.out)
    encoders = load_encoders(stub=args.stub_encoders, weights_dir=args.weights)
    size = encoders.features.input_size

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        cfg = ckpt.config
        if args.iters is not None:
            cfg = cfg.with_(iterations=args.iters)
        prompt = args.prompt or ckpt.prompt
        style_path = args.style or ckpt.style_path
        style = load_style_image(style_path, size) if style_path else None
        opt_state = (decode_optimizer_state(ckpt.optimizer_state)
                     if ckpt.optimizer_state is not None else None)
        result = resume(prompt, style, cfg, encoders, ckpt.drawing,
                        ckpt.rng_state["next_iteration"], opt_state, _progress)
        history = list(ckpt.loss_history) + result.loss_history
        final_png = render(result.final_drawing)
    else:
        cfg = _config_from_args(args)
        prompt, style_path = args.prompt, args.style
        style = load_style_image(style_path, size) if style_path else None
        if args.baseline == "decoupled":
            final_png, result = decoupled_baseline(prompt, style, cfg, encoders, _progress)
            out.mkdir(parents=True, exist_ok=True)
            (out / "stage2_style.csv").write_text(
                "step,style\n" + "".join(f"{k},{v!r}\n" for k, v in enumerate(result.stage2_losses)),
                encoding="utf-8",
            )
        elif style is None:
            result = synthesize_content_only(prompt, cfg, encoders, _progress)
            final_png = render(result.final_drawing)
        else:
            result = synthesize(prompt, style, cfg, encoders, _progress)
            final_png = render(result.final_drawing)
        history = result.loss_history

    next_it = max(cfg.iterations, ckpt.rng_state["next_iteration"]) if args.resume else cfg.iterations
    ckpt_out = Checkpoint(
        drawing=result.final_drawing,
        config=cfg,
        iteration=next_it,
        rng_state={"seed": cfg.seed, "next_iteration": next_it},
        prompt=prompt,
        style_path=str(style_path) if style_path else None,
        optimizer_state=encode_optimizer_state(result.optimizer_state)
        if result.optimizer_state is not None else None,
        loss_history=tuple(history),
    )
    _write_outputs(out, final_png, result.final_drawing, history, result.snapshots, ckpt_out)


def cli_main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.prompt and not args.resume:
            raise UsageError("--prompt is required unless --resume is given")
        if args.baseline == "decoupled" and not args.style:
            raise UsageError("--baseline decoupled needs a --style image")
        if args.baseline == "decoupled" and args.resume:
            raise UsageError("--resume applies to coupled or content-only runs only")
        if not args.resume:
            try:
                _config_from_args(args)
            except InvariantError as exc:
                raise UsageError(str(exc)) from None
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        _execute(args)
    except (InvariantError, CheckpointError, EncoderUnavailableError, NonFiniteError,
            OSError, ValueError, RuntimeError) as exc:
        print(f"{parser.prog}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(cli_main())
