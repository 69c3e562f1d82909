"""Coupled stroke optimization next to generate-then-restyle.

Run: python3 demos/03_coupled_vs_decoupled.py [--real]

With the offline stub encoders the pictures carry no meaning, but the
workflow and the loss traces are the same as with pretrained weights
(``--real`` uses $STYLEDRAW_WEIGHTS). Writes PNG/SVG files to demos/out/.
"""

import sys
from pathlib import Path

from styledraw import (
    Drawing,
    OptimizationConfig,
    StrokePath,
    decoupled_baseline,
    export_png,
    export_svg,
    load_encoders,
    render,
    synthesize,
    synthesize_content_only,
)

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
real = "--real" in sys.argv
enc = load_encoders(stub=not real)

# Style: bold black zigzags.
style = render(Drawing(tuple(
    StrokePath(((0.1, y), (0.4, y + 0.1), (0.6, y - 0.1), (0.9, y)), (0, 0, 0), 1.0, 4.0)
    for y in (0.2, 0.5, 0.8)), 64, 64))
export_png(style, out / "style.png")

if real:
    cfg = OptimizationConfig(num_paths=256, iterations=200, canvas_size=224)
else:
    cfg = OptimizationConfig(num_paths=32, iterations=40, canvas_size=64, style_warmup_iters=15,
                             stage2_iterations=40)
prompt = "a drawing of a cat"


def trace(name):
    def cb(it, r):
        if it % 10 == 0:
            print(f"{name:9s} {it:4d} content {r.content_loss:.4f} style {r.style_loss:.4f} "
                  f"lambda {r.style_weight_effective:.2f}")
    return cb


coupled = synthesize(prompt, style, cfg, enc, trace("coupled"))
plain = synthesize_content_only(prompt, cfg, enc, trace("content"))
restyled, stage1 = decoupled_baseline(prompt, style, cfg, enc)

export_svg(coupled.final_drawing, out / "coupled.svg")
export_png(render(coupled.final_drawing), out / "coupled.png")
export_png(render(plain.final_drawing), out / "content_only.png")
export_png(restyled, out / "decoupled.png")
print("final content loss: coupled %.4f, content-only %.4f"
      % (coupled.loss_history[-1].content_loss, plain.loss_history[-1].content_loss))
print("decoupled stage-2 style loss: %.4f -> %.4f"
      % (stage1.stage2_losses[0], stage1.stage2_losses[-1]))
