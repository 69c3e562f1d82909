"""Render a few strokes and check that pixel gradients are trustworthy.

Run: python3 demos/01_render_and_gradients.py
Writes demos/out/strokes.png and demos/out/strokes.svg.
"""

from pathlib import Path

import torch

from styledraw import Drawing, StrokePath, export_png, export_svg, gradient_check, render
from styledraw import random_drawing
from styledraw.raster import render_tensors

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

# A hand-built drawing: a thick red arc under a thin blue wave.
arc = StrokePath(((0.1, 0.8), (0.3, 0.1), (0.7, 0.1), (0.9, 0.8)), (0.9, 0.1, 0.1), 1.0, 6.0)
wave = StrokePath(
    ((0.05, 0.5), (0.2, 0.3), (0.35, 0.7), (0.5, 0.5), (0.65, 0.3), (0.8, 0.7), (0.95, 0.5)),
    (0.1, 0.2, 0.9), 0.8, 2.0,
)
d = Drawing((arc, wave), 96, 96)
img = render(d)
export_png(img, out / "strokes.png")
export_svg(d, out / "strokes.svg")
print("rendered", tuple(img.pixels.shape), "min", float(img.pixels.min()))

# Autograd against central differences, for every stroke parameter.
for seed in range(3):
    d = random_drawing(3, 1, (32, 32), seed=seed)
    err = gradient_check(d, lambda px: px.mean(), step=1e-3)
    print(f"seed {seed}: worst relative gradient error {err:.2e}")

# A loss that only looks at one corner: strokes elsewhere get no gradient.
far = Drawing((StrokePath(((0.45, 0.5), (0.5, 0.5), (0.52, 0.5), (0.55, 0.5)), (0, 0, 0), 1.0, 1.0),),
              32, 32)
print("far-away pixel loss:", gradient_check(far, lambda px: px[0, 0].sum()))

# Gradients flow to widths too: thicker strokes darken the mean.
t = torch.tensor(4.0, requires_grad=True)
pts = torch.tensor([[[0.2, 0.5], [0.4, 0.5], [0.6, 0.5], [0.8, 0.5]]])
px = render_tensors(pts, torch.zeros(1, 3), torch.ones(1), t[None], 32, 32)
px.mean().backward()
print("d mean / d width =", float(t.grad))
