"""The style loss terms on small feature sets.

Run: python3 demos/02_style_losses.py

Relaxed EMD is a cheap lower bound on the exact earth mover's distance;
scipy's assignment solver gives the exact value for comparison.
"""

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from styledraw import RasterImage, moment_matching_loss, palette_loss, relaxed_emd, style_loss
from styledraw.encoders import StubFeatureExtractor

rng = np.random.default_rng(0)
for n in (2, 4, 6):
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    cost = 1 - an @ bn.T
    r, c = linear_sum_assignment(cost)
    remd = relaxed_emd(torch.as_tensor(a), torch.as_tensor(b)).item()
    print(f"N={n}: relaxed {remd:.4f} <= exact {cost[r, c].mean():.4f}")

A = torch.as_tensor(rng.normal(size=(50, 4)))
print("moments, shuffled copy:", moment_matching_loss(A, A[torch.randperm(50)]).item())
print("moments, shifted copy: ", moment_matching_loss(A, A + 0.5).item())

red = RasterImage.constant(32, 32, (1.0, 0.0, 0.0))
gray = RasterImage.constant(32, 32, (0.5, 0.5, 0.5))
print("palette red vs gray:", palette_loss(red, gray, 64, seed=0).item(),
      "expected", float(np.linalg.norm([0.5, -0.5, -0.5])))

ex = StubFeatureExtractor(input_size=32)
g = torch.Generator().manual_seed(1)
noise = RasterImage(torch.rand(32, 32, 3, generator=g))
stripes = RasterImage(torch.arange(32.0).remainder(4).lt(2).float()[None, :, None].expand(32, 32, 3))
for name, img in (("noise", noise), ("stripes", stripes), ("gray", gray)):
    print(f"style loss of {name:7s} against stripes:",
          round(style_loss(img, stripes, ex, 256, seed=0).item(), 4))
