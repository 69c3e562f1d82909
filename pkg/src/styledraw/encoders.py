"""Image/text embedding and convolutional feature extraction.

Two interfaces are used by the losses:

* :class:`ImageTextEncoder` maps prompts and images into one unit-norm
  embedding space (a pretrained CLIP model, or a random-projection stub).
* :class:`FeatureExtractor` produces per-layer activation maps from which
  hypercolumns are bilinearly sampled (VGG-16, or a random conv stub).

The stubs are bit-deterministic and need no downloads, so the whole
synthesis loop can run offline. Pretrained weights are looked up under
``$STYLEDRAW_WEIGHTS`` (``clip/`` in Hugging Face format, ``vgg16.pth`` as a
torchvision state dict).
"""

from __future__ import annotations

import os
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .raster import RasterImage

WEIGHTS_ENV = "STYLEDRAW_WEIGHTS"

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# ReLU outputs of the first three convolutional blocks of torchvision's VGG-16.
VGG_EARLY_LAYERS = (1, 3, 6, 8, 11, 13, 15)


class EncoderUnavailableError(RuntimeError):
    pass


def normalize(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return v / v.norm(dim=dim, keepdim=True).clamp_min(1e-12)


def to_batch(img: RasterImage | torch.Tensor) -> torch.Tensor:
    """``(H, W, 3)`` image to a ``(1, 3, H, W)`` batch."""
    pixels = img.pixels if isinstance(img, RasterImage) else img
    return pixels.permute(2, 0, 1)[None]


@dataclass
class FeatureStack:
    """``N`` hypercolumns; column blocks follow ``layer_dims``."""

    samples: torch.Tensor
    layer_dims: tuple[int, ...]

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ValueError("a FeatureStack needs at least one sample row")
        if sum(self.layer_dims) != self.samples.shape[1]:
            raise ValueError("layer_dims do not add up to the feature width")

    @property
    def total_dim(self) -> int:
        return int(self.samples.shape[1])

    def __len__(self) -> int:
        return int(self.samples.shape[0])


class ImageTextEncoder(ABC):
    input_size: int

    @abstractmethod
    def embed_text(self, prompt: str) -> torch.Tensor:
        """Unit-norm ``(D,)`` embedding of a prompt."""

    @abstractmethod
    def embed_images(self, batch: torch.Tensor) -> torch.Tensor:
        """Unit-norm ``(N, D)`` embeddings of an ``(N, 3, S, S)`` batch in [0, 1]."""

    def embed_image(self, img: RasterImage) -> torch.Tensor:
        if (img.height, img.width) != (self.input_size, self.input_size):
            raise ValueError(
                f"encoder expects {self.input_size}x{self.input_size} images, "
                f"got {img.height}x{img.width}"
            )
        return self.embed_images(to_batch(img))[0]

    @staticmethod
    def _check_prompt(prompt: str) -> None:
        if not prompt or not prompt.strip():
            raise ValueError("prompt must be a non-empty string")


class FeatureExtractor(ABC):
    input_size: int
    default_layers: tuple[int, ...]

    @abstractmethod
    def layer_dim(self, layer: int) -> int: ...

    @abstractmethod
    def feature_maps(self, batch: torch.Tensor, layers: Sequence[int]) -> list[torch.Tensor]:
        """Activation maps ``(1, C_l, h_l, w_l)`` of a ``(1, 3, H, W)`` image."""

    def extract_features(
        self,
        img: RasterImage | torch.Tensor,
        layers: Sequence[int] | None,
        sample_coords: torch.Tensor,
    ) -> FeatureStack:
        layers = tuple(self.default_layers if layers is None else layers)
        if not layers:
            raise ValueError("at least one layer is required")
        return sample_hypercolumns(
            self.feature_maps(to_batch(img), layers),
            sample_coords,
            tuple(self.layer_dim(l) for l in layers),
        )


def sample_hypercolumns(
    maps: Sequence[torch.Tensor], coords: torch.Tensor, layer_dims: tuple[int, ...]
) -> FeatureStack:
    """Bilinearly sample every map at normalized ``(x, y)`` positions.

    Coordinates refer to the image plane, so the same point is read from
    maps of any resolution.
    """
    coords = torch.as_tensor(coords)
    if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 1:
        raise ValueError("sample_coords must be an (N, 2) array with N >= 1")
    if (coords < 0).any() or (coords > 1).any():
        raise ValueError("sample coordinates must lie in [0, 1]")
    cols = []
    for m in maps:
        grid = (2.0 * coords.to(m.dtype) - 1.0)[None, None]
        s = F.grid_sample(m, grid, mode="bilinear", padding_mode="border", align_corners=False)
        cols.append(s[0, :, 0, :].T)
    return FeatureStack(torch.cat(cols, dim=1), layer_dims)


def _trigram_ids(prompt: str, vocab: int) -> list[int]:
    text = f"  {prompt.lower().strip()} "
    return [zlib.crc32(text[i : i + 3].encode("utf-8")) % vocab for i in range(len(text) - 2)]


class StubImageTextEncoder(ImageTextEncoder):
    """Random projections into a shared ``dim``-dimensional space.

    Images are area-downsampled to 16x16, centred and projected; prompts are
    hashed character-trigram counts, projected.
    """

    def __init__(self, dim: int = 64, input_size: int = 64, vocab: int = 2048, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        self.dim = dim
        self.input_size = input_size
        self.vocab = vocab
        self.image_proj = torch.randn(3 * 16 * 16, dim, generator=g, dtype=torch.float64)
        self.text_proj = torch.randn(vocab, dim, generator=g, dtype=torch.float64)

    def embed_text(self, prompt: str) -> torch.Tensor:
        self._check_prompt(prompt)
        counts = torch.zeros(self.vocab, dtype=torch.float64)
        for i in _trigram_ids(prompt, self.vocab):
            counts[i] += 1.0
        return normalize(counts @ self.text_proj).float()

    def embed_images(self, batch: torch.Tensor) -> torch.Tensor:
        small = F.adaptive_avg_pool2d(batch, 16) - 0.5
        return normalize(small.flatten(1) @ self.image_proj.to(batch.dtype))


class StubFeatureExtractor(FeatureExtractor):
    """Two random 3x3 conv + ReLU layers (8 and 16 channels, second strided)."""

    def __init__(self, input_size: int = 64, seed: int = 1):
        g = torch.Generator().manual_seed(seed)
        self.input_size = input_size
        self.default_layers = (0, 1)
        self._dims = (8, 16)
        self.weights = [
            torch.randn(8, 3, 3, 3, generator=g, dtype=torch.float64) / 3.0,
            torch.randn(16, 8, 3, 3, generator=g, dtype=torch.float64) / 8.5,
        ]
        self.biases = [
            0.1 * torch.randn(8, generator=g, dtype=torch.float64),
            0.1 * torch.randn(16, generator=g, dtype=torch.float64),
        ]

    def layer_dim(self, layer: int) -> int:
        return self._dims[layer]

    def feature_maps(self, batch: torch.Tensor, layers: Sequence[int]) -> list[torch.Tensor]:
        for l in layers:
            if l not in (0, 1):
                raise ValueError(f"stub extractor has layers 0 and 1, not {l}")
        out, x = [], batch
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = F.pad(x, (1, 1, 1, 1), mode="replicate")
            x = F.relu(F.conv2d(x, w.to(x.dtype), b.to(x.dtype), stride=1 + i))
            out.append(x)
        return [out[l] for l in layers]


class ClipEncoder(ImageTextEncoder):
    """A pretrained CLIP model loaded with ``transformers`` from a local directory."""

    def __init__(self, model_dir: str | os.PathLike):
        from transformers import CLIPModel, CLIPTokenizer

        self.model = CLIPModel.from_pretrained(model_dir).eval()
        self.model.requires_grad_(False)
        self.tokenizer = CLIPTokenizer.from_pretrained(model_dir)
        self.input_size = int(self.model.config.vision_config.image_size)
        self._mean = torch.tensor(CLIP_MEAN).view(1, 3, 1, 1)
        self._std = torch.tensor(CLIP_STD).view(1, 3, 1, 1)

    def embed_text(self, prompt: str) -> torch.Tensor:
        self._check_prompt(prompt)
        tokens = self.tokenizer([prompt], padding=True, return_tensors="pt")
        with torch.no_grad():
            feats = self.model.get_text_features(**tokens)
        return normalize(feats[0])

    def embed_images(self, batch: torch.Tensor) -> torch.Tensor:
        x = (batch.float() - self._mean) / self._std
        return normalize(self.model.get_image_features(pixel_values=x))


class VGGFeatureExtractor(FeatureExtractor):
    """Early layers of VGG-16; ``features`` is its convolutional ``nn.Sequential``."""

    def __init__(self, features: nn.Sequential, input_size: int = 224,
                 layers: Sequence[int] = VGG_EARLY_LAYERS):
        self.features = features.eval()
        self.features.requires_grad_(False)
        self.input_size = input_size
        self.default_layers = tuple(layers)
        self._dims = {}
        channels = 3
        for i, module in enumerate(self.features):
            if isinstance(module, nn.Conv2d):
                channels = module.out_channels
            self._dims[i] = channels
        self._mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        self._std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)

    @classmethod
    def from_state_dict(cls, path: str | os.PathLike, **kwargs) -> "VGGFeatureExtractor":
        from torchvision.models import vgg16

        model = vgg16(weights=None)
        model.load_state_dict(torch.load(path, map_location="cpu"))
        return cls(model.features, **kwargs)

    def layer_dim(self, layer: int) -> int:
        return self._dims[layer]

    def feature_maps(self, batch: torch.Tensor, layers: Sequence[int]) -> list[torch.Tensor]:
        wanted = set(layers)
        last = max(wanted)
        if last >= len(self.features):
            raise ValueError(f"VGG features have {len(self.features)} modules, asked for {last}")
        x = (batch.float() - self._mean) / self._std
        found = {}
        for i, module in enumerate(self.features):
            x = module(x)
            if i in wanted:
                found[i] = x
            if i == last:
                break
        return [found[l] for l in layers]


@dataclass
class Encoders:
    text_image: ImageTextEncoder
    features: FeatureExtractor
    stub: bool = False


def stub_encoders(input_size: int = 64) -> Encoders:
    return Encoders(
        StubImageTextEncoder(input_size=input_size),
        StubFeatureExtractor(input_size=input_size),
        stub=True,
    )


def load_encoders(stub: bool = False, weights_dir: str | os.PathLike | None = None) -> Encoders:
    """Stub encoders, or the pretrained pair found under ``weights_dir``."""
    if stub:
        return stub_encoders()
    root = weights_dir or os.environ.get(WEIGHTS_ENV)
    if not root:
        raise EncoderUnavailableError(
            f"no encoder weights: set {WEIGHTS_ENV} to a directory containing "
            "clip/ and vgg16.pth, or use the stub encoders (--stub-encoders)"
        )
    root = Path(root)
    clip_dir, vgg_path = root / "clip", root / "vgg16.pth"
    missing = [str(p) for p in (clip_dir, vgg_path) if not p.exists()]
    if missing:
        raise EncoderUnavailableError(
            f"encoder weights not found: {', '.join(missing)} "
            "(or use the stub encoders, --stub-encoders)"
        )
    return Encoders(ClipEncoder(clip_dir), VGGFeatureExtractor.from_state_dict(vgg_path))


# Function-style aliases for the stub test doubles.
def stub_embed_text(prompt: str, encoder: StubImageTextEncoder | None = None) -> torch.Tensor:
    return (encoder or StubImageTextEncoder()).embed_text(prompt)


def stub_embed_image(img: RasterImage, encoder: StubImageTextEncoder | None = None) -> torch.Tensor:
    return (encoder or StubImageTextEncoder()).embed_image(img)


def stub_extract_features(
    img: RasterImage, sample_coords, layers=None, extractor: StubFeatureExtractor | None = None
) -> FeatureStack:
    return (extractor or StubFeatureExtractor()).extract_features(img, layers, sample_coords)
