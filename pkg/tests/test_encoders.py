import pytest
import torch

from styledraw.encoders import (
    VGG_EARLY_LAYERS,
    WEIGHTS_ENV,
    EncoderUnavailableError,
    StubFeatureExtractor,
    StubImageTextEncoder,
    VGGFeatureExtractor,
    load_encoders,
    stub_embed_image,
    stub_embed_text,
    stub_extract_features,
)
from styledraw.objective import cosine_distance
from styledraw.raster import RasterImage


def _image(seed, size=64, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return RasterImage(torch.rand(size, size, 3, generator=g, dtype=dtype))


def test_text_embeddings():
    enc = StubImageTextEncoder()
    a = enc.embed_text("a red bicycle")
    assert a.shape == (64,)
    assert abs(a.norm().item() - 1.0) <= 1e-5
    assert torch.equal(a, enc.embed_text("a red bicycle"))
    b = enc.embed_text("an owl at night")
    assert torch.dot(a, b).item() < 1.0
    assert torch.equal(stub_embed_text("a red bicycle"), a)


@pytest.mark.parametrize("prompt", ["", "   "])
def test_empty_prompt_rejected(prompt):
    with pytest.raises(ValueError):
        StubImageTextEncoder().embed_text(prompt)


def test_image_embeddings():
    enc = StubImageTextEncoder()
    a = enc.embed_image(_image(0))
    assert abs(a.norm().item() - 1.0) <= 1e-5
    assert torch.equal(a, enc.embed_image(_image(0)))
    assert torch.dot(a, enc.embed_image(_image(1))).item() < 1.0
    assert torch.equal(stub_embed_image(_image(0)), a)


def test_image_resolution_checked():
    with pytest.raises(ValueError):
        StubImageTextEncoder().embed_image(_image(0, size=32))


def test_cross_modal_distance_in_range():
    enc = StubImageTextEncoder()
    t = enc.embed_text("a cat")
    for s in range(20):
        d = cosine_distance(enc.embed_image(_image(s)), t).item()
        assert 0.0 <= d <= 2.0


def test_image_embedding_gradient_matches_finite_differences():
    enc = StubImageTextEncoder()
    text = enc.embed_text("a lighthouse").double()
    base = _image(3, dtype=torch.float64).pixels

    def f(px):
        return cosine_distance(enc.embed_image(RasterImage(px)), text)

    x = base.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(x), x)
    g = torch.Generator().manual_seed(0)
    probe = torch.randint(0, base.numel(), (8,), generator=g).tolist()
    eps = 1e-6
    for idx in probe:
        up, down = base.clone(), base.clone()
        up.view(-1)[idx] += eps
        down.view(-1)[idx] -= eps
        numeric = (f(up) - f(down)).item() / (2 * eps)
        analytic = grad.reshape(-1)[idx].item()
        assert abs(analytic) > 1e-9
        assert abs(numeric - analytic) / max(abs(numeric), abs(analytic)) < 1e-2


def test_features_shapes_and_determinism():
    ex = StubFeatureExtractor()
    coords = torch.rand(10, 2, dtype=torch.float64)
    a = ex.extract_features(_image(0), None, coords)
    b = ex.extract_features(_image(0), None, coords)
    assert torch.equal(a.samples, b.samples)
    assert a.layer_dims == (8, 16) and a.total_dim == 24 and len(a) == 10
    one = ex.extract_features(_image(0), [1], coords[:1])
    assert one.samples.shape == (1, 16)
    alias = stub_extract_features(_image(0), coords)
    assert torch.equal(alias.samples, a.samples)


def test_constant_image_hypercolumns_are_equal():
    ex = StubFeatureExtractor()
    img = RasterImage.constant(64, 64, (0.3, 0.6, 0.9))
    coords = 0.1 + 0.8 * torch.rand(32, 2, dtype=torch.float64)
    rows = ex.extract_features(img, None, coords).samples
    assert (rows - rows[0]).abs().max() <= 1e-4


@pytest.mark.parametrize("bad", [[[1.2, 0.5]], [[-0.1, 0.5]], [[0.5, 1.01]]])
def test_out_of_range_coordinates_rejected(bad):
    with pytest.raises(ValueError):
        StubFeatureExtractor().extract_features(_image(0), None, torch.tensor(bad))


def test_feature_arguments_validated():
    ex = StubFeatureExtractor()
    with pytest.raises(ValueError):
        ex.extract_features(_image(0), [], torch.rand(3, 2))
    with pytest.raises(ValueError):
        ex.extract_features(_image(0), None, torch.rand(0, 2))
    with pytest.raises(ValueError):
        ex.extract_features(_image(0), [2], torch.rand(3, 2))


def test_feature_gradient_matches_finite_differences():
    ex = StubFeatureExtractor()
    base = _image(5, dtype=torch.float64).pixels
    coords = torch.rand(16, 2, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    proj = torch.randn(24, generator=torch.Generator().manual_seed(3), dtype=torch.float64)

    def f(px):
        return (ex.extract_features(RasterImage(px), None, coords).samples @ proj).sum()

    x = base.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(x), x)
    flat = grad.reshape(-1)
    probe = torch.argsort(flat.abs(), descending=True)[:8].tolist()
    for idx in probe:
        up, down = base.clone(), base.clone()
        up.view(-1)[idx] += 1e-6
        down.view(-1)[idx] -= 1e-6
        numeric = (f(up) - f(down)).item() / 2e-6
        assert abs(numeric - flat[idx].item()) / abs(flat[idx].item()) < 1e-2


def test_vgg_layer_bookkeeping():
    from torchvision.models.vgg import cfgs, make_layers

    ex = VGGFeatureExtractor(make_layers(cfgs["D"]), input_size=32)
    assert ex.default_layers == VGG_EARLY_LAYERS
    assert [ex.layer_dim(l) for l in VGG_EARLY_LAYERS] == [64, 64, 128, 128, 256, 256, 256]
    fs = ex.extract_features(_image(0, size=32), None, torch.rand(5, 2))
    assert fs.samples.shape == (5, sum(ex.layer_dim(l) for l in VGG_EARLY_LAYERS))


def test_missing_weights_is_a_clear_error(monkeypatch, tmp_path):
    monkeypatch.delenv(WEIGHTS_ENV, raising=False)
    with pytest.raises(EncoderUnavailableError, match="stub"):
        load_encoders()
    monkeypatch.setenv(WEIGHTS_ENV, str(tmp_path))
    with pytest.raises(EncoderUnavailableError, match="vgg16.pth"):
        load_encoders()
    assert load_encoders(stub=True).stub
