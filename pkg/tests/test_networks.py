import numpy as np
import pytest
import torch

from gradcheck import fd_check, model64
from structsyn.networks import (Discriminator, Generator, Segmenter, StyleDecoder, StyleEncoder, count_parameters,
                                init_encoder, init_params, receptive_field)


def test_generator_gradients_match_finite_differences():
    torch.manual_seed(0)
    g = model64(Generator, 1, base_channels=4)
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64) * 2 - 1
    errs = fd_check(g, x, reseed=123)
    assert max(errs) < 1e-3


def test_discriminator_gradients_match_finite_differences():
    d = model64(Discriminator, 2, base_channels=4)
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64) * 2 - 1
    assert max(fd_check(d, x, seed=1)) < 1e-3


def test_segmenter_gradients_match_finite_differences():
    s = model64(Segmenter, 3, base_channels=4)
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64) * 2 - 1
    assert max(fd_check(s, x, seed=2)) < 1e-3


@pytest.mark.parametrize("size", [32, 64])
def test_output_shapes_and_ranges(size):
    x = torch.rand(2, 1, size, size) * 2 - 1
    g, s, d = Generator(8), Segmenter(8), Discriminator(8)
    for m in (g, s, d):
        init_params(m, 0)
    y = g(x)
    assert y.shape == x.shape and y.abs().max() <= 1
    p = s(x)
    assert p.shape == (2, 4, size, size)
    assert torch.allclose(p.sum(1), torch.ones(2, size, size), atol=1e-5)
    assert d(x).shape == (2, 1, size // 4, size // 4)


def test_generator_rejects_size_not_divisible_by_four():
    with pytest.raises(ValueError):
        Generator(8)(torch.zeros(1, 1, 30, 30))


def test_discriminator_minimum_input():
    with pytest.raises(ValueError):
        Discriminator(8)(torch.zeros(1, 1, 4, 4))


def test_parameter_counts():
    assert count_parameters(Generator(8)) == 180_593
    assert count_parameters(Discriminator(8)) == 62_241
    assert count_parameters(Segmenter(8)) == 125_468


def test_receptive_field_values():
    assert receptive_field(Discriminator(8)) == (39, 4, 19)


def test_receptive_field_bounds_discriminator_dependence():
    d = init_params(Discriminator(8), 0, std=0.2).double().eval()
    size, jump, offset = receptive_field(d)
    x = torch.rand(1, 1, 64, 64, dtype=torch.float64)
    base = d(x)
    p = 3
    lo = p * jump - offset
    hi = lo + size
    # a pixel just outside the window leaves output (0, p) unchanged; one inside changes it
    for col, inside in [(hi, False), (hi - 1, True), (max(lo, 0), True)]:
        x2 = x.clone()
        x2[0, 0, 0, col] += 1.0
        changed = not torch.equal(d(x2)[0, 0, 0, p], base[0, 0, 0, p])
        assert changed == inside, col


def test_init_params_statistics_and_determinism():
    a = init_params(Generator(8), 5)
    b = init_params(Generator(8), 5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    w = torch.cat([m.weight.reshape(-1) for m in a.modules() if isinstance(m, (torch.nn.Conv2d,
                                                                               torch.nn.ConvTranspose2d))])
    assert abs(w.std().item() - 0.02) < 0.002
    assert all(m.bias.abs().max() == 0 for m in a.modules() if isinstance(m, torch.nn.Conv2d))


def test_style_encoder_frozen_and_shapes():
    enc = init_encoder(StyleEncoder(), 0)
    assert all(not p.requires_grad for p in enc.parameters())
    feats = enc(torch.rand(1, 1, 16, 16))
    assert [f.shape[1] for f in feats] == [8, 16, 32]
    assert all(f.shape[-2:] == (16, 16) for f in feats)
    out = StyleDecoder()(feats[-1])
    assert out.shape == (1, 1, 16, 16) and out.abs().max() <= 1


def test_dropout_only_in_generator_train_mode():
    g = init_params(Generator(8), 0, std=0.2)
    x = torch.rand(1, 1, 32, 32)
    g.eval()
    assert torch.equal(g(x), g(x))
    g.train()
    torch.manual_seed(0)
    a = g(x)
    torch.manual_seed(1)
    assert not torch.equal(a, g(x))
