"""Generator, patch discriminator, segmenter and the organ style encoder/decoder."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, dropout: float = 0.0):
        super().__init__()
        layers = [
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(),
        ]
        if dropout > 0:
            layers.append(nn.Dropout(dropout))
        layers += [
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels, affine=True),
        ]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.body(x)


def _down(cin, cout, kernel, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, padding_mode="reflect"),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(),
    )


def _up(cin, cout):
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(),
    )


class ResnetTranslator(nn.Module):
    """Three-conv encoder, a residual trunk at width ``4c`` and three transposed convs.

    With ``input_skips`` the raw input, average-pooled to the matching
    resolution, is concatenated onto the features entering encoder convs 2
    and 3.
    """

    def __init__(self, base_channels=8, in_ch=1, out_ch=1, n_res=9, dropout=0.0, input_skips=True):
        super().__init__()
        if base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        c = base_channels
        extra = in_ch if input_skips else 0
        self.input_skips = input_skips
        self.enc1 = _down(in_ch, c, 7, 1)
        self.enc2 = _down(c + extra, 2 * c, 3, 2)
        self.enc3 = _down(2 * c + extra, 4 * c, 3, 2)
        self.res = nn.Sequential(*[ResidualBlock(4 * c, dropout) for _ in range(n_res)])
        self.dec1 = _up(4 * c, 2 * c)
        self.dec2 = _up(2 * c, c)
        self.dec3 = nn.ConvTranspose2d(c, out_ch, 7, stride=1, padding=3)

    def features(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"input height and width must be divisible by 4, got {tuple(x.shape[-2:])}")
        h = self.enc1(x)
        if self.input_skips:
            h = torch.cat([h, x], dim=1)
        h = self.enc2(h)
        if self.input_skips:
            h = torch.cat([h, F.avg_pool2d(x, 2)], dim=1)
        h = self.enc3(h)
        h = self.res(h)
        return self.dec3(self.dec2(self.dec1(h)))


class Generator(ResnetTranslator):
    def __init__(self, base_channels=8, in_ch=1, out_ch=1, dropout=0.5):
        super().__init__(base_channels, in_ch, out_ch, n_res=9, dropout=dropout, input_skips=True)

    def forward(self, x):
        return torch.tanh(self.features(x))


class Segmenter(ResnetTranslator):
    def __init__(self, base_channels=8, num_classes=4, in_ch=1):
        super().__init__(base_channels, in_ch, num_classes, n_res=6, dropout=0.0, input_skips=False)

    def logits(self, x):
        return self.features(x)

    def forward(self, x):
        return torch.softmax(self.features(x), dim=1)


class Discriminator(nn.Module):
    """Six 3x3 convs ending in a one-channel patch map, no output squashing."""

    strides = (2, 2, 1, 1, 1, 1)
    min_input = 8

    def __init__(self, base_channels=8, in_ch=1):
        super().__init__()
        if base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        c = base_channels
        widths = [in_ch, c, 2 * c, 4 * c, 8 * c, 8 * c]
        layers = []
        for i in range(5):
            layers.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=self.strides[i], padding=1))
            if i > 0:
                layers.append(nn.BatchNorm2d(widths[i + 1]))
            layers.append(nn.ReLU())
        layers.append(nn.Conv2d(widths[5], 1, 3, stride=self.strides[5], padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if min(x.shape[-2:]) < self.min_input:
            raise ValueError(f"discriminator input must be at least {self.min_input}x{self.min_input}")
        return self.net(x)


def receptive_field(module: nn.Module) -> tuple[int, int, int]:
    """Return ``(size, jump, offset)`` of the conv stack in ``module``.

    Output index ``p`` sees input indices ``[p * jump - offset, p * jump - offset + size)``.
    """
    size, jump, offset = 1, 1, 0
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            k, s, p = m.kernel_size[0], m.stride[0], m.padding[0]
            size += (k - 1) * jump
            offset += p * jump
            jump *= s
    return size, jump, offset


class StyleEncoder(nn.Module):
    """Fixed random feature extractor: three 3x3 convs of widths 8/16/32.

    Stride 1 throughout, so organ masks of a few pixels stay usable at
    feature resolution.
    """

    widths = (8, 16, 32)
    strides = (1, 1, 1)

    def __init__(self, in_ch=1):
        super().__init__()
        chans = (in_ch, *self.widths)
        self.layers = nn.ModuleList(
            nn.Sequential(nn.Conv2d(chans[i], chans[i + 1], 3, stride=self.strides[i], padding=1,
                                    padding_mode="reflect"), nn.ReLU())
            for i in range(3)
        )

    def forward(self, x):
        """Return the activations of all three layers, shallowest first."""
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


class StyleDecoder(nn.Module):
    def __init__(self, out_ch=1):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(32, 16, 3, padding=1, padding_mode="reflect"), nn.ReLU(),
            nn.Conv2d(16, 8, 3, padding=1, padding_mode="reflect"), nn.ReLU(),
            nn.Conv2d(8, out_ch, 3, padding=1, padding_mode="reflect"),
        )

    def forward(self, t):
        return torch.tanh(self.net(t))


def init_params(module: nn.Module, seed: int, std: float = 0.02) -> nn.Module:
    """Draw conv weights from N(0, std^2); zero biases; unit norm scales."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=g, dtype=m.weight.dtype) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.InstanceNorm2d, nn.BatchNorm2d)) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def init_encoder(encoder: StyleEncoder, seed: int) -> StyleEncoder:
    """He-normal weights for the frozen encoder, then freeze it."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in encoder.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=g, dtype=m.weight.dtype) * (2.0 / fan_in) ** 0.5)
                m.bias.zero_()
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
