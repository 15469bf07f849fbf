"""Face fidelity reinforce network: a trainable control branch for the frozen denoiser.

The branch is a value-copy of the base UNet's trunk (input conv, encoder
stages, middle block, time MLP). It consumes the landmark control image via a
strided hint head, conditions every cross-attention layer on the fused facial
features (there is no text pathway here by construction), and emits one
additive residual per base injection point (each encoder skip plus the
bottleneck) through 1x1 convolutions initialised to exactly zero, so a fresh
branch leaves the base model untouched.
"""

from __future__ import annotations

import copy

import torch
from torch import nn

from .diffusion import DenoisingUNet, seeded_conv
from .errors import ShapeMismatchError

#: control-image edge length is this multiple of the latent edge length
CONTROL_FACTOR = 4


class ZeroConv(nn.Module):
    """1x1 convolution whose weight and bias start at exactly zero."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        return self.conv(x)


class FFRNet(nn.Module):
    """Control branch producing injection residuals for the base denoiser."""

    def __init__(self, trunk, hint_head, zero_convs, control_channels: int):
        super().__init__()
        self.trunk = trunk
        self.hint_head = hint_head
        self.zero_convs = zero_convs
        self.control_channels = control_channels

    @classmethod
    def from_base(cls, base: DenoisingUNet, control_channels: int = 3, seed: int = 0) -> "FFRNet":
        """Clone the base trunk by value and attach a seeded hint head plus zero connectors."""
        trunk = copy.deepcopy(base.trunk)
        for p in trunk.parameters():
            p.requires_grad_(True)
        g = torch.Generator().manual_seed(seed)
        ch0 = trunk.channels[0]
        hint_head = nn.Sequential(
            seeded_conv(control_channels, ch0 // 2, 3, g, stride=2, padding=1),
            nn.SiLU(),
            seeded_conv(ch0 // 2, ch0, 3, g, stride=2, padding=1),
            nn.SiLU(),
            seeded_conv(ch0, ch0, 3, g, padding=1),
        )
        zero_convs = nn.ModuleList(
            [ZeroConv(ch) for ch in trunk.channels] + [ZeroConv(trunk.channels[-1])]
        )
        return cls(trunk, hint_head, zero_convs, control_channels)

    def forward(self, control, z_t, t, fused) -> list[torch.Tensor]:
        """Residuals for each base injection point, given the control image and fused features.

        ``control``: [N, control_channels, CONTROL_FACTOR*H, CONTROL_FACTOR*W] for a
        [N, C, H, W] latent ``z_t``; ``fused``: [N, tokens, ctx_dim].
        """
        if control.dim() != 4 or control.shape[1] != self.control_channels:
            raise ShapeMismatchError(
                "control image", f"[N, {self.control_channels}, H, W]", list(control.shape))
        n, _, h, w = z_t.shape
        expected_hw = (CONTROL_FACTOR * h, CONTROL_FACTOR * w)
        if tuple(control.shape[2:]) != expected_hw:
            raise ShapeMismatchError("control image size", expected_hw, tuple(control.shape[2:]))
        if control.shape[0] != n:
            raise ShapeMismatchError("control batch size", n, control.shape[0])
        t = DenoisingUNet._as_batch_t(t, n)
        hint = self.hint_head(control)
        skips, mid, _ = self.trunk(z_t, t, fused, hint=hint)
        feats = skips + [mid]
        return [zc(f) for zc, f in zip(self.zero_convs, feats)]
