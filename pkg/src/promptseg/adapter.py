"""Residual bottleneck adapter with distributional calibration.

The adapter recalibrates a frozen encoder's feature grid (per-cell layer
norm blended with the raw feature), compresses it through a bottleneck,
filters it with parallel depth-wise convolutions of kernel sizes 1/3/5,
fuses with a point-wise convolution, and adds the up-projected result
back onto the original input. With `zero_up` initialization the module
is exactly the identity until trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core import ConfigurationError, DenseFeature, NumericError

KERNEL_SIZES = (1, 3, 5)


@dataclass(frozen=True)
class AdapterConfig:
    bottleneck_ratio: float = 0.25
    init_scheme: str = "zero_up"  # or "small_gaussian"

    def __post_init__(self):
        if not 0.0 < self.bottleneck_ratio <= 0.5:
            raise ConfigurationError(
                f"bottleneck_ratio must be in (0, 0.5], got {self.bottleneck_ratio}"
            )
        if self.init_scheme not in ("zero_up", "small_gaussian"):
            raise ConfigurationError(f"unknown init_scheme {self.init_scheme!r}")


def _seeded_normal_(tensor: torch.Tensor, std: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        tensor.copy_(torch.randn(tensor.shape, generator=gen) * std)


class FeatureAdapter(nn.Module):
    """Insertable between encoder blocks; preserves the grid and channel shape."""

    def __init__(self, channels: int, config: AdapterConfig = AdapterConfig(), seed: int = 0):
        super().__init__()
        self.channels = channels
        self.config = config
        bottleneck = max(1, round(channels * config.bottleneck_ratio))
        if bottleneck >= channels:
            raise ConfigurationError(
                f"bottleneck width {bottleneck} must compress below {channels} channels"
            )
        self.bottleneck = bottleneck

        self.alpha_cal = nn.Parameter(torch.zeros(()))
        self.beta_cal = nn.Parameter(torch.ones(()))
        self.ln = nn.LayerNorm(channels)
        self.down = nn.Linear(channels, bottleneck)
        self.dw = nn.ModuleList(
            [
                nn.Conv2d(bottleneck, bottleneck, k, padding=k // 2, groups=bottleneck)
                for k in KERNEL_SIZES
            ]
        )
        self.pw = nn.Conv2d(bottleneck, bottleneck, 1)
        self.up = nn.Linear(bottleneck, channels)
        self._init_params(seed)

    def _init_params(self, seed: int) -> None:
        gen = torch.Generator()
        gen.manual_seed(seed)
        with torch.no_grad():
            for module in (self.down, self.pw, *self.dw):
                _seeded_normal_(module.weight, 0.02, gen)
                module.bias.zero_()
            if self.config.init_scheme == "zero_up":
                self.up.weight.zero_()
                self.up.bias.zero_()
            else:
                _seeded_normal_(self.up.weight, 0.02, gen)
                self.up.bias.zero_()
                _seeded_normal_(self.alpha_cal, 0.02, gen)

    def calibrate(self, grid: torch.Tensor) -> torch.Tensor:
        """Blend per-cell layer norm over channels with the raw feature."""
        if grid.shape[-1] != self.channels:
            raise ConfigurationError(
                f"adapter built for {self.channels} channels, got {grid.shape[-1]}"
            )
        return self.alpha_cal * self.ln(grid) + self.beta_cal * grid

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """(rows, cols, C) in, (rows, cols, C) out; residual on the raw input."""
        calibrated = self.calibrate(grid)
        z = self.down(calibrated)  # (rows, cols, Cb)
        zc = z.permute(2, 0, 1).unsqueeze(0)  # (1, Cb, rows, cols)
        filtered = sum(conv(zc) for conv in self.dw) / len(self.dw)
        mixed = z + filtered.squeeze(0).permute(1, 2, 0)
        mc = mixed.permute(2, 0, 1).unsqueeze(0)
        fused = mixed + self.pw(mc).squeeze(0).permute(1, 2, 0)
        if not torch.isfinite(fused).all():
            raise NumericError("adapter bottleneck produced non-finite values")
        out = grid + self.up(F.gelu(fused))
        if not torch.isfinite(out).all():
            raise NumericError("adapter up-projection produced non-finite values")
        return out

    def apply_to(self, feat: DenseFeature) -> DenseFeature:
        return DenseFeature(values=self.forward(feat.values), stride=feat.stride, source=feat.source)
