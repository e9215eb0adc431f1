"""Encoder and promptable-decoder backbones behind pluggable interfaces.

Two encoder roles exist: a semantic branch (category-discriminative
features) and a geometric branch (boundary-oriented features). Both are
served here by :class:`ToyEncoder`, a frozen seeded patch embedder with
residual mixing blocks and adapter insertion points between blocks.

Decoders turn (geometric feature grid, point prompts) into one mask and
one quality score per prompt. :class:`OracleDecoder` answers from a
ground-truth label map (optionally noise-corrupted) and exists for
verification; :class:`ToyPromptDecoder` is a small trainable head.

Real pretrained backbones can be registered under their reserved names;
when the two branches use different patch strides, plug-ins are expected
to resample their feature grid bilinearly to a common stride before
handing it to the pipeline.
"""

from __future__ import annotations

from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .adapter import FeatureAdapter
from .core import (
    ConfigurationError,
    DenseFeature,
    FeatureSource,
    ImageTensor,
    PointPrompt,
    RngHandle,
    UsageError,
)

# 8-connectivity for ground-truth connected components
_CONNECTIVITY = np.ones((3, 3), dtype=bool)

NOISE_BAND_PX = 5  # corruption is confined to this dilation band


@runtime_checkable
class Encoder(Protocol):
    stride: int
    channels: int
    source: FeatureSource

    @property
    def insertion_points(self) -> int: ...

    def encode(
        self, image: ImageTensor, adapters: Sequence[FeatureAdapter] | None = None
    ) -> DenseFeature: ...


@runtime_checkable
class PromptDecoder(Protocol):
    def decode(
        self, feat: DenseFeature | None, batch: Sequence[PointPrompt]
    ) -> tuple[list[np.ndarray], list[float]]: ...


class _MixingBlock(nn.Module):
    """conv3x3 -> GELU -> conv3x3 with a residual connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


class ToyEncoder(nn.Module):
    """Frozen seeded encoder: patch embedding plus residual mixing blocks.

    Base weights never train; adapters passed to `encode` are the only
    trainable path through this module.
    """

    def __init__(
        self,
        stride: int = 14,
        channels: int = 64,
        num_blocks: int = 2,
        source: FeatureSource = FeatureSource.SEMANTIC,
        seed: int = 0,
    ):
        super().__init__()
        self.stride = stride
        self.channels = channels
        self.source = source
        self.patch_embed = nn.Conv2d(3, channels, kernel_size=stride, stride=stride)
        self.blocks = nn.ModuleList(_MixingBlock(channels) for _ in range(num_blocks))
        gen = torch.Generator()
        gen.manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * (1.0 / np.sqrt(max(1, p.shape[-1]))))
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def insertion_points(self) -> int:
        return len(self.blocks)

    def encode(
        self, image: ImageTensor, adapters: Sequence[FeatureAdapter] | None = None
    ) -> DenseFeature:
        if image.height % self.stride or image.width % self.stride:
            raise ConfigurationError(
                f"image {image.height}x{image.width} not divisible by stride {self.stride}"
            )
        if adapters is not None and len(adapters) != self.insertion_points:
            raise ConfigurationError(
                f"expected {self.insertion_points} adapters, got {len(adapters)}"
            )
        dtype = self.patch_embed.weight.dtype
        x = image.to_tensor().to(dtype).unsqueeze(0)  # (1, 3, H, W)
        z = self.patch_embed(x)
        for i, block in enumerate(self.blocks):
            z = block(z)
            if adapters is not None:
                grid = z.squeeze(0).permute(1, 2, 0)
                grid = adapters[i](grid)
                z = grid.permute(2, 0, 1).unsqueeze(0)
        values = z.squeeze(0).permute(1, 2, 0)
        return DenseFeature(values=values, stride=self.stride, source=self.source)


def _validate_batch(batch: Sequence[PointPrompt]) -> int:
    if len(batch) == 0:
        raise UsageError("decode requires a nonempty prompt batch")
    category = batch[0].category
    if any(p.category != category for p in batch):
        raise UsageError("all prompts in a decode batch must share one category")
    return category


class OracleDecoder:
    """Ground-truth decoder: a prompt yields the connected component it sits on.

    At zero noise the mask is exactly the component of the label region
    containing the prompt (empty off-region) with score 1 (0 when empty).
    With noise, pixels inside a 5-px dilation band of the component flip
    independently with the noise probability and the score becomes the
    true IoU of the corrupted mask against the component.
    """

    def __init__(self, labels: np.ndarray, noise: float = 0.0, rng: RngHandle | None = None):
        if labels.ndim != 2:
            raise UsageError("oracle labels must be a 2-D integer map")
        if not 0.0 <= noise <= 1.0:
            raise UsageError(f"noise must lie in [0, 1], got {noise}")
        self.labels = labels.astype(np.int64)
        self.noise = noise
        self._rng = (rng or RngHandle(seed=0)).numpy_rng()
        self.components = np.zeros_like(self.labels)
        next_id = 0
        for category in np.unique(self.labels):
            if category == 0:
                continue
            comp, count = ndimage.label(self.labels == category, structure=_CONNECTIVITY)
            self.components[comp > 0] = comp[comp > 0] + next_id
            next_id += count

    def decode(
        self, feat: DenseFeature | None, batch: Sequence[PointPrompt]
    ) -> tuple[list[np.ndarray], list[float]]:
        _validate_batch(batch)
        masks, scores = [], []
        for prompt in batch:
            cid = self.components[prompt.y, prompt.x]
            if cid == 0:
                masks.append(np.zeros_like(self.labels, dtype=bool))
                scores.append(0.0)
                continue
            component = self.components == cid
            if self.noise == 0.0:
                masks.append(component)
                scores.append(1.0)
                continue
            band = ndimage.binary_dilation(component, iterations=NOISE_BAND_PX)
            flips = np.zeros_like(component)
            flips[band] = self._rng.random(int(band.sum())) < self.noise
            corrupted = component ^ flips
            union = int((corrupted | component).sum())
            inter = int((corrupted & component).sum())
            masks.append(corrupted)
            scores.append(0.0 if not corrupted.any() else inter / union)
        return masks, scores


class ToyPromptDecoder(nn.Module):
    """Trainable promptable mask head over a geometric feature grid.

    Each prompt is embedded from its grid-cell feature and normalized
    position, then correlated against a learned 2x-upsampled copy of the
    feature grid to produce mask logits; a separate head predicts the
    mask quality from the embedding and the soft-pooled mask feature.
    Prompts in a batch never interact.
    """

    FINE_FACTOR = 2

    def __init__(self, channels: int, stride: int, seed: int = 0):
        super().__init__()
        self.channels = channels
        self.stride = stride
        self.embed = nn.Sequential(
            nn.Linear(channels + 2, 2 * channels),
            nn.GELU(),
            nn.Linear(2 * channels, channels),
        )
        self.upsample = nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1)
        self.query = nn.Linear(channels, channels)
        self.key = nn.Linear(channels, channels)
        self.logit_bias = nn.Parameter(torch.zeros(()))
        self.iou_head = nn.Linear(2 * channels, 1)
        gen = torch.Generator()
        gen.manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                if p.ndim > 0:
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.05)
        self._cache: tuple[torch.Tensor, torch.Tensor] | None = None

    def _fine_features(self, feat: DenseFeature) -> torch.Tensor:
        # memoized per feature tensor: the feedback loop re-decodes against
        # the same grid many times within one image
        values = feat.values
        if self._cache is not None and self._cache[0] is values:
            return self._cache[1]
        z = values.permute(2, 0, 1).unsqueeze(0)
        fine = self.upsample(z).squeeze(0).permute(1, 2, 0)  # (2r, 2c, C)
        self._cache = (values, fine)
        return fine

    def decode_soft(
        self, feat: DenseFeature, batch: Sequence[PointPrompt]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Differentiable decode: fine-grid mask logits (B, 2r, 2c) and scores (B,)."""
        _validate_batch(batch)
        rows, cols = feat.grid_shape
        height, width = rows * feat.stride, cols * feat.stride
        fine = self._fine_features(feat)
        cells = torch.tensor(
            [[min(p.y // feat.stride, rows - 1), min(p.x // feat.stride, cols - 1)] for p in batch]
        )
        cell_feats = feat.values[cells[:, 0], cells[:, 1]]  # (B, C)
        pos = torch.tensor(
            [[p.x / width, p.y / height] for p in batch], dtype=feat.values.dtype
        )
        emb = self.embed(torch.cat([cell_feats, pos], dim=1))  # (B, C)
        keys = self.key(fine)  # (2r, 2c, C)
        logits = (
            torch.einsum("bc,ijc->bij", self.query(emb), keys) / np.sqrt(self.channels)
            + self.logit_bias
        )
        weights = torch.sigmoid(logits)
        pooled = torch.einsum("bij,ijc->bc", weights, fine) / (
            weights.sum(dim=(1, 2), keepdim=False).unsqueeze(1) + 1e-6
        )
        scores = torch.sigmoid(self.iou_head(torch.cat([emb, pooled], dim=1))).squeeze(1)
        return logits, scores

    def decode(
        self, feat: DenseFeature, batch: Sequence[PointPrompt]
    ) -> tuple[list[np.ndarray], list[float]]:
        rows, cols = feat.grid_shape
        height, width = rows * feat.stride, cols * feat.stride
        with torch.no_grad():
            logits, scores = self.decode_soft(feat, batch)
            full = F.interpolate(
                logits.unsqueeze(1), size=(height, width), mode="bilinear", align_corners=False
            ).squeeze(1)
        masks = [m for m in (full > 0).numpy()]
        return masks, [float(s) for s in scores]


# --- plug-in registry -------------------------------------------------------

_RESERVED = {
    "dinov2": "semantic encoder",
    "sam": "geometric encoder",
    "sam-decoder": "prompt decoder",
}

ENCODERS: dict[str, type] = {"toy": ToyEncoder}
DECODERS: dict[str, type] = {"oracle": OracleDecoder, "toy-decoder": ToyPromptDecoder}


def register_encoder(name: str, builder) -> None:
    ENCODERS[name] = builder


def register_decoder(name: str, builder) -> None:
    DECODERS[name] = builder


def _build(registry: dict, kind: str, name: str, **kwargs):
    if name in registry:
        return registry[name](**kwargs)
    if name in _RESERVED:
        raise ConfigurationError(
            f"backbone {name!r} is reserved for a pretrained {_RESERVED[name]} plug-in; "
            "register an implementation before use"
        )
    raise ConfigurationError(f"unknown {kind} backbone {name!r}; known: {sorted(registry)}")


def build_encoder(name: str, **kwargs) -> Encoder:
    return _build(ENCODERS, "encoder", name, **kwargs)


def build_decoder(name: str, **kwargs):
    return _build(DECODERS, "decoder", name, **kwargs)
