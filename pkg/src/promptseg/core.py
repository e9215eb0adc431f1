"""Shared domain types and the deterministic numeric substrate.

All types are immutable after construction and safe to share across
threads. The only stateful object in the package is a random generator
derived from :class:`RngHandle`; callers who share one must serialize
their draws externally.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, fields
from enum import Enum

import numpy as np
import torch

FLOAT_ATOL = 1e-5  # default absolute tolerance for floating-point contracts

BACKGROUND = 0  # background is category index 0 everywhere


class PipelineError(Exception):
    """Base class for package errors; `category` feeds the CLI error line."""

    category = "internal"


class ConfigurationError(PipelineError):
    category = "config"


class UsageError(PipelineError):
    category = "usage"


class NumericError(PipelineError):
    category = "numeric"


class GenerationError(PipelineError):
    category = "generation"


class DatasetError(PipelineError):
    category = "dataset"


class FeatureSource(str, Enum):
    SEMANTIC = "semantic_branch"
    GEOMETRIC = "geometric_branch"


@dataclass(frozen=True)
class RngHandle:
    """Seed/stream pair that reproduces draw sequences across runs and platforms.

    Streams are independent child sequences of the same seed (PCG64 via
    numpy's SeedSequence spawning), so concurrent consumers each take
    their own stream id.
    """

    seed: int
    stream: int = 0

    def numpy_rng(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        return np.random.default_rng(seq)

    def torch_generator(self) -> torch.Generator:
        gen = torch.Generator()
        # fold the stream into the torch seed deterministically
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        gen.manual_seed(int(seq.generate_state(1, np.uint64)[0]))
        return gen

    def child(self, stream: int) -> "RngHandle":
        return RngHandle(seed=self.seed, stream=stream)


def _require_finite(array, name: str) -> None:
    values = array.detach().numpy() if isinstance(array, torch.Tensor) else array
    if not np.isfinite(values).all():
        raise UsageError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class ImageTensor:
    """RGB image with values in [0, 1], sides divisible by the patch stride in use."""

    pixels: np.ndarray  # (H, W, 3) float32

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise UsageError(f"image must have shape (H, W, 3), got {px.shape}")
        _require_finite(px, "image")
        if px.min() < 0.0 or px.max() > 1.0:
            raise UsageError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_tensor(self) -> torch.Tensor:
        """(3, H, W) float tensor view of the pixels."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels)).permute(2, 0, 1)


@dataclass(frozen=True)
class DenseFeature:
    """Spatial grid of feature vectors produced by an encoder branch."""

    values: torch.Tensor  # (H/s, W/s, C)
    stride: int
    source: FeatureSource

    def __post_init__(self):
        if self.values.ndim != 3:
            raise UsageError(f"feature grid must be (rows, cols, C), got {tuple(self.values.shape)}")
        if self.stride <= 0:
            raise UsageError("stride must be positive")
        _require_finite(self.values, "feature grid")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (int(self.values.shape[0]), int(self.values.shape[1]))

    @property
    def channels(self) -> int:
        return int(self.values.shape[2])


@dataclass(frozen=True)
class PatternMap:
    """Per-category probability grid; each cell's K values sum to 1."""

    probs: torch.Tensor  # (K, H/s, W/s)
    categories: tuple[int, ...]

    def __post_init__(self):
        if self.probs.ndim != 3 or self.probs.shape[0] != len(self.categories):
            raise UsageError(
                f"pattern map must be (K, rows, cols) with K == len(categories), "
                f"got {tuple(self.probs.shape)} for {len(self.categories)} categories"
            )
        probs = self.probs.detach()
        if float(probs.min()) < -FLOAT_ATOL or float(probs.max()) > 1.0 + FLOAT_ATOL:
            raise UsageError("pattern map values must lie in [0, 1]")
        sums = probs.sum(dim=0)
        if float((sums - 1.0).abs().max()) > FLOAT_ATOL:
            raise UsageError("pattern map cells must sum to 1 across categories")

    @property
    def num_categories(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class PointPrompt:
    """A category-tagged point in image coordinates, traced back to its grid cell."""

    x: int
    y: int
    category: int
    origin_cell: tuple[int, int]  # (row, col) in the feature grid


@dataclass(frozen=True)
class PromptSet:
    """Ordered pool of point prompts for one category."""

    category: int
    prompts: tuple[PointPrompt, ...]

    def __post_init__(self):
        for p in self.prompts:
            if p.category != self.category:
                raise UsageError(
                    f"prompt category {p.category} does not match set category {self.category}"
                )

    def __len__(self) -> int:
        return len(self.prompts)


@dataclass(frozen=True)
class ScoredMask:
    """Binary mask at image resolution with geometric, semantic, and fused scores."""

    mask: np.ndarray  # (H, W) bool
    s_iou: float
    s_sem: float
    fused: float
    category: int

    def __post_init__(self):
        if self.mask.dtype != np.bool_:
            raise UsageError("mask must be a boolean array")
        if not self.mask.any():
            raise UsageError("all-empty masks are rejected before construction")
        for name in ("s_iou", "s_sem", "fused"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise UsageError(f"{name}={v} outside [0, 1]")
        if self.fused != self.s_iou * self.s_sem:
            raise UsageError("fused score must equal s_iou * s_sem exactly")


@dataclass(frozen=True)
class SegmentationResult:
    """Stacked per-category response maps plus the per-pixel label map."""

    response: np.ndarray  # (K, H, W) float32
    labels: np.ndarray  # (H, W) int64

    def __post_init__(self):
        if self.response.ndim != 3:
            raise UsageError("response must be (K, H, W)")
        if self.labels.shape != self.response.shape[1:]:
            raise UsageError("labels shape must match response spatial shape")

    @property
    def num_categories(self) -> int:
        return int(self.response.shape[0])


def argmax_labels(result, bg_threshold: float) -> np.ndarray:
    """Collapse response maps to a label map.

    A pixel takes the argmax category when the winning response exceeds
    ``bg_threshold``, otherwise the background label; ties break toward
    the lowest category index.
    """
    response = result.response if isinstance(result, SegmentationResult) else result
    if response.ndim != 3:
        raise UsageError("response must be (K, H, W)")
    labels = np.argmax(response, axis=0).astype(np.int64)
    peak = np.max(response, axis=0)
    labels[peak <= bg_threshold] = BACKGROUND
    return labels


# --- serialization ---------------------------------------------------------
#
# Each domain type round-trips bit-exactly through an in-memory npz payload:
# arrays as raw .npy entries, scalars/metadata in an embedded JSON manifest.

_TENSOR_FIELDS = {"values", "probs"}


def _encode_value(name, value, arrays):
    if isinstance(value, torch.Tensor):
        arrays[name] = value.detach().cpu().numpy()
        return {"__array__": name, "torch": True}
    if isinstance(value, np.ndarray):
        arrays[name] = value
        return {"__array__": name, "torch": False}
    if isinstance(value, FeatureSource):
        return {"__enum__": value.value}
    if isinstance(value, tuple):
        return {
            "__tuple__": [
                _encode_value(f"{name}.{i}", item, arrays) for i, item in enumerate(value)
            ]
        }
    if dataclasses_is_domain(value):
        return {"__domain__": _to_payload_dict(value, arrays, prefix=name + ".")}
    return value


def _decode_value(spec, arrays):
    if isinstance(spec, dict):
        if "__array__" in spec:
            arr = arrays[spec["__array__"]]
            return torch.from_numpy(arr.copy()) if spec["torch"] else arr
        if "__enum__" in spec:
            return FeatureSource(spec["__enum__"])
        if "__tuple__" in spec:
            return tuple(_decode_value(item, arrays) for item in spec["__tuple__"])
        if "__domain__" in spec:
            return _from_payload_dict(spec["__domain__"], arrays)
    return spec


_DOMAIN_TYPES = {}


def dataclasses_is_domain(value) -> bool:
    return type(value).__name__ in _DOMAIN_TYPES


def _to_payload_dict(obj, arrays, prefix=""):
    payload = {"type": type(obj).__name__, "fields": {}}
    for f in fields(obj):
        payload["fields"][f.name] = _encode_value(prefix + f.name, getattr(obj, f.name), arrays)
    return payload


def _from_payload_dict(payload, arrays):
    cls = _DOMAIN_TYPES[payload["type"]]
    kwargs = {name: _decode_value(spec, arrays) for name, spec in payload["fields"].items()}
    return cls(**kwargs)


def serialize(obj) -> bytes:
    """Serialize a domain object to bytes; `deserialize` restores it bit-exactly."""
    if not dataclasses_is_domain(obj):
        raise UsageError(f"cannot serialize {type(obj).__name__}")
    arrays: dict[str, np.ndarray] = {}
    payload = _to_payload_dict(obj, arrays)
    meta = json.dumps(payload, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(meta, dtype=np.uint8), **arrays)
    return buf.getvalue()


def deserialize(data: bytes):
    with np.load(io.BytesIO(data)) as archive:
        meta = json.loads(archive["__meta__"].tobytes().decode("utf-8"))
        arrays = {k: archive[k] for k in archive.files if k != "__meta__"}
    return _from_payload_dict(meta, arrays)


for _cls in (
    RngHandle,
    ImageTensor,
    DenseFeature,
    PatternMap,
    PointPrompt,
    PromptSet,
    ScoredMask,
    SegmentationResult,
):
    _DOMAIN_TYPES[_cls.__name__] = _cls
