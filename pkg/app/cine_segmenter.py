"""U-shaped pure-attention segmenter for cine cardiac volumes.

Each frame of a volume is a 2-D token grid. The encoder runs efficient dual
attention blocks with 2x2 patch merging between stages; the decoder expands
tokens back, fuses each encoder skip through skip cross attention and ends in
a per-pixel class head. Frames share weights and are pooled only at the
bottleneck, where the 256-d cine feature used by fusion is taken.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, model_validator
from scipy.spatial import KDTree

from app.attention import AttentionConfig, EfficientDualBlock, SkipCrossAttention
from app.errors import ShapeError
from app.layers import LayerNorm, Linear, Module
from app.tensor import RngStream, Tensor, as_tensor, no_grad, softmax, stack

logger = logging.getLogger(__name__)

BACKGROUND, MYOCARDIUM, FIBROSIS = 0, 1, 2
CLASS_NAMES = ("background", "myocardium", "fibrosis")

CINE_MAGIC = b"CFV1"
MASK_MAGIC = b"CFM1"


class CineVolume:
    """Voxels shaped (height, width, frames), every value in [0, 1]."""

    def __init__(self, voxels):
        voxels = np.asarray(voxels, dtype=np.float64)
        if voxels.ndim != 3 or min(voxels.shape) == 0:
            raise ShapeError(f"cine volume needs three positive dimensions, got {voxels.shape}")
        if not np.isfinite(voxels).all() or voxels.min() < 0.0 or voxels.max() > 1.0:
            raise ValueError("cine voxels must be finite and lie in [0, 1]")
        self.voxels = voxels

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.voxels.shape

    def frames(self) -> np.ndarray:
        """Frames first: (depth, height, width)."""
        return np.moveaxis(self.voxels, -1, 0)

    def __eq__(self, other) -> bool:
        return isinstance(other, CineVolume) and np.array_equal(self.voxels, other.voxels)

    def __repr__(self) -> str:
        return f"CineVolume(shape={self.shape})"


class SegMask:
    """Per-voxel class labels: 0 background, 1 myocardium, 2 fibrosis."""

    def __init__(self, labels):
        labels = np.asarray(labels)
        if labels.ndim != 3:
            raise ShapeError(f"segmentation mask needs three dimensions, got {labels.shape}")
        if labels.size and not np.isin(labels, (BACKGROUND, MYOCARDIUM, FIBROSIS)).all():
            raise ValueError("segmentation mask classes must be 0, 1 or 2")
        self.labels = labels.astype(np.uint8)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.labels.shape

    def region(self, cls: int) -> np.ndarray:
        return self.labels == cls

    def __eq__(self, other) -> bool:
        return isinstance(other, SegMask) and np.array_equal(self.labels, other.labels)

    def __repr__(self) -> str:
        return f"SegMask(shape={self.shape})"


@dataclass
class SegmentationResult:
    mask: SegMask
    probabilities: np.ndarray


class SegmenterConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    height: PositiveInt = 64
    width: PositiveInt = 64
    depth: PositiveInt = 8
    patch_size: PositiveInt = 4
    dims: Tuple[PositiveInt, ...] = (32, 64, 128)
    num_classes: PositiveInt = 3
    feature_dim: PositiveInt = 256
    heads: PositiveInt = 1

    @model_validator(mode="after")
    def _check_divisible(self) -> "SegmenterConfig":
        if not self.dims:
            raise ValueError("at least one encoder stage is required")
        factor = self.patch_size * 2 ** (self.stages - 1)
        if self.height % factor or self.width % factor:
            raise ValueError(
                f"image {self.height}x{self.width} is not divisible by patch {self.patch_size} "
                f"and {self.stages - 1} merges (factor {factor})"
            )
        return self

    @property
    def stages(self) -> int:
        return len(self.dims)

    @property
    def volume_shape(self) -> Tuple[int, int, int]:
        return (self.height, self.width, self.depth)


def preprocess_cine(raw, target: Sequence[int] = (64, 64, 8)) -> CineVolume:
    """Min-max normalise a raw volume, then nearest-neighbour resample it to ``target``."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.size == 0:
        raise ValueError(f"empty cine volume (shape {raw.shape})")
    if len(target) != 3 or min(target) <= 0:
        raise ValueError(f"target dimensions must be three positive sizes, got {tuple(target)}")
    if not np.isfinite(raw).all():
        raise ValueError("cine volume contains non-finite voxels")
    low, high = raw.min(), raw.max()
    normalized = np.zeros_like(raw) if high == low else (raw - low) / (high - low)
    index = [np.minimum((np.arange(t) * n) // t, n - 1) for n, t in zip(raw.shape, target)]
    return CineVolume(normalized[np.ix_(*index)])


class PatchMerging(Module):
    """2x2 neighbouring tokens concatenated and reduced to the next stage width."""

    def __init__(self, dim: int, next_dim: int, rng: RngStream):
        super().__init__()
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(4 * dim, next_dim, rng)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        frames, _, c = x.shape
        x = x.reshape(frames, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        return self.reduce(self.norm(x.reshape(frames, (h // 2) * (w // 2), 4 * c)))


class PatchExpanding(Module):
    """Each token expands into a 2x2 block of tokens at the previous stage width."""

    def __init__(self, dim: int, prev_dim: int, rng: RngStream):
        super().__init__()
        self.prev_dim = prev_dim
        self.expand = Linear(dim, 4 * prev_dim, rng)
        self.norm = LayerNorm(prev_dim)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        frames = x.shape[0]
        c = self.prev_dim
        x = self.expand(x).reshape(frames, h, w, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        return self.norm(x.reshape(frames, 4 * h * w, c))


class CineSegmenter(Module):
    def __init__(self, config: SegmenterConfig, rng: RngStream):
        super().__init__()
        self.config = config
        p, dims = config.patch_size, config.dims
        self.embed = Linear(p * p, dims[0], rng)
        self.embed_norm = LayerNorm(dims[0])
        self.encoder = [EfficientDualBlock(AttentionConfig(d_model=d, heads=config.heads), rng) for d in dims]
        self.merges = [PatchMerging(dims[i], dims[i + 1], rng) for i in range(config.stages - 1)]
        self.expands = [PatchExpanding(dims[i + 1], dims[i], rng) for i in range(config.stages - 1)]
        self.cross = [
            SkipCrossAttention(dims[i], dims[i], rng, AttentionConfig(d_model=dims[i], heads=config.heads))
            for i in range(config.stages - 1)
        ]
        self.decoder = [
            EfficientDualBlock(AttentionConfig(d_model=dims[i], heads=config.heads), rng)
            for i in range(config.stages - 1)
        ]
        self.head = Linear(dims[0], p * p * config.num_classes, rng)
        self.feature = Linear(dims[-1], config.feature_dim, rng)
        logger.info(f"Cine segmenter ready: {config.stages} stages, dims {dims}, {self.parameter_count()} parameters")

    def _check_frames(self, frames: Tensor) -> None:
        if frames.ndim != 3 or frames.shape[1:] != (self.config.height, self.config.width):
            raise ShapeError(
                f"segmenter expects frames of {self.config.height}x{self.config.width}, got {frames.shape}"
            )

    def _check_volume(self, volume: CineVolume) -> None:
        if volume.shape != self.config.volume_shape:
            raise ShapeError(f"segmenter configured for {self.config.volume_shape}, got volume {volume.shape}")

    def forward_frames(self, frames) -> Tuple[Tensor, Tensor]:
        """Frames (F, H, W) -> class logits (F, H, W, K) and bottleneck tokens (F, n, C)."""
        frames = as_tensor(frames)
        self._check_frames(frames)
        count, height, width = frames.shape
        p = self.config.patch_size
        h, w = height // p, width // p
        patches = frames.reshape(count, h, p, w, p).transpose(0, 1, 3, 2, 4).reshape(count, h * w, p * p)
        x = self.embed_norm(self.embed(patches))

        skips = []
        for stage, block in enumerate(self.encoder):
            x = block(x)
            if stage < self.config.stages - 1:
                skips.append((x, h, w))
                x = self.merges[stage](x, h, w)
                h, w = h // 2, w // 2
        bottleneck = x

        for stage in reversed(range(self.config.stages - 1)):
            skip, skip_h, skip_w = skips[stage]
            x = self.expands[stage](x, h, w)
            h, w = skip_h, skip_w
            x = self.cross[stage](x, skip)
            x = self.decoder[stage](x)

        k = self.config.num_classes
        logits = self.head(x).reshape(count, h, w, p, p, k).transpose(0, 1, 3, 2, 4, 5)
        return logits.reshape(count, height, width, k), bottleneck

    def encode_frames(self, frames, volumes: int) -> Tensor:
        """Pool bottleneck tokens over every frame and token of each volume, then project.

        ``frames`` stacks the frames of ``volumes`` volumes back to back.
        """
        _, bottleneck = self.forward_frames(frames)
        count, tokens, channels = bottleneck.shape
        pooled = bottleneck.reshape(volumes, (count // volumes) * tokens, channels).mean(axis=1)
        return self.feature(pooled)

    def extract_cine_features(self, volumes: Sequence[CineVolume]) -> Tensor:
        for volume in volumes:
            self._check_volume(volume)
        frames = np.concatenate([volume.frames() for volume in volumes], axis=0)
        return self.encode_frames(Tensor(frames), len(volumes))

    def extract_cine_feature(self, volume: CineVolume) -> Tensor:
        return self.extract_cine_features([volume]).reshape(self.config.feature_dim)

    def segment(self, volume: CineVolume) -> SegmentationResult:
        self._check_volume(volume)
        with no_grad():
            logits, _ = self.forward_frames(Tensor(volume.frames()))
            probabilities = softmax(logits, axis=-1).data
        probabilities = np.moveaxis(probabilities, 0, 2)
        return SegmentationResult(SegMask(probabilities.argmax(axis=-1)), probabilities)


def segment(segmenter: CineSegmenter, volume: CineVolume) -> SegmentationResult:
    return segmenter.segment(volume)


def extract_cine_feature(segmenter: CineSegmenter, volume: CineVolume) -> Tensor:
    return segmenter.extract_cine_feature(volume)


def stack_cine_features(segmenter: CineSegmenter, volumes: Sequence[Optional[CineVolume]]) -> Tensor:
    """Features for a batch where some patients have no cine; those rows are zero."""
    present = [v for v in volumes if v is not None]
    zero = Tensor(np.zeros(segmenter.config.feature_dim))
    if not present:
        return stack([zero] * len(volumes))
    features = segmenter.extract_cine_features(present)
    rows, j = [], 0
    for volume in volumes:
        if volume is None:
            rows.append(zero)
        else:
            rows.append(features[j])
            j += 1
    return stack(rows)


# metrics


def _regions(a: SegMask, b: SegMask, cls: int) -> Tuple[np.ndarray, np.ndarray]:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a.region(cls), b.region(cls)


def dice(a: SegMask, b: SegMask, cls: int = FIBROSIS) -> float:
    first, second = _regions(a, b, cls)
    total = int(first.sum()) + int(second.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(first, second).sum()) / total


def iou(a: SegMask, b: SegMask, cls: int = FIBROSIS) -> float:
    first, second = _regions(a, b, cls)
    union = int(np.logical_or(first, second).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(first, second).sum()) / union


def pixel_accuracy(a: SegMask, b: SegMask) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(a.labels == b.labels))


def _directed_distances(a: SegMask, b: SegMask, cls: int) -> Tuple[np.ndarray, np.ndarray]:
    first, second = _regions(a, b, cls)
    points_a = np.argwhere(first).astype(np.float64)
    points_b = np.argwhere(second).astype(np.float64)
    if len(points_a) == 0 or len(points_b) == 0:
        raise ValueError(f"class {cls} is empty in {'first' if len(points_a) == 0 else 'second'} mask")
    a_to_b, _ = KDTree(points_b).query(points_a)
    b_to_a, _ = KDTree(points_a).query(points_b)
    return a_to_b, b_to_a


def hausdorff(a: SegMask, b: SegMask, cls: int = FIBROSIS) -> float:
    """Symmetric Hausdorff distance between the class regions, in voxels."""
    a_to_b, b_to_a = _directed_distances(a, b, cls)
    return float(max(a_to_b.max(), b_to_a.max()))


def hausdorff95(a: SegMask, b: SegMask, cls: int = FIBROSIS) -> float:
    a_to_b, b_to_a = _directed_distances(a, b, cls)
    return float(np.percentile(np.concatenate([a_to_b, b_to_a]), 95))


# binary formats


def _write(path: Union[str, Path], magic: bytes, shape: Tuple[int, ...], body: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(magic + np.asarray(shape, dtype="<u4").tobytes() + body)


def _read(path: Union[str, Path], magic: bytes, itemsize: int) -> Tuple[Tuple[int, int, int], bytes]:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise ValueError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    shape = tuple(int(n) for n in np.frombuffer(raw[4:16], dtype="<u4"))
    body = raw[16:]
    expected = int(np.prod(shape)) * itemsize
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} data bytes for shape {shape}, found {len(body)}")
    return shape, body


def write_cine(path: Union[str, Path], volume: CineVolume) -> None:
    _write(path, CINE_MAGIC, volume.shape, volume.voxels.astype("<f4").tobytes(order="C"))


def read_cine(path: Union[str, Path]) -> CineVolume:
    shape, body = _read(path, CINE_MAGIC, 4)
    return CineVolume(np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(shape))


def write_mask(path: Union[str, Path], mask: SegMask) -> None:
    _write(path, MASK_MAGIC, mask.shape, mask.labels.astype(np.uint8).tobytes(order="C"))


def read_mask(path: Union[str, Path]) -> SegMask:
    shape, body = _read(path, MASK_MAGIC, 1)
    return SegMask(np.frombuffer(body, dtype=np.uint8).reshape(shape))


def mask_metrics(predicted: SegMask, truth: SegMask, cls: int = FIBROSIS) -> dict:
    """DSC, IoU, pixel accuracy and (when both regions are non-empty) HD and HD95."""
    metrics = {
        "dsc": dice(predicted, truth, cls),
        "iou": iou(predicted, truth, cls),
        "pixel_accuracy": pixel_accuracy(predicted, truth),
        "hd": None,
        "hd95": None,
    }
    if predicted.region(cls).any() and truth.region(cls).any():
        metrics["hd"] = hausdorff(predicted, truth, cls)
        metrics["hd95"] = hausdorff95(predicted, truth, cls)
    return metrics
