"""Synthetic source data and corrupted target-domain streams.

Inputs are low-dimensional vectors drawn from Gaussian class blobs.  Target
domains apply vector-space analogs of image corruptions at severities 1..5;
every stage of a stream reuses the same clean test pool, the way each
corruption of a ``-C`` benchmark is applied to the same clean test set.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

PROTOCOLS = ("standard", "gradual", "loop", "random")
SEVERITIES = (1, 2, 3, 4, 5)
GRADUAL_PATTERN = (1, 2, 3, 4, 5, 4, 3, 2, 1)


@dataclass(frozen=True)
class SourceSpec:
    num_classes: int = 10
    input_dim: int = 16
    samples_per_class: int = 200
    spread: float = 1.0
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.noise <= 0:
            raise ValueError("noise must be positive")
        if self.input_dim < 2 or self.samples_per_class < 1:
            raise ValueError("input_dim must be >= 2 and samples_per_class >= 1")


def class_centers(spec: SourceSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    return rng.normal(0.0, spec.spread, size=(spec.num_classes, spec.input_dim))


def sample_blobs(spec: SourceSpec, per_class: int, seed) -> tuple[np.ndarray, np.ndarray]:
    centers = class_centers(spec)
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(spec.num_classes), per_class)
    x = centers[y] + rng.normal(0.0, spec.noise, size=(len(y), spec.input_dim))
    order = rng.permutation(len(y))
    return x[order], y[order]


def make_source(spec: SourceSpec) -> tuple[np.ndarray, np.ndarray]:
    """Labeled, class-balanced source dataset; deterministic in ``spec``."""
    return sample_blobs(spec, spec.samples_per_class, [spec.seed, 1])


# Corruptions.  Each takes (x, level, rng); ``level`` is the physical parameter.

def gaussian_noise(x, sigma, rng):
    return x + rng.normal(0.0, sigma, size=x.shape)


def uniform_noise(x, half_width, rng):
    return x + rng.uniform(-half_width, half_width, size=x.shape)


def feature_blur(x, sigma, rng=None):
    """Circular Gaussian smoothing along the coordinate axis."""
    d = x.shape[1]
    offsets = np.arange(d)
    offsets = np.minimum(offsets, d - offsets)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    return np.real(np.fft.ifft(np.fft.fft(x, axis=1) * np.fft.fft(kernel), axis=1))


def contrast_scale(x, factor, rng=None):
    """Shrink each sample toward its own coordinate mean."""
    m = x.mean(axis=1, keepdims=True)
    return m + factor * (x - m)


def _rotation_pairs(d: int, seed) -> np.ndarray:
    order = np.random.default_rng(seed).permutation(d)
    return order[: 2 * (d // 2)].reshape(-1, 2)


def rotate(x, angle, seed):
    """Rotate every seeded coordinate pair by ``angle`` radians."""
    x = np.asarray(x, dtype=np.float64)
    pairs = _rotation_pairs(x.shape[1], seed)
    i, j = pairs[:, 0], pairs[:, 1]
    c, s = np.cos(angle), np.sin(angle)
    out = x.copy()
    out[:, i] = c * x[:, i] - s * x[:, j]
    out[:, j] = s * x[:, i] + c * x[:, j]
    return out


def feature_dropout(x, rate, rng):
    return np.where(rng.random(x.shape) < rate, 0.0, x)


def offset_shift(x, magnitude, direction):
    return x + magnitude * direction


def quantize(x, step, rng=None):
    return step * np.round(x / step)


# Severity -> parameter; strictly increasing distortion in every column.
CORRUPTION_LEVELS = {
    "gaussian_noise": (0.4, 0.7, 1.0, 1.3, 1.6),
    "uniform_noise": (0.7, 1.2, 1.7, 2.2, 2.7),
    "feature_blur": (0.6, 0.9, 1.2, 1.6, 2.0),
    "contrast_scale": (0.8, 0.65, 0.5, 0.4, 0.3),
    "rotation": tuple(np.deg2rad(a) for a in (10.0, 20.0, 30.0, 40.0, 50.0)),
    "feature_dropout": (0.1, 0.2, 0.3, 0.4, 0.5),
    "offset_shift": (0.5, 1.0, 1.5, 2.0, 2.5),
    "quantize": (0.5, 1.0, 1.5, 2.0, 2.5),
}
_NOISY = {"gaussian_noise": gaussian_noise, "uniform_noise": uniform_noise,
          "feature_blur": feature_blur, "contrast_scale": contrast_scale,
          "feature_dropout": feature_dropout, "quantize": quantize}
DEFAULT_KINDS = ("gaussian_noise", "uniform_noise", "feature_blur", "contrast_scale",
                 "rotation", "feature_dropout", "offset_shift")
ALL_KINDS = tuple(CORRUPTION_LEVELS)


def corruption_level(kind: str, severity: int) -> float:
    if kind not in CORRUPTION_LEVELS:
        raise ValueError(f"unknown corruption type {kind!r}; known: {', '.join(ALL_KINDS)}")
    if severity not in SEVERITIES:
        raise ValueError(f"severity must be in 1..5, got {severity}")
    return float(CORRUPTION_LEVELS[kind][severity - 1])


def corrupt(x: np.ndarray, kind: str, severity: int, seed: int) -> np.ndarray:
    """Apply one corruption.

    The structural part (rotation planes, offset direction) depends only on
    ``seed``, so one seed gives the same corruption family across severities;
    the random draws depend on ``(seed, severity)``.
    """
    level = corruption_level(kind, severity)
    x = np.asarray(x, dtype=np.float64)
    if kind == "rotation":
        return rotate(x, level, [seed, 0])
    if kind == "offset_shift":
        u = np.random.default_rng([seed, 0]).standard_normal(x.shape[1])
        return offset_shift(x, level, u / np.linalg.norm(u))
    rng = np.random.default_rng([seed, severity, 1])
    return _NOISY[kind](x, level, rng)


@dataclass(frozen=True)
class DomainStage:
    corruption: str
    severity: int
    batches: int = 50
    batch_size: int = 64

    def __post_init__(self):
        corruption_level(self.corruption, self.severity)


@dataclass(frozen=True)
class StreamConfig:
    kinds: tuple[str, ...] = DEFAULT_KINDS
    batches: int = 50
    batch_size: int = 64
    severity: int = 5
    cycles: int = 10

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        for k in self.kinds:
            corruption_level(k, self.severity)


@dataclass
class DomainStream:
    stages: list[DomainStage]
    protocol: str
    seed: int
    config: StreamConfig = field(default_factory=StreamConfig)

    def __len__(self):
        return len(self.stages)

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "seed": self.seed,
                "stages": [asdict(s) for s in self.stages]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _random_order(kinds, seed) -> tuple[str, ...]:
    perm = np.random.default_rng([seed, 7]).permutation(len(kinds))
    return tuple(kinds[i] for i in perm)


def build_stream(protocol: str, seed: int, config: StreamConfig | None = None) -> DomainStream:
    """Stage list for one evaluation protocol.

    standard: each type once at full severity.  gradual: each type walks
    severities 1..5..1.  loop: the standard sequence repeated ``cycles`` times.
    random: the standard sequence in a seeded random order.
    """
    cfg = config or StreamConfig()
    b, bs = cfg.batches, cfg.batch_size
    if protocol == "standard":
        stages = [DomainStage(k, cfg.severity, b, bs) for k in cfg.kinds]
    elif protocol == "gradual":
        stages = [DomainStage(k, s, b, bs) for k in cfg.kinds for s in GRADUAL_PATTERN]
    elif protocol == "loop":
        stages = [DomainStage(k, cfg.severity, b, bs) for _ in range(cfg.cycles) for k in cfg.kinds]
    elif protocol == "random":
        stages = [DomainStage(k, cfg.severity, b, bs) for k in _random_order(cfg.kinds, seed)]
    else:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    return DomainStream(stages, protocol, seed, cfg)


def random_orders(seed: int, config: StreamConfig | None = None, count: int = 10) -> list[DomainStream]:
    """``count`` random-order streams with pairwise distinct type orders."""
    cfg = config or StreamConfig()
    if count > np.prod(range(1, len(cfg.kinds) + 1)):
        raise ValueError("more orders requested than permutations exist")
    streams, seen = [], set()
    for k in itertools.count():
        s = build_stream("random", seed * 1000 + k, cfg)
        key = tuple(st.corruption for st in s.stages)
        if key not in seen:
            seen.add(key)
            streams.append(s)
        if len(streams) == count:
            return streams


@dataclass
class Batch:
    """Inputs plus evaluation-only labels; only ``inputs`` reaches adaptation."""
    inputs: np.ndarray
    labels: np.ndarray
    stage_index: int
    batch_index: int


def clean_pool(spec: SourceSpec, stream: DomainStream) -> tuple[np.ndarray, np.ndarray]:
    """Clean test samples shared by every stage of the stream."""
    n = max(s.batches * s.batch_size for s in stream.stages) if stream.stages else 0
    per_class = -(-n // spec.num_classes)
    x, y = sample_blobs(spec, per_class, [spec.seed, 2, stream.seed])
    return x[:n], y[:n]


def stage_data(spec: SourceSpec, stream: DomainStream, stage_index: int,
               pool=None) -> tuple[np.ndarray, np.ndarray]:
    stage = stream.stages[stage_index]
    x, y = pool if pool is not None else clean_pool(spec, stream)
    n = stage.batches * stage.batch_size
    kind_seed = stream.seed * 100 + ALL_KINDS.index(stage.corruption)
    order = np.random.default_rng([kind_seed, 3]).permutation(len(x))[:n]
    return corrupt(x[order], stage.corruption, stage.severity, kind_seed), y[order]


def iter_batches(spec: SourceSpec, stream: DomainStream) -> Iterator[Batch]:
    pool = clean_pool(spec, stream)
    cache: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]] = {}
    for si, stage in enumerate(stream.stages):
        key = (stage.corruption, stage.severity)
        if key not in cache:
            cache[key] = stage_data(spec, stream, si, pool)
        x, y = cache[key]
        for bi in range(stage.batches):
            sl = slice(bi * stage.batch_size, (bi + 1) * stage.batch_size)
            yield Batch(x[sl], y[sl], si, bi)
