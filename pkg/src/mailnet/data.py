"""Multimodal image containers, the synthetic task, augmentation and modality synthesis.

Container layout ("MIC1", little-endian)::

    offset  size  field
    0       4     magic b"MIC1"
    4       2     version (1)
    6       2     modality count m
    8       2     task count t
    10      2     reserved (0)
    12      4     sample count n
    16      6m    per modality: channels, height, width (u16 each)
    ..      2t    per task: class count (u16)
    ..      ...   pixels: modality-major, n * C * H * W bytes per modality
    ..      2tn   labels: task-major u16
    ..      n     split tags: 0 train, 1 val, 2 test

Pixels are 8-bit; :meth:`DatasetContainer.modality` converts to [0, 1] doubles.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, FormatError

MAGIC = b"MIC1"
VERSION = 1
SPLITS = ("train", "val", "test")
_HEAD = struct.Struct("<4sHHHHI")


@dataclass
class DatasetContainer:
    images: list[np.ndarray]       # per modality, (n, C, H, W) uint8
    labels: np.ndarray             # (tasks, n) integer class indices
    classes: tuple[int, ...]       # class count per task
    splits: np.ndarray             # (n,) uint8 split tags

    def __post_init__(self):
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=np.int64))
        self.splits = np.asarray(self.splits, dtype=np.uint8)
        self.classes = tuple(int(k) for k in self.classes)
        self.validate()

    @property
    def n(self) -> int:
        return int(self.splits.shape[0])

    @property
    def m(self) -> int:
        return len(self.images)

    def validate(self) -> None:
        n = self.n
        if not self.images:
            raise DataError("container needs at least one modality")
        for i, im in enumerate(self.images):
            if im.dtype != np.uint8 or im.ndim != 4 or im.shape[0] != n:
                raise DataError(f"modality {i + 1} must be uint8 (n={n}, C, H, W), got {im.dtype} {im.shape}")
        if self.labels.shape != (len(self.classes), n):
            raise DataError(f"labels shape {self.labels.shape} != ({len(self.classes)}, {n})")
        for t, k in enumerate(self.classes):
            if k < 2:
                raise DataError(f"task {t} has {k} classes, need >= 2")
            if n and (self.labels[t].min() < 0 or self.labels[t].max() >= k):
                raise DataError(f"task {t} labels outside [0, {k})")
        if n and self.splits.max() >= len(SPLITS):
            raise DataError(f"split tags must lie in 0..{len(SPLITS) - 1}")

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
        return np.flatnonzero(self.splits == SPLITS.index(split))

    def modality(self, i: int, idx: np.ndarray | None = None) -> np.ndarray:
        im = self.images[i] if idx is None else self.images[i][idx]
        return im.astype(np.float64) / 255.0

    def arrays(self, split: str | None = None) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """``(xs, ys)``: per-modality [0, 1] arrays and per-task labels for a split (all samples if None)."""
        idx = np.arange(self.n) if split is None else self.indices(split)
        return [self.modality(i, idx) for i in range(self.m)], [self.labels[t][idx] for t in range(len(self.classes))]

    # -- serialisation ---------------------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [_HEAD.pack(MAGIC, VERSION, self.m, len(self.classes), 0, self.n)]
        for im in self.images:
            parts.append(struct.pack("<HHH", *im.shape[1:]))
        parts.append(struct.pack(f"<{len(self.classes)}H", *self.classes))
        for im in self.images:
            parts.append(np.ascontiguousarray(im).tobytes())
        parts.append(self.labels.astype("<u2").tobytes())
        parts.append(self.splits.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DatasetContainer":
        if len(buf) < _HEAD.size:
            raise FormatError(f"header needs {_HEAD.size} bytes, file has {len(buf)}", offset=len(buf))
        magic, version, m, t, _, n = _HEAD.unpack_from(buf, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", offset=4)
        if m < 1:
            raise FormatError("modality count is 0", offset=6)
        off = _HEAD.size
        need = off + 6 * m + 2 * t
        if len(buf) < need:
            raise FormatError(f"shape table needs {need} bytes, file has {len(buf)}", offset=len(buf))
        shapes = []
        for _ in range(m):
            shapes.append(struct.unpack_from("<HHH", buf, off))
            off += 6
        classes = struct.unpack_from(f"<{t}H", buf, off)
        off += 2 * t
        pixels = n * sum(c * h * w for c, h, w in shapes)
        expected = off + pixels + 2 * t * n + n
        if len(buf) != expected:
            raise FormatError(f"payload length mismatch: expected {expected} bytes in total, got {len(buf)}",
                              offset=min(len(buf), expected))
        images = []
        for c, h, w in shapes:
            size = n * c * h * w
            images.append(np.frombuffer(buf, np.uint8, size, off).reshape(n, c, h, w).copy())
            off += size
        labels = np.frombuffer(buf, "<u2", t * n, off).reshape(t, n).astype(np.int64)
        off += 2 * t * n
        splits = np.frombuffer(buf, np.uint8, n, off).copy()
        try:
            return cls(images, labels, classes, splits)
        except DataError as e:
            raise FormatError(f"container content invalid: {e}", offset=off) from e

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DatasetContainer":
        return cls.from_bytes(Path(path).read_bytes())

    def manifest(self) -> str:
        """One line per sample: id, split, labels (comma separated)."""
        lines = []
        for i in range(self.n):
            labels = ",".join(str(int(self.labels[t, i])) for t in range(len(self.classes)))
            lines.append(f"{i} {SPLITS[self.splits[i]]} {labels}")
        return "\n".join(lines) + "\n"


def save(container: DatasetContainer, path) -> None:
    container.save(path)
    Path(str(path) + ".manifest").write_text(container.manifest())


def load(path) -> DatasetContainer:
    return DatasetContainer.load(path)


# -- synthetic task ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Class k is a plane wave at orientation k*pi/K and its own spatial frequency.

    Every sample jitters the phase by up to ``phase_jitter`` and adds Gaussian
    pixel noise; modality j renders the same latent with an extra phase of
    j*pi/2.
    """

    amplitude: float = 0.05
    noise: float = 0.08
    base_period: float = 8.0
    phase_jitter: float = np.pi / 4


def _pattern(k: int, classes: int, size: int, spec: SynthSpec) -> tuple[np.ndarray, np.ndarray, float]:
    theta = np.pi * k / classes
    period = spec.base_period * (1.0 + 0.25 * (k % 2))
    if period * 2 > size:
        raise ConfigError(f"image size {size} is too small for a period-{period} pattern bank")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return xx, yy, (np.cos(theta), np.sin(theta), 2 * np.pi / period)


def synth_generate(seed: int, n: int, classes: int = 4, size: int = 64, m: int = 2,
                   splits: tuple[int, int, int] | None = None, spec: SynthSpec = SynthSpec()) -> DatasetContainer:
    """Balanced class-conditional plane-wave images with ``m`` phase-shifted renderings.

    ``splits`` gives (train, val, test) counts summing to ``n``; by default
    every sample is training data.  Split membership comes from a seeded
    permutation.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if n < classes:
        raise ConfigError(f"n={n} must be >= classes={classes}")
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    if size < 8:
        raise ConfigError(f"image size {size} is too small for the pattern bank")
    splits = (n, 0, 0) if splits is None else tuple(int(s) for s in splits)
    if len(splits) != 3 or sum(splits) != n or min(splits) < 0:
        raise ConfigError(f"split counts {splits} must be three non-negative numbers summing to {n}")
    gen, perm_seed = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(gen)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    phases = rng.uniform(-spec.phase_jitter, spec.phase_jitter, size=n)
    banks = [_pattern(k, classes, size, spec) for k in range(classes)]
    images = []
    for j in range(m):
        noise = rng.normal(0.0, spec.noise, size=(n, 1, size, size))
        out = np.empty((n, 1, size, size))
        for i in range(n):
            xx, yy, (c, s, w) = banks[labels[i]]
            out[i, 0] = 0.5 + spec.amplitude * np.cos(w * (c * xx + s * yy) + phases[i] + j * np.pi / 2)
        images.append(np.clip(np.rint((out + noise) * 255.0), 0, 255).astype(np.uint8))
    tags = np.repeat(np.arange(3, dtype=np.uint8), splits)
    tags = tags[np.random.default_rng(perm_seed).permutation(n)]
    return DatasetContainer(images, labels[None, :], (classes,), tags)


# -- augmentation --------------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    rotation_deg: float = 20.0
    translation_px: int = 5
    blur_sigma: float = 0.8
    variants_per_sample: int = 3


def gaussian_kernel3(sigma: float = 0.8) -> np.ndarray:
    """Normalised 3x3 Gaussian kernel."""
    t = np.exp(-(np.arange(-1, 2) ** 2) / (2.0 * sigma ** 2))
    k = np.outer(t, t)
    return k / k.sum()


def blur(image: np.ndarray, sigma: float = 0.8) -> np.ndarray:
    """3x3 Gaussian blur per channel; borders replicate the edge so constants are fixed points."""
    image = np.asarray(image, dtype=np.float64)
    k = gaussian_kernel3(sigma)
    pad = [(0, 0)] * (image.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(image, pad, mode="edge")
    h, w = image.shape[-2:]
    out = np.zeros_like(image)
    for i in range(3):
        for j in range(3):
            out += k[i, j] * p[..., i:i + h, j:j + w]
    return out


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the centre with zero fill."""
    image = np.asarray(image, dtype=np.float64)
    if degrees == 0:
        return image.copy()
    return ndimage.rotate(image, degrees, axes=(-1, -2), reshape=False, order=1, mode="constant", cval=0.0)


def translate(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer shift with zero fill; overlapping pixels keep their exact values."""
    image = np.asarray(image, dtype=np.float64)
    out = np.zeros_like(image)
    h, w = image.shape[-2:]
    sy, ty = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    sx, tx = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[..., ty, tx] = image[..., sy, sx]
    return out


def _draw(spec: AugmentSpec, rng: np.random.Generator) -> tuple[float, int, int]:
    angle = float(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    dy, dx = (int(v) for v in rng.integers(-spec.translation_px, spec.translation_px + 1, size=2))
    return angle, dy, dx


def _variants(image, angle, dy, dx, sigma) -> list[np.ndarray]:
    return [rotate(image, angle), translate(image, dy, dx), blur(image, sigma)]


def augment(image: np.ndarray, spec: AugmentSpec = AugmentSpec(),
            rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Rotated, translated and blurred copies of a (C, H, W) or (H, W) image."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return _variants(image, *_draw(spec, rng), spec.blur_sigma)


def augment_set(xs: list[np.ndarray], ys: list[np.ndarray], spec: AugmentSpec = AugmentSpec(),
                rng: np.random.Generator | None = None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Original samples plus three variants each (4x), shuffled with a seeded permutation.

    All modalities of a sample share the drawn angle and shift; labels are
    inherited.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(np.asarray(ys[0]))
    out = [[np.asarray(x, dtype=np.float64)] for x in xs]
    extra = [np.empty((3 * n,) + np.asarray(x).shape[1:]) for x in xs]
    for i in range(n):
        draw = _draw(spec, rng)
        for j, x in enumerate(xs):
            for v, img in enumerate(_variants(np.asarray(x[i], dtype=np.float64), *draw, spec.blur_sigma)):
                extra[j][v * n + i] = img
    xs_all = [np.concatenate([o[0], e]) for o, e in zip(out, extra)]
    ys_all = [np.concatenate([np.asarray(y)] * 4) for y in ys]
    perm = rng.permutation(4 * n)
    return [x[perm] for x in xs_all], [y[perm] for y in ys_all]


def modality_synthesize(image: np.ndarray, mode: str = "blur", sigma: float = 0.8) -> np.ndarray:
    """Second-modality rendering of a single image: a 3x3 Gaussian blur or an exact copy."""
    if mode == "identity":
        return np.array(image, dtype=np.float64, copy=True)
    if mode == "blur":
        return blur(image, sigma)
    raise ConfigError(f"unknown modality mode {mode!r}; expected 'blur' or 'identity'")
