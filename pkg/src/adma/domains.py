"""Procedural shape images, parameterised corruptions and one-pass domain streams."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import rng

SHAPES = ("circle", "square", "triangle", "cross")
MIN_IMAGE_SIZE = 12
SUPERSAMPLE = 4

# Severity tables, index 0 is the identity extension.  Every row is monotone in
# distortion strength.
SEVERITY = {
    "gaussian-noise": (0.0, 0.08, 0.12, 0.18, 0.26, 0.38),  # noise std
    "shot-noise": (math.inf, 60.0, 25.0, 12.0, 5.0, 3.0),  # photons per unit intensity
    "impulse-noise": (0.0, 0.03, 0.06, 0.09, 0.17, 0.27),  # salt-and-pepper fraction
    "box-blur": (0, 2, 4, 6, 10, 14),  # passes of a 3x3 box filter
    "motion-blur": (1, 5, 9, 13, 15, 19),  # horizontal kernel length
    "brightness": (0.0, 0.1, 0.15, 0.2, 0.25, 0.3),  # additive offset
    "contrast": (1.0, 0.85, 0.75, 0.65, 0.55, 0.5),  # contrast factor
    "fog": (0.0, 0.2, 0.3, 0.4, 0.45, 0.5),  # blend weight toward haze
    "pixelate": (1, 2, 2, 3, 3, 4),  # block size
    "quantize": (256, 16, 8, 6, 4, 3),  # levels per channel
}
CORRUPTION_KINDS = tuple(SEVERITY)
DEFAULT_ORDER = (
    "gaussian-noise",
    "shot-noise",
    "impulse-noise",
    "box-blur",
    "motion-blur",
    "fog",
    "brightness",
    "contrast",
    "pixelate",
    "quantize",
)


@dataclass(frozen=True)
class ToySpec:
    num_classes: int = 4
    image_size: int = 32
    texture_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [2, {len(SHAPES)}]")
        if self.image_size < MIN_IMAGE_SIZE:
            raise ValueError(
                f"image_size {self.image_size} is too small to render a shape (min {MIN_IMAGE_SIZE})"
            )
        if self.texture_amplitude < 0:
            raise ValueError("texture_amplitude must be >= 0")


@dataclass(frozen=True)
class Corruption:
    kind: str
    severity: int = 5

    def __post_init__(self):
        if self.kind not in SEVERITY:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be in 0..5, got {self.severity}")

    @property
    def parameter(self):
        return SEVERITY[self.kind][self.severity]


# ---------------------------------------------------------------------------
# rendering


def _coverage(label: int, size: int, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    """Anti-aliased coverage of a shape inscribed in a circle of radius r."""
    n = size * SUPERSAMPLE
    t = (np.arange(n) + 0.5) / SUPERSAMPLE
    x, y = np.meshgrid(t - cx, t - cy)
    ca, sa = math.cos(angle), math.sin(angle)
    u, v = ca * x + sa * y, -sa * x + ca * y
    shape = SHAPES[label]
    if shape == "circle":
        inside = u * u + v * v <= r * r
    elif shape == "square":
        h = r / math.sqrt(2.0)
        inside = (np.abs(u) <= h) & (np.abs(v) <= h)
    elif shape == "triangle":
        # equilateral, vertices on the circle, apex up (image y points down)
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            phi = math.pi / 2 + 2 * math.pi * k / 3
            inside &= (u * math.cos(phi) + v * math.sin(phi)) <= r / 2.0
    else:
        arm, half = 0.95 * r, 0.2 * r
        inside = ((np.abs(u) <= arm) & (np.abs(v) <= half)) | ((np.abs(v) <= arm) & (np.abs(u) <= half))
    cov = inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    return cov


def render(label: int, spec: ToySpec, g: np.random.Generator) -> np.ndarray:
    """A bright shape on a darker, faintly textured and tinted background."""
    s = spec.image_size
    r = g.uniform(0.36, 0.45) * s
    cx = s / 2 + g.uniform(-2.0, 2.0)
    cy = s / 2 + g.uniform(-2.0, 2.0)
    angle = g.uniform(-math.pi / 8, math.pi / 8)
    cov = _coverage(label, s, cx, cy, r, angle)

    bg = g.uniform(0.1, 0.45)
    fg = bg + g.uniform(0.35, 0.55)
    tint_bg = g.uniform(-0.05, 0.05, size=3)
    tint_fg = g.uniform(-0.05, 0.05, size=3)

    yy, xx = np.mgrid[0:s, 0:s] / s
    fx, fy = g.uniform(0.5, 2.5, size=2)
    phase = g.uniform(0, 2 * math.pi)
    texture = spec.texture_amplitude * np.sin(2 * math.pi * (fx * xx + fy * yy) + phase)

    back = bg + tint_bg[:, None, None] + texture[None]
    front = fg + tint_fg[:, None, None]
    img = back * (1.0 - cov[None]) + front * cov[None]
    return np.clip(img, 0.0, 1.0)


def gen_source(spec: ToySpec, count: int, seed: int) -> tuple:
    """Class-balanced labelled images ``([count, 3, S, S], [count])``."""
    if count < spec.num_classes:
        raise ValueError(f"count {count} is smaller than num_classes {spec.num_classes}")
    labels = np.arange(count) % spec.num_classes
    labels = rng.stream(seed, "source-labels").permutation(labels)
    images = np.stack([render(int(lab), spec, rng.stream(seed, "source-image", i)) for i, lab in enumerate(labels)])
    return images, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# corruptions


def _box3(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = x.shape[1:]
    out = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            out += p[:, dy:dy + h, dx:dx + w]
    return out / 9.0


def _motion(x: np.ndarray, length: int) -> np.ndarray:
    if length <= 1:
        return x.copy()
    half = length // 2
    p = np.pad(x, ((0, 0), (0, 0), (half, length - 1 - half)), mode="edge")
    w = x.shape[2]
    return sum(p[:, :, k:k + w] for k in range(length)) / length


def _pixelate(x: np.ndarray, f: int) -> np.ndarray:
    if f <= 1:
        return x.copy()
    c, h, w = x.shape
    rows = np.arange(h) // f
    cols = np.arange(w) // f
    nr, nc = rows[-1] + 1, cols[-1] + 1
    sums = np.zeros((c, nr, nc))
    np.add.at(sums, (slice(None), rows[:, None], cols[None, :]), x)
    counts = np.zeros((nr, nc))
    np.add.at(counts, (rows[:, None], cols[None, :]), 1.0)
    return (sums / counts)[:, rows][:, :, cols]


def haze_field(size: int, g: np.random.Generator) -> np.ndarray:
    """Smooth field in [0.55, 1] from a bilinearly upsampled 4x4 grid."""
    coarse = g.uniform(0.0, 1.0, size=(4, 4))
    t = np.linspace(0.0, 3.0, size)
    i0 = np.minimum(np.floor(t).astype(int), 2)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    field = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    return 0.55 + 0.45 * field


def corrupt(image: np.ndarray, c: Corruption, seed: int) -> np.ndarray:
    """Apply one corruption; stochastic kinds draw from ``seed``.  Output in [0, 1]."""
    x = np.asarray(image, dtype=np.float64)
    if c.severity == 0:
        return x.copy()
    a = c.parameter
    g = rng.stream(seed, "corrupt", CORRUPTION_KINDS.index(c.kind))
    if c.kind == "gaussian-noise":
        out = x + g.normal(0.0, a, size=x.shape)
    elif c.kind == "shot-noise":
        out = g.poisson(x * a) / a
    elif c.kind == "impulse-noise":
        u = g.random(x.shape)
        out = np.where(u < a / 2, 0.0, np.where(u < a, 1.0, x))
    elif c.kind == "box-blur":
        out = x
        for _ in range(a):
            out = _box3(out)
    elif c.kind == "motion-blur":
        out = _motion(x, a)
    elif c.kind == "brightness":
        out = x + a
    elif c.kind == "contrast":
        m = x.mean()
        out = (x - m) * a + m
    elif c.kind == "fog":
        haze = haze_field(x.shape[-1], g)
        out = x * (1.0 - a) + a * haze[None]
    elif c.kind == "pixelate":
        out = _pixelate(x, a)
    elif c.kind == "quantize":
        out = np.round(x * (a - 1)) / (a - 1)
    else:  # pragma: no cover - guarded by Corruption
        raise ValueError(f"unknown corruption kind {c.kind!r}")
    return np.clip(out, 0.0, 1.0)


def distortion(clean: np.ndarray, corrupted: np.ndarray) -> float:
    """Mean absolute pixel delta against the clean image."""
    return float(np.abs(np.asarray(corrupted) - np.asarray(clean)).mean())


# ---------------------------------------------------------------------------
# streams


class StreamExhausted(RuntimeError):
    pass


@dataclass
class StreamItem:
    index: int
    image: np.ndarray
    label: int
    domain: int  # position of (round, corruption) in the sequence
    domain_id: str


@dataclass(frozen=True)
class ManifestRow:
    index: int
    label: int
    domain_id: str
    seed: int


class DomainStream:
    """Ordered, single-pass sequence of corrupted samples.

    Iterating a second time, after the first pass started, raises
    :class:`StreamExhausted`.
    """

    def __init__(self, manifest: Sequence[ManifestRow], domains: Sequence[str], make: Callable[[ManifestRow], np.ndarray]):
        self.manifest = list(manifest)
        self.domains = list(domains)
        self._make = make
        self._pos = 0
        self._started = False
        self._domain_of = {d: i for i, d in enumerate(self.domains)}

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def remaining(self) -> int:
        return len(self.manifest) - self._pos

    def __iter__(self) -> Iterator[StreamItem]:
        if self._started:
            raise StreamExhausted("domain stream is one-pass; it has already been iterated")
        self._started = True
        return self

    def __next__(self) -> StreamItem:
        if self._pos >= len(self.manifest):
            raise StopIteration
        row = self.manifest[self._pos]
        self._pos += 1
        return StreamItem(row.index, self._make(row), row.label, self._domain_of[row.domain_id], row.domain_id)

    def write_manifest(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label", "domain_id", "seed"])
            for r in self.manifest:
                w.writerow([r.index, r.label, r.domain_id, r.seed])


def build_stream(
    spec: ToySpec,
    order: Sequence[Corruption],
    per_domain_count: int,
    rounds: int = 1,
    seed: int = 0,
) -> DomainStream:
    """Fresh labelled images, corrupted domain by domain, optionally cycled ``rounds`` times."""
    if not order:
        raise ValueError("corruption order must not be empty")
    if per_domain_count < 1 or rounds < 1:
        raise ValueError("per_domain_count and rounds must be >= 1")
    domains = [f"r{r}/{c.kind}@{c.severity}" for r in range(rounds) for c in order]
    corruption_of = {d: order[i % len(order)] for i, d in enumerate(domains)}
    labels = rng.stream(seed, "stream-labels").integers(0, spec.num_classes, size=len(domains) * per_domain_count)
    manifest = []
    for k in range(len(domains) * per_domain_count):
        manifest.append(ManifestRow(k, int(labels[k]), domains[k // per_domain_count], rng.derive_seed(seed, "stream-item", k)))

    def make(row: ManifestRow) -> np.ndarray:
        clean = render(row.label, spec, rng.stream(row.seed, "stream-image"))
        return corrupt(clean, corruption_of[row.domain_id], row.seed)

    return DomainStream(manifest, domains, make)


def default_order(severity: int = 5, kinds: Optional[Sequence[str]] = None) -> list:
    return [Corruption(k, severity) for k in (kinds or DEFAULT_ORDER)]


# ---------------------------------------------------------------------------
# image dump

IMG_MAGIC = b"ADMA-IMG1"


def encode_image(image: np.ndarray) -> bytes:
    """``ADMA-IMG1`` header, u32 width and height, then u8 RGB interleaved rows."""
    c, h, w = image.shape
    if c != 3:
        raise ValueError(f"expected an RGB image [3, H, W], got {image.shape}")
    px = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    return IMG_MAGIC + struct.pack("<II", w, h) + px.tobytes()


def decode_image(blob: bytes) -> np.ndarray:
    if not blob.startswith(IMG_MAGIC):
        raise ValueError("not an ADMA-IMG1 image")
    off = len(IMG_MAGIC)
    w, h = struct.unpack_from("<II", blob, off)
    px = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=off + 8)
    return px.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_image(image))


def read_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())
