"""Image I/O (binary PNM), padding/mask protocol, dihedral augmentation, and a
procedural synthetic-vessel generator for desk-scale end-to-end runs.

Pixels are planar float64 in [0, 1] throughout; every spatial transform here
is an exact pixel permutation (no interpolation), so ground truth and masks
stay aligned bit-for-bit.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PnmError(ValueError):
    """Malformed PNM stream; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class Image:
    """Planar pixels, shape (channels, height, width), values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] not in (1, 3):
            raise ValueError(f"image must be (1|3, H, W), got {self.pixels.shape}")
        if self.pixels.size == 0:
            raise ValueError("image must be non-empty")

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class FovMask:
    """Boolean field-of-view map; True marks pixels that count for metrics."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValueError(f"mask must be (H, W), got {self.mask.shape}")
        if not self.mask.any():
            raise ValueError("mask must contain at least one true pixel")

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]


@dataclass
class Sample:
    """One dataset entry: fundus-style image, binary vessel map, FOV mask."""

    image: Image
    gt: Image
    mask: FovMask


# ---------------------------------------------------------------------------
# PNM


def load_pnm(data: bytes) -> Image:
    """Parse binary P5 (gray) or P6 (RGB) with maxval 255."""
    if len(data) < 2:
        raise PnmError("stream shorter than a PNM magic", 0)
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"bad magic {magic!r}, expected P5 or P6", 0)
    channels = 1 if magic == b"P5" else 3

    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        if pos >= len(data):
            raise PnmError("header ended before width/height/maxval", pos)
        ch = data[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise PnmError("unterminated header comment", pos)
            pos = nl + 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise PnmError(f"unexpected header byte {ch!r}", pos)
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PnmError(f"non-positive dimensions {width}x{height}", pos)
    if maxval != 255:
        raise PnmError(f"maxval must be 255, got {maxval}", pos)
    if pos >= len(data) or data[pos:pos + 1] not in b" \t\r\n":
        raise PnmError("missing whitespace after maxval", pos)
    pos += 1

    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise PnmError(
            f"truncated payload: need {need} bytes, have {len(payload)}", pos + len(payload))
    raw = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    planar = raw.reshape(height, width, channels).transpose(2, 0, 1)
    return Image(planar)


def save_pnm(image: Image, path: str | Path) -> int:
    """Write P5 (1 channel) or P6 (3 channels); returns bytes written."""
    data = pnm_bytes(image)
    Path(path).write_bytes(data)
    return len(data)


def pnm_bytes(image: Image) -> bytes:
    if image.pixels.min() < 0.0 or image.pixels.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1] before quantization")
    magic = b"P5" if image.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (image.width, image.height)
    # round half up so 0.5 -> 128, matching the 8-bit convention
    quant = np.floor(image.pixels * 255.0 + 0.5).astype(np.uint8)
    return header + quant.transpose(1, 2, 0).tobytes()


def to_fov_mask(image: Image) -> FovMask:
    """Reinterpret a binary gray image (values from {0, 255}/255) as a mask."""
    if image.channels != 1:
        raise ValueError("masks must be single-channel")
    plane = image.pixels[0]
    if not np.isin(plane, (0.0, 1.0)).all():
        raise ValueError("mask image must contain only 0 and 255 values")
    return FovMask(plane == 1.0)


# ---------------------------------------------------------------------------
# geometry


def _transform(plane: np.ndarray, index: int) -> np.ndarray:
    """Dihedral transform 0..7: rotations by 0/90/180/270 degrees clockwise,
    then the horizontal flips of each."""
    rot = np.rot90(plane, k=-(index % 4), axes=(-2, -1))
    if index >= 4:
        rot = rot[..., ::-1]
    return np.ascontiguousarray(rot)


def augment_dihedral(image: Image, gt: Image, mask: FovMask) -> list[Sample]:
    """The 8 aligned dihedral variants of a sample."""
    out = []
    for i in range(8):
        out.append(Sample(
            Image(_transform(image.pixels, i)),
            Image(_transform(gt.pixels, i)),
            FovMask(_transform(mask.mask, i)),
        ))
    return out


@dataclass
class PadRecord:
    """Original extents; padding is anchored top-left so cropping inverts it."""

    width: int
    height: int


def pad_to(pixels: np.ndarray, target_w: int, target_h: int,
           fill: float = 0.0) -> tuple[np.ndarray, PadRecord]:
    """Zero-pad an (..., H, W) array on the right/bottom to the target size."""
    h, w = pixels.shape[-2], pixels.shape[-1]
    if target_w < w or target_h < h:
        raise ValueError(f"pad target {target_w}x{target_h} smaller than source {w}x{h}")
    if target_w % 16 or target_h % 16:
        raise ValueError(f"pad target {target_w}x{target_h} must be divisible by 16")
    widths = [(0, 0)] * (pixels.ndim - 2) + [(0, target_h - h), (0, target_w - w)]
    padded = np.pad(pixels, widths, constant_values=fill)
    if pixels.dtype == bool:
        padded = padded.astype(bool)
    return padded, PadRecord(width=w, height=h)


def unpad(pixels: np.ndarray, record: PadRecord) -> np.ndarray:
    return np.ascontiguousarray(pixels[..., :record.height, :record.width])


def next_multiple_of_16(n: int) -> int:
    return ((n + 15) // 16) * 16


def downsample_mean(pixels: np.ndarray, factor: int) -> np.ndarray:
    """Integer-factor mean pooling over the trailing two axes (binary inputs
    are re-thresholded at 0.5)."""
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    h, w = pixels.shape[-2], pixels.shape[-1]
    if h % factor or w % factor:
        raise ValueError(f"dims {h}x{w} not divisible by factor {factor}")
    was_bool = pixels.dtype == bool
    arr = pixels.astype(np.float64)
    shape = pixels.shape[:-2] + (h // factor, factor, w // factor, factor)
    pooled = arr.reshape(shape).mean(axis=(-3, -1))
    if was_bool:
        return pooled >= 0.5
    return pooled


# ---------------------------------------------------------------------------
# synthetic vessels


@dataclass
class SynthSpec:
    """Recipe for one procedural sample; everything derives from the seed."""

    seed: int = 0
    width: int = 64
    height: int = 64
    branch_count: int = 5
    thickness_min: float = 1.0
    thickness_max: float = 2.5
    contrast: float = -0.40
    noise_sigma: float = 0.02
    blur_radius: float = 1.0

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("width and height must be positive")
        if self.width % 16 or self.height % 16:
            raise ValueError(f"synthetic size {self.width}x{self.height} must divide by 16")
        if self.thickness_min < 1.0 or self.thickness_max < self.thickness_min:
            raise ValueError("need 1 <= thickness_min <= thickness_max")
        if self.branch_count < 1:
            raise ValueError("branch_count must be positive")


def _gaussian_blur(plane: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return plane
    radius = max(1, int(math.ceil(3 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    tmp = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, plane)
    return np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="same"), 0, tmp)


def _stamp_disc(stencil: np.ndarray, cx: float, cy: float, radius: float) -> None:
    h, w = stencil.shape
    x0, x1 = max(0, int(cx - radius)), min(w, int(cx + radius) + 2)
    y0, y1 = max(0, int(cy - radius)), min(h, int(cy + radius) + 2)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    stencil[y0:y1, x0:x1] |= (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2


def synth_generate(spec: SynthSpec) -> tuple[Image, Image, FovMask]:
    """Draw seeded quadratic vessel curves with tapering thickness.

    Returns (RGB image, exact binary ground truth, inscribed-disc FOV mask);
    the ground truth is guaranteed to lie inside the mask.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    w, h = spec.width, spec.height
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    fov_radius = min(w, h) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= fov_radius ** 2

    stencil = np.zeros((h, w), dtype=bool)
    inner = fov_radius * 0.85
    for _ in range(spec.branch_count):
        # quadratic Bezier with control points inside the field of view
        angles = rng.uniform(0, 2 * math.pi, 3)
        radii = rng.uniform(0.15, 1.0, 3) * inner
        px = cx + radii * np.cos(angles)
        py = cy + radii * np.sin(angles)
        t_start = rng.uniform(0.6, 1.0)
        steps = int(4 * max(w, h))
        for ti in range(steps + 1):
            t = ti / steps
            mt = 1.0 - t
            bx = mt * mt * px[0] + 2 * mt * t * px[1] + t * t * px[2]
            by = mt * mt * py[0] + 2 * mt * t * py[1] + t * t * py[2]
            thick = spec.thickness_max + (spec.thickness_min - spec.thickness_max) * t
            _stamp_disc(stencil, bx, by, thick * t_start / 2.0)
    stencil &= mask
    if not stencil.any():
        # degenerate draw; force a single center dot so gt is never empty
        stencil[int(cy), int(cx)] = True

    gt = stencil.astype(np.float64)
    base = np.array([0.62, 0.42, 0.28])  # warm fundus-like background
    planes = []
    for c in range(3):
        plane = np.full((h, w), base[c]) + spec.contrast * gt
        plane = _gaussian_blur(plane, spec.blur_radius)
        plane = plane + rng.normal(0.0, spec.noise_sigma, (h, w))
        planes.append(np.clip(plane, 0.0, 1.0))
    rgb = np.stack(planes, axis=0)
    return Image(rgb), Image(gt[None]), FovMask(mask)


# ---------------------------------------------------------------------------
# dataset directories


def save_sample(sample: Sample, directory: str | Path, prefix: str) -> list[Path]:
    """Write an image/gt/mask triple under `<prefix>image.ppm` etc."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, img in (("image.ppm", sample.image), ("gt.pgm", sample.gt)):
        p = directory / f"{prefix}{name}"
        save_pnm(img, p)
        paths.append(p)
    mask_img = Image(sample.mask.mask.astype(np.float64)[None])
    p = directory / f"{prefix}mask.pgm"
    save_pnm(mask_img, p)
    paths.append(p)
    return paths


def load_dataset(directory: str | Path, downsample: int = 1) -> list[Sample]:
    """Load every `*image.ppm` + `*gt.pgm` + `*mask.pgm` triple in a directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    samples = []
    for image_path in sorted(directory.glob("*image.ppm")):
        prefix = image_path.name[: -len("image.ppm")]
        gt_path = directory / f"{prefix}gt.pgm"
        mask_path = directory / f"{prefix}mask.pgm"
        if not gt_path.exists() or not mask_path.exists():
            raise FileNotFoundError(f"incomplete triple for prefix {prefix!r} in {directory}")
        image = load_pnm(image_path.read_bytes())
        gt = load_pnm(gt_path.read_bytes())
        mask = to_fov_mask(load_pnm(mask_path.read_bytes()))
        if downsample > 1:
            image = Image(downsample_mean(image.pixels, downsample))
            gt = Image(downsample_mean(gt.pixels > 0.5, downsample).astype(np.float64))
            mask = FovMask(downsample_mean(mask.mask, downsample))
        if not np.isin(gt.pixels, (0.0, 1.0)).all():
            raise ValueError(f"{gt_path} is not binary")
        samples.append(Sample(image, gt, mask))
    if not samples:
        raise FileNotFoundError(f"no *image.ppm files found in {directory}")
    return samples
