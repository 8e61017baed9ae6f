"""Synthetic lesion dataset generation, image/mask file I/O, dataset loading.

Generated samples imitate the awkward parts of dermoscopy at desk scale:
smooth irregular blobs (convex and concave boundaries), low and variable
lesion/background contrast, illumination drift, sensor noise, and optional
dark hair-like strokes. The mask is always the exact blob support and every
mask-dependent intensity term scales with the drawn contrast, so a zero
contrast range yields images with no lesion signal at all.

Files use portable pixmaps by default (P6 images, P5 masks) so the package
has no codec dependency; PNG works through Pillow when it is installed.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ShapeMismatchError, Tensor
from .backbone import ConfigError


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: Tensor   # (3, H, W) in [0, 1]
    mask: Tensor    # (1, H, W) binary
    id: str

    def __post_init__(self):
        if self.image.shape[-2:] != self.mask.shape[-2:]:
            raise ShapeMismatchError(
                f"image {self.image.shape} / mask {self.mask.shape} spatial mismatch")
        vals = np.unique(self.mask.data)
        if not np.isin(vals, (0.0, 1.0)).all():
            raise DatasetError(f"mask of sample {self.id!r} is not binary")


@dataclass(frozen=True)
class SynthConfig:
    count: int = 200
    size: int = 64
    seed: int = 0
    lesion_fraction: tuple[float, float] = (0.05, 0.4)
    contrast: tuple[float, float] = (0.25, 0.6)
    noise_std: float = 0.03
    hair_prob: float = 0.3

    def __post_init__(self):
        lo, hi = self.lesion_fraction
        if not (0.0 < lo < hi < 1.0):
            raise ConfigError(
                f"lesion fraction range must satisfy 0 < lo < hi < 1, got {self.lesion_fraction}")
        if self.contrast[0] > self.contrast[1] or self.contrast[0] < 0:
            raise ConfigError(f"bad contrast range {self.contrast}")
        if self.count < 1 or self.size < 8:
            raise ConfigError("count must be >= 1 and size >= 8")
        if self.noise_std < 0 or not (0.0 <= self.hair_prob <= 1.0):
            raise ConfigError("noise_std must be >= 0 and hair_prob in [0, 1]")


# ---------------------------------------------------------------------------
# resampling helpers (shared with augmentation and dataset loading)
# ---------------------------------------------------------------------------

def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Channel-first bilinear resize; identity when sizes already match."""
    c, h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = arr[:, y0][:, :, x0] * (1 - wx) + arr[:, y0][:, :, x1] * wx
    bot = arr[:, y1][:, :, x0] * (1 - wx) + arr[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = np.clip(((np.arange(out_h) + 0.5) * (h / out_h)).astype(int), 0, h - 1)
    xs = np.clip(((np.arange(out_w) + 0.5) * (w / out_w)).astype(int), 0, w - 1)
    return arr[:, ys][:, :, xs]


def _smooth_field(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Zero-mean smooth random surface from a bilinearly upsampled coarse grid."""
    coarse = rng.standard_normal((1, cells, cells))
    field = resize_bilinear(coarse, size, size)[0]
    return field - field.mean()


# ---------------------------------------------------------------------------
# blob synthesis
# ---------------------------------------------------------------------------

def _blob_mask(size: int, centers, axes, angles, harmonics) -> np.ndarray:
    """Union of sinusoidally perturbed ellipses rasterized on the pixel grid."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    mask = np.zeros((size, size), dtype=bool)
    for (cy, cx), (a, b), phi, harm in zip(centers, axes, angles, harmonics):
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        rho = np.hypot(u / a, v / b)
        theta = np.arctan2(v / b, u / a)
        boundary = np.ones_like(rho)
        for m, amp, shift in harm:
            boundary += amp * np.sin(m * theta + shift)
        mask |= rho <= boundary
    return mask


def _draw_blobs(rng: np.random.Generator, config: SynthConfig) -> np.ndarray:
    size = config.size
    lo, hi = config.lesion_fraction
    span = hi - lo
    target = rng.uniform(lo + 0.1 * span, hi - 0.1 * span)
    n_blobs = 2 if rng.random() < 0.35 else 1
    shares = [1.0] if n_blobs == 1 else [0.7, 0.3]

    centers, axes, angles, harmonics = [], [], [], []
    base = np.array([rng.uniform(0.38, 0.62) * size, rng.uniform(0.38, 0.62) * size])
    for k in range(n_blobs):
        if k == 0:
            centers.append(tuple(base))
        else:
            offset = rng.uniform(0.18, 0.3) * size
            direction = rng.uniform(0, 2 * np.pi)
            centers.append((
                float(np.clip(base[0] + offset * np.sin(direction), 0.2 * size, 0.8 * size)),
                float(np.clip(base[1] + offset * np.cos(direction), 0.2 * size, 0.8 * size)),
            ))
        aspect = rng.uniform(0.65, 1.55)
        r0 = np.sqrt(shares[k] * target * size * size / np.pi)
        axes.append([r0 * aspect, r0 / aspect])
        angles.append(rng.uniform(0, np.pi))
        harmonics.append([(m, rng.uniform(0.0, 0.2), rng.uniform(0, 2 * np.pi))
                          for m in (2, 3, 5)])

    # rescale all axes until the rasterized union fraction lands in range
    mask = _blob_mask(size, centers, axes, angles, harmonics)
    for _ in range(12):
        frac = mask.mean()
        if lo <= frac <= hi:
            break
        scale = np.sqrt(target / max(frac, 1.0 / (size * size)))
        scale = float(np.clip(scale, 0.6, 1.6))
        axes = [[a * scale, b * scale] for a, b in axes]
        mask = _blob_mask(size, centers, axes, angles, harmonics)
    return mask.astype(float)


def _soft_alpha(mask: np.ndarray) -> np.ndarray:
    """Slightly feathered copy of the mask for shading (mask itself stays exact)."""
    kernel = np.array([0.25, 0.5, 0.25])
    out = mask.copy()
    for _ in range(2):
        padded = np.pad(out, ((1, 1), (0, 0)), mode="edge")
        out = (kernel[0] * padded[:-2] + kernel[1] * padded[1:-1]
               + kernel[2] * padded[2:])
        padded = np.pad(out, ((0, 0), (1, 1)), mode="edge")
        out = (kernel[0] * padded[:, :-2] + kernel[1] * padded[:, 1:-1]
               + kernel[2] * padded[:, 2:])
    return out


def _hair_strokes(rng: np.random.Generator, size: int) -> np.ndarray:
    """Dark curvilinear artifacts: rasterized quadratic curves, 1-2 px wide."""
    stamp = np.zeros((size, size))
    for _ in range(int(rng.integers(1, 4))):
        pts = rng.uniform(-0.1 * size, 1.1 * size, size=(3, 2))
        t = np.linspace(0.0, 1.0, 4 * size)[:, None]
        curve = ((1 - t) ** 2 * pts[0] + 2 * (1 - t) * t * pts[1] + t ** 2 * pts[2])
        ys = np.round(curve[:, 0]).astype(int)
        xs = np.round(curve[:, 1]).astype(int)
        keep = (ys >= 0) & (ys < size) & (xs >= 0) & (xs < size)
        depth = rng.uniform(0.15, 0.4)
        stamp[ys[keep], xs[keep]] = np.maximum(stamp[ys[keep], xs[keep]], depth)
        if rng.random() < 0.5:  # occasional double-width strand
            ys2 = np.clip(ys[keep] + 1, 0, size - 1)
            stamp[ys2, xs[keep]] = np.maximum(stamp[ys2, xs[keep]], 0.6 * depth)
    return stamp


def gen_synthetic(config: SynthConfig) -> list[Sample]:
    """Deterministic dataset of blob lesions on skin-toned backgrounds."""
    rng = np.random.default_rng(config.seed)
    size = config.size
    samples = []
    for index in range(config.count):
        mask = _draw_blobs(rng, config)
        alpha = _soft_alpha(mask)

        red = rng.uniform(0.66, 0.84)
        base = np.stack([
            np.full((size, size), red),
            np.full((size, size), red - rng.uniform(0.08, 0.18)),
            np.full((size, size), red - rng.uniform(0.16, 0.3)),
        ])
        base += 0.035 * _smooth_field(rng, size, 4)[None]
        gy, gx = rng.uniform(-0.05, 0.05, size=2)
        ramp = (np.linspace(-0.5, 0.5, size)[:, None] * gy
                + np.linspace(-0.5, 0.5, size)[None, :] * gx)
        base += ramp[None]

        contrast = rng.uniform(*config.contrast)
        profile = np.array([1.0, rng.uniform(0.8, 0.95), rng.uniform(0.6, 0.8)])
        texture = _smooth_field(rng, size, max(4, size // 8))
        depth = 0.75 + 0.5 * _soft_alpha(alpha)       # darker toward the core
        drop = contrast * profile[:, None, None] * alpha[None] * depth[None]
        drop *= 1.0 + 0.3 * texture[None]
        image = base - drop

        if rng.random() < config.hair_prob:
            image = image - _hair_strokes(rng, size)[None]
        if config.noise_std > 0:
            image = image + rng.normal(0.0, config.noise_std, size=image.shape)
        image = np.clip(image, 0.0, 1.0)

        samples.append(Sample(image=Tensor(image), mask=Tensor(mask[None]),
                              id=f"synth{index:04d}"))
    return samples


# ---------------------------------------------------------------------------
# portable pixmap I/O (P6 images, P5 masks), PNG via Pillow when available
# ---------------------------------------------------------------------------

def _write_pnm(path, arr8: np.ndarray) -> None:
    if arr8.ndim == 3:
        header = f"P6\n{arr8.shape[1]} {arr8.shape[0]}\n255\n"
        payload = arr8
    else:
        header = f"P5\n{arr8.shape[1]} {arr8.shape[0]}\n255\n"
        payload = arr8
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload.tobytes())


def _read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: not a binary PGM/PPM file")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(blob[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = tokens
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit files supported, maxval={maxval}")
    channels = 3 if blob[:2] == b"P6" else 1
    data = np.frombuffer(blob, dtype=np.uint8, count=width * height * channels,
                         offset=pos)
    if channels == 3:
        return data.reshape(height, width, 3)
    return data.reshape(height, width)


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def write_image(image, path) -> None:
    """3-channel image in [0, 1] to an 8-bit PPM or PNG file."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    arr8 = _to_uint8(np.moveaxis(arr, 0, -1))
    path = Path(path)
    if path.suffix.lower() == ".png":
        _pil().fromarray(arr8).save(path)
    else:
        _write_pnm(path, arr8)


def write_mask(mask, path) -> None:
    """Binary mask to a single-channel 8-bit file with values 0/255."""
    arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    arr8 = (arr.reshape(arr.shape[-2:]) > 0.5).astype(np.uint8) * 255
    path = Path(path)
    if path.suffix.lower() == ".png":
        _pil().fromarray(arr8).save(path)
    else:
        _write_pnm(path, arr8)


def write_sample(sample: Sample, root, fmt: str = "ppm") -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    image_ext = "png" if fmt == "png" else "ppm"
    mask_ext = "png" if fmt == "png" else "pgm"
    write_image(sample.image, root / "images" / f"{sample.id}.{image_ext}")
    write_mask(sample.mask, root / "masks" / f"{sample.id}.{mask_ext}")


def _pil():
    try:
        from PIL import Image
    except ImportError as err:
        raise DatasetError(
            "PNG support needs Pillow; install it or use the ppm format") from err
    return Image


def _read_any(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".png":
        return np.asarray(_pil().open(path))
    return _read_pnm(path)


def _fit_to_size(arr: np.ndarray, size: int, nearest: bool) -> np.ndarray:
    """Resize so the longest side equals size, then pad square (top-left)."""
    c, h, w = arr.shape
    scale = size / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    resized = resize_nearest(arr, nh, nw) if nearest else resize_bilinear(arr, nh, nw)
    if (nh, nw) == (size, size):
        return resized
    mode = "constant" if nearest else "edge"
    return np.pad(resized, ((0, 0), (0, size - nh), (0, size - nw)), mode=mode)


def load_dataset(root, size: int = 64) -> list[Sample]:
    """Read images/ and masks/ with matching stems into normalized samples."""
    root = Path(root)
    image_dir, mask_dir = root / "images", root / "masks"
    images = {p.stem: p for p in sorted(image_dir.glob("*")) if p.is_file()} \
        if image_dir.is_dir() else {}
    masks = {p.stem: p for p in sorted(mask_dir.glob("*")) if p.is_file()} \
        if mask_dir.is_dir() else {}
    if not images and not masks:
        warnings.warn(f"no samples found under {root}", stacklevel=2)
        return []
    unmatched = sorted(set(images) ^ set(masks))
    if unmatched:
        raise DatasetError(f"unpaired stems under {root}: {', '.join(unmatched)}")

    samples = []
    for stem in sorted(images):
        raw = _read_any(images[stem])
        if raw.ndim == 2:
            raw = np.repeat(raw[:, :, None], 3, axis=2)
        image = np.moveaxis(raw[:, :, :3], -1, 0).astype(float) / 255.0
        mraw = _read_any(masks[stem])
        if mraw.ndim == 3:
            mraw = mraw[:, :, 0]
        mask = (mraw >= 128).astype(float)[None]
        image = _fit_to_size(image, size, nearest=False)
        mask = _fit_to_size(mask, size, nearest=True)
        samples.append(Sample(image=Tensor(image), mask=Tensor(mask), id=stem))
    return samples


# ---------------------------------------------------------------------------
# manifest and train/val split
# ---------------------------------------------------------------------------

def write_manifest(root, assignments: list[tuple[str, str]]) -> None:
    lines = [f"{sample_id},{split}" for sample_id, split in assignments]
    (Path(root) / "manifest.csv").write_text("id,split\n" + "\n".join(lines) + "\n")


def read_manifest(root) -> dict[str, str]:
    path = Path(root) / "manifest.csv"
    if not path.is_file():
        return {}
    out = {}
    for line in path.read_text().splitlines()[1:]:
        sample_id, _, split = line.partition(",")
        if sample_id:
            out[sample_id] = split
    return out


def split_dataset(samples: list[Sample], train_fraction: float,
                  seed: int) -> tuple[list[Sample], list[Sample]]:
    """Seeded shuffle split; same seed, same membership, order preserved."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train fraction must be in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(train_fraction * len(samples)))
    train_ids = {samples[i].id for i in order[:n_train]}
    train = [s for s in samples if s.id in train_ids]
    val = [s for s in samples if s.id not in train_ids]
    return train, val
