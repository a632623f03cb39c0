"""Dataset ingestion and the synthetic tubular-structure generator.

Directory layout for real data: images/, masks/ and optional fov/ with
matching stems; accepted rasters are binary 8-bit PGM (P5) / PPM (P6) and
PNG.  The synthetic generator draws branching quadratic curves on a dark
vignetted background and keeps the exact rasterized pixel set as the mask,
so desk-scale experiments need no external files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .conv import resize_bilinear_array
from .errors import ConfigError, FormatError, IngestionError

LAYOUT_TARGETS = {"drive": (608, 608), "stare": (704, 704)}

IMAGE_EXTS = (".ppm", ".pgm", ".png")


@dataclass
class Sample:
    """One image/mask pair; arrays are float32, image in [0,1], mask in {0,1}."""

    image: np.ndarray
    mask: np.ndarray
    fov: np.ndarray | None
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise IngestionError(f"{self.id}: image must be [3,H,W]")
        if self.mask.shape != (1,) + self.image.shape[1:]:
            raise IngestionError(f"{self.id}: mask extents do not match the image")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise IngestionError(f"{self.id}: image values must lie in [0,1]")
        uniq = np.unique(self.mask)
        if not np.isin(uniq, (0.0, 1.0)).all():
            raise IngestionError(f"{self.id}: mask must be exactly 0/1")


# -- raster IO ---------------------------------------------------------------


def _read_pnm_header(fh):
    fields = []
    while len(fields) < 4:
        line = fh.readline()
        if not line:
            raise FormatError("truncated PNM header")
        line = line.split(b"#", 1)[0]
        fields.extend(line.split())
    return fields


def read_pnm(path):
    """Read a binary P5/P6 file into a uint8 [H,W] or [H,W,3] array."""
    with open(path, "rb") as fh:
        fields = _read_pnm_header(fh)
        magic = fields[0]
        if magic not in (b"P5", b"P6"):
            raise FormatError(f"{path}: only binary P5/P6 rasters are supported")
        width, height, maxval = (int(v) for v in fields[1:4])
        if maxval != 255:
            raise FormatError(f"{path}: only 8-bit rasters (maxval 255) are supported")
        channels = 3 if magic == b"P6" else 1
        raw = fh.read(width * height * channels)
        if len(raw) != width * height * channels:
            raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(height, width, 3)
    return arr.reshape(height, width)


def write_pgm(path, values):
    """Write [H,W] floats in [0,1] as binary P5 with byte = round(255 * v)."""
    arr = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_ppm(path, rgb):
    """Write [H,W,3] floats in [0,1] as binary P6."""
    arr = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_raster(path):
    """Decode PNG or binary PNM into a float32 [H,W] or [H,W,3] array in [0,1]."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    elif ext in (".ppm", ".pgm"):
        arr = read_pnm(path)
    else:
        raise FormatError(f"{path}: unsupported raster extension '{ext}'")
    return arr.astype(np.float32) / 255.0


def _to_chw(arr):
    if arr.ndim == 2:
        return np.repeat(arr[None], 3, axis=0)
    return arr.transpose(2, 0, 1)


def _nearest_resize(arr, out_h, out_w):
    h, w = arr.shape[-2:]
    iy = np.clip(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), 0, h - 1)
    ix = np.clip(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), 0, w - 1)
    return arr[..., iy[:, None], ix[None, :]]


def _binarize(arr):
    return (arr >= 0.5).astype(np.float32)


def load_dataset(root, layout=None, target=None):
    """Load an images/masks(/fov) directory into samples.

    ``layout`` may name a preset target resolution ('drive' -> 608,
    'stare' -> 704); an explicit ``target`` (h, w) overrides it.  Images are
    resized bilinearly, masks and field-of-view maps with nearest neighbor
    followed by re-binarization at 0.5; a resize to the native extents is an
    exact identity.
    """
    if layout is not None:
        if layout not in LAYOUT_TARGETS:
            raise ConfigError(f"unknown dataset layout '{layout}'")
        if target is None:
            target = LAYOUT_TARGETS[layout]

    img_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    fov_dir = os.path.join(root, "fov")
    if not os.path.isdir(img_dir) or not os.path.isdir(mask_dir):
        raise IngestionError(f"{root}: expected images/ and masks/ subdirectories")

    def find(directory, stem):
        for ext in IMAGE_EXTS:
            cand = os.path.join(directory, stem + ext)
            if os.path.exists(cand):
                return cand
        return None

    samples = []
    names = sorted(os.listdir(img_dir))
    if not names:
        raise IngestionError(f"{img_dir}: no images found")
    for name in names:
        stem, ext = os.path.splitext(name)
        if ext.lower() not in IMAGE_EXTS:
            continue
        mask_path = find(mask_dir, stem)
        if mask_path is None:
            raise IngestionError(f"missing mask for image stem '{stem}'")
        image = _to_chw(read_raster(os.path.join(img_dir, name)))
        mask = read_raster(mask_path)
        if mask.ndim == 3:
            mask = mask.mean(axis=2)
        mask = mask[None]
        fov = None
        fov_path = find(fov_dir, stem) if os.path.isdir(fov_dir) else None
        if fov_path is not None:
            fov = read_raster(fov_path)
            if fov.ndim == 3:
                fov = fov.mean(axis=2)
            fov = fov[None]
        if target is not None:
            th, tw = target
            if image.shape[1:] != (th, tw):
                image = resize_bilinear_array(image.astype(np.float64), th, tw)
                image = np.clip(image, 0.0, 1.0).astype(np.float32)
                mask = _nearest_resize(mask, th, tw)
                if fov is not None:
                    fov = _nearest_resize(fov, th, tw)
        samples.append(Sample(image=image.astype(np.float32),
                              mask=_binarize(mask),
                              fov=None if fov is None else _binarize(fov),
                              id=stem))
    return samples


# -- synthetic generator -------------------------------------------------------


def _stamp(mask, pts, radius, size):
    """Mark every pixel whose center lies within ``radius`` of the polyline points."""
    r_int = int(np.ceil(radius))
    offs = np.array([(dy, dx) for dy in range(-r_int, r_int + 1)
                     for dx in range(-r_int, r_int + 1)], dtype=np.float64)
    centers = np.floor(pts)[:, None, :] + offs[None, :, :]
    d2 = ((centers - pts[:, None, :]) ** 2).sum(axis=2)
    hit = centers[d2 <= radius * radius + 1e-9]
    hit = hit[(hit[:, 0] >= 0) & (hit[:, 0] < size) & (hit[:, 1] >= 0) & (hit[:, 1] < size)]
    mask[hit[:, 0].astype(np.int64), hit[:, 1].astype(np.int64)] = True


def _quadratic_points(rng, p0, p2, size):
    mid = 0.5 * (p0 + p2)
    seg = p2 - p0
    norm = np.array([-seg[1], seg[0]])
    seg_len = max(float(np.hypot(*seg)), 1.0)
    p1 = mid + norm * rng.uniform(-0.3, 0.3)
    ts = np.linspace(0.0, 1.0, max(int(3 * seg_len), 8))[:, None]
    return ((1 - ts) ** 2 * p0 + 2 * ts * (1 - ts) * p1 + ts ** 2 * p2), seg_len


def _draw_curve(rng, mask, size, p0, p2, width, allow_branch=True):
    pts, seg_len = _quadratic_points(rng, p0, p2, size)
    _stamp(mask, pts, width / 2.0, size)
    if allow_branch and rng.random() < 0.6:
        t0 = rng.uniform(0.25, 0.75)
        start = pts[int(t0 * (len(pts) - 1))]
        angle = rng.uniform(0.0, 2 * np.pi)
        length = rng.uniform(0.2, 0.45) * seg_len
        end = start + length * np.array([np.cos(angle), np.sin(angle)])
        _draw_curve(rng, mask, size, start, end, max(1, width - 1), allow_branch=False)


def synth_vessels(seed, count, size):
    """Deterministic branching-curve samples with exact centerline-dilation masks.

    Each image holds 2-5 quadratic curves of width 1-3 px drawn bright over a
    dark vignetted background with additive Gaussian noise (sigma 0.05).
    """
    if size % 32:
        raise ConfigError(f"size must be divisible by 32, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = cx = (size - 1) / 2.0
    r2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / (cy ** 2 + cx ** 2)
    vignette = 1.0 - 0.45 * r2

    samples = []
    for i in range(count):
        base = rng.uniform(0.08, 0.22)
        img = base * vignette
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(2, 6))):
            p0 = rng.uniform(0, size, 2)
            angle = rng.uniform(0.0, 2 * np.pi)
            dist = rng.uniform(0.6, 1.1) * size
            p2 = p0 + dist * np.array([np.cos(angle), np.sin(angle)])
            width = int(rng.integers(1, 4))
            _draw_curve(rng, mask, size, p0, p2, width)
        bright = rng.uniform(0.55, 0.85)
        img = np.where(mask, bright, img)
        gains = rng.uniform(0.85, 1.0, size=3)
        rgb = img[None] * gains[:, None, None]
        rgb = rgb + rng.normal(0.0, 0.05, size=rgb.shape)
        samples.append(Sample(
            image=np.clip(rgb, 0.0, 1.0).astype(np.float32),
            mask=mask[None].astype(np.float32),
            fov=None,
            id=f"synth-{seed}-{i:03d}",
        ))
    return samples


def save_samples(samples, out_dir):
    """Write samples as images/*.ppm and masks/*.pgm (re-loadable layout)."""
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    for s in samples:
        write_ppm(os.path.join(img_dir, s.id + ".ppm"), s.image.transpose(1, 2, 0))
        write_pgm(os.path.join(mask_dir, s.id + ".pgm"), s.mask[0])
        if s.fov is not None:
            fov_dir = os.path.join(out_dir, "fov")
            os.makedirs(fov_dir, exist_ok=True)
            write_pgm(os.path.join(fov_dir, s.id + ".pgm"), s.fov[0])
