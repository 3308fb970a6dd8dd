"""Overlap-dataset synthesis and its binary container format.

Builds training material by compositing pairs of letter glyphs (or
singletons) onto a shared canvas: each sample draws classes, glyph
instances, integer offsets, an under-letter contrast factor, and
optional Gaussian background noise from its own derived generator, so
sample i is a pure function of (pool, config, derive_seed(seed, i)) and
any parallel schedule reproduces the sequential output bit for bit.

Datasets serialize to a little-endian container (magic ``OVLS``) with
8-bit quantized images and bit-packed masks; see write_dataset /
read_dataset for the exact layout.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import binarize_mask
from .errors import FormatError, GenerationError
from .rng import Rng, derive_seed

__all__ = [
    "SynthConfig", "Sample", "Dataset",
    "translate", "composite", "add_gaussian_noise",
    "make_sample", "generate_dataset",
    "write_dataset", "read_dataset",
    "derive_seed",
]

ABSENT = None  # class_b value for singleton samples (0xFF on the wire)

_MAGIC = b"OVLS"
_VERSION = 1
_HEADER = struct.Struct("<4sHIHHBBQ2s")   # 26 bytes
_SAMPLE_META = struct.Struct("<BBHHQ")    # 14 bytes
_FLAG_PACKED_MASKS = 0x01
_MAX_PLACE_ATTEMPTS = 100


@dataclass
class SynthConfig:
    class_set: tuple = (0, 1, 2, 3, 4)
    canvas: tuple = (28, 28)
    p_single: float = 0.1
    offset_max: int = 4
    contrast_range: tuple = (0.5, 1.0)
    noise_sigma: float = 0.0
    mask_threshold: float = 0.5
    min_ink_pixels: int = 10

    def __post_init__(self):
        self.class_set = tuple(int(c) for c in self.class_set)
        self.canvas = (int(self.canvas[0]), int(self.canvas[1]))
        self.contrast_range = (float(self.contrast_range[0]),
                               float(self.contrast_range[1]))
        if not self.class_set or len(set(self.class_set)) != len(self.class_set):
            raise ValueError("class_set must be non-empty with distinct ids")
        if any(not 0 <= c <= 254 for c in self.class_set):
            raise ValueError("class ids must fit in [0, 254]")
        if self.canvas[0] < 1 or self.canvas[1] < 1:
            raise ValueError(f"canvas must be positive, got {self.canvas}")
        if not 0.0 <= self.p_single <= 1.0:
            raise ValueError(f"p_single must lie in [0, 1], got {self.p_single}")
        if self.offset_max < 0:
            raise ValueError(f"offset_max must be >= 0, got {self.offset_max}")
        c_min, c_max = self.contrast_range
        if not 0.0 < c_min <= c_max <= 1.0:
            raise ValueError(
                f"contrast_range must satisfy 0 < c_min <= c_max <= 1, "
                f"got {self.contrast_range}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValueError(
                f"mask_threshold must lie in (0, 1), got {self.mask_threshold}")
        if self.min_ink_pixels < 0:
            raise ValueError(
                f"min_ink_pixels must be >= 0, got {self.min_ink_pixels}")


@dataclass
class Sample:
    input: np.ndarray       # float32 (H, W) in [0, 1]
    masks: np.ndarray       # uint8 (n_classes, H, W), class_set order
    class_a: int            # under-letter class id
    class_b: object         # upper-letter class id, or ABSENT (None)
    contrast: float         # factor applied to the under-letter
    sample_seed: int
    noise_sigma: float = 0.0


@dataclass
class Dataset:
    config: object          # SynthConfig, or None when read from a file
    samples: list
    split: str = ""
    global_seed: int = 0

    def n_classes(self):
        return self.samples[0].masks.shape[0] if self.samples else 0

    def canvas(self):
        if self.samples:
            return tuple(self.samples[0].input.shape)
        return self.config.canvas if self.config is not None else (0, 0)


def translate(image, dx, dy):
    """Shift pixels by (dx, dy): column += dx, row += dy.

    Vacated regions are zero-filled; pixels shifted off-canvas are
    dropped. Shifts at least as large as the canvas yield all zeros.
    """
    image = np.asarray(image)
    h, w = image.shape
    dx, dy = int(dx), int(dy)
    out = np.zeros_like(image)
    y0, y1 = max(0, -dy), min(h, h - dy)
    x0, x1 = max(0, -dx), min(w, w - dx)
    if y1 > y0 and x1 > x0:
        out[y0 + dy:y1 + dy, x0 + dx:x1 + dx] = image[y0:y1, x0:x1]
    return out


def composite(under, upper, contrast):
    """Opaque-ink overlay: pixel-wise max(contrast * under, upper)."""
    under = np.asarray(under, dtype=np.float32)
    upper = np.asarray(upper, dtype=np.float32)
    if under.shape != upper.shape:
        raise ValueError(
            f"shape mismatch: under {under.shape} vs upper {upper.shape}")
    if not 0.0 < contrast <= 1.0:
        raise ValueError(f"contrast must lie in (0, 1], got {contrast}")
    return np.maximum(np.float32(contrast) * under, upper)


def add_gaussian_noise(image, sigma, rng):
    """Add N(0, sigma^2) per pixel and clip to [0, 1].

    sigma = 0 returns the input unchanged without consuming any draws,
    so noiseless configurations leave the generator stream untouched.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return image
    image = np.asarray(image)
    noise = rng.normals(image.size).reshape(image.shape) * sigma
    return np.clip(image + noise, 0.0, 1.0).astype(np.float32)


def _draw_offset_pair(rng, offset_max):
    dx = rng.randint(-offset_max, offset_max)
    dy = rng.randint(-offset_max, offset_max)
    return dx, dy


def _bboxes_intersect(mask_a, mask_b):
    ra = np.flatnonzero(mask_a.any(axis=1))
    ca = np.flatnonzero(mask_a.any(axis=0))
    rb = np.flatnonzero(mask_b.any(axis=1))
    cb = np.flatnonzero(mask_b.any(axis=0))
    if ra.size == 0 or rb.size == 0:
        return False
    rows = ra[0] <= rb[-1] and rb[0] <= ra[-1]
    cols = ca[0] <= cb[-1] and cb[0] <= ca[-1]
    return rows and cols


def _check_pool(pool, config):
    for c in config.class_set:
        if c not in pool or len(pool[c]) == 0:
            raise ValueError(f"pool for class {c} is empty")


def make_sample(pool, config, sample_seed):
    """Synthesize one sample from its derived seed.

    Draw order is fixed: singleton coin, class choice, instance choice,
    per-letter offsets, contrast, then (pairs only) offset redraws until
    both translated masks keep >= min_ink_pixels ink pixels and their
    bounding boxes intersect, then noise. Changing this order changes
    every downstream dataset, so it is part of the format contract.
    """
    _check_pool(pool, config)
    rng = Rng(sample_seed)
    classes = config.class_set
    n = len(classes)
    h, w = config.canvas
    threshold = config.mask_threshold

    singleton = rng.random() < config.p_single

    if singleton:
        class_a = classes[rng.below(n)]
        class_b = ABSENT
    else:
        if n < 2:
            raise GenerationError(
                "pair sample requested but class_set has a single class")
        ia = rng.below(n)
        ib = rng.below(n - 1)
        if ib >= ia:
            ib += 1
        class_a = classes[ia]
        class_b = classes[ib]

    inst_a = pool[class_a][rng.below(len(pool[class_a]))]
    if class_b is not ABSENT:
        inst_b = pool[class_b][rng.below(len(pool[class_b]))]

    if inst_a.image.shape != (h, w) or (
            class_b is not ABSENT and inst_b.image.shape != (h, w)):
        raise ValueError(f"pool instances do not match canvas {config.canvas}")

    off_a = _draw_offset_pair(rng, config.offset_max)
    if class_b is not ABSENT:
        off_b = _draw_offset_pair(rng, config.offset_max)

    c_min, c_max = config.contrast_range
    contrast = rng.uniform(c_min, c_max)

    if class_b is ABSENT:
        moved_a = translate(inst_a.image, *off_a)
        mask_a = binarize_mask(moved_a, threshold)
        image = (np.float32(contrast) * moved_a).astype(np.float32)
    else:
        attempt = 1
        while True:
            moved_a = translate(inst_a.image, *off_a)
            moved_b = translate(inst_b.image, *off_b)
            mask_a = binarize_mask(moved_a, threshold)
            mask_b = binarize_mask(moved_b, threshold)
            if (int(mask_a.sum()) >= config.min_ink_pixels
                    and int(mask_b.sum()) >= config.min_ink_pixels
                    and _bboxes_intersect(mask_a, mask_b)):
                break
            attempt += 1
            if attempt > _MAX_PLACE_ATTEMPTS:
                raise GenerationError(
                    f"no acceptable letter placement in "
                    f"{_MAX_PLACE_ATTEMPTS} attempts")
            off_a = _draw_offset_pair(rng, config.offset_max)
            off_b = _draw_offset_pair(rng, config.offset_max)
        image = composite(moved_a, moved_b, contrast)

    image = add_gaussian_noise(image, config.noise_sigma, rng)

    masks = np.zeros((n, h, w), dtype=np.uint8)
    masks[classes.index(class_a)] = mask_a
    if class_b is not ABSENT:
        masks[classes.index(class_b)] = mask_b

    return Sample(
        input=np.asarray(image, dtype=np.float32),
        masks=masks,
        class_a=class_a,
        class_b=class_b,
        contrast=float(contrast),
        sample_seed=int(sample_seed),
        noise_sigma=float(config.noise_sigma),
    )


def generate_dataset(pool, config, count, global_seed, split="", workers=1):
    """Generate count samples; sample i uses derive_seed(global_seed, i).

    Per-index seeding makes the result independent of scheduling, so a
    chunked parallel run must match a sequential one bit for bit.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    _check_pool(pool, config)

    def build(i):
        try:
            return make_sample(pool, config, derive_seed(global_seed, i))
        except GenerationError as exc:
            raise GenerationError(exc.message, index=i) from None

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            samples = list(pool_exec.map(build, range(count)))
    else:
        samples = [build(i) for i in range(count)]

    return Dataset(config=config, samples=samples, split=split,
                   global_seed=int(global_seed) & ((1 << 64) - 1))


def _quantize_u8(image):
    scaled = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def _quantize_u16(value):
    value = min(max(float(value), 0.0), 1.0)
    return int(np.floor(value * 65535.0 + 0.5))


def write_dataset(dataset, sink):
    """Serialize a dataset; returns the byte count written.

    Layout (little-endian): header = magic "OVLS", version u16, n_samples
    u32, height u16, width u16, n_classes u8, flags u8 (bit0 = bit-packed
    masks), global_seed u64, 2 reserved zero bytes (26 bytes). Each
    sample: class_a u8, class_b u8 (0xFF = singleton), contrast u16 and
    noise_sigma u16 as round(x * 65535), sample_seed u64 (14 bytes), the
    input image as round(pixel * 255) bytes, then one bit-packed mask per
    class, row-major, MSB first.
    """
    samples = dataset.samples
    if not samples:
        raise ValueError("cannot serialize an empty dataset")
    h, w = samples[0].input.shape
    n_classes = samples[0].masks.shape[0]
    for i, s in enumerate(samples):
        if s.input.shape != (h, w) or s.masks.shape != (n_classes, h, w):
            raise ValueError(f"sample {i} has inconsistent shapes")

    close = False
    if isinstance(sink, str):
        sink = open(sink, "wb")
        close = True
    try:
        written = sink.write(_HEADER.pack(
            _MAGIC, _VERSION, len(samples), h, w, n_classes,
            _FLAG_PACKED_MASKS, dataset.global_seed & ((1 << 64) - 1),
            b"\x00\x00"))
        for s in samples:
            class_b = 0xFF if s.class_b is ABSENT else int(s.class_b)
            written += sink.write(_SAMPLE_META.pack(
                int(s.class_a), class_b,
                _quantize_u16(s.contrast), _quantize_u16(s.noise_sigma),
                s.sample_seed & ((1 << 64) - 1)))
            written += sink.write(_quantize_u8(s.input).tobytes())
            for k in range(n_classes):
                written += sink.write(
                    np.packbits(s.masks[k].reshape(-1)).tobytes())
        return written
    finally:
        if close:
            sink.close()


def read_dataset(source):
    """Parse a dataset container back into a Dataset.

    The container carries no synthesis configuration or split tag, so
    the result has config None and an empty split; per-sample fields
    (including noise_sigma) come back exactly as quantized at write
    time. Malformed input raises FormatError naming the byte offset.
    """
    close = False
    if isinstance(source, str):
        source = open(source, "rb")
        close = True
    try:
        data = source.read()
    finally:
        if close:
            source.close()

    if len(data) < _HEADER.size:
        raise FormatError(
            f"truncated header: {len(data)} bytes, need {_HEADER.size}",
            offset=len(data))
    magic, version, n_samples, h, w, n_classes, flags, global_seed, reserved = \
        _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", offset=0)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if h < 1 or w < 1:
        raise FormatError(f"invalid canvas {h}x{w}", offset=10)
    if n_classes < 1:
        raise FormatError(f"invalid class count {n_classes}", offset=14)
    if flags != _FLAG_PACKED_MASKS:
        raise FormatError(f"unsupported flags 0x{flags:02x}", offset=15)
    if reserved != b"\x00\x00":
        raise FormatError("reserved bytes must be zero", offset=24)

    mask_bytes = (h * w + 7) // 8
    sample_size = _SAMPLE_META.size + h * w + n_classes * mask_bytes
    expected = _HEADER.size + n_samples * sample_size
    if len(data) < expected:
        raise FormatError(
            f"truncated stream: {len(data)} bytes, need {expected}",
            offset=len(data))
    if len(data) > expected:
        raise FormatError(
            f"{len(data) - expected} trailing bytes after last sample",
            offset=expected)

    samples = []
    pos = _HEADER.size
    for i in range(n_samples):
        class_a, class_b_raw, contrast_q, sigma_q, sample_seed = \
            _SAMPLE_META.unpack_from(data, pos)
        pos += _SAMPLE_META.size
        image = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
        image = (image.astype(np.float32) / np.float32(255.0)).reshape(h, w)
        pos += h * w
        masks = np.empty((n_classes, h, w), dtype=np.uint8)
        for k in range(n_classes):
            bits = np.frombuffer(data, dtype=np.uint8,
                                 count=mask_bytes, offset=pos)
            masks[k] = np.unpackbits(bits, count=h * w).reshape(h, w)
            pos += mask_bytes
        samples.append(Sample(
            input=image,
            masks=masks,
            class_a=int(class_a),
            class_b=ABSENT if class_b_raw == 0xFF else int(class_b_raw),
            contrast=contrast_q / 65535.0,
            sample_seed=int(sample_seed),
            noise_sigma=sigma_q / 65535.0,
        ))

    return Dataset(config=None, samples=samples, split="",
                   global_seed=int(global_seed))
