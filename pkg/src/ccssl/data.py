"""Datasets, augmentations and batch sampling.

Images are float64 arrays shaped ``(n, height, width, channels)`` with
values in [0, 1]. Augmentations are split into a parameter draw (all the
randomness) and a deterministic apply step, so every branch can be forced
from tests.
"""

import os
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, FormatError

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_CLASSES = 10

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")
COLORS = {
    "red": (0.95, 0.15, 0.15),
    "green": (0.15, 0.85, 0.2),
    "blue": (0.2, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.15),
    "magenta": (0.9, 0.2, 0.85),
    "cyan": (0.15, 0.85, 0.9),
}
# Fixed across seeds so a class always means the same combination.
_COMBO_ORDER_SEED = 20220501


@dataclass
class ImageSet:
    images: np.ndarray
    labels: np.ndarray
    ood: np.ndarray = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ood is None:
            self.ood = np.zeros(len(self.labels), dtype=bool)
        self.ood = np.asarray(self.ood, dtype=bool)
        if not (len(self.images) == len(self.labels) == len(self.ood)):
            raise ConfigError("images, labels and ood flags must have equal length")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]


@dataclass
class BatchPair:
    labeled_images: np.ndarray
    labels: np.ndarray
    unlabeled_images: np.ndarray
    labeled_index: np.ndarray
    unlabeled_index: np.ndarray


@dataclass
class SynthSpec:
    num_known: int = 6
    num_unknown: int = 4
    labels_per_class: int = 20
    num_unlabeled: int = 2000
    contamination: float = 0.4
    noise_fraction: float = 0.25
    test_per_class: int = 100
    image_size: int = 16
    position_jitter: float = 0.25
    scale_range: tuple = (0.22, 0.4)
    background_max: float = 0.4
    pixel_noise: float = 0.08

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic dataset fields: {sorted(unknown)}")
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)

    def validate(self):
        if not 0.0 <= self.contamination <= 1.0:
            raise ConfigError(f"contamination must lie in [0, 1], got {self.contamination}")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ConfigError(f"noise_fraction must lie in [0, 1], got {self.noise_fraction}")
        if self.num_known < 1 or self.num_unknown < 0:
            raise ConfigError("need at least one known class and a non-negative unknown count")
        if self.num_known + self.num_unknown > len(SHAPES) * len(COLORS):
            raise ConfigError(f"at most {len(SHAPES) * len(COLORS)} shape/color classes")
        if self.image_size < 4:
            raise ConfigError("image_size must be at least 4")


def class_combinations(total):
    """First ``total`` (shape, color) pairs in the fixed class order."""
    combos = [(s, c) for s in SHAPES for c in COLORS]
    order = np.random.default_rng(_COMBO_ORDER_SEED).permutation(len(combos))
    return [combos[i] for i in order[:total]]


def _shape_mask(shape, dy, dx, r):
    ady, adx = np.abs(dy), np.abs(dx)
    if shape == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if shape == "square":
        return np.maximum(ady, adx) <= 0.8 * r
    if shape == "diamond":
        return ady + adx <= 1.1 * r
    if shape == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        return ((adx <= 0.3 * r) & (ady <= r)) | ((ady <= 0.3 * r) & (adx <= r))
    if shape == "triangle":
        return (dy >= -r) & (dy <= 0.8 * r) & (adx <= (dy + r) * 0.55)
    if shape == "hbar":
        return (ady <= 0.3 * r) & (adx <= r)
    if shape == "vbar":
        return (adx <= 0.3 * r) & (ady <= r)
    raise ConfigError(f"unknown shape {shape!r}")


def render_shapes(shape, color, n, spec, rng):
    """Draw ``n`` noisy images of one shape/color combination."""
    s = spec.image_size
    grid = np.arange(s) + 0.5
    yy, xx = grid[None, :, None], grid[None, None, :]
    jitter = spec.position_jitter * s
    cy = s / 2 + rng.uniform(-jitter, jitter, size=(n, 1, 1))
    cx = s / 2 + rng.uniform(-jitter, jitter, size=(n, 1, 1))
    r = s * rng.uniform(*spec.scale_range, size=(n, 1, 1))
    mask = _shape_mask(shape, yy - cy, xx - cx, r)[..., None]
    bg = rng.uniform(0, spec.background_max, size=(n, 1, 1, 1))
    bg = bg + rng.uniform(-0.05, 0.05, size=(n, 1, 1, 3))
    fg = np.asarray(COLORS[color]) * rng.uniform(0.75, 1.0, size=(n, 1, 1, 1))
    img = np.where(mask, fg, bg)
    img = img + spec.pixel_noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _balanced_labels(num_classes, n, rng):
    labels = np.arange(n) % num_classes
    return rng.permutation(labels)


def _render_labels(labels, combos, spec, rng):
    out = np.empty((len(labels), spec.image_size, spec.image_size, 3))
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        shape, color = combos[cls]
        out[idx] = render_shapes(shape, color, len(idx), spec, rng)
    return out


def synth_generate(spec, seed):
    """Procedural labeled / contaminated unlabeled / test splits.

    Known classes are shape/color combinations; the unlabeled pool mixes
    them with held-out combinations and uniform-noise images. Unlabeled
    OOD samples carry label -1.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    c, k = spec.num_known, spec.num_unknown
    combos = class_combinations(c + k)

    y_lab = np.repeat(np.arange(c), spec.labels_per_class)
    labeled = ImageSet(_render_labels(y_lab, combos, spec, rng), y_lab)

    n_ood = int(round(spec.contamination * spec.num_unlabeled))
    n_id = spec.num_unlabeled - n_ood
    n_noise = n_ood if k == 0 else int(round(spec.noise_fraction * n_ood))
    n_unknown = n_ood - n_noise

    y_id = _balanced_labels(c, n_id, rng)
    imgs = [_render_labels(y_id, combos, spec, rng)]
    if n_unknown:
        y_unk = c + _balanced_labels(k, n_unknown, rng)
        imgs.append(_render_labels(y_unk, combos, spec, rng))
    imgs.append(rng.uniform(0.0, 1.0, size=(n_noise, spec.image_size, spec.image_size, 3)))
    u_images = np.concatenate(imgs, axis=0)
    u_labels = np.concatenate([y_id, np.full(n_ood, -1)])
    u_ood = np.concatenate([np.zeros(n_id, bool), np.ones(n_ood, bool)])
    perm = rng.permutation(spec.num_unlabeled)
    unlabeled = ImageSet(u_images[perm], u_labels[perm], u_ood[perm])

    y_test = np.repeat(np.arange(c), spec.test_per_class)
    test = ImageSet(_render_labels(y_test, combos, spec, rng), y_test)
    return labeled, unlabeled, test


# --------------------------------------------------------------------------
# CIFAR binary format


def read_cifar_records(path):
    """Parse one CIFAR-10 binary file into ``(images, labels)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    n, rem = divmod(len(raw), CIFAR_RECORD)
    if rem:
        raise FormatError(f"{path}: truncated record at byte offset {n * CIFAR_RECORD} "
                          f"({rem} of {CIFAR_RECORD} bytes)")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = buf[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise FormatError(f"{path}: label byte {labels[bad[0]]} >= {CIFAR_CLASSES} "
                          f"at byte offset {bad[0] * CIFAR_RECORD}")
    planes = buf[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return images, labels


def _cifar_files(path):
    if os.path.isdir(path):
        train = sorted(os.path.join(path, f) for f in os.listdir(path)
                       if f.startswith("data_batch") and f.endswith(".bin"))
        test = os.path.join(path, "test_batch.bin")
        return train, [test] if os.path.exists(test) else []
    return [path], []


def _read_many(files):
    if not files:
        return np.zeros((0, CIFAR_SIDE, CIFAR_SIDE, 3)), np.zeros(0, np.int64)
    parts = [read_cifar_records(f) for f in files]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def load_cifar_binary(path, class_whitelist=None, labels_per_class=4, seed=0, test_path=None):
    """Open-set split of CIFAR-10 binaries.

    ``path`` is a single ``.bin`` file or the extracted
    ``cifar-10-batches-bin`` directory. Labels are remapped to positions in
    ``class_whitelist``; unlabeled images from other classes are tagged OOD.
    The test set keeps whitelisted classes only.
    """
    whitelist = list(range(CIFAR_CLASSES)) if class_whitelist is None else list(class_whitelist)
    if len(set(whitelist)) != len(whitelist) or not all(0 <= c < CIFAR_CLASSES for c in whitelist):
        raise ConfigError(f"bad class whitelist {whitelist}")
    train_files, test_files = _cifar_files(path)
    if test_path is not None:
        test_files = [test_path]
    images, raw_labels = _read_many(train_files)
    remap = np.full(CIFAR_CLASSES, -1)
    remap[whitelist] = np.arange(len(whitelist))
    labels = remap[raw_labels]

    rng = np.random.default_rng(seed)
    chosen = []
    for cls in range(len(whitelist)):
        pool = np.flatnonzero(labels == cls)
        if len(pool) < labels_per_class:
            raise ConfigError(f"class {whitelist[cls]} has {len(pool)} images, "
                              f"need {labels_per_class}")
        chosen.append(rng.choice(pool, size=labels_per_class, replace=False))
    chosen = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, np.intp)
    rest = np.setdiff1d(np.arange(len(labels)), chosen)

    labeled = ImageSet(images[chosen], labels[chosen])
    unlabeled = ImageSet(images[rest], labels[rest], labels[rest] < 0)
    t_images, t_raw = _read_many(test_files)
    keep = remap[t_raw] >= 0
    test = ImageSet(t_images[keep], remap[t_raw][keep])
    return labeled, unlabeled, test


def write_cifar_records(path, images, labels):
    """Inverse of :func:`read_cifar_records` (pixels rounded to bytes)."""
    images = np.asarray(images)
    px = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    planes = px.transpose(0, 3, 1, 2).reshape(len(px), -1)
    rec = np.concatenate([np.asarray(labels, np.uint8)[:, None], planes], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


# --------------------------------------------------------------------------
# augmentation

WEAK_SHIFT = 0.125
JITTER = 0.4
HUE_JITTER = 0.1
JITTER_P = 0.8
GRAY_P = 0.2
CROP_SCALE = (0.2, 1.0)
CROP_RATIO = (3 / 4, 4 / 3)
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class WeakParams:
    flip: np.ndarray
    dy: np.ndarray
    dx: np.ndarray

    @classmethod
    def identity(cls, n):
        z = np.zeros(n, dtype=np.intp)
        return cls(np.zeros(n, bool), z, z.copy())


def draw_weak_params(rng, n, height, width):
    my, mx = int(round(WEAK_SHIFT * height)), int(round(WEAK_SHIFT * width))
    return WeakParams(
        flip=rng.random(n) < 0.5,
        dy=rng.integers(-my, my + 1, size=n),
        dx=rng.integers(-mx, mx + 1, size=n),
    )


def hflip(images, which=None):
    out = images.copy()
    if which is None:
        return out[:, :, ::-1].copy()
    out[which] = images[which][:, :, ::-1]
    return out


def translate(images, dy, dx):
    """Shift each image by (dy, dx) pixels, filling with edge values."""
    n, h, w, _ = images.shape
    rows = np.clip(np.arange(h)[None, :] - np.asarray(dy)[:, None], 0, h - 1)
    cols = np.clip(np.arange(w)[None, :] - np.asarray(dx)[:, None], 0, w - 1)
    return images[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]


def apply_weak(images, params):
    out = hflip(images, params.flip) if params.flip.any() else images.copy()
    if np.any(params.dy) or np.any(params.dx):
        out = translate(out, params.dy, params.dx)
    return out


def weak_augment_batch(images, rng):
    """Random horizontal flip then a shift of up to 12.5% of each side."""
    n, h, w, _ = images.shape
    return apply_weak(images, draw_weak_params(rng, n, h, w))


def weak_augment(image, rng):
    return weak_augment_batch(image[None], rng)[0]


@dataclass
class StrongParams:
    crop: np.ndarray            # (n, 4): top, left, height, width (float pixels)
    jitter: np.ndarray          # (n,) bool
    brightness: np.ndarray
    contrast: np.ndarray
    saturation: np.ndarray
    hue: np.ndarray
    gray: np.ndarray
    flip: np.ndarray

    @classmethod
    def identity(cls, n, height, width):
        ones, zeros = np.ones(n), np.zeros(n)
        crop = np.tile([0.0, 0.0, float(height), float(width)], (n, 1))
        no = np.zeros(n, bool)
        return cls(crop, no, ones, ones.copy(), ones.copy(), zeros, no.copy(), no.copy())


def _draw_crops(rng, n, height, width, attempts=10):
    """Random-resized-crop boxes; the first valid of `attempts` draws wins."""
    area = height * width
    target = area * rng.uniform(*CROP_SCALE, size=(n, attempts))
    ratio = np.exp(rng.uniform(np.log(CROP_RATIO[0]), np.log(CROP_RATIO[1]), size=(n, attempts)))
    cw, ch = np.sqrt(target * ratio), np.sqrt(target / ratio)
    ok = (cw <= width) & (ch <= height)
    first = ok.argmax(axis=1)
    rows = np.arange(n)
    ch, cw = ch[rows, first], cw[rows, first]
    u = rng.random((n, 2))
    crops = np.stack([u[:, 0] * (height - ch), u[:, 1] * (width - cw), ch, cw], axis=1)
    crops[~ok.any(axis=1)] = 0.0, 0.0, height, width
    return crops


def draw_strong_params(rng, n, height, width):
    lo, hi = 1 - JITTER, 1 + JITTER
    return StrongParams(
        crop=_draw_crops(rng, n, height, width),
        jitter=rng.random(n) < JITTER_P,
        brightness=rng.uniform(lo, hi, size=n),
        contrast=rng.uniform(lo, hi, size=n),
        saturation=rng.uniform(lo, hi, size=n),
        hue=rng.uniform(-HUE_JITTER, HUE_JITTER, size=n),
        gray=rng.random(n) < GRAY_P,
        flip=rng.random(n) < 0.5,
    )


def resized_crop(images, crops):
    """Bilinear resample of each crop box back to the full image size."""
    n, h, w, _ = images.shape
    top, left, ch, cw = (crops[:, i][:, None] for i in range(4))
    ys = np.clip(top + (np.arange(h) + 0.5) * ch / h - 0.5, 0, h - 1)
    xs = np.clip(left + (np.arange(w) + 0.5) * cw / w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, :, None, None]
    wx = (xs - x0)[:, None, :, None]
    # separable: interpolate rows, then columns
    b = np.arange(n)[:, None]
    rows = images[b, y0] * (1 - wy) + images[b, y1] * wy

    def cols(xi):
        return np.take_along_axis(rows, xi[:, None, :, None], axis=2)

    return cols(x0) * (1 - wx) + cols(x1) * wx


def _gray(images):
    return images @ GRAY_WEIGHTS


def _hue_rotation(angle):
    """Rotation about the gray axis of RGB space, one matrix per angle."""
    angle = np.asarray(angle, dtype=float)
    k = np.ones(3) / np.sqrt(3)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    c, s = np.cos(angle)[..., None, None], np.sin(angle)[..., None, None]
    return c * np.eye(3) + s * kx + (1 - c) * np.outer(k, k)


def color_jitter(images, brightness, contrast, saturation, hue):
    """Brightness, contrast, saturation and hue with one factor set per image."""
    single = images.ndim == 3
    img = images[None] if single else images
    b, c, s, hue = (np.atleast_1d(np.asarray(v, dtype=float)) for v in
                    (brightness, contrast, saturation, hue))
    col = (slice(None), None, None, None)
    img = np.clip(img * b[col], 0, 1)
    m = _gray(img).mean(axis=(1, 2))
    img = np.clip((img - m[col]) * c[col] + m[col], 0, 1)
    g = _gray(img)[..., None]
    img = np.clip((img - g) * s[col] + g, 0, 1)
    rot = _hue_rotation(2 * np.pi * hue)
    n, h, w, _ = img.shape
    img = np.clip((img.reshape(n, h * w, 3) @ rot.transpose(0, 2, 1)).reshape(n, h, w, 3), 0, 1)
    return img[0] if single else img


def apply_strong(images, p):
    n, h, w, _ = images.shape
    full = np.array([0.0, 0.0, h, w])
    out = images.copy()
    recrop = ~np.all(p.crop == full, axis=1)
    if recrop.any():
        out[recrop] = resized_crop(images[recrop], p.crop[recrop])
    if p.jitter.any():
        j = p.jitter
        out[j] = color_jitter(out[j], p.brightness[j], p.contrast[j], p.saturation[j], p.hue[j])
    if p.gray.any():
        out[p.gray] = _gray(out[p.gray])[..., None]
    if p.flip.any():
        out = hflip(out, p.flip)
    return np.clip(out, 0.0, 1.0)


def strong_augment_batch(images, rng):
    """Crop-resize, color jitter, random grayscale and flip."""
    n, h, w, _ = images.shape
    return apply_strong(images, draw_strong_params(rng, n, h, w))


def strong_augment(image, rng):
    return strong_augment_batch(image[None], rng)[0]


# --------------------------------------------------------------------------
# batching


def compose_batch(labeled, unlabeled, batch_size, mu, rng):
    """Uniform draw with replacement of B labeled and mu*B unlabeled images."""
    if batch_size <= 0 or mu <= 0:
        raise ConfigError(f"batch size and mu must be positive, got B={batch_size}, mu={mu}")
    if len(labeled) == 0 or len(unlabeled) == 0:
        raise ConfigError("cannot sample from an empty pool")
    li = rng.integers(0, len(labeled), size=batch_size)
    ui = rng.integers(0, len(unlabeled), size=mu * batch_size)
    return BatchPair(labeled.images[li], labeled.labels[li], unlabeled.images[ui], li, ui)
