"""Synthetic 20-class shape dataset, fold splits, episode sampling and netpbm I/O.

Each class is a shape family with its own colour and stripe texture.
Instances vary position, scale, rotation and colour jitter; half of them
also carry a distractor shape from another class in the background, so a
model has to match the support's appearance rather than just find "a shape".
"""

from __future__ import annotations

import colorsys
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

N_CLASSES = 20
MIN_AREA, MAX_AREA = 0.01, 0.60


class InvalidFold(ValueError):
    pass


class UnsupportedFormat(ValueError):
    pass


class MalformedHeader(ValueError):
    pass


# --- shape families in canonical coordinates (u, v), roughly inside [-1, 1]^2 ---

def _disk(u, v):
    return u * u + v * v <= 1.0


def _square(u, v):
    return np.maximum(abs(u), abs(v)) <= 0.8


def _triangle(u, v):
    return (v >= -0.7) & (v <= 0.85) & (abs(u) <= 0.55 * (0.85 - v))


def _ring(u, v):
    r2 = u * u + v * v
    return (r2 <= 1.0) & (r2 >= 0.5 ** 2)


def _x_cross(u, v):
    return ((abs(u - v) <= 0.35) | (abs(u + v) <= 0.35)) & (np.maximum(abs(u), abs(v)) <= 0.85)


def _hbar(u, v):
    return (abs(u) <= 1.0) & (abs(v) <= 0.3)


def _vbar(u, v):
    return (abs(u) <= 0.3) & (abs(v) <= 1.0)


def _diamond(u, v):
    return abs(u) + abs(v) <= 1.0


def _h_ellipse(u, v):
    return u * u + (v / 0.5) ** 2 <= 1.0


def _v_ellipse(u, v):
    return (u / 0.5) ** 2 + v * v <= 1.0


def _hexagon(u, v):
    return (abs(v) <= 0.85) & (abs(u) + 0.577 * abs(v) <= 0.98)


def _star(u, v):
    r = np.hypot(u, v)
    theta = np.arctan2(v, u)
    return r <= 0.6 + 0.35 * np.cos(5 * theta)


def _l_shape(u, v):
    return ((u >= -0.9) & (u <= -0.35) & (abs(v) <= 0.9)) | ((v >= 0.35) & (v <= 0.9) & (abs(u) <= 0.9))


def _t_shape(u, v):
    return ((v >= -0.9) & (v <= -0.4) & (abs(u) <= 0.9)) | ((abs(u) <= 0.28) & (v >= -0.9) & (v <= 0.9))


def _crescent(u, v):
    return (u * u + v * v <= 1.0) & ((u - 0.45) ** 2 + v * v > 0.75 ** 2)


def _plus(u, v):
    return ((abs(u) <= 0.3) & (abs(v) <= 0.9)) | ((abs(v) <= 0.3) & (abs(u) <= 0.9))


def _frame(u, v):
    m = np.maximum(abs(u), abs(v))
    return (m <= 0.9) & (m >= 0.5)


def _half_disk(u, v):
    return (u * u + (v + 0.45) ** 2 <= 1.0) & (v >= -0.45)


def _chevron(u, v):
    return (abs(v - 0.8 * abs(u)) <= 0.3) & (abs(u) <= 0.9) & (v >= -0.3)


def _dumbbell(u, v):
    return ((u - 0.5) ** 2 + v * v <= 0.45 ** 2) | ((u + 0.5) ** 2 + v * v <= 0.45 ** 2) | (
        (abs(u) <= 0.5) & (abs(v) <= 0.15))


SHAPES: dict[str, Callable] = {
    "disk": _disk, "square": _square, "triangle": _triangle, "ring": _ring,
    "x_cross": _x_cross, "hbar": _hbar, "vbar": _vbar, "diamond": _diamond,
    "h_ellipse": _h_ellipse, "v_ellipse": _v_ellipse, "hexagon": _hexagon, "star": _star,
    "l_shape": _l_shape, "t_shape": _t_shape, "crescent": _crescent, "plus": _plus,
    "frame": _frame, "half_disk": _half_disk, "chevron": _chevron, "dumbbell": _dumbbell,
}


@dataclass(frozen=True)
class ShapeClass:
    class_id: int
    kind: str
    hue: float
    stripe_freq: float
    stripe_angle: float
    scale_range: tuple[float, float] = (0.14, 0.32)


def _build_classes() -> dict[int, ShapeClass]:
    classes = {}
    for i, kind in enumerate(SHAPES):
        cid = i + 1
        classes[cid] = ShapeClass(
            class_id=cid,
            kind=kind,
            # 7 is coprime with 20, so consecutive ids get well separated hues
            hue=((i * 7) % N_CLASSES) / N_CLASSES,
            stripe_freq=2.0 + (i % 4),
            stripe_angle=(i % 5) * math.pi / 5,
        )
    return classes


CLASSES = _build_classes()


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    test_classes: tuple[int, ...]
    train_classes: tuple[int, ...]
    stride: int = 5


def make_fold(i: int, stride: int = 5) -> FoldSplit:
    """Test classes ``{stride*i+1, ..., stride*i+5}``, train on the remaining 15.

    With ``stride=4`` neighbouring folds share one class (e.g. 5 is a test
    class of folds 0 and 1) and classes 18-20 are never tested.
    """
    if i not in (0, 1, 2, 3):
        raise InvalidFold(f"fold must be 0..3, got {i}")
    if stride not in (4, 5):
        raise InvalidFold(f"fold stride must be 4 or 5, got {stride}")
    test = tuple(range(stride * i + 1, stride * i + 6))
    train = tuple(c for c in range(1, N_CLASSES + 1) if c not in test)
    return FoldSplit(fold=i, test_classes=test, train_classes=train, stride=stride)


# --- rendering ---

def _shape_mask(cls: ShapeClass, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    lo, hi = cls.scale_range
    fn = SHAPES[cls.kind]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    for _ in range(100):
        s = rng.uniform(lo, hi) * min(h, w)
        cy = rng.uniform(0.25 * h, 0.75 * h)
        cx = rng.uniform(0.25 * w, 0.75 * w)
        ang = rng.uniform(-math.pi / 9, math.pi / 9)
        dy, dx = (yy - cy) / s, (xx - cx) / s
        c, sn = math.cos(ang), math.sin(ang)
        u, v = c * dx + sn * dy, -sn * dx + c * dy
        m = fn(u, v)
        frac = m.mean()
        if MIN_AREA <= frac <= MAX_AREA:
            return m
    raise RuntimeError(f"could not place class {cls.class_id} within area bounds")


def _texture(cls: ShapeClass, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    hue = (cls.hue + rng.uniform(-0.015, 0.015)) % 1.0
    val = rng.uniform(0.75, 0.95)
    rgb = np.array(colorsys.hsv_to_rgb(hue, 0.8, val))
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    phase = rng.uniform(0, 2 * math.pi)
    t = xx * math.cos(cls.stripe_angle) + yy * math.sin(cls.stripe_angle)
    stripes = 0.5 + 0.5 * np.sin(2 * math.pi * cls.stripe_freq * 4 * t + phase)
    return rgb[:, None, None] * (0.8 + 0.2 * stripes)[None]


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.75, size=(1, 5, 5))
    tint = rng.uniform(-0.06, 0.06, size=(3, 1, 1))
    ys = np.linspace(0, 4, h)
    xs = np.linspace(0, 4, w)
    y0 = np.minimum(ys.astype(int), 3)
    x0 = np.minimum(xs.astype(int), 3)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c = coarse[0]
    smooth = (c[y0][:, x0] * (1 - fy) * (1 - fx) + c[y0 + 1][:, x0] * fy * (1 - fx)
              + c[y0][:, x0 + 1] * (1 - fy) * fx + c[y0 + 1][:, x0 + 1] * fy * fx)
    return smooth[None] + tint + rng.normal(0, 0.04, size=(3, h, w))


def generate_instance(
    cls: ShapeClass | int,
    seed: int,
    size: tuple[int, int] = (64, 64),
    distractor_classes: Optional[Sequence[int]] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one ``(image[3,H,W], mask[1,H,W])`` pair, deterministic per (class, seed, size)."""
    if isinstance(cls, int):
        cls = CLASSES[cls]
    h, w = size
    if h < 32 or w < 32:
        raise ValueError(f"image size must be at least 32x32, got {h}x{w}")
    rng = np.random.default_rng([cls.class_id, seed, h, w])
    img = _background(rng, h, w)
    pool = [c for c in (distractor_classes or range(1, N_CLASSES + 1)) if c != cls.class_id]
    if pool and rng.random() < 0.5:
        other = CLASSES[int(rng.choice(pool))]
        dm = _shape_mask(other, rng, h, w)
        img = np.where(dm[None], _texture(other, rng, h, w), img)
    mask = _shape_mask(cls, rng, h, w)
    img = np.where(mask[None], _texture(cls, rng, h, w), img)
    img = np.clip(img + rng.normal(0, 0.02, size=img.shape), 0.0, 1.0)
    return img.astype(np.float32), mask[None].astype(np.float32)


# --- episodes ---

@dataclass
class Episode:
    class_id: int
    query_image: np.ndarray
    query_mask: np.ndarray
    supports: list[tuple[np.ndarray, np.ndarray]]
    episode_id: int = 0
    fold: Optional[int] = None

    @property
    def k(self) -> int:
        return len(self.supports)

    @property
    def support_images(self) -> list[np.ndarray]:
        return [s[0] for s in self.supports]

    @property
    def support_masks(self) -> list[np.ndarray]:
        return [s[1] for s in self.supports]


def visible_at_stride(mask: np.ndarray, stride: int = 4) -> bool:
    """True if nearest-neighbour downsampling by ``stride`` keeps some foreground."""
    off = stride // 2
    return bool(mask[:, off::stride, off::stride].any())


class SyntheticSource:
    """Draws instances from the procedural generator."""

    def __init__(self, size: tuple[int, int] = (64, 64)):
        self.size = size

    def draw(self, class_id: int, rng: np.random.Generator, n: int, distractors: Sequence[int]):
        seeds = rng.choice(2 ** 31 - 1, size=4 * n + 8, replace=False)
        out, i = [], 0
        for s in seeds:
            img, mask = generate_instance(class_id, int(s), self.size, distractors)
            if i > 0 and not visible_at_stride(mask):
                continue  # supports must survive downsampling to feature resolution
            out.append((img, mask))
            i += 1
            if i == n:
                return out
        raise RuntimeError(f"class {class_id}: could not draw {n} usable instances")


class DirectorySource:
    """Reads ``images/<class>/<id>.ppm`` with matching ``masks/<class>/<id>.pgm``."""

    def __init__(self, root):
        self.root = Path(root)
        self.index: dict[int, list[str]] = {}
        for d in sorted((self.root / "images").iterdir()):
            if d.is_dir() and d.name.isdigit():
                self.index[int(d.name)] = sorted(p.stem for p in d.glob("*.ppm"))

    def load(self, class_id: int, item: str):
        img = load_image_ppm(self.root / "images" / str(class_id) / f"{item}.ppm")
        mask = load_mask_pgm(self.root / "masks" / str(class_id) / f"{item}.pgm")
        return img, mask

    def draw(self, class_id: int, rng: np.random.Generator, n: int, distractors: Sequence[int]):
        items = self.index.get(class_id, [])
        if len(items) < n:
            raise ValueError(f"class {class_id} has {len(items)} instances, episode needs {n}")
        picks = rng.choice(len(items), size=n, replace=False)
        return [self.load(class_id, items[int(p)]) for p in picks]


def sample_episode(
    split: FoldSplit,
    mode: str,
    k: int,
    rng_seed: int,
    size: tuple[int, int] = (64, 64),
    episode_id: int = 0,
    source=None,
) -> Episode:
    """Draw a class from the split's train or test set, then K supports and one query."""
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    if k not in (1, 5):
        raise ValueError(f"K must be 1 or 5, got {k}")
    source = source or SyntheticSource(size)
    rng = np.random.default_rng(rng_seed)
    classes = split.train_classes if mode == "train" else split.test_classes
    cid = int(classes[rng.integers(len(classes))])
    distractors = [c for c in split.train_classes if c != cid]
    pairs = source.draw(cid, rng, k + 1, distractors)
    q_img, q_mask = pairs[0]
    return Episode(class_id=cid, query_image=q_img, query_mask=q_mask, supports=pairs[1:],
                   episode_id=episode_id, fold=split.fold)


def export_synthetic(root, classes: Sequence[int], per_class: int, size=(64, 64), seed: int = 0) -> None:
    """Write generator output in the directory layout :class:`DirectorySource` reads."""
    root = Path(root)
    for cid in classes:
        (root / "images" / str(cid)).mkdir(parents=True, exist_ok=True)
        (root / "masks" / str(cid)).mkdir(parents=True, exist_ok=True)
        for j in range(per_class):
            img, mask = generate_instance(cid, seed * 100003 + j, size)
            write_image_ppm(img, root / "images" / str(cid) / f"{j:05d}.ppm")
            write_mask_pgm(mask, root / "masks" / str(cid) / f"{j:05d}.pgm")


# --- netpbm I/O ---

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_netpbm(path, magic: bytes):
    buf = Path(path).read_bytes()
    if buf[:2] in (b"P1", b"P2", b"P3", b"P4") or (buf[:2] in (b"P5", b"P6") and buf[:2] != magic):
        raise UnsupportedFormat(f"{path}: {buf[:2]!r} files are not supported, expected {magic!r}")
    if buf[:2] != magic:
        raise MalformedHeader(f"{path}: not a netpbm file")
    pos, vals = 2, []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if not m or not m.group(1).isdigit():
            raise MalformedHeader(f"{path}: bad header")
        vals.append(int(m.group(1)))
        pos = m.end()
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise MalformedHeader(f"{path}: missing whitespace after header")
    pos += 1
    w, h, maxval = vals
    if maxval < 1 or maxval > 255:
        raise UnsupportedFormat(f"{path}: only 8-bit files are supported (maxval {maxval})")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    if len(buf) - pos < need:
        raise MalformedHeader(f"{path}: expected {need} bytes of pixel data")
    pix = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return pix.reshape(h, w, ch).transpose(2, 0, 1), maxval


def load_image_ppm(path) -> np.ndarray:
    pix, maxval = _read_netpbm(path, b"P6")
    return (pix.astype(np.float32) / np.float32(maxval)).astype(np.float32)


def load_mask_pgm(path) -> np.ndarray:
    pix, _ = _read_netpbm(path, b"P5")
    return (pix >= 128).astype(np.float32)


def write_image_ppm(image: np.ndarray, path) -> None:
    img = np.asarray(image)
    pix = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = pix.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pix.tobytes())


def write_gray_pgm(values: np.ndarray, path) -> None:
    """Write an ``[H,W]`` or ``[1,H,W]`` array of 0..255 intensities."""
    pix = np.clip(np.rint(np.asarray(values).reshape(values.shape[-2:])), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes())


def write_mask_pgm(mask: np.ndarray, path) -> None:
    write_gray_pgm((np.asarray(mask) > 0.5) * 255.0, path)
