"""Synthetic datasets and the on-disk dataset layout.

Layout::

    <root>/dataset.txt                   kind, size, seed, count
    <root>/<group>/frames/NNNNN.png      8-bit RGB
    <root>/<group>/masks/NNNNN.png       8-bit, 0 or 255
    <root>/<group>/meta.json             shape parameters behind every mask

Three kinds are generated:

* ``static_blobs`` - one image per group, 1-3 coloured ellipses (all
  foreground) on a textured background.
* ``moving_blobs`` - videos of 8-16 frames. One large object ellipse with a
  per-video colour moves and breathes smoothly; smaller distractor ellipses
  appear for part of the video only. Only the object is foreground.
* ``coseg_groups`` - each group is a class whose images share a motif (shape
  and colour) over varied backgrounds, plus distractor shapes.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from dfnet import kv
from dfnet.errors import ConfigError, DatasetKindError, InvalidInputSizeError
from dfnet.tensor import _interp_matrix

KINDS = ("static_blobs", "moving_blobs", "coseg_groups")


@dataclass
class Group:
    name: str
    frames: np.ndarray  # N×H×W×3 uint8
    masks: np.ndarray  # N×H×W uint8 in {0, 1}
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, i: int) -> np.ndarray:
        return to_float(self.frames[i])


@dataclass
class Dataset:
    kind: str
    groups: list[Group]
    size: int = 0
    seed: int = 0

    def group(self, name: str) -> Group:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [g.name for g in self.groups]


def to_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# rasterization


def ellipse_mask(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    """Pixels whose centres (x + 0.5, y + 0.5) satisfy the rotated-ellipse inequality."""
    y, x = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = x - cx, y - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    return u * u + v * v <= 1.0


def rect_mask(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = x - cx, y - cy
    c, s = np.cos(theta), np.sin(theta)
    return (np.abs(c * dx + s * dy) <= a) & (np.abs(-s * dx + c * dy) <= b)


def triangle_mask(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = x - cx, y - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    # triangle with vertices (0, -1), (-1, 1), (1, 1) in normalized coordinates
    return (v <= 1.0) & (2 * u - v <= 1.0) & (-2 * u - v <= 1.0)


SHAPES = {"ellipse": ellipse_mask, "rect": rect_mask, "triangle": triangle_mask}


def shape_mask(size: int, desc: dict) -> np.ndarray:
    return SHAPES[desc.get("shape", "ellipse")](
        size, desc["cx"], desc["cy"], desc["a"], desc["b"], desc["theta"]
    )


# ---------------------------------------------------------------------------
# painting helpers


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.3, 0.7, size=3) * rng.uniform(0.8, 1.0)
    grid = rng.normal(0.0, 0.12, size=(5, 5, 3))
    up = _interp_matrix(size, 5, np.float64)
    smooth = np.einsum("yi,ijc,xj->yxc", up, grid, up)
    fine = rng.normal(0.0, 0.03, size=(size, size, 3))
    return base + smooth + fine


def _vivid_color(rng: np.random.Generator, hue: float | None = None) -> np.ndarray:
    h = rng.uniform() if hue is None else hue
    return np.array(colorsys.hsv_to_rgb(h, rng.uniform(0.65, 1.0), rng.uniform(0.7, 1.0)))


def _paint(img: np.ndarray, mask: np.ndarray, color: np.ndarray, rng: np.random.Generator) -> None:
    noise = rng.normal(0.0, 0.025, size=(int(mask.sum()), 3))
    img[mask] = color + noise


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# generators


def _static_sample(rng: np.random.Generator, size: int, index: int) -> Group:
    img = _background(rng, size)
    mask = np.zeros((size, size), dtype=bool)
    shapes = []
    for _ in range(int(rng.integers(1, 4))):
        a, b = rng.uniform(0.12, 0.32, size=2) * size
        r = max(a, b)
        desc = dict(
            shape="ellipse",
            cx=float(rng.uniform(r * 0.6, size - r * 0.6)),
            cy=float(rng.uniform(r * 0.6, size - r * 0.6)),
            a=float(a), b=float(b), theta=float(rng.uniform(0, np.pi)),
        )
        m = shape_mask(size, desc)
        _paint(img, m, _vivid_color(rng), rng)
        mask |= m
        shapes.append(desc)
    return Group(f"img{index:04d}", _quantize(img)[None], mask[None].astype(np.uint8), {"frames": [shapes]})


def _moving_video(rng: np.random.Generator, size: int, index: int) -> Group:
    n = int(rng.integers(8, 17))
    a0, b0 = rng.uniform(0.19, 0.30, size=2) * size
    r0 = max(a0, b0) * 1.1
    pos = rng.uniform(r0, size - r0, size=2)
    speed = rng.uniform(1.0, 2.5)
    ang = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.cos(ang), np.sin(ang)])
    theta0, omega = rng.uniform(0, np.pi), rng.uniform(-0.08, 0.08)
    phase, freq = rng.uniform(0, 2 * np.pi), rng.uniform(0.2, 0.6)
    color = _vivid_color(rng)

    distractors = []
    for _ in range(int(rng.integers(1, 4))):
        span = int(rng.integers(max(2, int(0.3 * n)), max(3, int(0.7 * n)) + 1))
        start = int(rng.integers(0, n - span + 1))
        da, db = rng.uniform(0.06, 0.13, size=2) * size
        distractors.append(dict(
            start=start, stop=start + span,
            pos=rng.uniform(0.1 * size, 0.9 * size, size=2),
            vel=rng.normal(0.0, 1.0, size=2),
            a=float(da), b=float(db), theta=float(rng.uniform(0, np.pi)),
            color=_vivid_color(rng),
        ))

    base = _background(rng, size)
    frames, masks, meta = [], [], []
    for t in range(n):
        img = base.copy() if t == 0 else base + rng.normal(0.0, 0.03, size=(size, size, 3))
        present = []
        for d in distractors:
            if d["start"] <= t < d["stop"]:
                p = d["pos"] + d["vel"] * (t - d["start"])
                desc = dict(shape="ellipse", cx=float(p[0]), cy=float(p[1]), a=d["a"], b=d["b"], theta=d["theta"])
                _paint(img, shape_mask(size, desc), d["color"], rng)
                present.append(desc)
        scale = 1.0 + 0.1 * np.sin(phase + freq * t)
        obj = dict(shape="ellipse", cx=float(pos[0]), cy=float(pos[1]),
                   a=float(a0 * scale), b=float(b0 * scale), theta=float(theta0 + omega * t))
        m = shape_mask(size, obj)
        _paint(img, m, color, rng)
        frames.append(_quantize(img))
        masks.append(m.astype(np.uint8))
        meta.append({"object": obj, "distractors": present})
        pos = pos + vel
        for axis in range(2):
            if pos[axis] < r0 or pos[axis] > size - r0:
                vel[axis] = -vel[axis]
                pos[axis] = np.clip(pos[axis], r0, size - r0)
    return Group(f"video{index:04d}", np.stack(frames), np.stack(masks), {"frames": meta})


def _coseg_class(rng: np.random.Generator, size: int, index: int) -> Group:
    kinds = list(SHAPES)
    motif = kinds[index % len(kinds)]
    hue = rng.uniform()
    n = int(rng.integers(6, 9))
    frames, masks, meta = [], [], []
    for _ in range(n):
        img = _background(rng, size)
        others = []
        for _ in range(int(rng.integers(0, 3))):
            other_kind = kinds[int(rng.integers(0, len(kinds)))]
            if other_kind == motif:
                continue
            da, db = rng.uniform(0.08, 0.16, size=2) * size
            desc = dict(shape=other_kind, cx=float(rng.uniform(0.15, 0.85) * size),
                        cy=float(rng.uniform(0.15, 0.85) * size), a=float(da), b=float(db),
                        theta=float(rng.uniform(0, np.pi)))
            _paint(img, shape_mask(size, desc), _vivid_color(rng, (hue + rng.uniform(0.25, 0.75)) % 1.0), rng)
            others.append(desc)
        a = float(rng.uniform(0.16, 0.28) * size)
        b = float(a * rng.uniform(0.7, 1.0))
        r = max(a, b) * 1.1
        obj = dict(shape=motif, cx=float(rng.uniform(r, size - r)), cy=float(rng.uniform(r, size - r)),
                   a=a, b=b, theta=float(rng.uniform(-0.3, 0.3)))
        m = shape_mask(size, obj)
        _paint(img, m, _vivid_color(rng, hue), rng)
        frames.append(_quantize(img))
        masks.append(m.astype(np.uint8))
        meta.append({"object": obj, "distractors": others})
    return Group(f"class{index:04d}", np.stack(frames), np.stack(masks), {"frames": meta, "motif": motif})


_GENERATORS = {"static_blobs": _static_sample, "moving_blobs": _moving_video, "coseg_groups": _coseg_class}


def gen_synthetic(kind: str, count: int, size: int, seed: int, out_dir=None) -> Dataset:
    """Generate a deterministic synthetic dataset; write it to ``out_dir`` if given."""
    if kind not in _GENERATORS:
        raise DatasetKindError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if size % 8 or size < 32:
        raise InvalidInputSizeError(f"size must be a multiple of 8 and >= 32, got {size}")
    if count < 1:
        raise ConfigError("count must be positive")
    rng = np.random.default_rng(seed)
    groups = []
    for i in range(count):
        g = _GENERATORS[kind](rng, size, i)
        if not all(m.sum() > 0 for m in g.masks):
            raise AssertionError("generator produced an empty mask")  # never expected
        groups.append(g)
    ds = Dataset(kind, groups, size, seed)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


# ---------------------------------------------------------------------------
# disk I/O


def write_png(path, array: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            return np.array(im).astype(np.uint16)
        if im.mode not in ("RGB", "L"):
            im = im.convert("RGB")
        return np.array(im)


def write_heatmap(path, heat: np.ndarray) -> None:
    """16-bit grayscale PNG, value = round(p · 65535)."""
    write_png(path, np.round(np.clip(heat, 0.0, 1.0) * 65535.0).astype(np.uint16))


def read_heatmap(path) -> np.ndarray:
    return read_png(path).astype(np.float64) / 65535.0


def write_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    header = {"version": kv.FORMAT_VERSION, "kind": ds.kind, "size": ds.size, "seed": ds.seed, "count": len(ds.groups)}
    (root / "dataset.txt").write_text("".join(f"{k} = {v}\n" for k, v in header.items()))
    for g in ds.groups:
        for i, (frame, mask) in enumerate(zip(g.frames, g.masks)):
            write_png(root / g.name / "frames" / f"{i:05d}.png", frame)
            write_png(root / g.name / "masks" / f"{i:05d}.png", (mask * 255).astype(np.uint8))
        (root / g.name / "meta.json").write_text(json.dumps(g.meta, sort_keys=True))


def load_dataset(root) -> Dataset:
    root = Path(root)
    header_path = root / "dataset.txt"
    header = kv.parse_lines(header_path.read_text()) if header_path.exists() else {}
    kind = header.get("kind", "unknown")
    groups = []
    for gdir in sorted(p for p in root.iterdir() if p.is_dir()):
        frame_paths = sorted((gdir / "frames").glob("*.png"))
        if not frame_paths:
            continue
        frames = np.stack([read_png(p) for p in frame_paths])
        mask_dir = gdir / "masks"
        if mask_dir.is_dir():
            masks = np.stack([(read_png(mask_dir / p.name) > 127).astype(np.uint8) for p in frame_paths])
        else:
            masks = np.zeros(frames.shape[:3], dtype=np.uint8)
        meta_path = gdir / "meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        groups.append(Group(gdir.name, frames, masks, meta))
    return Dataset(kind, groups, int(header.get("size", 0)), int(header.get("seed", 0)))
