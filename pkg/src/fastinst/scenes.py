"""Procedural shape scenes with instance annotations.

Shapes are painted back to front; each annotation stores only the visible
region, so masks within an image never overlap. Class identity is the shape
geometry; fill color is random.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

SHAPE_NAMES = ("circle", "square", "triangle", "diamond", "ring", "cross")
PRNG_NAME = "numpy.PCG64 seeded by SeedSequence([seed, purpose, index, attempt])"

# Circumradius as a fraction of the short edge. Masks are predicted on the
# stride-8 grid, so shapes must span several cells to be segmentable.
SIZE_RANGE = (0.15, 0.28)
MAX_OVERLAP = 0.2
PLACEMENT_TRIES = 20

_PURPOSE = {"scene": 1, "augment": 2, "order": 3, "init": 4}


@dataclass
class DatasetSpec:
    num_classes: int = 3
    image_size: tuple[int, int] = (96, 96)
    instances_per_image: tuple[int, int] = (2, 6)
    min_instance_area: int = 16
    seed: int = 0
    num_images: int = 8

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.instances_per_image = tuple(int(s) for s in self.instances_per_image)
        if self.num_classes < 1 or self.num_classes > len(SHAPE_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPE_NAMES)}]")
        h, w = self.image_size
        if h % 32 or w % 32 or h <= 0 or w <= 0:
            raise ValueError(f"image size {self.image_size} must be positive multiples of 32")
        lo, hi = self.instances_per_image
        if lo < 1 or hi < lo:
            raise ValueError("instances_per_image must be a range with lo >= 1")


@dataclass
class InstanceTarget:
    class_id: int
    mask: np.ndarray  # bool (H, W)


@dataclass
class SceneSample:
    image: np.ndarray  # float32 (3, H, W) in [0, 1]
    instances: list[InstanceTarget] = field(default_factory=list)
    image_id: int = 0

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def rng_for(seed: int, purpose: str, index: int, attempt: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _PURPOSE[purpose], index, attempt])))


# -- rasterization ---------------------------------------------------------

def rasterize(kind: str, cx: float, cy: float, size: float, angle: float, h: int, w: int) -> np.ndarray:
    """Boolean coverage of pixel centers for one shape. ``size`` is the circumradius."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dx, dy = xs - cx, ys - cy
    ca, sa = math.cos(angle), math.sin(angle)
    rx, ry = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "circle":
        return dx * dx + dy * dy <= size * size
    if kind == "square":
        half = size / math.sqrt(2)
        return (np.abs(rx) <= half) & (np.abs(ry) <= half)
    if kind == "diamond":
        return np.abs(rx) + 0.6 * np.abs(ry) <= size * 0.8
    if kind == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= size * size) & (r2 >= (0.55 * size) ** 2)
    if kind == "cross":
        arm = size * 0.3
        return ((np.abs(rx) <= arm) & (np.abs(ry) <= size)) | ((np.abs(ry) <= arm) & (np.abs(rx) <= size))
    if kind == "triangle":
        inside = np.ones((h, w), dtype=bool)
        for k in range(3):
            a = angle + k * 2 * math.pi / 3 + math.pi / 3
            # half-plane of each edge: n . p <= apothem
            nx, ny = math.cos(a), math.sin(a)
            inside &= nx * dx + ny * dy <= size * 0.5
        return inside
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.1, 0.9, size=(3, 1, 1))
    ys, xs = np.mgrid[0:h, 0:w] / max(h, w)
    gx, gy = rng.uniform(-0.3, 0.3, size=(2, 3, 1, 1))
    freq = rng.uniform(4, 12)
    phase = rng.uniform(0, 2 * math.pi)
    texture = 0.06 * np.sin(freq * (xs + ys) * math.pi + phase)
    noise = rng.normal(0, 0.03, size=(3, h, w))
    return np.clip(base + gx * xs + gy * ys + texture + noise, 0, 1)


def compose(shapes: list[dict], h: int, w: int, background: Optional[np.ndarray] = None,
            min_instance_area: int = 1, image_id: int = 0) -> SceneSample:
    """Paint ``shapes`` in list order (later ones on top) and keep visible regions.

    Each shape dict has keys kind, class_id, cx, cy, size, angle, color.
    """
    image = np.zeros((3, h, w)) if background is None else background.copy()
    owner = np.full((h, w), -1, dtype=np.int64)
    for i, s in enumerate(shapes):
        cover = rasterize(s["kind"], s["cx"], s["cy"], s["size"], s.get("angle", 0.0), h, w)
        image[:, cover] = np.asarray(s["color"], dtype=np.float64)[:, None]
        owner[cover] = i
    instances = []
    for i, s in enumerate(shapes):
        visible = owner == i
        if visible.sum() >= max(1, min_instance_area):
            instances.append(InstanceTarget(int(s["class_id"]), visible))
    return SceneSample(image.astype(np.float32), instances, image_id)


def generate_scene(spec: DatasetSpec, index: int, max_attempts: int = 16) -> SceneSample:
    if index < 0:
        raise ValueError("index must be nonnegative")
    h, w = spec.image_size
    for attempt in range(max_attempts):
        rng = rng_for(spec.seed, "scene", index, attempt)
        bg = _background(rng, h, w)
        n = int(rng.integers(spec.instances_per_image[0], spec.instances_per_image[1] + 1))
        short = min(h, w)
        occupied = np.zeros((h, w), dtype=bool)
        shapes = []
        for _ in range(n):
            # resample placement a few times to keep most of each shape visible
            for _try in range(PLACEMENT_TRIES):
                cls = int(rng.integers(1, spec.num_classes + 1))
                shape = dict(
                    kind=SHAPE_NAMES[cls - 1], class_id=cls,
                    cx=float(rng.uniform(0.1 * w, 0.9 * w)), cy=float(rng.uniform(0.1 * h, 0.9 * h)),
                    size=float(rng.uniform(*SIZE_RANGE) * short), angle=float(rng.uniform(0, 2 * math.pi)),
                    color=rng.uniform(0, 1, size=3).tolist(),
                )
                cover = rasterize(shape["kind"], shape["cx"], shape["cy"], shape["size"], shape["angle"], h, w)
                if occupied[cover].mean() <= MAX_OVERLAP:
                    break
            occupied |= cover
            shapes.append(shape)
        sample = compose(shapes, h, w, bg, spec.min_instance_area, image_id=index)
        if sample.instances:
            return sample
    raise RuntimeError(f"scene {index}: no instance survived after {max_attempts} attempts")


def generate_dataset(spec: DatasetSpec, threads: Optional[int] = None) -> list[SceneSample]:
    threads = threads or int(os.environ.get("FASTINST_THREADS", "1"))
    if threads <= 1:
        return [generate_scene(spec, i) for i in range(spec.num_images)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda i: generate_scene(spec, i), range(spec.num_images)))


# -- augmentation ----------------------------------------------------------

@dataclass
class AugmentConfig:
    short_edge: tuple[int, int] = (64, 128)
    max_long_edge: int = 172
    crop: tuple[int, int] = (96, 96)


FULL_SCALE_AUGMENT = AugmentConfig(short_edge=(416, 640), max_long_edge=864, crop=(640, 640))


def _resize_plane(x: np.ndarray, h: int, w: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None]
    return F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)[0].numpy()


def augment(sample: SceneSample, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> SceneSample:
    """Scale jitter on the shorter edge, cap the longer edge, then random crop (zero-pad if short)."""
    h, w = sample.size
    short = float(rng.uniform(cfg.short_edge[0], cfg.short_edge[1]))
    scale = short / min(h, w)
    if max(h, w) * scale > cfg.max_long_edge:
        scale = cfg.max_long_edge / max(h, w)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) == (h, w):
        image = sample.image
        masks = [inst.mask for inst in sample.instances]
    else:
        image = _resize_plane(sample.image, nh, nw)
        if sample.instances:
            stack = np.stack([inst.mask for inst in sample.instances]).astype(np.float32)
            masks = list(_resize_plane(stack, nh, nw) > 0.5)
        else:
            masks = []
    ch, cw = cfg.crop
    y0 = int(rng.integers(0, nh - ch + 1)) if nh > ch else 0
    x0 = int(rng.integers(0, nw - cw + 1)) if nw > cw else 0
    out = np.zeros((3, ch, cw), dtype=np.float32)
    ph, pw = min(ch, nh - y0), min(cw, nw - x0)
    out[:, :ph, :pw] = image[:, y0:y0 + ph, x0:x0 + pw]
    instances = []
    for inst, m in zip(sample.instances, masks):
        cm = np.zeros((ch, cw), dtype=bool)
        cm[:ph, :pw] = m[y0:y0 + ph, x0:x0 + pw]
        if cm.any():
            instances.append(InstanceTarget(inst.class_id, cm))
    return SceneSample(out, instances, sample.image_id)


# -- run-length encoding ---------------------------------------------------

def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, starting with the (possibly empty) run of zeros."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return [int(c) for c in counts]


def rle_decode(counts: list[int], h: int, w: int) -> np.ndarray:
    if sum(counts) != h * w or any(c < 0 for c in counts):
        raise ValueError(f"run lengths sum to {sum(counts)}, expected {h * w}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(h, w)


# -- PPM / PGM and dataset files -------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Write (3,H,W) float in [0,1] or (H,W,3) uint8 as binary P6."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def write_pgm(path, plane: np.ndarray) -> None:
    arr = np.asarray(plane)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into float32 (3,H,W) in [0,1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    arr = np.frombuffer(data[pos:pos + 3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_dataset(samples: list[SceneSample], spec: DatasetSpec, out_dir, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for s in samples:
        name = f"images/{s.image_id:06d}.ppm"
        write_ppm(out / name, s.image)
        h, w = s.size
        images.append({"id": s.image_id, "file_name": name, "height": h, "width": w})
        for inst in s.instances:
            annotations.append({"id": ann_id, "image_id": s.image_id, "category_id": inst.class_id,
                                "area": int(inst.mask.sum()),
                                "rle": {"size": [h, w], "counts": rle_encode(inst.mask)}})
            ann_id += 1
    manifest = {
        "images": images,
        "categories": [{"id": k + 1, "name": SHAPE_NAMES[k]} for k in range(spec.num_classes)],
        "annotations": annotations,
        "spec": asdict(spec),
        "prng": PRNG_NAME,
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(path) -> tuple[list[SceneSample], dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    by_image: dict[int, list[InstanceTarget]] = {img["id"]: [] for img in manifest["images"]}
    for ann in manifest["annotations"]:
        h, w = ann["rle"]["size"]
        by_image[ann["image_id"]].append(InstanceTarget(ann["category_id"], rle_decode(ann["rle"]["counts"], h, w)))
    samples = []
    for img in manifest["images"]:
        image = read_ppm(path.parent / img["file_name"])
        samples.append(SceneSample(image, by_image[img["id"]], img["id"]))
    return samples, manifest


def quantize(sample: SceneSample) -> SceneSample:
    """Round the image to 8-bit levels, as a PPM round trip would."""
    img = np.round(np.clip(sample.image, 0, 1) * 255).astype(np.float32) / 255.0
    return SceneSample(img, sample.instances, sample.image_id)


def directory_digest(path) -> str:
    h = hashlib.sha256()
    root = Path(path)
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()
