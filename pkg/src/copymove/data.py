"""Procedural copy-move forgery samples and the on-disk dataset format.

A sample is a 256x256 RGB image in which one blob-shaped region (the source)
was copied, optionally flipped/scaled/rotated, and pasted elsewhere (the
target).  The tri-class mask labels pristine=0, source=1, target=2.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

PRISTINE, SOURCE, TARGET = 0, 1, 2
SAMPLE_SIZE = 256
MIN_AREA_FRAC, MAX_AREA_FRAC = 0.02, 0.15

MANIFEST_NAME = "manifest.txt"
META_NAME = "meta.jsonl"
FORMAT_VERSION = "cmfd-dataset/1"

_REGION_DRAWS = 100
_OFFSET_DRAWS = 200
_REGENERATIONS = 5
_REGEN_STRIDE = 10**6

# stream tags so the base image, region and transform draws are independent
_STREAM_BASE, _STREAM_REGION, _STREAM_PARAMS, _STREAM_OFFSET = 0, 1, 2, 3


class GenerationError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


@dataclass
class ForgerySample:
    image: np.ndarray  # H x W x 3 uint8
    tri_mask: np.ndarray  # H x W uint8, values in {0, 1, 2}
    meta: dict = field(default_factory=dict)

    @property
    def binary_mask(self) -> np.ndarray:
        return binary_mask(self.tri_mask)


def generate_base_image(seed: int, size: int = SAMPLE_SIZE) -> np.ndarray:
    """Deterministic synthetic photo stand-in.

    Layers a smooth colour gradient, a low-frequency texture field, 3-8
    filled shapes (some striped) and low-amplitude Gaussian noise.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    rng = _rng(seed, _STREAM_BASE)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    img = np.empty((size, size, 3), dtype=np.float64)
    for ch in range(3):
        a, b = rng.uniform(-80, 80, size=2)
        fy, fx = rng.uniform(1.0, 6.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[..., ch] = (
            rng.uniform(60, 190)
            + a * (xx - 0.5)
            + b * (yy - 0.5)
            + 20.0 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        )

    # mid-scale texture: bilinearly upsampled coarse random grid
    for cells in (8, 32):
        coarse = rng.normal(0.0, 1.0, size=(cells, cells, 3))
        fine = ndimage.zoom(coarse, (size / cells, size / cells, 1), order=1, mode="nearest")
        img += (18.0 if cells == 8 else 10.0) * fine[:size, :size]

    canvas = Image.fromarray(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(int(rng.integers(3, 9))):
        color = tuple(int(c) for c in rng.integers(0, 256, size=3))
        cx, cy = rng.uniform(0, size, size=2)
        r = rng.uniform(0.05, 0.25) * size
        kind = int(rng.integers(0, 3))
        if kind == 0:
            draw.ellipse([cx - r, cy - 0.6 * r, cx + r, cy + 0.6 * r], fill=color)
        elif kind == 1:
            draw.rectangle([cx - r, cy - r / 2, cx + r / 2, cy + r], fill=color)
        else:
            n = int(rng.integers(3, 7))
            angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
            pts = [(cx + r * math.cos(t), cy + r * math.sin(t)) for t in angles]
            draw.polygon(pts, fill=color)
        if rng.random() < 0.4:
            step = int(rng.integers(3, 9))
            stripe = tuple(int(c) for c in rng.integers(0, 256, size=3))
            x0, x1 = int(cx - r), int(cx + r)
            for x in range(x0, x1, 2 * step):
                draw.line([(x, cy - r / 2), (x + r / 3, cy + r / 2)], fill=stripe, width=2)

    out = np.asarray(canvas, dtype=np.float64)
    out += rng.normal(0.0, 3.0, size=out.shape)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n <= 1:
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def _draw_region(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    area = rng.uniform(MIN_AREA_FRAC, MAX_AREA_FRAC) * h * w
    radius = math.sqrt(area / math.pi)
    margin = radius * 1.1
    cy = rng.uniform(min(margin, h / 2), max(h - margin, h / 2))
    cx = rng.uniform(min(margin, w / 2), max(w - margin, w / 2))

    canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    if rng.random() < 0.5:
        # star-shaped random polygon around the centre
        n = int(rng.integers(5, 12))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        radii = radius * rng.uniform(0.6, 1.4, size=n)
        pts = [(cx + r * math.cos(t), cy + r * math.sin(t)) for r, t in zip(radii, angles)]
        draw.polygon(pts, fill=1)
    else:
        # ellipse union; every ellipse is centred inside the first one
        for k in range(int(rng.integers(1, 4))):
            ry = radius * rng.uniform(0.5, 1.2)
            rx = radius * rng.uniform(0.5, 1.2)
            oy, ox = (0.0, 0.0) if k == 0 else rng.uniform(-0.5, 0.5, size=2) * radius
            draw.ellipse([cx + ox - rx, cy + oy - ry, cx + ox + rx, cy + oy + ry], fill=1)
    return _largest_component(np.asarray(canvas, dtype=bool))


def sample_source_region(seed: int, size: tuple[int, int] = (SAMPLE_SIZE, SAMPLE_SIZE)) -> np.ndarray:
    """Single 8-connected blob covering 2-15% of the image, deterministic in seed."""
    h, w = size
    if h < 64 or w < 64:
        raise ValueError(f"region canvas must be at least 64x64, got {h}x{w}")
    rng = _rng(seed, _STREAM_REGION)
    lo, hi = MIN_AREA_FRAC * h * w, MAX_AREA_FRAC * h * w
    for _ in range(_REGION_DRAWS):
        mask = _draw_region(rng, h, w)
        if lo <= mask.sum() <= hi:
            return mask
    raise GenerationError(f"no source region within area bounds after {_REGION_DRAWS} draws (seed={seed})")


def _rotation_matrix(rotation_deg: float) -> np.ndarray:
    t = math.radians(rotation_deg)
    # snap so quarter turns map integer grids onto integer grids exactly
    c = round(math.cos(t), 12) + 0.0
    s = round(math.sin(t), 12) + 0.0
    # (row, col) coordinates; positive angle is counter-clockwise on screen
    return np.array([[c, -s], [s, c]])


def apply_affine(
    pixels: np.ndarray,
    mask: np.ndarray,
    scale: float = 1.0,
    rotation_deg: float = 0.0,
    flip: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Flip, scale and rotate a patch about its centre.

    Pixels are resampled bilinearly, the mask by nearest neighbour, and the
    result is cropped to the bounding box of the transformed mask.
    """
    if not 0.5 <= scale <= 2.0:
        raise ValueError(f"scale must be in [0.5, 2.0], got {scale}")
    if not 0.0 <= rotation_deg < 360.0:
        raise ValueError(f"rotation must be in [0, 360), got {rotation_deg}")
    mask = np.asarray(mask, dtype=bool)
    if flip:
        pixels = pixels[:, ::-1]
        mask = mask[:, ::-1]
    h, w = mask.shape
    fwd = scale * _rotation_matrix(rotation_deg)
    inv = np.linalg.inv(fwd)

    c_in = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    corners = np.array([[-0.5, -0.5], [-0.5, w - 0.5], [h - 0.5, -0.5], [h - 0.5, w - 0.5]]) - c_in
    moved = corners @ fwd.T
    extent = moved.max(axis=0) - moved.min(axis=0)
    oh, ow = (int(math.ceil(e - 1e-9)) for e in extent)
    c_out = np.array([(oh - 1) / 2.0, (ow - 1) / 2.0])

    grid = np.stack(np.mgrid[0:oh, 0:ow], axis=-1).reshape(-1, 2).astype(np.float64)
    src = (grid - c_out) @ inv.T + c_in  # (N, 2) input coordinates

    near = np.floor(src + 0.5).astype(np.int64)
    inside = (near[:, 0] >= 0) & (near[:, 0] < h) & (near[:, 1] >= 0) & (near[:, 1] < w)
    out_mask = np.zeros(oh * ow, dtype=bool)
    out_mask[inside] = mask[near[inside, 0], near[inside, 1]]
    out_mask = out_mask.reshape(oh, ow)

    coords = src.T
    out_px = np.empty((oh, ow, pixels.shape[2]), dtype=np.uint8)
    for ch in range(pixels.shape[2]):
        vals = ndimage.map_coordinates(
            np.ascontiguousarray(pixels[..., ch], dtype=np.float64), coords, order=1, mode="nearest"
        )
        out_px[..., ch] = np.clip(np.rint(vals), 0, 255).reshape(oh, ow).astype(np.uint8)

    rows = np.flatnonzero(out_mask.any(axis=1))
    cols = np.flatnonzero(out_mask.any(axis=0))
    if rows.size == 0:
        raise GenerationError("transformed mask is empty")
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    return out_px[r0:r1, c0:c1].copy(), out_mask[r0:r1, c0:c1].copy()


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def compose_forgery(
    base: np.ndarray,
    src_mask: np.ndarray,
    scale: float = 1.0,
    rotation_deg: float = 0.0,
    flip: bool = False,
    seed: int = 0,
) -> ForgerySample:
    """Copy the source region, transform it and paste it at a free offset.

    Offsets are drawn uniformly; the pasted footprint must lie inside the
    image and must not touch the source.  Each round makes 200 draws; failed
    rounds continue with seed + k * 10**6 and after 5 regenerations the
    placement is abandoned.
    """
    src_mask = np.asarray(src_mask, dtype=bool)
    if base.shape[:2] != src_mask.shape:
        raise ValueError(f"mask shape {src_mask.shape} does not match image {base.shape[:2]}")
    if not src_mask.any():
        raise ValueError("source mask is empty")
    H, W = src_mask.shape
    r0, r1, c0, c1 = _bbox(src_mask)
    patch, patch_mask = apply_affine(base[r0:r1, c0:c1], src_mask[r0:r1, c0:c1], scale, rotation_deg, flip)
    th, tw = patch_mask.shape

    if th <= H and tw <= W:
        for k in range(_REGENERATIONS + 1):
            round_seed = seed + k * _REGEN_STRIDE
            rng = _rng(round_seed, _STREAM_OFFSET)
            for _ in range(_OFFSET_DRAWS):
                oy = int(rng.integers(0, H - th + 1))
                ox = int(rng.integers(0, W - tw + 1))
                if np.any(src_mask[oy : oy + th, ox : ox + tw] & patch_mask):
                    continue
                image = base.copy()
                tri = np.zeros((H, W), dtype=np.uint8)
                tri[src_mask] = SOURCE
                window = image[oy : oy + th, ox : ox + tw]
                window[patch_mask] = patch[patch_mask]
                tri[oy : oy + th, ox : ox + tw][patch_mask] = TARGET
                meta = {
                    "seed": int(seed),
                    "placement_seed": int(round_seed),
                    "scale": float(scale),
                    "rotation_deg": float(rotation_deg),
                    "flip": bool(flip),
                    "offset": [oy, ox],
                    "source_bbox": [r0, r1, c0, c1],
                }
                return ForgerySample(image=image, tri_mask=tri, meta=meta)
    raise GenerationError(
        f"no valid paste offset for a {th}x{tw} target after {_REGENERATIONS} regenerations (seed={seed})"
    )


def generate_sample(seed: int, size: int = SAMPLE_SIZE) -> ForgerySample:
    """One complete forgery: base image, source region, random transform, paste.

    When a region/transform cannot be placed, the region and transform are
    redrawn from seed + k * 10**6 while the base image stays fixed.
    """
    base = generate_base_image(seed, size)
    last: Exception | None = None
    for k in range(_REGENERATIONS + 1):
        s = seed + k * _REGEN_STRIDE
        rng = _rng(s, _STREAM_PARAMS)
        scale = float(rng.uniform(0.75, 1.3))
        rotation = float(rng.choice([0.0, 90.0, 180.0, 270.0])) if rng.random() < 0.3 else float(rng.uniform(0, 360))
        flip = bool(rng.random() < 0.5)
        try:
            src = sample_source_region(s, (size, size))
            sample = compose_forgery(base, src, scale, rotation, flip, seed=s)
        except GenerationError as exc:
            last = exc
            continue
        sample.meta["seed"] = int(seed)
        sample.meta["region_seed"] = int(s)
        return sample
    raise GenerationError(f"sample generation failed for seed={seed}: {last}")


def generate_samples(
    n: int, root_seed: int, size: int = SAMPLE_SIZE, executor: Executor | None = None
) -> list[ForgerySample]:
    """Sample i uses seed root_seed + i; any executor yields the sequential result."""
    seeds = [root_seed + i for i in range(n)]
    if executor is None:
        return [generate_sample(s, size) for s in seeds]
    return list(executor.map(generate_sample, seeds, [size] * n))


def binary_mask(tri_mask: np.ndarray) -> np.ndarray:
    tri_mask = np.asarray(tri_mask)
    bad = ~np.isin(tri_mask, (PRISTINE, SOURCE, TARGET))
    if bad.any():
        raise ValueError(f"tri-class mask has labels outside {{0,1,2}}: {np.unique(tri_mask[bad]).tolist()}")
    return (tri_mask != PRISTINE).astype(np.uint8)


# ---------------------------------------------------------------- on-disk format


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: int
    image_path: str
    mask_path: str
    attack_tag: str = "BASE"


@dataclass
class DatasetManifest:
    split: str
    seed: int
    entries: list[ManifestEntry] = field(default_factory=list)
    version: str = FORMAT_VERSION

    def validate(self) -> None:
        if self.split not in ("train", "val", "test"):
            raise DatasetError(f"unknown split {self.split!r}")
        prev = None
        for e in self.entries:
            if prev is not None and e.sample_id <= prev:
                kind = "duplicate" if e.sample_id == prev else "out-of-order"
                raise DatasetError(f"{kind} sample_id {e.sample_id} in manifest")
            prev = e.sample_id

    def dumps(self) -> str:
        lines = [f"# version={self.version}", f"# split={self.split}", f"# seed={self.seed}"]
        lines += [f"{e.sample_id:06d}\t{e.image_path}\t{e.mask_path}\t{e.attack_tag}" for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        header: dict[str, str] = {}
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DatasetError(f"manifest line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
            entries.append(ManifestEntry(int(parts[0]), parts[1], parts[2], parts[3]))
        version = header.get("version")
        if version != FORMAT_VERSION:
            raise DatasetError(f"manifest version {version!r} does not match {FORMAT_VERSION!r}")
        manifest = cls(split=header.get("split", ""), seed=int(header.get("seed", 0)), entries=entries, version=version)
        manifest.validate()
        return manifest


def _write_png(path: Path, array: np.ndarray) -> None:
    # fixed encoder settings keep files byte-identical across runs
    Image.fromarray(array).save(path, format="PNG", optimize=False, compress_level=6)


def write_dataset(
    samples: Sequence[ForgerySample],
    root: str | Path,
    split: str,
    seed: int,
    sample_ids: Sequence[int] | None = None,
    attack_tags: Sequence[str] | None = None,
) -> DatasetManifest:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    ids = list(sample_ids) if sample_ids is not None else list(range(len(samples)))
    tags = list(attack_tags) if attack_tags is not None else ["BASE"] * len(samples)
    entries = []
    with open(root / META_NAME, "w") as meta_file:
        for sid, tag, sample in zip(ids, tags, samples):
            binary_mask(sample.tri_mask)  # label validation
            img_rel, mask_rel = f"images/{sid:06d}.png", f"masks/{sid:06d}.png"
            _write_png(root / img_rel, np.ascontiguousarray(sample.image, dtype=np.uint8))
            _write_png(root / mask_rel, np.ascontiguousarray(sample.tri_mask, dtype=np.uint8))
            entries.append(ManifestEntry(sid, img_rel, mask_rel, tag))
            meta_file.write(json.dumps({"sample_id": sid, **sample.meta}, sort_keys=True) + "\n")
    manifest = DatasetManifest(split=split, seed=seed, entries=entries)
    manifest.validate()
    (root / MANIFEST_NAME).write_text(manifest.dumps())
    return manifest


@dataclass
class DatasetItem:
    sample_id: int
    image: np.ndarray
    tri_mask: np.ndarray
    attack_tag: str


class ForgeryDataset:
    """Lazy view over a dataset root; images are decoded on access."""

    def __init__(self, root: str | Path, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def __getitem__(self, index: int) -> DatasetItem:
        e = self.manifest.entries[index]
        try:
            image = np.asarray(Image.open(self.root / e.image_path).convert("RGB"), dtype=np.uint8)
            with Image.open(self.root / e.mask_path) as m:
                if m.mode not in ("L", "P"):
                    raise DatasetError(f"sample {e.sample_id}: mask must be single-channel, got mode {m.mode}")
                tri = np.asarray(m, dtype=np.uint8)
        except OSError as exc:
            raise DatasetError(f"sample {e.sample_id}: cannot read files: {exc}") from exc
        if not np.isin(tri, (PRISTINE, SOURCE, TARGET)).all():
            raise DatasetError(f"sample {e.sample_id}: corrupt mask, labels {np.unique(tri).tolist()}")
        if tri.shape != image.shape[:2]:
            raise DatasetError(f"sample {e.sample_id}: mask {tri.shape} does not match image {image.shape[:2]}")
        return DatasetItem(e.sample_id, image, tri, e.attack_tag)

    def __iter__(self) -> Iterator[DatasetItem]:
        for i in range(len(self)):
            yield self[i]

    @property
    def sample_ids(self) -> list[int]:
        return [e.sample_id for e in self.manifest.entries]

    def meta(self) -> dict[int, dict]:
        path = self.root / META_NAME
        if not path.exists():
            return {}
        records = (json.loads(line) for line in path.read_text().splitlines() if line.strip())
        return {r["sample_id"]: r for r in records}

    def load_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All images (N,H,W,3) and tri masks (N,H,W) in manifest order."""
        items = list(self)
        if not items:
            raise DatasetError(f"dataset at {self.root} is empty")
        return np.stack([it.image for it in items]), np.stack([it.tri_mask for it in items])


def read_dataset(root: str | Path) -> ForgeryDataset:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"no {MANIFEST_NAME} under {root}")
    manifest = DatasetManifest.loads(path.read_text())
    if not manifest.entries:
        raise DatasetError(f"manifest at {path} lists no samples")
    for e in manifest.entries:
        for rel in (e.image_path, e.mask_path):
            if not (root / rel).exists():
                raise DatasetError(f"sample {e.sample_id}: missing file {rel}")
    return ForgeryDataset(root, manifest)


def split_counts(n: int, fractions: Iterable[float]) -> list[int]:
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    counts = [int(math.floor(n * f + 1e-9)) for f in fractions]
    counts[0] += n - sum(counts)
    return counts


class MemoryDataset:
    """In-memory counterpart of :class:`ForgeryDataset` with the same item interface."""

    def __init__(self, samples: Sequence[ForgerySample], sample_ids=None, attack_tags=None):
        self.samples = list(samples)
        self.ids = list(sample_ids) if sample_ids is not None else list(range(len(self.samples)))
        self.tags = list(attack_tags) if attack_tags is not None else ["BASE"] * len(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> DatasetItem:
        s = self.samples[index]
        return DatasetItem(self.ids[index], s.image, s.tri_mask, self.tags[index])

    def __iter__(self) -> Iterator[DatasetItem]:
        for i in range(len(self)):
            yield self[i]

    @property
    def sample_ids(self) -> list[int]:
        return list(self.ids)

    def load_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.samples:
            raise DatasetError("dataset is empty")
        return np.stack([s.image for s in self.samples]), np.stack([s.tri_mask for s in self.samples])
