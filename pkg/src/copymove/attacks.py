"""Photometric and compression attacks in the CoMoFoD style.

All attacks preserve geometry, so ground-truth masks stay valid untouched.
Severity parameters live in ``SEVERITY`` and can be edited in one place.
"""
from __future__ import annotations

import io
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import ForgeryDataset, ForgerySample, DatasetManifest, write_dataset

SEVERITY: dict[str, tuple] = {
    "BC": (0.95, 0.90, 0.80),  # brightness: output range [0, 255*u]
    "CA": (0.95, 0.90, 0.80),  # contrast factor around mid-grey
    "CR": (128, 64, 32),  # quantisation levels per channel
    "IB": (3, 5, 7),  # mean filter side
    "NA": (2.0, 5.0, 10.0),  # Gaussian noise std, intensity units
    "JC": (20, 30, 40, 50, 60, 70, 80, 90, 100),  # JPEG quality
}
CATEGORIES = ("BASE",) + tuple(SEVERITY)
JPEG_SUBSAMPLING = 2  # 4:2:0

_TAG_RE = re.compile(r"^(BASE|[A-Z]{2})(\d*)$")


class AttackSpecError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    category: str
    level: int = 0

    def __post_init__(self):
        if self.category == "BASE":
            if self.level != 0:
                raise AttackSpecError(f"BASE takes level 0, got {self.level}")
        elif self.category in SEVERITY:
            n = len(SEVERITY[self.category])
            if not 1 <= self.level <= n:
                raise AttackSpecError(f"{self.category} level must be in 1..{n}, got {self.level}")
        else:
            raise AttackSpecError(f"unknown attack category {self.category!r}; valid tags: {', '.join(all_tags())}")

    @property
    def tag(self) -> str:
        return "BASE" if self.category == "BASE" else f"{self.category}{self.level}"

    @property
    def parameter(self):
        return None if self.category == "BASE" else SEVERITY[self.category][self.level - 1]

    @classmethod
    def parse(cls, tag: str) -> "AttackSpec":
        m = _TAG_RE.match(tag.strip())
        if not m:
            raise AttackSpecError(f"malformed attack tag {tag!r}; valid tags: {', '.join(all_tags())}")
        category, level = m.group(1), m.group(2)
        if category == "BASE":
            if level:
                raise AttackSpecError(f"BASE takes no level, got {tag!r}")
            return cls("BASE", 0)
        if not level:
            raise AttackSpecError(f"attack tag {tag!r} is missing its level")
        return cls(category, int(level))


def all_tags() -> list[str]:
    return ["BASE"] + [f"{c}{i}" for c, levels in SEVERITY.items() for i in range(1, len(levels) + 1)]


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="JPEG", quality=int(quality), subsampling=JPEG_SUBSAMPLING, optimize=False)
    buf.seek(0)
    with Image.open(buf) as decoded:
        return np.asarray(decoded.convert("RGB"), dtype=np.uint8)


def apply_attack(image: np.ndarray, spec: AttackSpec, seed: int = 0) -> np.ndarray:
    """Attacked copy of an (H, W, 3) uint8 image.  ``seed`` only matters for NA."""
    image = np.asarray(image, dtype=np.uint8)
    cat, p = spec.category, spec.parameter
    x = image.astype(np.float64)
    if cat == "BASE":
        return image.copy()
    if cat == "BC":
        return _to_uint8(x * p)
    if cat == "CA":
        return _to_uint8((x - 127.5) * p + 127.5)
    if cat == "CR":
        width = 256 // p
        # representative value is the bin centre
        return (image // width * width + width // 2).astype(np.uint8)
    if cat == "IB":
        return _to_uint8(ndimage.uniform_filter(x, size=(p, p, 1), mode="nearest"))
    if cat == "NA":
        rng = np.random.default_rng(seed)
        return _to_uint8(x + rng.normal(0.0, p, size=x.shape))
    if cat == "JC":
        return jpeg_roundtrip(image, p)
    raise AttackSpecError(f"unhandled category {cat}")


def attack_dataset(dataset: ForgeryDataset, spec: AttackSpec, out_root: str | Path, seed: int = 0) -> DatasetManifest:
    """Copy a dataset with every image attacked; masks are written unchanged.

    Per-sample noise seeds are ``seed + sample_id``.
    """
    samples, ids = [], []
    meta = dataset.meta()
    for item in dataset:
        try:
            attacked = apply_attack(item.image, spec, seed + item.sample_id)
        except Exception as exc:
            raise RuntimeError(f"sample {item.sample_id}: attack {spec.tag} failed: {exc}") from exc
        record = {k: v for k, v in meta.get(item.sample_id, {}).items() if k != "sample_id"}
        record["attack"] = spec.tag
        samples.append(ForgerySample(attacked, item.tri_mask, record))
        ids.append(item.sample_id)
    m = dataset.manifest
    return write_dataset(samples, out_root, m.split, m.seed, sample_ids=ids, attack_tags=[spec.tag] * len(ids))
