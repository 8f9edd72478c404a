"""Deterministic synthetic shape renderings used for desk-scale runs.

Four "domains" render the same geometric shape classes with distinct color
and texture treatments, giving a miniature multi-domain benchmark that needs
no downloads. The renderer also backs the offline image-generation fixture:
any class name it does not recognize as a shape falls back to a seeded
procedural texture, so replay runs stay deterministic for arbitrary names.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .encoders import Image

SYNTHETIC_DATASET = "synthetic-shapes"
KNOWN_SHAPES = ["circle", "cross", "square", "triangle"]
NOVEL_SHAPES = ["diamond", "ring", "stripes"]
ALL_CLASSES = sorted(KNOWN_SHAPES + NOVEL_SHAPES)
STYLES = ["flat", "inverted", "noisy", "outline"]

# Attribute phrases for the shape classes, mirroring how an LLM would
# describe them; only known classes ever need attributes at train time.
SYNTHETIC_ATTRIBUTES = {
    "circle": ["round outline", "no corners", "curved edge", "closed disc"],
    "cross": ["two bars", "four arms", "right angles", "intersecting strokes"],
    "square": ["four corners", "equal sides", "straight edges", "boxy silhouette"],
    "triangle": ["three corners", "slanted sides", "pointed apex", "flat base"],
    "diamond": ["rotated square", "four points", "angled edges", "rhombus outline"],
    "ring": ["hollow center", "circular band", "round rim", "donut outline"],
    "stripes": ["parallel bands", "alternating bars", "striped fill", "repeating lines"],
}

# Names the fixture LLM proposes as pseudo-open classes for the shape world.
SYNTHETIC_PSEUDO_OPEN_NAMES = ["diamond", "ring"]

# All styles render bright figures on dark grounds (so a frozen random
# encoder has a chance to transfer across them) but differ in hue palette,
# noise level, and edge treatment.
_STYLE_PARAMS = {
    "flat": {"bg": (0.08, 0.10, 0.18), "fg": (0.95, 0.85, 0.25), "noise": 0.02, "rim": False},
    "inverted": {"bg": (0.12, 0.07, 0.16), "fg": (0.70, 0.90, 0.45), "noise": 0.02, "rim": False},
    "noisy": {"bg": (0.10, 0.18, 0.22), "fg": (0.90, 0.55, 0.35), "noise": 0.06, "rim": False},
    "outline": {"bg": (0.04, 0.04, 0.06), "fg": (0.75, 0.75, 0.75), "noise": 0.02, "rim": True},
}

# Per-shape scale factors; classes deliberately differ in fill fraction as
# well as silhouette so the desk-scale backbone can tell them apart.
_SHAPE_SCALES = {"circle": 0.40, "square": 0.42, "triangle": 0.30,
                 "cross_bar": 0.09, "cross_arm": 0.46, "diamond": 0.34,
                 "ring": 0.40, "stripes": 0.36, "checker": 0.38}


def stable_seed(*parts) -> int:
    """Platform-stable 63-bit seed from arbitrary hashable parts."""
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _shape_mask(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + rng.uniform(-2, 2)
    cy = size / 2 + rng.uniform(-2, 2)
    base = size * rng.uniform(0.9, 1.1)
    dx, dy = xx - cx, yy - cy
    s = _SHAPE_SCALES
    if shape == "circle":
        return dx ** 2 + dy ** 2 < (s["circle"] * base) ** 2
    if shape == "square":
        r = s["square"] * base
        return (np.abs(dx) < r) & (np.abs(dy) < r)
    if shape == "triangle":
        r = s["triangle"] * base
        return (dy > -r) & (np.abs(dx) < (dy + r) * 0.6) & (dy < r)
    if shape == "cross":
        w, r = s["cross_bar"] * base, s["cross_arm"] * base
        return ((np.abs(dx) < w) & (np.abs(dy) < r)) | ((np.abs(dy) < w) & (np.abs(dx) < r))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) < s["diamond"] * base
    if shape == "ring":
        r = s["ring"] * base
        d2 = dx ** 2 + dy ** 2
        return (d2 < r ** 2) & (d2 > (0.55 * r) ** 2)
    if shape == "stripes":
        r = s["stripes"] * base
        inside = (np.abs(dx) < r) & (np.abs(dy) < r)
        return inside & ((xx // max(int(size * 0.08), 1)) % 2 == 0)
    if shape == "checker":
        r = s["checker"] * base
        inside = (np.abs(dx) < r) & (np.abs(dy) < r)
        block = max(int(size * 0.12), 1)
        return inside & (((xx // block) + (yy // block)) % 2 == 0)
    raise KeyError(shape)


def _erode(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for shift, axis in ((1, 0), (-1, 0), (1, 1), (-1, 1)):
        out &= np.roll(mask, shift, axis=axis)
    return out


def _procedural_mask(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Fallback for non-shape class names: a few seeded elliptical blobs."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(2, 5))):
        cx, cy = rng.uniform(size * 0.2, size * 0.8, size=2)
        ax, ay = rng.uniform(size * 0.08, size * 0.25, size=2)
        mask |= ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 < 1.0
    return mask


def render_image(class_name: str, style: str, seed: int, size: int = 32) -> np.ndarray:
    """Render one class in one domain style; fully determined by the seed."""
    if style not in _STYLE_PARAMS:
        raise KeyError(f"unknown style {style!r}, expected one of {STYLES}")
    params = _STYLE_PARAMS[style]
    rng = np.random.default_rng(stable_seed("render", class_name.lower(), style, seed))
    key = class_name.lower()
    try:
        mask = _shape_mask(key, size, rng)
    except KeyError:
        mask = _procedural_mask(key, size, rng)
    px = np.empty((size, size, 3), dtype=np.float64)
    for c in range(3):
        px[:, :, c] = np.where(mask, params["fg"][c], params["bg"][c])
    if params["rim"]:
        edge = mask & ~_erode(mask)
        for c in range(3):
            px[:, :, c] = np.where(edge, 0.98, px[:, :, c])
    px += rng.normal(0.0, params["noise"], size=px.shape)
    return np.clip(px, 0.0, 1.0)


class SyntheticShapeDataset:
    """Multi-domain shape dataset with a fixed number of images per class."""

    def __init__(self, seed: int = 0, size: int = 32, per_class: int = 8):
        self.seed = seed
        self.size = size
        self.per_class = per_class

    def domains(self) -> list[str]:
        return list(STYLES)

    def class_names(self) -> list[str]:
        return list(ALL_CLASSES)

    def images(self, domain: str, class_name: str) -> list[Image]:
        return [
            Image(pixels=render_image(class_name, domain,
                                      seed=stable_seed(self.seed, domain, class_name, i),
                                      size=self.size),
                  domain_tag=domain)
            for i in range(self.per_class)
        ]
