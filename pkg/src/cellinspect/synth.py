"""Seeded synthetic solar-cell patches with per-channel defect contrast.

Each image is a polycrystalline lattice (Voronoi grains with independent
per-channel shading) crossed by vertical grid lines.  A defect is rendered
at full strength into a copy of the clean image and then blended back per
channel::

    out[..., c] = clean[..., c] + profile[c] * (defective[..., c] - clean[..., c])

so a profile of (0.05, 0.8, 0.8) leaves the defect almost invisible in red.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .dataset import CLASSES, DatasetManifest, Entry, save_image, slide_split, write_manifest

# Each defect is pronounced in one channel (red or green) and faint in the
# others; blue carries mostly lattice texture.
DEFAULT_PROFILES = {
    "good": (0.0, 0.0, 0.0),
    "broken_gate": (1.0, 0.1, 0.1),
    "paste_spot": (0.1, 1.0, 0.1),
    "dirty_cell": (1.0, 0.1, 0.1),
    "thick_line": (0.1, 1.0, 0.1),
    "scratch": (0.1, 1.0, 0.1),
    "color_difference": (1.0, 0.1, 0.1),
}

BASE_COLOR = np.array([70.0, 85.0, 125.0])
LINE_COLOR = np.array([205.0, 205.0, 210.0])


@dataclass
class SynthSpec:
    counts: dict
    size: int = 64
    lattice_density: float = 12.0   # grains per 64 x 64 area
    grid_pitch: int = 16
    line_width: int = 2
    grain_jitter: tuple = (16.0, 16.0, 16.0)  # per-channel grain shading std
    noise: float = 3.0
    profiles: dict = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    seed: int = 0

    def __post_init__(self):
        for cls, n in self.counts.items():
            if cls not in CLASSES:
                raise ValueError(f"unknown class {cls!r}")
            if n < 0:
                raise ValueError("counts must be >= 0")
        for cls, prof in self.profiles.items():
            if len(prof) != 3 or not all(0.0 <= v <= 1.0 for v in prof):
                raise ValueError(f"profile for {cls} must be three values in [0, 1]")
        if self.size < 8:
            raise ValueError("size must be >= 8")


def _lattice(rng, size, density, jitter):
    n = max(2, int(round(density * (size / 64.0) ** 2)))
    pts = rng.uniform(0, size, (n, 2))
    shade = rng.normal(0.0, 1.0, (n, 3)) * np.broadcast_to(np.asarray(jitter, dtype=np.float64), (3,))
    yy, xx = np.mgrid[0:size, 0:size]
    _, owner = cKDTree(pts).query(np.column_stack([yy.ravel(), xx.ravel()]))
    return BASE_COLOR + shade[owner.reshape(size, size)]


def _line_columns(spec, rng):
    # at least one line even when the pitch exceeds the image
    first = int(rng.integers(spec.grid_pitch // 4, min(spec.grid_pitch, spec.size - spec.line_width + 1)))
    return list(range(first, spec.size - spec.line_width + 1, spec.grid_pitch))


def _disc(size, cy, cx, ry, rx, soft=1.5):
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return np.clip((1.0 - r) * max(ry, rx) / soft, 0.0, 1.0)


def _polyline_mask(size, pts, width=1):
    m = np.zeros((size, size))
    for (y0, x0), (y1, x1) in zip(pts[:-1], pts[1:]):
        steps = int(max(abs(y1 - y0), abs(x1 - x0))) * 2 + 1
        for t in np.linspace(0, 1, steps):
            y, x = int(round(y0 + t * (y1 - y0))), int(round(x0 + t * (x1 - x0)))
            m[max(0, y - width // 2):y + width // 2 + 1, max(0, x - width // 2):x + width // 2 + 1] = 1.0
    return m


def _render_defect(cls, rng, spec, background, clean, lines):
    """Full-strength defective version of ``clean``."""
    s = spec.size
    d = clean.copy()
    lw = spec.line_width
    if cls == "broken_gate":
        x = lines[int(rng.integers(len(lines)))]
        length = int(rng.integers(s // 4, s // 2))
        y = int(rng.integers(0, s - length))
        d[y:y + length, x:x + lw] = background[y:y + length, x:x + lw]
    elif cls == "paste_spot":
        r = rng.uniform(s / 14, s / 9)
        m = _disc(s, rng.uniform(r, s - r), rng.uniform(r, s - r), r, r * rng.uniform(0.7, 1.3))
        d = d * (1 - m[..., None]) + np.array([225.0, 220.0, 215.0]) * m[..., None]
    elif cls == "dirty_cell":
        r = rng.uniform(s / 4, s / 3)
        m = _disc(s, rng.uniform(0, s), rng.uniform(0, s), r, r * rng.uniform(0.7, 1.3), soft=r / 3)
        d = d - 55.0 * m[..., None]
    elif cls == "thick_line":
        x = lines[int(rng.integers(len(lines)))]
        extra = int(rng.integers(2, 4))
        length = int(rng.integers(s // 3, s))
        y = int(rng.integers(0, s - length + 1))
        x0, x1 = max(0, x - extra), min(s, x + lw + extra)
        d[y:y + length, x0:x1] = LINE_COLOR
    elif cls == "scratch":
        n = int(rng.integers(3, 6))
        start = rng.uniform(0, s, 2)
        pts = [start]
        for _ in range(n - 1):
            step = rng.normal(0, s / 4, 2)
            pts.append(np.clip(pts[-1] + step, 0, s - 1))
        m = _polyline_mask(s, pts)
        d = d + 90.0 * m[..., None]
    elif cls == "color_difference":
        shift = rng.choice([-1.0, 1.0]) * rng.uniform(30, 45)
        d = d + shift
    elif cls != "good":
        raise ValueError(f"unknown class {cls!r}")
    return d


def render(spec, cls, index):
    """(image, defect-free twin) for one sample; both H x W x 3 uint8."""
    rng = np.random.default_rng([spec.seed, CLASSES.index(cls), index])
    s = spec.size
    background = _lattice(rng, s, spec.lattice_density, spec.grain_jitter)
    lines = _line_columns(spec, rng)
    clean = background.copy()
    for x in lines:
        clean[:, x:x + spec.line_width] = LINE_COLOR
    clean += rng.normal(0.0, spec.noise, clean.shape)
    defective = _render_defect(cls, rng, spec, background, clean, lines)
    prof = np.asarray(spec.profiles.get(cls, DEFAULT_PROFILES[cls]), dtype=np.float64)
    out = clean + prof * (defective - clean)
    to8 = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)
    return to8(out), to8(clean)


def synth_generate(spec, with_twins=False):
    """Render every requested sample.

    Returns ``(manifest, images)`` or, with ``with_twins``, ``(manifest,
    images, twins)`` where ``twins`` are the defect-free counterparts.
    Paths in the manifest are relative (``<class>/<class>_<n>.png``).
    """
    total = sum(spec.counts.values())
    if total == 0:
        raise ValueError("synthetic spec requests zero images")
    entries, images, twins = [], [], []
    for cls in CLASSES:
        for i in range(spec.counts.get(cls, 0)):
            img, twin = render(spec, cls, i)
            images.append(img)
            twins.append(twin)
            entries.append(Entry(f"{cls}/{cls}_{i:05d}.png", cls, f"synth-{spec.seed}", 0, 0))
    manifest = DatasetManifest(entries)
    images = np.stack(images)
    if with_twins:
        return manifest, images, np.stack(twins)
    return manifest, images


def write_dataset(manifest, images, root, comment=None):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for e, img in zip(manifest.entries, images):
        (root / e.path).parent.mkdir(parents=True, exist_ok=True)
        save_image(img, root / e.path)
    manifest.root = root
    write_manifest(manifest, root / "manifest.csv", comment=comment)
    return manifest


def synth_cell(spec, n_defects, rng_index=0):
    """One large cell image (spec.size square) with ``n_defects`` defects at
    random places.  Returns (image, [(class, (cy, cx))...]).

    Defects are pasted as small local sub-renders so that slide-split patches
    can be labelled by which defect centres they contain.
    """
    rng = np.random.default_rng([spec.seed, 1000 + rng_index])
    big = SynthSpec({"good": 1}, size=spec.size, lattice_density=spec.lattice_density,
                    grid_pitch=spec.grid_pitch, line_width=spec.line_width,
                    grain_jitter=spec.grain_jitter, noise=spec.noise, seed=spec.seed)
    img = render(big, "good", rng_index)[0].astype(np.float64)
    tile = max(32, spec.size // 8)
    placed = []
    defect_classes = [c for c in CLASSES[1:] if c != "color_difference"]
    for j in range(n_defects):
        cls = defect_classes[int(rng.integers(len(defect_classes)))]
        sub = SynthSpec({cls: 1}, size=tile, lattice_density=spec.lattice_density,
                        grid_pitch=spec.grid_pitch, line_width=spec.line_width,
                        grain_jitter=spec.grain_jitter, noise=spec.noise,
                        profiles=spec.profiles, seed=spec.seed * 7919 + rng_index)
        d, c = render(sub, cls, j)
        y, x = (int(v) for v in rng.integers(0, spec.size - tile, 2))
        img[y:y + tile, x:x + tile] += d.astype(np.float64) - c.astype(np.float64)
        placed.append((cls, (y + tile // 2, x + tile // 2)))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), placed


def stride_dataset(window, stride=None, n_cells=2, cell_side=1868, defects_per_cell=8, seed=0,
                   grid_pitch=None):
    """Slide-split synthetic cells into labelled patches.

    A patch takes the class of the first defect whose centre lies inside it,
    otherwise ``good``.  The same cells are produced for every window size
    given the same seed, so window sizes can be compared on identical data.
    Returns (patches, class names, offsets).
    """
    stride = stride or (window + 1) // 2
    spec = SynthSpec({"good": 1}, size=cell_side, seed=seed,
                     grid_pitch=grid_pitch or max(16, cell_side // 24),
                     line_width=max(2, cell_side // 400), lattice_density=12.0 * 64 / max(64, cell_side // 8))
    patches, names, offsets = [], [], []
    for c in range(n_cells):
        img, placed = synth_cell(spec, defects_per_cell, rng_index=c)
        for patch, (r, col) in slide_split(img, window, stride):
            label = "good"
            for cls, (cy, cx) in placed:
                if r <= cy < r + window and col <= cx < col + window:
                    label = cls
                    break
            patches.append(np.ascontiguousarray(patch))
            names.append(label)
            offsets.append((c, r, col))
    return patches, np.array(names), offsets
