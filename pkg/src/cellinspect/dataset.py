"""Image I/O, slide-splitting, resizing, channel separation, manifests and
stratified k-fold planning."""

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

CLASSES = ("good", "broken_gate", "paste_spot", "dirty_cell", "thick_line", "scratch", "color_difference")
DEFECTS = CLASSES[1:]
MANIFEST_HEADER = ("path", "label", "source", "row", "col")
IMAGE_SUFFIXES = (".png", ".ppm")


class ImageFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def load_image(path):
    """Read an 8-bit RGB PNG or binary PPM as an H x W x 3 uint8 array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise ImageFormatError(f"{path}: unsupported format {im.format}")
            if im.mode != "RGB":
                raise ImageFormatError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ImageFormatError(f"{path}: {exc}") from exc
    return arr.copy()


def save_image(img, path):
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an H x W x 3 uint8 image")
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() == ".ppm" else "PNG"
    buf = io.BytesIO()
    Image.fromarray(img, "RGB").save(buf, format=fmt)
    path.write_bytes(buf.getvalue())


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def window_positions(size, window, stride):
    """Window origins 0, stride, 2*stride, ...; the last one is clamped so the
    window ends exactly at the edge."""
    if window > size:
        raise ValueError(f"window {window} larger than image extent {size}")
    if stride < 1:
        raise ValueError("stride must be positive")
    pos = list(range(0, size - window + 1, stride))
    if pos[-1] + window < size:
        pos.append(size - window)
    return pos


def slide_split(img, window=469, stride=235):
    """Overlapping window x window patches with their (row, col) offsets."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if window > min(h, w):
        raise ValueError(f"window {window} larger than image {h}x{w}")
    rows = window_positions(h, window, stride)
    cols = window_positions(w, window, stride)
    return [(img[r:r + window, c:c + window], (r, c)) for r in rows for c in cols]


def _bilinear_taps(n_in, n_out):
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(img, side=256, dtype=np.float32):
    """Bilinear resize to side x side, values scaled from [0, 255] to [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("empty image")
    x = img.astype(np.float64)
    if np.issubdtype(img.dtype, np.integer):
        x /= 255.0
    y0, y1, fy = _bilinear_taps(h, side)
    x0, x1, fx = _bilinear_taps(w, side)
    rows = x[y0] * (1 - fy)[:, None, None] + x[y1] * fy[:, None, None]
    out = rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
    return np.clip(out, 0.0, 1.0).astype(dtype)


def split_channels(t):
    t = np.asarray(t)
    if t.ndim != 3 or t.shape[-1] != 3:
        raise ValueError(f"expected H x W x 3, got {t.shape}")
    return tuple(t[..., i:i + 1].copy() for i in range(3))


def to_gray(img):
    """Unweighted channel mean, as float64."""
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class Entry:
    path: str
    label: str
    source: str = ""
    row: int = 0
    col: int = 0


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: Path = None

    @property
    def counts(self):
        out = {}
        for e in self.entries:
            out[e.label] = out.get(e.label, 0) + 1
        return out

    @property
    def labels(self):
        return [e.label for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry):
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load(self, index):
        return load_image(self.resolve(self.entries[index]))


def write_manifest(manifest, path, comment=None):
    path = Path(path)
    with path.open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            w.writerow([e.path, e.label, e.source, e.row, e.col])


def read_manifest(path, check_files=True):
    path = Path(path)
    with path.open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = tuple(next(reader, ()))
    if header != MANIFEST_HEADER:
        raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
    entries = []
    for row in reader:
        if not row:
            continue
        p, label, source, r, c = row
        if label not in CLASSES:
            raise ValueError(f"{path}: unknown label {label!r}")
        entries.append(Entry(p, label, source, int(r), int(c)))
    m = DatasetManifest(entries, root=path.parent)
    if check_files:
        found = {}
        for e in entries:
            if not m.resolve(e).is_file():
                raise FileNotFoundError(f"manifest entry missing on disk: {e.path}")
            found[e.label] = found.get(e.label, 0) + 1
        if found != m.counts:  # pragma: no cover - tautological unless entries are edited concurrently
            raise ValueError("manifest class counts disagree with file tally")
    return m


def scan_class_dirs(root):
    """Directory-per-class ingestion: ``<root>/<class>/<image files>``."""
    root = Path(root)
    entries = []
    for cls in CLASSES:
        d = root / cls
        if not d.is_dir():
            continue
        for f in sorted(d.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                entries.append(Entry(str(f.relative_to(root)), cls, f.name, 0, 0))
    unknown = [d.name for d in root.iterdir() if d.is_dir() and d.name not in CLASSES]
    if unknown:
        raise ValueError(f"unknown class directories: {unknown}")
    return DatasetManifest(entries, root=root)


def split_directory(src, out, window=469, stride=235, label=None, comment=None):
    """slide_split one image, or every image under ``src`` (flat or
    directory-per-class), and write patches plus a manifest to ``out``.
    Returns the manifest."""
    src, out = Path(src), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if label is not None and label not in CLASSES:
        raise ValueError(f"unknown label {label!r}")
    jobs = []
    if src.is_file():
        base, files = src.parent, [src]
    else:
        base, files = src, sorted(src.rglob("*"))
    for f in files:
        if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
            cls = f.parent.name if f.parent != base and f.parent.name in CLASSES else (label or "good")
            jobs.append((f, cls))
    if not jobs:
        raise FileNotFoundError(f"no PNG/PPM images under {src}")
    entries = []
    for f, cls in jobs:
        img = load_image(f)
        (out / cls).mkdir(exist_ok=True)
        for patch, (r, c) in slide_split(img, window, stride):
            rel = f"{cls}/{f.stem}_r{r:04d}_c{c:04d}.png"
            save_image(np.ascontiguousarray(patch), out / rel)
            entries.append(Entry(rel, cls, str(f.relative_to(base)), r, c))
    m = DatasetManifest(entries, root=out)
    write_manifest(m, out / "manifest.csv", comment=comment)
    return m


# ---------------------------------------------------------------------------
# fold planning
# ---------------------------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    test_folds: list
    seed: int

    def train_indices(self, fold):
        return np.sort(np.concatenate([f for i, f in enumerate(self.test_folds) if i != fold]))

    def test_indices(self, fold):
        return self.test_folds[fold]

    def __iter__(self):
        for i in range(self.k):
            yield self.train_indices(i), self.test_indices(i)


def stratified_kfold(labels, k=5, seed=0):
    """Per-class shuffled round-robin assignment to ``k`` test folds.

    Each class starts where the previous one stopped so overall fold sizes
    also stay within one of each other.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    small = classes[counts < k]
    if len(small):
        raise ValueError(f"classes with fewer than {k} members: {list(small)}")
    folds = [[] for _ in range(k)]
    offset = 0
    for cls in classes:
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        for j, i in enumerate(idx):
            folds[(offset + j) % k].append(int(i))
        offset = (offset + len(idx)) % k
    return FoldPlan(k, [np.array(sorted(f), dtype=np.int64) for f in folds], seed)
