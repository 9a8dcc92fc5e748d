"""Dataset manifests, image decoding, deterministic augmentation, splits,
and mini-batching.

Manifests are JSONL: one record per line with fields ``path``, ``label``,
optional ``split`` and ``provenance``. The label vocabulary is exactly the
four kidney classes; anything else is rejected at parse time. A
class-per-subdirectory tree (the usual download layout) can be scanned into
a manifest, and a built-in synthetic generator emits four visually
separable grayscale pattern classes for desk-scale runs.
"""

from __future__ import annotations

import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError
from .graphs import CLASS_LABELS
from .ops import bilinear_resize_array

__all__ = [
    "SampleRecord", "AugmentationPlan", "load_manifest", "save_manifest",
    "class_counts", "scan_directory", "decode_and_resize", "default_plan",
    "apply_plan", "split", "batches", "generate_synthetic", "ImageCache",
]

SPLITS = ("train", "test", "validation", "unassigned")

TRANSFORMS = ("horizontal_flip", "vertical_flip", "rotate30", "median3")


@dataclass
class SampleRecord:
    path: str
    label: str
    split: str = "unassigned"
    provenance: str = "original"

    def to_json(self) -> str:
        d = {"path": self.path, "label": self.label}
        if self.split != "unassigned":
            d["split"] = self.split
        if self.provenance != "original":
            d["provenance"] = self.provenance
        return json.dumps(d, sort_keys=True)


def load_manifest(path: str | Path) -> list[SampleRecord]:
    """Parse a JSONL manifest, rejecting malformed lines and unknown labels
    with the offending line number."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"manifest not found: {p}")
    records = []
    with open(p, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{p}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(d, dict) or "path" not in d or "label" not in d:
                raise DataError(f"{p}:{lineno}: record needs 'path' and 'label' fields")
            label = d["label"]
            if label not in CLASS_LABELS:
                raise DataError(
                    f"{p}:{lineno}: unknown label {label!r}, expected one of {list(CLASS_LABELS)}")
            rec_split = d.get("split", "unassigned")
            if rec_split not in SPLITS:
                raise DataError(f"{p}:{lineno}: unknown split {rec_split!r}")
            records.append(SampleRecord(path=str(d["path"]), label=label, split=rec_split,
                                        provenance=d.get("provenance", "original")))
    return records


def save_manifest(records: list[SampleRecord], path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def class_counts(records: list[SampleRecord]) -> dict[str, int]:
    counts = {c: 0 for c in CLASS_LABELS}
    for r in records:
        counts[r.label] += 1
    return counts


def scan_directory(root: str | Path) -> list[SampleRecord]:
    """Build a manifest from a class-per-subdirectory image tree."""
    rootp = Path(root)
    if not rootp.is_dir():
        raise DataError(f"dataset directory not found: {rootp}")
    unknown = sorted(d.name for d in rootp.iterdir() if d.is_dir() and d.name not in CLASS_LABELS)
    if unknown:
        raise DataError(f"unknown class directories under {rootp}: {unknown}")
    records = []
    for label in CLASS_LABELS:
        class_dir = rootp / label
        if not class_dir.is_dir():
            continue
        for f in sorted(class_dir.iterdir()):
            if f.suffix.lower() in (".png", ".jpg", ".jpeg"):
                records.append(SampleRecord(path=str(f), label=label))
    return records


# ---------------------------------------------------------------------------
# decoding

def _decode(source: bytes | str | Path) -> np.ndarray:
    """Decode PNG/JPEG to a uint8 (H, W, 3) array; grayscale replicates."""
    try:
        if isinstance(source, bytes):
            img = Image.open(io.BytesIO(source))
        else:
            img = Image.open(source)
        img.load()
    except Exception as e:
        where = "<bytes>" if isinstance(source, bytes) else str(source)
        raise DataError(f"cannot decode image {where}: {e}") from None
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.uint8)
        return np.repeat(arr[:, :, None], 3, axis=2)
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.uint8)


def decode_and_resize(source: bytes | str | Path, target: tuple[int, int]) -> np.ndarray:
    """Decode and bilinearly resize to (H, W, 3) float32 in [0, 1]."""
    arr = _decode(source).astype(np.float32) / 255.0
    th, tw = target
    if arr.shape[:2] != (th, tw):
        arr = bilinear_resize_array(arr, th, tw)
    return np.clip(arr, 0.0, 1.0, out=arr)


class ImageCache:
    """Decoded-image cache used by the batcher; desk-scale sets fit in RAM."""

    def __init__(self, target: tuple[int, int]):
        self.target = target
        self._store: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        arr = self._store.get(path)
        if arr is None:
            arr = decode_and_resize(path, self.target)
            self._store[path] = arr
        return arr


# ---------------------------------------------------------------------------
# augmentation

def _rotate30(arr: np.ndarray) -> np.ndarray:
    """Rotate 30 degrees about the image center, bilinear, zero fill."""
    theta = np.deg2rad(30.0)
    h, w = arr.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    # inverse map: sample the source at the back-rotated output coordinate
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    sy = cos_t * (yy - cy) - sin_t * (xx - cx) + cy
    sx = sin_t * (yy - cy) + cos_t * (xx - cx) + cx
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros_like(arr, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            yi = y0 + dy
            xi = x0 + dx
            wgt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            yc = np.clip(yi, 0, h - 1)
            xc = np.clip(xi, 0, w - 1)
            sample = arr[yc, xc].astype(np.float64)
            wgt = np.where(valid, wgt, 0.0)
            out += sample * (wgt[:, :, None] if arr.ndim == 3 else wgt)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _median3(arr: np.ndarray) -> np.ndarray:
    """3x3 median filter per channel with edge replication."""
    pad = ((1, 1), (1, 1), (0, 0)) if arr.ndim == 3 else ((1, 1), (1, 1))
    p = np.pad(arr, pad, mode="edge")
    h, w = arr.shape[:2]
    stack = np.stack([p[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)])
    return np.median(stack, axis=0).astype(arr.dtype)


def apply_transform(arr: np.ndarray, kind: str) -> np.ndarray:
    if kind == "horizontal_flip":
        return arr[:, ::-1].copy()
    if kind == "vertical_flip":
        return arr[::-1].copy()
    if kind == "rotate30":
        return _rotate30(arr)
    if kind == "median3":
        return _median3(arr)
    raise ConfigurationError(f"unknown transform {kind!r}")


@dataclass(frozen=True)
class AugmentationPlan:
    """Per-class transform order and target multipliers.

    `multiplier` is the target record count per original, originals
    included; fractional multipliers are realised by truncating the last
    transform pass (the first records of the class, in manifest order, get
    the extra variant).
    """

    transforms: dict[str, tuple[str, ...]] = field(default_factory=dict)
    multipliers: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for cls, ts in self.transforms.items():
            if cls not in CLASS_LABELS:
                raise ConfigurationError(f"augmentation plan names unknown class {cls!r}")
            for t in ts:
                if t not in TRANSFORMS:
                    raise ConfigurationError(f"unknown transform {t!r} for class {cls}")
        for cls, m in self.multipliers.items():
            if cls not in CLASS_LABELS:
                raise ConfigurationError(f"augmentation plan names unknown class {cls!r}")
            if m < 1.0:
                raise ConfigurationError(f"multiplier for {cls} must be >= 1, got {m}")

    def expansion(self, records: list[SampleRecord],
                  out_dir: str | Path | None = None) -> list[tuple[SampleRecord, SampleRecord, str]]:
        """Planned variants as (variant_record, source_record, transform).

        Deterministic in (plan, manifest): pass k over a class applies the
        class's k-th transform (cycling), and a truncated final pass covers
        the first records of the class in manifest order.
        """
        by_class: dict[str, list[SampleRecord]] = {c: [] for c in CLASS_LABELS}
        for r in records:
            by_class[r.label].append(r)
        out: list[tuple[SampleRecord, SampleRecord, str]] = []
        for cls in CLASS_LABELS:
            originals = by_class[cls]
            n = len(originals)
            if n == 0:
                continue
            target = round(self.multipliers.get(cls, 1.0) * n)
            extra = max(target - n, 0)
            ts = self.transforms.get(cls, ())
            if extra and not ts:
                raise ConfigurationError(f"class {cls} needs {extra} variants but has no transforms")
            produced = 0
            pass_idx = 0
            while produced < extra:
                kind = ts[pass_idx % len(ts)]
                suffix = kind if pass_idx < len(ts) else f"{kind}{pass_idx}"
                take = min(n, extra - produced)
                for r in originals[:take]:
                    src = Path(r.path)
                    base = Path(out_dir) / cls if out_dir is not None else src.parent
                    variant = SampleRecord(path=str(base / f"{src.stem}__{suffix}.png"),
                                           label=cls, split=r.split,
                                           provenance=f"augmented:{kind}")
                    out.append((variant, r, kind))
                produced += take
                pass_idx += 1
        return out

    def assignments(self, records: list[SampleRecord],
                    out_dir: str | Path | None = None) -> list[SampleRecord]:
        """Originals plus planned variant records, no image I/O."""
        return list(records) + [v for v, _, _ in self.expansion(records, out_dir)]


def default_plan() -> AugmentationPlan:
    """The shipped preset: flip, rotate, median passes per class, with the
    multipliers the reference dataset was expanded by."""
    ts = ("horizontal_flip", "rotate30", "median3")
    return AugmentationPlan(
        transforms={c: ts for c in CLASS_LABELS},
        multipliers={"Normal": 5141 / 5077, "Stone": 3918 / 1377, "Cyst": 3.0, "Tumor": 3.0},
    )


def plan_from_dict(d: dict) -> AugmentationPlan:
    if d.get("version") != 1:
        raise ConfigurationError("augmentation plan config needs version 1")
    classes = d.get("classes", {})
    return AugmentationPlan(
        transforms={c: tuple(v.get("transforms", ())) for c, v in classes.items()},
        multipliers={c: float(v.get("multiplier", 1.0)) for c, v in classes.items()},
    )


def apply_plan(records: list[SampleRecord], plan: AugmentationPlan,
               out_dir: str | Path, seed: int = 0, workers: int = 1) -> list[SampleRecord]:
    """Materialise the plan: write variant PNGs and return the full manifest.

    Output is a pure function of (plan, seed, manifest): rerunning produces
    byte-identical files. Work may fan out across a thread pool; results are
    merged in manifest order so worker count never changes the outcome.
    """
    planned = plan.expansion(records, out_dir=out_dir)

    def materialise(item: tuple[SampleRecord, SampleRecord, str]) -> SampleRecord:
        variant, source, kind = item
        arr = apply_transform(_decode(source.path), kind)
        dest = Path(variant.path)
        dest.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(dest, format="PNG")
        return variant

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            written = list(pool.map(materialise, planned))
    else:
        written = [materialise(item) for item in planned]
    return list(records) + written


# ---------------------------------------------------------------------------
# splitting and batching

def split(records: list[SampleRecord], train_frac: float = 0.70,
          val_frac_of_test: float = 0.20, seed: int = 0) -> list[SampleRecord]:
    """Stratified train/test/validation assignment; exact partition.

    Per class, round(train_frac * n) records go to train; validation is
    carved out of the test share. Deterministic per seed.
    """
    if not 0.0 < train_frac < 1.0 or not 0.0 < val_frac_of_test < 1.0:
        raise ConfigurationError("split fractions must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(r.label, []).append(i)
    assigned = [SampleRecord(r.path, r.label, "unassigned", r.provenance) for r in records]
    for cls in CLASS_LABELS:
        idx = by_class.get(cls)
        if idx is None:
            continue
        if len(idx) < 3:
            raise DataError(f"class {cls} has only {len(idx)} samples; cannot stratify")
        order = rng.permutation(len(idx))
        n_train = round(train_frac * len(idx))
        test_part = order[n_train:]
        n_val = round(val_frac_of_test * len(test_part))
        for j in order[:n_train]:
            assigned[idx[j]].split = "train"
        for j in test_part[:n_val]:
            assigned[idx[j]].split = "validation"
        for j in test_part[n_val:]:
            assigned[idx[j]].split = "test"
    return assigned


def batches(records: list[SampleRecord], *, classes: tuple[str, ...],
            image_size: tuple[int, int], batch_size: int = 32, seed: int = 0,
            epoch: int = 0, shuffle: bool = True, cache: ImageCache | None = None):
    """Yield (images (B, H, W, 3) float32, labels (B,) int64) batches.

    Covers every record exactly once, emits the final partial batch, and the
    shuffle order is a pure function of (seed, epoch).
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {batch_size}")
    label_idx = {c: i for i, c in enumerate(classes)}
    unknown = {r.label for r in records} - set(label_idx)
    if unknown:
        raise DataError(f"records carry labels {sorted(unknown)} unknown to the model {list(classes)}")
    if cache is None:
        cache = ImageCache(image_size)
    order = (np.random.default_rng([seed, epoch]).permutation(len(records))
             if shuffle else np.arange(len(records)))
    for start in range(0, len(records), batch_size):
        chunk = order[start:start + batch_size]
        imgs = np.stack([cache.get(records[i].path) for i in chunk])
        labels = np.array([label_idx[records[i].label] for i in chunk], dtype=np.int64)
        yield imgs, labels


# ---------------------------------------------------------------------------
# synthetic dataset

def _synth_image(rng: np.random.Generator, label: str, size: int) -> np.ndarray:
    """One grayscale pattern image: blob, speckle, ring, or wedge on noise."""
    img = np.clip(rng.normal(30.0, 12.0, size=(size, size)), 0, 90)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-size / 8, size / 8)
    cx = size / 2 + rng.uniform(-size / 8, size / 8)
    rr = np.hypot(yy - cy, xx - cx)
    if label == "Normal":        # soft bright blob
        sigma = size * rng.uniform(0.12, 0.18)
        img += 190.0 * np.exp(-(rr ** 2) / (2 * sigma ** 2))
    elif label == "Stone":       # scattered bright speckles
        for _ in range(int(rng.integers(25, 40))):
            y = int(rng.integers(2, size - 2))
            x = int(rng.integers(2, size - 2))
            img[y - 1:y + 1, x - 1:x + 1] = rng.uniform(180, 255)
    elif label == "Cyst":        # bright annulus
        radius = size * rng.uniform(0.26, 0.34)
        width = size * rng.uniform(0.05, 0.08)
        img += 180.0 * np.exp(-((rr - radius) ** 2) / (2 * width ** 2))
    elif label == "Tumor":       # bright angular wedge
        start = rng.uniform(0, 2 * np.pi)
        spread = rng.uniform(0.9, 1.3)
        ang = np.mod(np.arctan2(yy - cy, xx - cx) - start, 2 * np.pi)
        img += np.where((ang < spread) & (rr < size * 0.45), 160.0, 0.0)
    else:
        raise ConfigurationError(f"unknown synthetic class {label!r}")
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_synthetic(out_dir: str | Path, *, images_per_class: int = 200,
                       image_size: int = 64, seed: int = 0) -> list[SampleRecord]:
    """Write the four-pattern synthetic dataset and return its manifest."""
    if images_per_class < 1 or image_size < 16:
        raise ConfigurationError("need images_per_class >= 1 and image_size >= 16")
    out = Path(out_dir)
    records = []
    for label in CLASS_LABELS:
        rng = np.random.default_rng([seed, CLASS_LABELS.index(label)])
        class_dir = out / label
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(images_per_class):
            arr = _synth_image(rng, label, image_size)
            path = class_dir / f"{label.lower()}_{i:04d}.png"
            Image.fromarray(arr, mode="L").save(path, format="PNG")
            records.append(SampleRecord(path=str(path), label=label))
    return records
