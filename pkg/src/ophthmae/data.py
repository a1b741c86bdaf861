"""Image I/O, preprocessing, augmentation, quality filtering, manifests and splits."""

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import resize_cubic_float

MODALITIES = (
    "CFP", "FFA", "ICGA", "FAF", "RetCam", "OcularUltrasound",
    "OCT", "SlitLamp", "ExternalEye", "SpecularMicroscope", "CornealTopography",
)
SPLITS = ("train", "val", "test", "unassigned")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# background-crop thresholds; fundus-camera modalities share the CFP value
CROP_THRESHOLDS = {"CFP": 15, "OCT": 30, "FFA": 15, "ICGA": 15, "FAF": 15, "RetCam": 15}
# minimum detectable vessel ratio; records strictly below are dropped
VESSEL_RATIO_MIN = {"CFP": 0.04, "FFA": 0.01, "ICGA": 0.01}

SPLIT_FRACTIONS = (0.55, 0.15, 0.30)


class EmptyImageError(ValueError):
    pass


def sample_rng(seed, *keys):
    """Generator for one (seed, epoch, index, ...) key; independent of worker order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in keys]))


# --------------------------------------------------------------------------
# image files
# --------------------------------------------------------------------------

def load_image(path):
    """Read a PNG or PPM/PGM file as a uint8 (3, H, W) array."""
    from PIL import Image

    path = Path(path)
    if path.suffix.lower() not in (".png", ".ppm", ".pgm", ".pnm"):
        raise ValueError(f"unsupported image format {path.suffix!r} (PNG and PPM only): {path}")
    with Image.open(path) as im:
        if im.format not in ("PNG", "PPM"):
            raise ValueError(f"{path}: decoded format {im.format} is not PNG/PPM")
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        return to_three_channels(arr[None])
    return np.ascontiguousarray(arr[..., :3].transpose(2, 0, 1))


def save_image(image, path):
    from PIL import Image

    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError("save_image expects uint8 pixels")
    path = Path(path)
    fmt = "PNG" if path.suffix.lower() == ".png" else "PPM"
    if image.shape[0] == 1:
        Image.fromarray(image[0], mode="L").save(path, format=fmt)
    else:
        Image.fromarray(np.ascontiguousarray(image.transpose(1, 2, 0))).save(path, format=fmt)


def to_three_channels(image):
    """Replicate single-channel images so one backbone serves every modality."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.shape[0] == 1:
        return np.repeat(image, 3, axis=0)
    return image


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def threshold_crop(image, threshold, reduce="max"):
    """Zero pixels darker than ``threshold`` and crop to the remaining content."""
    if not 0 <= threshold <= 255:
        raise ValueError(f"threshold must lie in [0, 255], got {threshold}")
    image = np.asarray(image)
    if reduce == "max":
        level = image.max(axis=0)
    elif reduce == "mean":
        level = image.mean(axis=0)
    else:
        raise ValueError(f"unknown channel reduction {reduce!r}")
    keep = level >= threshold
    out = np.where(keep[None], image, 0).astype(image.dtype)
    nonzero = out.max(axis=0) > 0
    if not nonzero.any():
        raise EmptyImageError("empty after threshold")
    rows = np.flatnonzero(nonzero.any(axis=1))
    cols = np.flatnonzero(nonzero.any(axis=0))
    return out[:, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def resize_cubic(image, target=256):
    """Catmull-Rom bicubic resize of a (C, H, W) image with clamped edges.

    uint8 input is rounded back to uint8; float input is clamped to [0, 255].
    """
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("cannot resize an empty image")
    out_h, out_w = (target, target) if np.isscalar(target) else target
    if image.shape[1:] == (out_h, out_w):
        return image.copy()
    out = np.clip(resize_cubic_float(image, out_h, out_w), 0.0, 255.0)
    if image.dtype == np.uint8:
        return np.rint(out).astype(np.uint8)
    return out.astype(image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64)


def preprocess_image(image, modality, size=256):
    image = to_three_channels(image)
    threshold = CROP_THRESHOLDS.get(modality, 0)
    if threshold:
        image = threshold_crop(image, threshold)
    return resize_cubic(image, size)


def normalize(image01, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    return (np.asarray(image01, dtype=np.float64) - m) / s


def hflip(image):
    return np.ascontiguousarray(image[..., ::-1])


def random_crop_box(height, width, rng, scale=(0.2, 1.0), ratio=(3 / 4, 4 / 3), tries=10):
    """(top, left, h, w) with area fraction in ``scale`` and aspect in ``ratio``."""
    area = height * width
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(tries):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    side = min(height, width)
    return (height - side) // 2, (width - side) // 2, side, side


def augment(image, rng, out_size=224, scale=(0.2, 1.0), ratio=(3 / 4, 4 / 3), flip_prob=0.5,
            mean=IMAGENET_MEAN, std=IMAGENET_STD, full_crop=False, flip=None):
    """Random resized crop, horizontal flip, scale to [0, 1], per-channel normalise.

    ``full_crop`` and ``flip`` (True/False) override the random draws.
    """
    image = to_three_channels(image)
    _, h, w = image.shape
    box = random_crop_box(h, w, rng, scale, ratio)
    do_flip = rng.random() < flip_prob
    if full_crop:
        box = (0, 0, h, w)
    if flip is not None:
        do_flip = bool(flip)
    top, left, ch, cw = box
    crop = image[:, top:top + ch, left:left + cw].astype(np.float64)
    out = resize_cubic(crop, out_size)
    if do_flip:
        out = hflip(out)
    return normalize(out / 255.0, mean, std).astype(np.float32)


def eval_transform(image, out_size=224, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Deterministic inference path: resize to out_size*256/224, center-crop out_size."""
    image = to_three_channels(image)
    short = int(round(out_size * 256 / 224))
    resized = resize_cubic(image.astype(np.float64), short)
    off = (short - out_size) // 2
    crop = resized[:, off:off + out_size, off:off + out_size]
    return normalize(crop / 255.0, mean, std).astype(np.float32)


# --------------------------------------------------------------------------
# records and manifests
# --------------------------------------------------------------------------

@dataclass
class ImageRecord:
    path: str
    modality: str
    labels: list = field(default_factory=list)
    vessel_ratio: float = None
    split: str = "unassigned"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.vessel_ratio is not None and not 0.0 <= self.vessel_ratio <= 1.0:
            raise ValueError(f"vessel_ratio {self.vessel_ratio} outside [0, 1]")
        self.labels = [int(v) for v in self.labels]

    def to_json(self):
        d = {"path": self.path, "modality": self.modality, "labels": self.labels}
        if self.vessel_ratio is not None:
            d["vessel_ratio"] = self.vessel_ratio
        if self.split != "unassigned":
            d["split"] = self.split
        return d


@dataclass
class Manifest:
    name: str
    classes: list
    records: list
    root: str = "."

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")
        k = len(self.classes)
        for r in self.records:
            if any(not 0 <= lab < k for lab in r.labels):
                raise ValueError(f"{r.path}: label index out of range for {k} classes")

    def __len__(self):
        return len(self.records)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def resolve(self, record):
        p = Path(record.path)
        return p if p.is_absolute() else Path(self.root) / p

    def load(self, record):
        return load_image(self.resolve(record))

    def replace(self, records):
        return Manifest(self.name, list(self.classes), list(records), self.root)


def read_manifest(path):
    """JSON-lines manifest. The optional header line carries ``classes`` (and ``name``)."""
    path = Path(path)
    name, classes, records = path.stem, [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if "classes" in obj and "path" not in obj:
                classes = list(obj["classes"])
                name = obj.get("name", name)
                continue
            try:
                records.append(ImageRecord(
                    path=obj["path"], modality=obj["modality"], labels=obj.get("labels", []),
                    vessel_ratio=obj.get("vessel_ratio"), split=obj.get("split", "unassigned")))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing key {exc}") from None
    return Manifest(name, classes, records, root=str(path.parent))


def manifest_lines(manifest):
    header = {"name": manifest.name, "classes": manifest.classes}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in manifest.records]
    return "\n".join(lines) + "\n"


def write_manifest(manifest, path):
    atomic_write_text(path, manifest_lines(manifest))


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# filtering and splitting
# --------------------------------------------------------------------------

def quality_filter(record):
    """'keep' or 'exclude' from the externally supplied vessel ratio."""
    cutoff = VESSEL_RATIO_MIN.get(record.modality)
    if cutoff is None:
        return "keep"
    if record.vessel_ratio is None:
        raise ValueError(f"{record.path}: {record.modality} image needs a vessel_ratio")
    return "exclude" if record.vessel_ratio < cutoff else "keep"


def split_counts(n):
    n_train = math.floor(n * 55 / 100)
    n_val = math.floor(n * 15 / 100)
    return n_train, n_val, n - n_train - n_val


def split_dataset(manifest, seed):
    """Shuffle with ``seed`` and assign 55/15/30 train/val/test (floors; rest to test)."""
    n = len(manifest)
    if n < 3:
        raise ValueError(f"need at least 3 records to split, got {n}")
    if any(r.split != "unassigned" for r in manifest.records):
        raise ValueError("records already carry split assignments")
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = split_counts(n)
    names = np.array(["test"] * n, dtype=object)
    names[order[:n_train]] = "train"
    names[order[n_train:n_train + n_val]] = "val"
    records = [ImageRecord(r.path, r.modality, list(r.labels), r.vessel_ratio, str(s))
               for r, s in zip(manifest.records, names)]
    return manifest.replace(records)


def clear_splits(manifest):
    return manifest.replace([ImageRecord(r.path, r.modality, list(r.labels), r.vessel_ratio)
                             for r in manifest.records])
