# ecmnet/data.py
"""Cityscapes and CamVid ingestion, the synthetic shapes generator and paired augmentation."""
import functools
import glob
import logging
import math
import os
from dataclasses import dataclass, replace

import numpy as np
import toml
import torch
from PIL import Image, ImageDraw
from torch.utils.data import Dataset

from ecmnet.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255
RESOURCES_DIR = os.path.join(os.path.dirname(__file__), "resources")
DATASET_NAMES = ("cityscapes", "camvid", "synthetic")
SPLITS = ("train", "val", "test")
CITYSCAPES_SPLIT_SIZES = {"train": 2975, "val": 500, "test": 1525}
MAX_SYNTH_CLASSES = 11

# Synthetic class colours (class 0 is the textured background)
SYNTH_COLORS = np.array([
    [0.45, 0.45, 0.45],
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.25, 0.05],
    [0.60, 0.95, 0.55],
    [0.05, 0.05, 0.05],
], dtype=np.float32)
SYNTH_SHAPES = ("disk", "square", "triangle")


@functools.lru_cache(maxsize=None)
def _load_resource(name):
    with open(os.path.join(RESOURCES_DIR, name), "r") as f:
        return toml.load(f)


def cityscapes_train_ids():
    """Lookup table raw labelId -> trainId; -1 marks ids the table does not define"""
    table = np.full(256, -1, dtype=np.int64)
    for entry in _load_resource("cityscapes_labels.toml")["labels"]:
        table[entry["id"]] = entry["train_id"]
    return table


def cityscapes_class_names():
    entries = sorted(
        (e for e in _load_resource("cityscapes_labels.toml")["labels"] if e["train_id"] != IGNORE_INDEX),
        key=lambda e: e["train_id"],
    )
    return tuple(e["name"] for e in entries)


def camvid_palette():
    """RGB tuple -> train id, void included"""
    return {tuple(c["color"]): c["train_id"] for c in _load_resource("camvid_palette.toml")["classes"]}


def camvid_class_names():
    classes = _load_resource("camvid_palette.toml")["classes"]
    return tuple(c["name"] for c in sorted(classes, key=lambda c: c["train_id"]) if c["train_id"] != IGNORE_INDEX)


def default_class_names(name, num_classes=None):
    if name == "cityscapes":
        return cityscapes_class_names()
    if name == "camvid":
        return camvid_class_names()
    shapes = [SYNTH_SHAPES[(k - 1) % len(SYNTH_SHAPES)] for k in range(1, num_classes or 3)]
    return ("background",) + tuple(f"{kind}_{k}" for k, kind in enumerate(shapes, start=1))


@dataclass
class SegSample:
    image: np.ndarray
    label: np.ndarray

    def validate(self, num_classes):
        """Raise DataError unless the sample satisfies the image/label contract"""
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"Image must be (3, H, W), got {self.image.shape}")
        if self.label.shape != self.image.shape[1:]:
            raise DataError(f"Label {self.label.shape} does not match image {self.image.shape[1:]}")
        if not np.isfinite(self.image).all():
            raise DataError("Image contains non-finite values")
        bad = (self.label >= num_classes) & (self.label != IGNORE_INDEX)
        if bad.any() or (self.label < 0).any():
            raise DataError(f"Label values outside [0, {num_classes}) and {IGNORE_INDEX}")
        return self

    def to_tensors(self):
        return torch.from_numpy(np.ascontiguousarray(self.image)), torch.from_numpy(
            np.ascontiguousarray(self.label).astype(np.int64))


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    root: str = ""
    split: str = "train"
    num_classes: int = 0
    class_names: tuple = ()

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise ConfigError(f"Unknown dataset '{self.name}', expected one of {DATASET_NAMES}")
        if self.split not in SPLITS:
            raise ConfigError(f"Unknown split '{self.split}', expected one of {SPLITS}")
        default_k = {"cityscapes": 19, "camvid": 11}.get(self.name, 3)
        if not self.num_classes:
            object.__setattr__(self, "num_classes", default_k)
        if not self.class_names:
            object.__setattr__(self, "class_names", default_class_names(self.name, self.num_classes))
        if len(self.class_names) != self.num_classes:
            raise ConfigError(
                f"{self.name}: {len(self.class_names)} class names for {self.num_classes} classes"
            )

    def with_split(self, split):
        return replace(self, split=split)


def remap_cityscapes(raw):
    """Map raw labelIds to the 19 train ids, 255 for ignored ids; unknown ids are an error"""
    raw = np.asarray(raw)
    table = cityscapes_train_ids()
    outside = (raw < 0) | (raw >= table.size)
    if outside.any():
        raise DataError(f"Cityscapes label id {int(raw[outside][0])} outside the labelId table")
    mapped = table[raw]
    if (mapped < 0).any():
        bad = int(raw[mapped < 0][0])
        raise DataError(f"Unknown Cityscapes label id {bad}")
    return mapped


def remap_camvid(rgb):
    """Map an (H, W, 3) colour-coded label image to train ids through the CamVid palette"""
    rgb = np.asarray(rgb, dtype=np.int64)
    codes = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    colors, inverse = np.unique(codes, return_inverse=True)
    palette = camvid_palette()
    ids = np.empty(len(colors), dtype=np.int64)
    for i, code in enumerate(colors):
        color = (int(code >> 16) & 255, int(code >> 8) & 255, int(code) & 255)
        if color not in palette:
            raise DataError(f"Unknown CamVid palette colour {color}")
        ids[i] = palette[color]
    return ids[inverse].reshape(codes.shape)


def _read_image(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0


def _read_label(path, mode):
    with Image.open(path) as img:
        if mode == "RGB":
            return np.asarray(img.convert("RGB"))
        if img.mode not in ("L", "P", "I", "I;16"):
            img = img.convert("L")
        return np.asarray(img, dtype=np.int64)


@functools.lru_cache(maxsize=32)
def list_pairs(spec):
    """Sorted (image, label) path pairs for a dataset split on disk"""
    if not spec.root:
        raise DataError(f"No data root configured for dataset '{spec.name}'")
    if spec.name == "cityscapes":
        images = sorted(glob.glob(os.path.join(spec.root, "leftImg8bit", spec.split, "*", "*_leftImg8bit.png")))
        pairs = []
        for image in images:
            city = os.path.basename(os.path.dirname(image))
            stem = os.path.basename(image)[: -len("_leftImg8bit.png")]
            label = os.path.join(spec.root, "gtFine", spec.split, city, f"{stem}_gtFine_labelIds.png")
            pairs.append((image, label))
        expected = CITYSCAPES_SPLIT_SIZES[spec.split]
        if pairs and len(pairs) != expected:
            logger.warning(f"Cityscapes {spec.split} has {len(pairs)} images, the full split has {expected}")
    else:
        images = sorted(glob.glob(os.path.join(spec.root, spec.split, "*.png")))
        pairs = []
        for image in images:
            stem = os.path.splitext(os.path.basename(image))[0]
            label = os.path.join(spec.root, f"{spec.split}_labels", f"{stem}_L.png")
            pairs.append((image, label))
    if not pairs:
        raise DataError(f"No images found for {spec.name}/{spec.split} under {spec.root}")
    for image, label in pairs:
        if not os.path.exists(label):
            raise DataError(f"Missing label for {image}: expected {label}")
    return tuple(pairs)


def load_sample(spec, index):
    """
    Read one image/label pair and convert the label to train ids.

    Args:
        spec: DatasetSpec with a root on disk
        index: position in the sorted split

    Returns:
        SegSample with image in [0, 1] and labels in [0, K) or 255
    """
    pairs = list_pairs(spec)
    if not 0 <= index < len(pairs):
        raise DataError(f"Index {index} out of range for {len(pairs)} samples")
    image_path, label_path = pairs[index]
    image = _read_image(image_path)

    if spec.name == "cityscapes":
        label = remap_cityscapes(_read_label(label_path, "L"))
    elif spec.name == "camvid":
        label = remap_camvid(_read_label(label_path, "RGB"))
    else:
        label = _read_label(label_path, "L")

    if label.shape != image.shape[1:]:
        raise DataError(
            f"Size mismatch: image {image_path} is {image.shape[1:]}, label {label_path} is {label.shape}"
        )
    return SegSample(image=image, label=label.astype(np.int64)).validate(spec.num_classes)


def _normalized_priors(num_classes, priors):
    if num_classes < 2:
        raise ConfigError(f"Synthetic data needs at least 2 classes, got {num_classes}")
    if not priors:
        return np.full(num_classes - 1, 1.0 / (num_classes - 1))
    priors = np.asarray(priors, dtype=np.float64)
    if len(priors) != num_classes - 1 or (priors < 0).any() or priors.sum() <= 0:
        raise ConfigError(f"synth_priors needs {num_classes - 1} non-negative weights, got {list(priors)}")
    return priors / priors.sum()


def _shape_polygon(kind, cx, cy, r):
    """Outline with the same area as a disk of radius r"""
    if kind == "disk":
        return [cx - r, cy - r, cx + r, cy + r]
    if kind == "square":
        half = r * math.sqrt(math.pi) / 2
        return [(cx - half, cy - half), (cx + half, cy - half), (cx + half, cy + half), (cx - half, cy + half)]
    side = math.sqrt(4 * math.pi / math.sqrt(3)) * r
    circum = side / math.sqrt(3)
    return [(cx + circum * math.sin(a), cy - circum * math.cos(a))
            for a in (0.0, 2 * math.pi / 3, 4 * math.pi / 3)]


def synth_sample(seed, index, height, width, num_classes, priors=None, shapes=3):
    """One shapes image; the rng depends only on (seed, index)"""
    if num_classes > MAX_SYNTH_CLASSES:
        raise ConfigError(f"Synthetic data supports at most {MAX_SYNTH_CLASSES} classes, got {num_classes}")
    probs = _normalized_priors(num_classes, priors)
    rng = np.random.default_rng([seed, index])

    # textured background: oblique stripes plus noise
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    freq = rng.uniform(0.15, 0.45)
    angle = rng.uniform(0, math.pi)
    stripes = 0.08 * np.sin(freq * (xx * math.cos(angle) + yy * math.sin(angle)))
    image = SYNTH_COLORS[0][:, None, None] + stripes[None] + rng.normal(0, 0.03, (3, height, width))

    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    r_min, r_max = min(height, width) / 10, min(height, width) / 5
    for _ in range(shapes):
        cls = int(rng.choice(num_classes - 1, p=probs)) + 1
        kind = SYNTH_SHAPES[(cls - 1) % len(SYNTH_SHAPES)]
        r = rng.uniform(r_min, r_max)
        margin = 1.6 * r
        cx = rng.uniform(margin, width - margin) if width > 2 * margin else width / 2
        cy = rng.uniform(margin, height - margin) if height > 2 * margin else height / 2
        outline = _shape_polygon(kind, cx, cy, r)
        if kind == "disk":
            draw.ellipse(outline, fill=cls)
        else:
            draw.polygon(outline, fill=cls)

    label = np.asarray(canvas, dtype=np.int64)
    for cls in np.unique(label):
        if cls == 0:
            continue
        tint = SYNTH_COLORS[cls] + rng.normal(0, 0.04, 3).astype(np.float32)
        mask = label == cls
        image[:, mask] = tint[:, None] + rng.normal(0, 0.03, (3, int(mask.sum())))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegSample(image=image, label=label)


def synth_batch(seed, batch, height, width, num_classes, priors=None, shapes=3):
    """Deterministic list of synthetic samples"""
    return [synth_sample(seed, i, height, width, num_classes, priors, shapes) for i in range(batch)]


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    scale_range: tuple = (0.75, 1.5)
    crop_size: tuple = None

    def validate(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        low, high = self.scale_range
        if not 0 < low <= high:
            raise ConfigError(f"scale_range must satisfy 0 < low <= high, got {self.scale_range}")
        return self


def hflip(sample):
    return SegSample(image=sample.image[:, :, ::-1].copy(), label=sample.label[:, ::-1].copy())


def rescale(sample, scale):
    """Bilinear for the image, nearest-neighbour for the label"""
    height, width = sample.label.shape
    size = (max(1, int(round(width * scale))), max(1, int(round(height * scale))))
    channels = [np.asarray(Image.fromarray(c.astype(np.float32), mode="F").resize(size, Image.BILINEAR))
                for c in sample.image]
    label = Image.fromarray(sample.label.astype(np.uint8), mode="L").resize(size, Image.NEAREST)
    return SegSample(image=np.stack(channels).astype(np.float32), label=np.asarray(label, dtype=np.int64))


def crop(sample, top, left, height, width):
    img_h, img_w = sample.label.shape
    if height > img_h or width > img_w:
        raise DataError(f"Crop {height}x{width} is larger than the image {img_h}x{img_w}")
    return SegSample(image=sample.image[:, top:top + height, left:left + width].copy(),
                     label=sample.label[top:top + height, left:left + width].copy())


def augment(sample, policy, seed, index=0):
    """
    Scale jitter, random crop and horizontal flip applied identically to image and label.

    Randomness comes from (seed, index) only, so results do not depend on worker order.
    """
    policy.validate()
    rng = np.random.default_rng([seed, index, 1])
    low, high = policy.scale_range
    if (low, high) != (1.0, 1.0):
        scale = rng.uniform(low, high)
        if scale != 1.0:
            sample = rescale(sample, scale)
    if policy.crop_size:
        crop_h, crop_w = policy.crop_size
        img_h, img_w = sample.label.shape
        if crop_h > img_h or crop_w > img_w:
            raise DataError(f"Crop {crop_h}x{crop_w} is larger than the image {img_h}x{img_w}")
        top = int(rng.integers(0, img_h - crop_h + 1))
        left = int(rng.integers(0, img_w - crop_w + 1))
        sample = crop(sample, top, left, crop_h, crop_w)
    if rng.random() < policy.flip_prob:
        sample = hflip(sample)
    return sample


def class_weights(labels, num_classes, c=1.02):
    """Inverse-log-frequency weights 1 / ln(c + p_k) from label maps, ignore pixels excluded"""
    counts = np.zeros(num_classes, dtype=np.float64)
    for label in labels:
        label = np.asarray(label)
        valid = label[label != IGNORE_INDEX]
        counts += np.bincount(valid.ravel(), minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        return np.ones(num_classes, dtype=np.float32)
    return (1.0 / np.log(c + counts / total)).astype(np.float32)


class SyntheticDataset(Dataset):
    def __init__(self, size, height, width, num_classes, seed=0, priors=None, shapes=3, policy=None):
        self.size = size
        self.height = height
        self.width = width
        self.num_classes = num_classes
        self.seed = seed
        self.priors = priors
        self.shapes = shapes
        self.policy = policy

    def __len__(self):
        return self.size

    def sample(self, index):
        sample = synth_sample(self.seed, index, self.height, self.width, self.num_classes,
                              self.priors, self.shapes)
        if self.policy is not None:
            sample = augment(sample, self.policy, self.seed, index)
        return sample

    def __getitem__(self, index):
        return self.sample(index).to_tensors()


class SegmentationDataset(Dataset):
    """Files on disk (Cityscapes, CamVid or a written synthetic set)"""

    def __init__(self, spec, policy=None, seed=0):
        self.spec = spec
        self.policy = policy
        self.seed = seed
        self.pairs = list_pairs(spec)

    def __len__(self):
        return len(self.pairs)

    def sample(self, index):
        sample = load_sample(self.spec, index)
        if self.policy is not None:
            sample = augment(sample, self.policy, self.seed, index)
        return sample

    def __getitem__(self, index):
        return self.sample(index).to_tensors()


def write_synthetic_dataset(root, split, count, height, width, num_classes, seed=0, priors=None, shapes=3):
    """Write synthetic samples as <root>/<split>/<stem>.png with id-valued <root>/<split>_labels/<stem>_L.png"""
    image_dir = os.path.join(root, split)
    label_dir = os.path.join(root, f"{split}_labels")
    os.makedirs(image_dir, exist_ok=True)
    os.makedirs(label_dir, exist_ok=True)
    paths = []
    for i in range(count):
        sample = synth_sample(seed, i, height, width, num_classes, priors, shapes)
        stem = f"synth_{i:05d}"
        rgb = (sample.image.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(os.path.join(image_dir, f"{stem}.png"))
        Image.fromarray(sample.label.astype(np.uint8), mode="L").save(os.path.join(label_dir, f"{stem}_L.png"))
        paths.append(stem)
    logger.info(f"Wrote {count} synthetic {split} samples to {root}")
    return paths


def build_dataset(spec, policy=None, seed=0, synth=None):
    """Dataset object for a spec; synthetic specs without a root are generated on the fly"""
    if spec.name == "synthetic" and not spec.root:
        synth = synth or {}
        height, width = synth.get("size", (64, 64))
        return SyntheticDataset(
            size=synth.get("samples", 512), height=height, width=width,
            num_classes=spec.num_classes, seed=synth.get("seed", seed),
            priors=synth.get("priors") or None, shapes=synth.get("shapes", 3), policy=policy,
        )
    return SegmentationDataset(spec, policy=policy, seed=seed)
