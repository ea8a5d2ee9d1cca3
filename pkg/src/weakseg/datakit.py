"""Dataset ingestion, synthetic data generation, evaluation and inference.

Directory layout (VOC-style):

    root/
      classes.txt          one foreground class name per line (optional;
                           defaults to the VOC-2012 foreground list)
      images/<id>.png
      masks/<id>.png       8-bit index images (required in full mode)
      image_labels.txt     lines: <id> <class_name>[,<class_name>...]
      splits/<split>.txt   one image id per line
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .backbone import ImageBatch
from .camgen import VOC_FOREGROUND
from .errors import DataError
from .palette import palette_array


@dataclass(frozen=True)
class SampleRecord:
    image_id: str
    image_path: Path
    labels: frozenset          # foreground class indices present
    mask_path: Path = None


@dataclass
class DatasetManifest:
    root: Path
    split: str
    records: list
    class_names: list          # foreground universe, index order

    def __len__(self):
        return len(self.records)

    @property
    def num_classes(self) -> int:
        """Total label count including background."""
        return len(self.class_names) + 1


def synthetic_class_names(n: int) -> list:
    return [f"object{i:02d}" for i in range(n)]


def load_dataset(root, split: str, mode: str = "weak") -> DatasetManifest:
    """Read one split; validates files, labels and (in full mode) masks."""
    if mode not in ("weak", "full"):
        raise DataError(f"unknown dataset mode '{mode}'")
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    classes_file = root / "classes.txt"
    if classes_file.is_file():
        class_names = [l.strip() for l in classes_file.read_text().splitlines() if l.strip()]
    else:
        class_names = list(VOC_FOREGROUND)
    index_of = {name: i for i, name in enumerate(class_names)}

    labels_file = root / "image_labels.txt"
    if not labels_file.is_file():
        raise DataError(f"missing {labels_file}")
    labels_by_id = {}
    for line in labels_file.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        image_id, _, names = line.partition(" ")
        indices = set()
        for name in filter(None, names.strip().split(",")):
            if name not in index_of:
                raise DataError(f"unknown class name '{name}' for image '{image_id}'")
            indices.add(index_of[name])
        labels_by_id[image_id] = frozenset(indices)

    split_file = root / "splits" / f"{split}.txt"
    if not split_file.is_file():
        raise DataError(f"missing split file {split_file}")
    ids = [l.strip() for l in split_file.read_text().splitlines() if l.strip()]
    if not ids:
        raise DataError(f"split '{split}' is empty")

    records = []
    for image_id in ids:
        image_path = root / "images" / f"{image_id}.png"
        if not image_path.is_file():
            raise DataError(f"image file missing for id '{image_id}': {image_path}")
        labels = labels_by_id.get(image_id, frozenset())
        if mode == "weak" and not labels:
            raise DataError(f"weak mode requires image-level labels for id '{image_id}'")
        mask_path = root / "masks" / f"{image_id}.png"
        if mode == "full" and not mask_path.is_file():
            raise DataError(f"full mode requires a mask for id '{image_id}': {mask_path}")
        records.append(SampleRecord(
            image_id=image_id, image_path=image_path, labels=labels,
            mask_path=mask_path if mask_path.is_file() else None))
    return DatasetManifest(root=root, split=split, records=records, class_names=class_names)


def load_image(path) -> torch.Tensor:
    """(3, H, W) float tensor in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def load_mask(path) -> torch.Tensor:
    """(H, W) long tensor of class indices."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.int64)
    return torch.from_numpy(arr)


def save_index_png(labels, path) -> None:
    arr = np.asarray(labels, dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def write_palette_json(path, class_names) -> None:
    """Class-index table for exported index images (0 = background)."""
    table = {"0": {"name": "__background__", "rgb": list(palette_array(1)[0].tolist())}}
    colors = palette_array(len(class_names) + 1)
    for i, name in enumerate(class_names):
        table[str(i + 1)] = {"name": name, "rgb": [float(c) for c in colors[i + 1]]}
    Path(path).write_text(json.dumps(table, indent=2) + "\n")


def make_synthetic_dataset(root, seed: int, count: int, grid=(4, 4), num_classes: int = 2,
                           cell: int = 8, val_count: int = 0,
                           min_rect: int = 1) -> DatasetManifest:
    """Materialize a deterministic toy dataset of colored rectangles.

    Each sample paints cell-aligned rectangles (one color per class) on a
    background color; the mask is the exact layout. Rectangle sides span
    min_rect to half the grid. Returns the train-split manifest; a val split
    is generated too when val_count > 0.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if min_rect < 1 or min_rect > max(grid[0] // 2, 1) or min_rect > max(grid[1] // 2, 1):
        raise ValueError("min_rect must fit within half the grid")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    (root / "splits").mkdir(exist_ok=True)
    class_names = synthetic_class_names(num_classes)
    rng = np.random.default_rng(seed)
    colors = palette_array(num_classes + 1)
    gh, gw = grid

    label_lines = []
    for split, n in (("train", count), ("val", val_count)):
        ids = []
        for i in range(n):
            image_id = f"{split}_{i:04d}"
            layout = np.zeros((gh, gw), dtype=np.uint8)
            chosen = [c for c in range(num_classes) if rng.random() < 0.75]
            if not chosen:
                chosen = [int(rng.integers(num_classes))]
            for cls in chosen:
                rh = int(rng.integers(min_rect, max(gh // 2, 1) + 1))
                rw = int(rng.integers(min_rect, max(gw // 2, 1) + 1))
                top = int(rng.integers(0, gh - rh + 1))
                left = int(rng.integers(0, gw - rw + 1))
                layout[top:top + rh, left:left + rw] = cls + 1
            present = sorted(int(v) - 1 for v in np.unique(layout) if v > 0)
            rgb = np.kron(colors[layout], np.ones((cell, cell, 1), dtype=np.float32))
            image = np.round(rgb * 255.0).astype(np.uint8)
            mask = np.kron(layout, np.ones((cell, cell), dtype=np.uint8))
            Image.fromarray(image, mode="RGB").save(root / "images" / f"{image_id}.png")
            Image.fromarray(mask, mode="L").save(root / "masks" / f"{image_id}.png")
            label_lines.append(
                f"{image_id} {','.join(class_names[c] for c in present)}")
            ids.append(image_id)
        if ids:
            (root / "splits" / f"{split}.txt").write_text("\n".join(ids) + "\n")
    (root / "image_labels.txt").write_text("\n".join(label_lines) + "\n")
    (root / "classes.txt").write_text("\n".join(class_names) + "\n")
    return load_dataset(root, "train", mode="weak")


# -- evaluation ----------------------------------------------------------


def confusion_matrix(prediction, ground_truth, num_classes: int) -> np.ndarray:
    """(C, C) counts with rows = ground truth, columns = prediction."""
    pred = np.asarray(prediction).reshape(-1)
    gt = np.asarray(ground_truth).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in size")
    if pred.min() < 0 or pred.max() >= num_classes or gt.min() < 0 or gt.max() >= num_classes:
        raise ValueError("labels out of range for confusion matrix")
    return np.bincount(gt * num_classes + pred,
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou(predictions, ground_truths, num_classes: int):
    """Per-class IoU (NaN for classes absent from both sides) and their mean.

    Accepts a single array pair or parallel lists of arrays.
    """
    if isinstance(predictions, (list, tuple)):
        conf = np.zeros((num_classes, num_classes), dtype=np.int64)
        for pred, gt in zip(predictions, ground_truths):
            conf += confusion_matrix(pred, gt, num_classes)
    else:
        conf = confusion_matrix(predictions, ground_truths, num_classes)
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1)
    pred_count = conf.sum(axis=0)
    denom = gt_count + pred_count - tp
    per_class = np.full(num_classes, np.nan)
    present = denom > 0
    per_class[present] = tp[present] / denom[present]
    return per_class, float(np.nanmean(per_class[present])) if present.any() else 0.0


def multi_scale_infer(backbone, decoder, pixels: torch.Tensor, scales) -> torch.Tensor:
    """Scale-averaged class probabilities at the input resolution.

    For each scale the image is bilinearly resized (side lengths snapped to
    the patch size), passed through the frozen encoder and decoder, and the
    softmax probabilities are resized back before averaging.
    """
    if not scales:
        raise ValueError("scales must be non-empty")
    _, _, height, width = pixels.shape
    p = backbone.config.patch_size
    acc = None
    with torch.no_grad():
        for scale in scales:
            h2 = max(p, int(round(height * scale / p)) * p)
            w2 = max(p, int(round(width * scale / p)) * p)
            scaled = pixels if (h2, w2) == (height, width) else F.interpolate(
                pixels, size=(h2, w2), mode="bilinear", align_corners=False)
            features, _, _ = backbone.encode_image(ImageBatch(scaled))
            logits, _ = decoder(features, (h2 // p, w2 // p), (h2, w2))
            probs = torch.softmax(logits, dim=1)
            if (h2, w2) != (height, width):
                probs = F.interpolate(probs, size=(height, width),
                                      mode="bilinear", align_corners=False)
            acc = probs if acc is None else acc + probs
    return acc / len(scales)
