"""Datasets, fold plans and the evaluation harness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import resize_bilinear
from .model import EMOTIONS, Model, NetworkSpec, TrainConfig, build, decide, predict, train
from .pnm import read_pgm, to_unit
from .tensor import RngStream

IMAGE_SIZE = (48, 48)
PIXELS = IMAGE_SIZE[0] * IMAGE_SIZE[1]
DEFAULT_AUS = 44
MAX_AUS = 50
MAX_INTENSITY = 5


class DataError(ValueError):
    pass


@dataclass
class LabeledImage:
    id: str
    pixels: np.ndarray  # (1, H, W) in [0, 1]
    label: int
    au: np.ndarray | None = None  # intensities 0..5, index u is AU number u + 1
    usage: str | None = None

    @property
    def au_binary(self) -> np.ndarray | None:
        return None if self.au is None else (self.au > 0).astype(int)


@dataclass
class Dataset:
    ids: list[str]
    pixels: np.ndarray  # (N, 1, H, W) float32
    labels: np.ndarray  # (N,) int
    au: np.ndarray | None = None  # (N, n_aus) int
    usage: list[str] | None = None
    class_names: list[str] = field(default_factory=lambda: list(EMOTIONS))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.ids) != len(self.pixels) or len(self.labels) != len(self.pixels):
            raise DataError("ids, pixels and labels differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("image ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.ids[i], self.pixels[i], int(self.labels[i]),
                            None if self.au is None else self.au[i],
                            None if self.usage is None else self.usage[i])

    def index_of(self, image_id: str) -> int:
        return self.ids.index(image_id)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset([self.ids[i] for i in idx], self.pixels[idx], self.labels[idx],
                       None if self.au is None else self.au[idx],
                       None if self.usage is None else [self.usage[i] for i in idx],
                       list(self.class_names))

    def split(self, usage: str) -> "Dataset":
        if self.usage is None:
            raise DataError("dataset carries no usage column")
        return self.subset([i for i, u in enumerate(self.usage) if u == usage])

    def targets(self, head: str) -> np.ndarray:
        """Training targets for a head preset (``emotion8``/``au-binary``/``au-intensity``)."""
        if head == "emotion8":
            return self.labels
        if self.au is None:
            raise DataError(f"head {head!r} needs AU annotations")
        if head == "au-binary":
            return (self.au > 0).astype(int)
        if head == "au-intensity":
            return self.au.astype(int)
        raise DataError(f"unknown head {head!r}")


def _check_label(label: int, where: str) -> int:
    if not 0 <= label < len(EMOTIONS):
        raise DataError(f"{where}: emotion label {label} outside 0..{len(EMOTIONS) - 1}")
    return label


def load_csv(path) -> Dataset:
    """FER2013-style CSV: ``emotion,pixels,usage`` with 2304 pixels per row.

    An optional ``id`` column names the images; otherwise ids are the
    zero-based row numbers.
    """
    ids, pixels, labels, usage = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = {c.strip().lower(): c for c in (reader.fieldnames or [])}
        for needed in ("emotion", "pixels"):
            if needed not in cols:
                raise DataError(f"{path}: missing column {needed!r} (header {reader.fieldnames})")
        for row_no, row in enumerate(reader, start=1):
            where = f"{path} row {row_no}"
            values = row[cols["pixels"]].split()
            if len(values) != PIXELS:
                raise DataError(f"{where}: expected {PIXELS} pixels, found {len(values)}")
            px = np.array([int(v) for v in values], dtype=np.int64)
            if px.min() < 0 or px.max() > 255:
                raise DataError(f"{where}: pixel values must be 0..255")
            labels.append(_check_label(int(row[cols["emotion"]]), where))
            pixels.append(to_unit(px.reshape(1, *IMAGE_SIZE)))
            usage.append(row[cols["usage"]].strip() if "usage" in cols else "")
            ids.append(row[cols["id"]].strip() if "id" in cols else str(row_no - 1))
    if not ids:
        raise DataError(f"{path}: no rows")
    return Dataset(ids, np.stack(pixels), np.array(labels), usage=usage)


def save_csv(dataset: Dataset, path) -> None:
    default_ids = dataset.ids == [str(i) for i in range(len(dataset))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["id"] if not default_ids else []) + ["emotion", "pixels", "usage"])
        for i in range(len(dataset)):
            px = np.clip(np.rint(dataset.pixels[i].ravel() * 255.0), 0, 255).astype(int)
            row = [str(dataset.labels[i]), " ".join(map(str, px)), (dataset.usage or [""] * len(dataset))[i]]
            w.writerow(([dataset.ids[i]] if not default_ids else []) + row)


def load_image_dir(root, size: tuple[int, int] = IMAGE_SIZE) -> Dataset:
    """Images laid out as ``root/<label>/<id>.pgm``, resampled bilinearly to ``size``."""
    root = Path(root)
    ids, pixels, labels = [], [], []
    label_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name)
    if not label_dirs:
        raise DataError(f"{root}: no label directories")
    for d in label_dirs:
        try:
            label = _check_label(int(d.name), str(d))
        except ValueError as exc:
            raise DataError(f"{d}: label directories must be named 0..7") from exc
        for f in sorted(d.glob("*.pgm")):
            img = to_unit(read_pgm(f))[None]
            if img.shape[1:] != tuple(size):
                img = resize_bilinear(img, size).astype(np.float32)
            ids.append(f.stem)
            pixels.append(img)
            labels.append(label)
    if not ids:
        raise DataError(f"{root}: no .pgm images")
    return Dataset(ids, np.stack(pixels), np.array(labels))


def load_au_labels(path, dataset: Dataset, n_aus: int = DEFAULT_AUS) -> Dataset:
    """Merge ``image_id,au_id,intensity`` rows into AU vectors.

    AU numbers run 1..n_aus and land at index ``au_id - 1``; AUs without a
    row stay at intensity 0.
    """
    if not 1 <= n_aus <= MAX_AUS:
        raise DataError(f"AU vector length must be 1..{MAX_AUS}, got {n_aus}")
    au = np.zeros((len(dataset), n_aus), dtype=int)
    index = {image_id: i for i, image_id in enumerate(dataset.ids)}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for row_no, row in enumerate(reader, start=1):
            if not row or (row_no == 1 and row[0].strip() == "image_id"):
                continue
            where = f"{path} row {row_no}"
            if len(row) != 3:
                raise DataError(f"{where}: expected image_id,au_id,intensity")
            image_id, au_id, intensity = row[0].strip(), int(row[1]), int(row[2])
            if image_id not in index:
                raise DataError(f"{where}: unknown image id {image_id!r}")
            if not 1 <= au_id <= n_aus:
                raise DataError(f"{where}: AU {au_id} outside 1..{n_aus}")
            if not 0 <= intensity <= MAX_INTENSITY:
                raise DataError(f"{where}: intensity {intensity} outside 0..{MAX_INTENSITY}")
            au[index[image_id], au_id - 1] = intensity
    return replace(dataset, au=au)


def load_dataset(path) -> Dataset:
    path = Path(path)
    return load_image_dir(path) if path.is_dir() else load_csv(path)


# --- folds and metrics ---------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple[tuple[str, ...], ...]

    def train_test(self, i: int) -> tuple[list[str], list[str]]:
        test = list(self.folds[i])
        train_ids = [x for j, f in enumerate(self.folds) if j != i for x in f]
        return train_ids, test


def make_folds(dataset: Dataset | Sequence[str], k: int = 10, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, then a contiguous split into ``k`` folds whose sizes differ by at most one."""
    ids = list(dataset.ids if isinstance(dataset, Dataset) else dataset)
    if not 1 <= k <= len(ids):
        raise DataError(f"cannot make {k} folds from {len(ids)} samples")
    order = RngStream(seed).permutation(len(ids))
    parts = np.array_split(order, k)
    return FoldPlan(k, seed, tuple(tuple(ids[i] for i in part) for part in parts))


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=int)
    np.add.at(cm, (np.asarray(truth, dtype=int), np.asarray(pred, dtype=int)), 1)
    return cm


def head_kind(model: Model) -> str:
    return {"softmax": "emotion8", "sigmoid": "au-binary", "linear": "au-intensity"}[model.head_activation]


def evaluate(model: Model, dataset: Dataset) -> dict:
    """Accuracy for every head; confusion for class heads; MSE for intensity heads.

    AU accuracy is the fraction of (image, AU) decisions that match.  Intensity
    predictions are rounded and clamped to 0..5 before scoring.
    """
    head = head_kind(model)
    target = dataset.targets(head)
    if head != "emotion8" and target.shape[1] != model.spec.head_units:
        raise DataError(f"dataset has {target.shape[1]} AUs but the head has {model.spec.head_units}")
    pred = decide(model, predict(model, dataset.pixels))
    metrics: dict = {"n": len(dataset), "accuracy": float(np.mean(pred == target))}
    if head == "emotion8":
        metrics["confusion"] = confusion_matrix(target, pred, model.spec.head_units)
    elif head == "au-intensity":
        metrics["mse"] = float(np.mean((pred - target) ** 2))
    return metrics


def write_metrics_csv(metrics: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for key in sorted(metrics):
            value = metrics[key]
            if isinstance(value, np.ndarray):
                continue
            w.writerow([key, repr(float(value)) if isinstance(value, float) else value])


def write_confusion_csv(confusion: np.ndarray, class_names: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(class_names))
        for name, row in zip(class_names, confusion):
            w.writerow([name] + [int(v) for v in row])


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    values = [float(v) for v in values]
    mean = sum(values) / len(values)
    if len(values) < 2:
        return mean, 0.0
    return mean, math.sqrt(sum((v - mean) ** 2 for v in values) / (len(values) - 1))


def cross_validate(dataset: Dataset, spec: NetworkSpec, config: TrainConfig, head: str = "emotion8",
                   k: int = 10, seed: int = 0,
                   progress: Callable[[int, dict], None] | None = None) -> dict:
    """Train a fresh model per fold and score it on the held-out fold."""
    plan = make_folds(dataset, k, seed)
    index = {x: i for i, x in enumerate(dataset.ids)}
    folds = []
    for i in range(k):
        train_ids, test_ids = plan.train_test(i)
        tr = dataset.subset([index[x] for x in train_ids])
        te = dataset.subset([index[x] for x in test_ids])
        model = build(spec, RngStream(config.seed).spawn(i))
        train(model, tr.pixels, tr.targets(head), replace(config, seed=config.seed + i))
        m = evaluate(model, te)
        folds.append(m)
        if progress:
            progress(i, m)
    acc_mean, acc_std = mean_std([m["accuracy"] for m in folds])
    result = {"folds": k, "accuracy_mean": acc_mean, "accuracy_std": acc_std}
    for i, m in enumerate(folds):
        result[f"fold{i}_accuracy"] = m["accuracy"]
    if head == "au-intensity":
        result["mse_mean"], result["mse_std"] = mean_std([m["mse"] for m in folds])
    return result


def cross_dataset_eval(model: Model, other: Dataset) -> float:
    """Accuracy of ``model`` on a dataset labelled in a compatible class space.

    Classes are matched by name; the dataset's classes must all exist in the
    model's label space.
    """
    model_names = model.class_names
    missing = [c for c in other.class_names if c not in model_names]
    if missing:
        raise DataError(f"label spaces differ: model has {model_names}, dataset has {other.class_names}")
    remap = np.array([model_names.index(c) for c in other.class_names])
    truth = remap[other.labels]
    pred = decide(model, predict(model, other.pixels))
    return float(np.mean(pred == truth))
