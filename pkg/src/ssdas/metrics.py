"""Segmentation scores and feature-space separation statistics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import numerics as nx


@dataclass
class FeatureStats:
    sigma_w2: float  # mean within-class squared distance to the class centre
    sigma_b2: float  # mean squared distance over unordered pairs of class centres


@dataclass
class IoUResult:
    per_class: List[Optional[float]]  # None where the class has empty union
    miou: float


def confusion_matrix(preds, gts, num_classes: int) -> np.ndarray:
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    if preds.shape != gts.shape:
        raise ValueError(f"prediction shape {preds.shape} != ground truth {gts.shape}")
    p = preds.reshape(-1).astype(np.int64)
    g = gts.reshape(-1).astype(np.int64)
    for name, v in (("prediction", p), ("ground truth", g)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} values outside [0, {num_classes})")
    return np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> IoUResult:
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    per_class = [float(t / u) if u > 0 else None for t, u in zip(tp, union)]
    present = [v for v in per_class if v is not None]
    return IoUResult(per_class, float(np.mean(present)) if present else 0.0)


def miou(preds, gts, num_classes: int) -> IoUResult:
    return iou_from_confusion(confusion_matrix(preds, gts, num_classes))


def feature_stats(features, labels) -> FeatureStats:
    """``features`` is ``[P, D]`` (one row per pixel), ``labels`` is ``[P]``."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if f.ndim != 2 or f.shape[0] != y.size:
        raise ValueError("need one feature row per label")
    if y.size == 0:
        raise ValueError("no labeled pixels")
    classes = np.unique(y)
    centers = np.stack([f[y == c].mean(axis=0) for c in classes])
    within = [((f[y == c] - centers[i]) ** 2).sum(axis=1).mean() for i, c in enumerate(classes)]
    if len(classes) > 1:
        iu = np.triu_indices(len(classes), k=1)
        d = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        between = float(d[iu].mean())
    else:
        between = 0.0
    return FeatureStats(float(np.mean(within)), between)


def predict(model, images: np.ndarray, batch: int = 25) -> np.ndarray:
    """Arg-max class map for ``[B,3,H,W]`` images."""
    out = []
    with nx.no_grad():
        for i in range(0, len(images), batch):
            out.append(model(images[i:i + batch]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=np.int64)


def pixel_features(model, images: np.ndarray, batch: int = 25) -> np.ndarray:
    """Penultimate-layer features flattened to ``[B*H*W, D]``."""
    out = []
    with nx.no_grad():
        for i in range(0, len(images), batch):
            f = model.features(nx.Tensor(images[i:i + batch])).data
            out.append(f.transpose(0, 2, 3, 1).reshape(-1, f.shape[1]))
    return np.concatenate(out)


def evaluate(model, images: np.ndarray, masks: np.ndarray, num_classes: int, with_features: bool = True) -> dict:
    res = miou(predict(model, images), masks, num_classes)
    doc = {"per_class_iou": res.per_class, "miou": res.miou}
    if with_features:
        st = feature_stats(pixel_features(model, images), masks.reshape(-1))
        doc.update(sigma_w2=st.sigma_w2, sigma_b2=st.sigma_b2)
    return doc


def write_metrics_json(path, doc: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def export_features(model, images: np.ndarray, masks: np.ndarray, path) -> Path:
    """Write per-pixel penultimate features plus the label as CSV."""
    path = Path(path)
    feats = pixel_features(model, images)
    labels = np.asarray(masks).reshape(-1)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{i}" for i in range(feats.shape[1])] + ["label"])
            for row, lab in zip(feats, labels):
                w.writerow([repr(float(v)) for v in row] + [int(lab)])
    except OSError as exc:
        raise OSError(f"cannot write features to {path}: {exc}") from exc
    return path


def read_features(path):
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-1], data[:, -1].astype(np.int64)
