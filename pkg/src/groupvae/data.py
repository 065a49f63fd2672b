"""Grouped-observation data pipeline.

Reads raw IDX files, pads digits to 32x32, forms class-pure observation
groups for model training, builds the rotated-digit variant, and serves
deterministic mini-batches of groups.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigurationError, FormatError

IDX_MAGIC_IMAGES = 2051
IDX_MAGIC_LABELS = 2049

PADDED_HW = 32
SOURCE_HW = 28


def load_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file.

    Returns float32 images scaled to [0,1] (magic 2051) or int64 labels
    (magic 2049). Malformed headers or truncated payloads raise FormatError
    with the offending byte offset.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for IDX magic", offset=0)
    magic = struct.unpack(">i", raw[:4])[0]
    if magic == IDX_MAGIC_IMAGES:
        ndim = 3
    elif magic == IDX_MAGIC_LABELS:
        ndim = 1
    else:
        raise FormatError(f"{path}: unexpected IDX magic {magic}", offset=0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    dims = struct.unpack(f">{ndim}i", raw[4:header_end])
    expected = header_end + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(
            f"{path}: truncated payload, expected {expected} bytes", offset=len(raw)
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(dims)), offset=header_end)
    data = data.reshape(dims)
    if magic == IDX_MAGIC_LABELS:
        return data.astype(np.int64)
    return data.astype(np.float32) / 255.0


def load_image_label_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected an image file", offset=0)
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected a label file", offset=0)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}",
            offset=None,
        )
    return images, labels


def pad_images(images: np.ndarray, target_hw: int = PADDED_HW) -> np.ndarray:
    """Zero-pad (N, H, W) images to (N, target, target, 1), centered."""
    n, h, w = images.shape
    top = (target_hw - h) // 2
    left = (target_hw - w) // 2
    out = np.zeros((n, target_hw, target_hw, 1), dtype=np.float32)
    out[:, top : top + h, left : left + w, 0] = images
    return out


def rotate_images(images: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate (N, H, W, 1) images by per-image angles in degrees.

    Bilinear interpolation with zero fill; angle 0 is an exact no-op.
    """
    out = np.empty_like(images)
    for idx in range(images.shape[0]):
        angle = float(angles[idx])
        if angle == 0.0:
            out[idx] = images[idx]
        else:
            rotated = ndimage.rotate(
                images[idx, :, :, 0], angle, reshape=False, order=1, mode="constant", cval=0.0
            )
            out[idx, :, :, 0] = np.clip(rotated, 0.0, 1.0)
    return out


@dataclass
class ObservationSet:
    """Individually served observations (classifier-train and eval splits)."""

    images: np.ndarray  # (N, H, W, 1) float32 in [0,1]
    labels: np.ndarray  # (N,) int64
    rotations: np.ndarray | None = None  # degrees, None when unrotated

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class GroupedSet:
    """Class-pure observation groups for model training."""

    images: np.ndarray  # (N_groups, K, H, W, 1)
    labels: np.ndarray  # (N_groups,) shared class per group

    @property
    def n_groups(self) -> int:
        return self.images.shape[0]

    @property
    def group_size(self) -> int:
        return self.images.shape[1]


@dataclass
class DatasetSplits:
    model_train: GroupedSet
    classifier_train: ObservationSet
    eval_test: ObservationSet
    extra_eval: dict[str, ObservationSet] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _form_groups(
    pool_images: np.ndarray,
    pool_labels: np.ndarray,
    group_size: int,
    groups_per_class: int,
    rng: np.random.Generator,
) -> GroupedSet:
    classes = np.unique(pool_labels)
    group_images = []
    group_labels = []
    for cls in classes:
        members = np.flatnonzero(pool_labels == cls)
        if len(members) < group_size:
            raise ValueError(
                f"class {cls} has {len(members)} images, cannot form a group of {group_size}"
            )
        for _ in range(groups_per_class):
            # without replacement inside a group, with replacement across groups
            chosen = rng.choice(members, size=group_size, replace=False)
            group_images.append(pool_images[chosen])
            group_labels.append(cls)
    images = np.stack(group_images, axis=0)
    labels = np.asarray(group_labels, dtype=np.int64)
    order = rng.permutation(len(labels))
    return GroupedSet(images[order], labels[order])


def build_mnist_splits(
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    group_size: int,
    groups_per_class: int,
    seed: int,
    model_pool_size: int = 45000,
    classifier_pool_size: int = 5000,
) -> DatasetSplits:
    """Standard splits: 45k model-train pool (grouped), 5k classifier, test eval."""
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    if groups_per_class < 1:
        raise ValueError("groups_per_class must be >= 1")
    needed = model_pool_size + classifier_pool_size
    if train_images.shape[0] < needed:
        raise ValueError(f"need {needed} training images, found {train_images.shape[0]}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(train_images.shape[0])[:needed]
    model_idx = order[:model_pool_size]
    clf_idx = order[model_pool_size:needed]

    model_images = pad_images(train_images[model_idx])
    model_labels = train_labels[model_idx]
    grouped = _form_groups(model_images, model_labels, group_size, groups_per_class, rng)

    classifier_train = ObservationSet(pad_images(train_images[clf_idx]), train_labels[clf_idx])
    eval_test = ObservationSet(pad_images(test_images), test_labels.astype(np.int64))
    meta = {
        "dataset": "mnist",
        "seed": seed,
        "group_size": group_size,
        "groups_per_class": groups_per_class,
    }
    return DatasetSplits(grouped, classifier_train, eval_test, meta=meta)


def build_mnist_rot(
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    train_angles: Sequence[float],
    group_size: int,
    groups_per_class: int,
    seed: int,
    eval_angle_sets: dict[str, Sequence[float]] | None = None,
    model_pool_size: int = 45000,
    classifier_pool_size: int = 5000,
) -> DatasetSplits:
    """Rotated-digit variant: rotation is an explicit style factor.

    Each group member is rotated by an independently drawn training angle;
    classifier-train images likewise. Evaluation variants are produced for the
    training angles plus the held-out angle sets (defaults: +-55 and +-65).
    """
    train_angles = list(train_angles)
    if not train_angles:
        raise ValueError("train_angles must be nonempty")
    if eval_angle_sets is None:
        eval_angle_sets = {"pm55": [55.0, -55.0], "pm65": [65.0, -65.0]}

    splits = build_mnist_splits(
        train_images,
        train_labels,
        test_images,
        test_labels,
        group_size,
        groups_per_class,
        seed,
        model_pool_size=model_pool_size,
        classifier_pool_size=classifier_pool_size,
    )
    rng = np.random.default_rng(seed + 1)

    g = splits.model_train
    flat = g.images.reshape(-1, *g.images.shape[2:])
    angles = rng.choice(train_angles, size=flat.shape[0])
    grouped = GroupedSet(rotate_images(flat, angles).reshape(g.images.shape), g.labels)

    def rotated_set(obs: ObservationSet, angle_pool: Sequence[float]) -> ObservationSet:
        chosen = rng.choice(list(angle_pool), size=len(obs))
        return ObservationSet(rotate_images(obs.images, chosen), obs.labels.copy(), chosen)

    classifier_train = rotated_set(splits.classifier_train, train_angles)
    eval_test = rotated_set(splits.eval_test, train_angles)
    extra = {
        name: rotated_set(splits.eval_test, angle_set)
        for name, angle_set in eval_angle_sets.items()
    }
    meta = dict(splits.meta)
    meta.update({"dataset": "mnist-rot", "train_angles": train_angles,
                 "eval_angle_sets": {k: list(v) for k, v in eval_angle_sets.items()}})
    return DatasetSplits(grouped, classifier_train, eval_test, extra_eval=extra, meta=meta)


@dataclass
class GroupBatch:
    """A mini-batch of observation groups as torch tensors (B, K, C, H, W)."""

    images: torch.Tensor
    labels: torch.Tensor

    @property
    def n_groups(self) -> int:
        return self.images.shape[0]

    @property
    def group_size(self) -> int:
        return self.images.shape[1]


def to_group_tensor(images: np.ndarray) -> torch.Tensor:
    """(B, K, H, W, 1) numpy -> (B, K, 1, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 1, 4, 2, 3).float()


class BatchIterator:
    """Deterministic shuffled stream of GroupBatch, reshuffled each epoch.

    Iteration is infinite; ``batches_per_epoch`` gives the epoch length
    (incomplete trailing batches are dropped).
    """

    def __init__(self, grouped: GroupedSet, n_batch_groups: int, seed: int):
        if n_batch_groups < 2:
            raise ConfigurationError(
                "n_batch_groups must be >= 2 (cross-group pairing needs two groups)"
            )
        if grouped.n_groups < n_batch_groups:
            raise ConfigurationError(
                f"{grouped.n_groups} groups cannot fill a batch of {n_batch_groups}"
            )
        self.grouped = grouped
        self.n_batch_groups = n_batch_groups
        self.seed = seed

    @property
    def batches_per_epoch(self) -> int:
        return self.grouped.n_groups // self.n_batch_groups

    def __iter__(self) -> Iterator[GroupBatch]:
        rng = np.random.default_rng(self.seed)
        nb = self.n_batch_groups
        while True:
            order = rng.permutation(self.grouped.n_groups)
            for start in range(0, self.batches_per_epoch * nb, nb):
                idx = order[start : start + nb]
                yield GroupBatch(
                    to_group_tensor(self.grouped.images[idx]),
                    torch.from_numpy(self.grouped.labels[idx]),
                )


def save_splits(splits: DatasetSplits, out_dir) -> Path:
    """Persist splits as an npz plus a JSON manifest; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = {
        "group_images": splits.model_train.images,
        "group_labels": splits.model_train.labels,
        "clf_images": splits.classifier_train.images,
        "clf_labels": splits.classifier_train.labels,
        "eval_images": splits.eval_test.images,
        "eval_labels": splits.eval_test.labels,
    }
    for name, obs in splits.extra_eval.items():
        arrays[f"extra_{name}_images"] = obs.images
        arrays[f"extra_{name}_labels"] = obs.labels
    npz_path = out_dir / "splits.npz"
    np.savez_compressed(npz_path, **arrays)
    digest = hashlib.sha256(npz_path.read_bytes()).hexdigest()
    manifest = dict(splits.meta)
    manifest.update({
        "splits_file": npz_path.name,
        "splits_sha256": digest,
        "extra_eval": sorted(splits.extra_eval.keys()),
        "n_groups": splits.model_train.n_groups,
    })
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_splits(data_dir) -> DatasetSplits:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    npz = np.load(data_dir / manifest["splits_file"])
    extra = {
        name: ObservationSet(npz[f"extra_{name}_images"], npz[f"extra_{name}_labels"])
        for name in manifest.get("extra_eval", [])
    }
    meta = {k: v for k, v in manifest.items()
            if k not in ("splits_file", "splits_sha256", "extra_eval", "n_groups")}
    return DatasetSplits(
        GroupedSet(npz["group_images"], npz["group_labels"]),
        ObservationSet(npz["clf_images"], npz["clf_labels"]),
        ObservationSet(npz["eval_images"], npz["eval_labels"]),
        extra_eval=extra,
        meta=meta,
    )
