"""Convert an image-folder dataset into a DENCFSv1 feature file.

The backbone (vgg16 or resnet18) keeps its convolutional trunk; everything
after the last convolution is replaced by two 2048-unit fully-connected
layers with ReLU activations, and the 2048-d output of the second layer is
what gets exported (non-negative by construction). The head is fine-tuned
with cross-entropy on the seen split before export; the backbone stays
frozen unless requested otherwise. Everything is seeded, so a fixed
(weights, preprocessing) pair exports deterministically.
"""

from __future__ import annotations

import json
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch import nn
from torchvision import models
from torchvision.transforms import functional as tvf

DATASET_MAGIC = b"DENCFSv1"
FEATURE_DIM = 2048

_IMAGENET_MEAN = [0.485, 0.456, 0.406]
_IMAGENET_STD = [0.229, 0.224, 0.225]
_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}

BACKBONES = ("vgg16", "resnet18")


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    image_root: Path
    splits: dict[str, str]  # class name -> "seen" | "unseen"
    out_path: Path
    backbone: str = "resnet18"
    batch_size: int = 32
    device: str = "cpu"
    weights: str | None = None  # state_dict path; None = seeded random init
    init_seed: int = 0
    head_epochs: int = 3
    head_lr: float = 1e-4
    train_backbone: bool = False
    on_error: str = "abort"  # or "skip"
    preprocess: dict = field(default_factory=lambda: {
        "resize": 256, "crop": 224, "mean": _IMAGENET_MEAN, "std": _IMAGENET_STD})

    def __post_init__(self):
        self.image_root = Path(self.image_root)
        self.out_path = Path(self.out_path)
        if self.backbone not in BACKBONES:
            raise ExportError(f"unknown backbone {self.backbone!r}, expected one of {BACKBONES}")
        if self.on_error not in ("abort", "skip"):
            raise ExportError(f"on_error must be 'abort' or 'skip', got {self.on_error!r}")
        bad = {k: v for k, v in self.splits.items() if v not in ("seen", "unseen")}
        if bad:
            raise ExportError(f"split tags must be 'seen' or 'unseen': {bad}")


def discover_images(job: ExportJob):
    """Class subfolders under image_root; every class needs a split tag."""
    root = job.image_root
    if not root.is_dir():
        raise ExportError(f"image root {root} is not a directory")
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not class_names:
        raise ExportError(f"no class subfolders under {root}")
    missing = [c for c in class_names if c not in job.splits]
    if missing:
        raise ExportError(f"classes without split tags: {missing}")
    stray = [c for c in job.splits if c not in class_names]
    if stray:
        raise ExportError(f"split tags for folders that do not exist: {stray}")

    paths, labels = [], []
    for idx, name in enumerate(class_names):
        files = sorted(p for p in (root / name).iterdir()
                       if p.suffix.lower() in _IMAGE_SUFFIXES)
        if not files:
            raise ExportError(f"class folder {name!r} contains no images")
        paths.extend(files)
        labels.extend([idx] * len(files))
    return class_names, paths, np.asarray(labels, dtype=np.int64)


def _load_tensor(path: Path, pre: dict) -> torch.Tensor:
    with Image.open(path) as img:
        img = img.convert("RGB")
        img = tvf.resize(img, pre["resize"])
        img = tvf.center_crop(img, pre["crop"])
        t = tvf.to_tensor(img)
    return tvf.normalize(t, pre["mean"], pre["std"])


class FeatureNet(nn.Module):
    """Convolutional trunk + two 2048-unit FC layers, ReLU on both."""

    def __init__(self, backbone: str):
        super().__init__()
        if backbone == "vgg16":
            base = models.vgg16(weights=None)
            self.trunk = nn.Sequential(base.features, base.avgpool, nn.Flatten())
            trunk_out = 512 * 7 * 7
        else:
            base = models.resnet18(weights=None)
            self.trunk = nn.Sequential(*list(base.children())[:-1], nn.Flatten())
            trunk_out = 512
        self.head = nn.Sequential(
            nn.Linear(trunk_out, FEATURE_DIM), nn.ReLU(inplace=True),
            nn.Linear(FEATURE_DIM, FEATURE_DIM), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.head(self.trunk(x))


def build_network(job: ExportJob) -> FeatureNet:
    torch.manual_seed(job.init_seed)
    net = FeatureNet(job.backbone)
    if job.weights is not None:
        state = torch.load(job.weights, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    return net.to(job.device)


def _batches(tensors: torch.Tensor, size: int):
    for start in range(0, tensors.shape[0], size):
        yield tensors[start: start + size]


def finetune_head(net: FeatureNet, images: torch.Tensor, labels: torch.Tensor,
                  n_classes: int, job: ExportJob) -> None:
    """Cross-entropy on the seen split through a throwaway linear classifier."""
    if job.head_epochs <= 0 or images.shape[0] == 0:
        return
    clf = nn.Linear(FEATURE_DIM, n_classes).to(job.device)
    params = list(net.head.parameters()) + list(clf.parameters())
    if job.train_backbone:
        params += list(net.trunk.parameters())
    else:
        net.trunk.requires_grad_(False)
    opt = torch.optim.Adam(params, lr=job.head_lr)
    loss_fn = nn.CrossEntropyLoss()
    gen = torch.Generator().manual_seed(job.init_seed + 1)
    net.train(job.train_backbone)
    net.head.train(True)
    for _ in range(job.head_epochs):
        order = torch.randperm(images.shape[0], generator=gen)
        for idx in _batches(order, job.batch_size):
            opt.zero_grad()
            out = clf(net(images[idx].to(job.device)))
            loss = loss_fn(out, labels[idx].to(job.device))
            loss.backward()
            opt.step()
    net.trunk.requires_grad_(True)


def _write_dencfs(path: Path, features: np.ndarray, labels: np.ndarray,
                  class_names: list[str], split: list[str], extra: dict) -> None:
    manifest = {
        "n": int(features.shape[0]),
        "d": int(features.shape[1]),
        "classes": class_names,
        "split": split,
        "attr_dim": 0,
        "byte_order": "little",
        "exporter": extra,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(features.astype("<f4", copy=False).tobytes())
        fh.write(labels.astype("<i4", copy=False).tobytes())


def export_features(job: ExportJob) -> Path:
    class_names, paths, labels = discover_images(job)

    tensors, kept = [], []
    for i, path in enumerate(paths):
        try:
            tensors.append(_load_tensor(path, job.preprocess))
            kept.append(i)
        except (OSError, UnidentifiedImageError) as exc:
            if job.on_error == "abort":
                raise ExportError(f"unreadable image {path}: {exc}") from exc
            print(f"skipping unreadable image {path}: {exc}", file=sys.stderr)
    labels = labels[kept]
    counts = np.bincount(labels, minlength=len(class_names))
    empty = [class_names[i] for i in np.flatnonzero(counts == 0)]
    if empty:
        raise ExportError(f"classes with no readable images: {empty}")
    images = torch.stack(tensors)

    net = build_network(job)
    seen_mask = np.array([job.splits[class_names[l]] == "seen" for l in labels])
    seen_classes = sorted(set(labels[seen_mask].tolist()))
    remap = {c: i for i, c in enumerate(seen_classes)}
    seen_labels = torch.as_tensor([remap[int(l)] for l in labels[seen_mask]])
    finetune_head(net, images[torch.as_tensor(seen_mask)], seen_labels,
                  max(len(seen_classes), 1), job)

    net.eval()
    feats = []
    with torch.no_grad():
        for batch in _batches(images, job.batch_size):
            feats.append(net(batch.to(job.device)).cpu().numpy())
    features = np.concatenate(feats, axis=0).astype(np.float32)

    split = [job.splits[name] for name in class_names]
    extra = {
        "backbone": job.backbone,
        "weights": job.weights or f"random-init:{job.init_seed}",
        "head": "fc2048-relu-fc2048-relu",
        "head_finetune": {"epochs": job.head_epochs, "lr": job.head_lr,
                          "loss": "cross_entropy", "backbone_trained": job.train_backbone},
        "preprocess": job.preprocess,
    }
    _write_dencfs(job.out_path, features, labels.astype(np.int32), class_names, split, extra)
    return job.out_path
