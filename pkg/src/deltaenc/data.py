"""Dataset and model persistence plus the synthetic benchmark generator.

File format (DENCFSv1): 8-byte magic, u64 little-endian manifest length,
UTF-8 JSON manifest, then raw little-endian blobs (float32 features
row-major, int32 labels, optional float32 per-class attribute matrix).
Model checkpoints (DENCMDv1) follow the same header discipline with a
parameter blob and a trailing 64-bit checksum.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"DENCFSv1"
MODEL_MAGIC = b"DENCMDv1"

# gain of the element-wise tanh warp the generator applies to deformations
_TANH_GAIN = 5.0
_CENTER_MARGIN = 2.5
_MAX_CENTER_RETRIES = 200


class FormatError(ValueError):
    """File does not conform to the DENCFSv1 / DENCMDv1 layout."""


class TruncatedFileError(FormatError):
    """Blob is shorter than the header claims."""


class IntegrityError(FormatError):
    """Checksum mismatch on a parameter blob."""


class DatasetError(ValueError):
    """Dataset violates a structural invariant."""


class GenerationError(RuntimeError):
    """Synthetic generation could not satisfy its constraints."""


@dataclass
class FeatureDataset:
    """Labeled feature vectors with a seen/unseen class split.

    features: (n, d) float32; labels: (n,) int32 class ids; seen: (C,) bool
    per class; attributes: optional (C, a) float32 per-class vectors.
    """

    features: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    seen: np.ndarray
    attributes: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        self.seen = np.asarray(self.seen, dtype=bool)
        if self.features.ndim != 2:
            raise DatasetError(f"features must be 2-d, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DatasetError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows")
        c = len(self.class_names)
        if self.seen.shape != (c,):
            raise DatasetError(f"{self.seen.shape[0]} split tags for {c} classes")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= c):
            raise DatasetError(f"label {int(self.labels.max())} out of range for {c} classes")
        if self.attributes is not None:
            self.attributes = np.ascontiguousarray(self.attributes, dtype=np.float32)
            if self.attributes.ndim != 2 or self.attributes.shape[0] != c:
                raise DatasetError(
                    f"attributes shape {self.attributes.shape} needs one row per class ({c})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def attr_dim(self) -> int:
        return 0 if self.attributes is None else self.attributes.shape[1]

    @property
    def seen_class_ids(self) -> np.ndarray:
        return np.flatnonzero(self.seen)

    @property
    def unseen_class_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.seen)

    def class_indices(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    def seen_sample_count(self) -> int:
        return int(np.isin(self.labels, self.seen_class_ids).sum())

    def require_attributes(self) -> np.ndarray:
        if self.attributes is None:
            raise DatasetError("dataset carries no class attributes")
        return self.attributes

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        same_attr = (
            (self.attributes is None and other.attributes is None)
            or (self.attributes is not None and other.attributes is not None
                and np.array_equal(self.attributes, other.attributes))
        )
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and self.class_names == other.class_names
            and np.array_equal(self.seen, other.seen)
            and same_attr
        )


def _pack_header(magic: bytes, manifest: dict) -> bytes:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<Q", len(blob)) + blob


def _read_header(raw: bytes, magic: bytes, path) -> tuple[dict, int]:
    if len(raw) < len(magic) + 8:
        raise TruncatedFileError(f"{path}: file shorter than header")
    if raw[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    (mlen,) = struct.unpack_from("<Q", raw, len(magic))
    start = len(magic) + 8
    if len(raw) < start + mlen:
        raise TruncatedFileError(f"{path}: manifest truncated ({len(raw) - start} of {mlen} bytes)")
    try:
        manifest = json.loads(raw[start: start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: manifest is not valid JSON ({exc})") from exc
    return manifest, start + mlen


def save_dataset(dataset: FeatureDataset, path) -> None:
    manifest = {
        "n": dataset.n,
        "d": dataset.d,
        "classes": list(dataset.class_names),
        "split": ["seen" if s else "unseen" for s in dataset.seen],
        "attr_dim": dataset.attr_dim,
        "byte_order": "little",
    }
    parts = [_pack_header(DATASET_MAGIC, manifest)]
    parts.append(dataset.features.astype("<f4", copy=False).tobytes())
    parts.append(dataset.labels.astype("<i4", copy=False).tobytes())
    if dataset.attributes is not None:
        parts.append(dataset.attributes.astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


def _take(raw: bytes, offset: int, nbytes: int, what: str, path) -> tuple[bytes, int]:
    if len(raw) < offset + nbytes:
        raise TruncatedFileError(
            f"{path}: {what} truncated ({len(raw) - offset} of {nbytes} bytes)")
    return raw[offset: offset + nbytes], offset + nbytes


def load_dataset(path) -> FeatureDataset:
    raw = Path(path).read_bytes()
    manifest, offset = _read_header(raw, DATASET_MAGIC, path)
    try:
        n, d = int(manifest["n"]), int(manifest["d"])
        classes = list(manifest["classes"])
        split = list(manifest["split"])
        attr_dim = int(manifest["attr_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: manifest missing field ({exc})") from exc
    if len(split) != len(classes) or any(s not in ("seen", "unseen") for s in split):
        raise FormatError(f"{path}: malformed split tags")

    blob, offset = _take(raw, offset, n * d * 4, "feature blob", path)
    features = np.frombuffer(blob, dtype="<f4").reshape(n, d)
    blob, offset = _take(raw, offset, n * 4, "label blob", path)
    labels = np.frombuffer(blob, dtype="<i4")
    attributes = None
    if attr_dim > 0:
        blob, offset = _take(raw, offset, len(classes) * attr_dim * 4, "attribute blob", path)
        attributes = np.frombuffer(blob, dtype="<f4").reshape(len(classes), attr_dim)
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after data blobs")
    if labels.size and (labels.min() < 0 or labels.max() >= len(classes)):
        raise FormatError(f"{path}: label {int(labels.max())} out of range for {len(classes)} classes")
    return FeatureDataset(
        features=features.copy(),
        labels=labels.copy(),
        class_names=classes,
        seen=np.array([s == "seen" for s in split]),
        attributes=None if attributes is None else attributes.copy(),
    )


@dataclass
class SyntheticSpec:
    """Desk-scale benchmark: every class is one translated copy of a shared
    deformation manifold, so deltas learned on seen classes transfer to
    unseen ones by construction."""

    n_classes: int = 20
    n_unseen: int = 4
    samples_per_class: int = 50
    feature_dim: int = 64
    basis_size: int = 8
    deformation_scale: float = 6.0
    separation: float = 1.5
    nonlinear: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2 or not 0 < self.n_unseen < self.n_classes:
            raise DatasetError(
                f"need 0 < n_unseen < n_classes, got {self.n_unseen}/{self.n_classes}")
        if self.basis_size > self.feature_dim:
            raise DatasetError(
                f"basis size {self.basis_size} exceeds feature dim {self.feature_dim}")
        if self.deformation_scale < 0 or self.separation <= 0:
            raise DatasetError("deformation_scale must be >= 0 and separation > 0")


def _draw_centers(spec: SyntheticSpec, basis: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    # Centers live inside the deformation subspace (basis is orthonormal, so
    # distances are preserved): deltas then point across class boundaries and
    # an evaluator cannot separate classes in the untouched complement.
    # rho is sized so typical pairwise distance lands above `separation`;
    # sets violating the minimum are rejected.
    rho = _CENTER_MARGIN * spec.separation / np.sqrt(2.0 * spec.basis_size)
    for _ in range(_MAX_CENTER_RETRIES):
        coords = rng.normal(0.0, rho, size=(spec.n_classes, spec.basis_size))
        diff = coords[:, None, :] - coords[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= spec.separation:
            return coords @ basis.T
    raise GenerationError(
        f"could not place {spec.n_classes} centers at separation {spec.separation} "
        f"in a {spec.basis_size}-d subspace after {_MAX_CENTER_RETRIES} attempts")


def gen_synthetic(spec: SyntheticSpec) -> FeatureDataset:
    """Samples are center_c + (scale/sqrt(m)) * f(B u), u ~ N(0, I_m), with one
    orthonormal basis B shared by all classes; f is tanh(g*x)/g when nonlinear."""
    rng = np.random.default_rng(spec.seed)
    raw = rng.normal(size=(spec.feature_dim, spec.basis_size))
    basis, _ = np.linalg.qr(raw)
    centers = _draw_centers(spec, basis, rng)

    n_total = spec.n_classes * spec.samples_per_class
    latents = rng.normal(size=(n_total, spec.basis_size))
    deform = latents @ basis.T
    if spec.nonlinear:
        deform = np.tanh(_TANH_GAIN * deform) / _TANH_GAIN
    deform *= spec.deformation_scale / np.sqrt(spec.basis_size)

    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    features = centers[labels] + deform
    seen = np.ones(spec.n_classes, dtype=bool)
    seen[spec.n_classes - spec.n_unseen:] = False
    names = [f"class{i:02d}" for i in range(spec.n_classes)]
    return FeatureDataset(features=features, labels=labels, class_names=names, seen=seen)


def _checksum(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()[:8]


def save_model(model, path) -> None:
    from .model import DeltaEncoderModel  # local import breaks the module cycle

    assert isinstance(model, DeltaEncoderModel)
    params = model.params()
    order = sorted(params)
    manifest = {
        "arch": model.arch.to_dict(),
        "dtype": np.dtype(model.dtype).name,
        "params": [[name, list(params[name].shape)] for name in order],
        "fingerprint": model.fingerprint,
        "trained": model.trained,
        "byte_order": "little",
    }
    dt = "<f8" if np.dtype(model.dtype) == np.float64 else "<f4"
    parts = [_pack_header(MODEL_MAGIC, manifest)]
    parts.extend(params[name].astype(dt, copy=False).tobytes() for name in order)
    payload = b"".join(parts)
    Path(path).write_bytes(payload + _checksum(payload))


def load_model(path):
    from .model import ArchConfig, DeltaEncoderModel, build_model

    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: file shorter than checksum")
    payload, stored = raw[:-8], raw[-8:]
    if _checksum(payload) != stored:
        raise IntegrityError(f"{path}: checksum mismatch")
    manifest, offset = _read_header(payload, MODEL_MAGIC, path)
    try:
        arch = ArchConfig.from_dict(manifest["arch"])
        dtype = np.dtype(manifest["dtype"])
        declared = [(str(n), tuple(int(x) for x in s)) for n, s in manifest["params"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: manifest missing field ({exc})") from exc

    model = build_model(arch, seed=0, dtype=dtype.type)
    params = model.params()
    if sorted(n for n, _ in declared) != sorted(params):
        raise FormatError(f"{path}: architecture mismatch, file params {[n for n, _ in declared]}")
    dt = "<f8" if dtype == np.float64 else "<f4"
    itemsize = np.dtype(dt).itemsize
    for name, shape in declared:
        if params[name].shape != shape:
            raise FormatError(
                f"{path}: architecture mismatch for {name!r}: file {shape}, arch {params[name].shape}")
        nbytes = int(np.prod(shape)) * itemsize
        blob, offset = _take(payload, offset, nbytes, f"parameter {name!r}", path)
        params[name][...] = np.frombuffer(blob, dtype=dt).reshape(shape)
    if offset != len(payload):
        raise FormatError(f"{path}: {len(payload) - offset} trailing bytes after parameters")
    model.fingerprint = dict(manifest.get("fingerprint", {}))
    model.trained = bool(manifest.get("trained", False))
    return model


def export_embeddings(vectors: np.ndarray, labels, path) -> None:
    """CSV with one `label` column then d feature columns, RFC-4180 quoted."""
    vectors = np.atleast_2d(np.asarray(vectors))
    labels = list(labels)
    if vectors.size == 0:
        vectors = vectors.reshape(0, vectors.shape[-1] if vectors.ndim > 1 else 0)
    if len(labels) != vectors.shape[0]:
        raise DatasetError(f"{len(labels)} labels for {vectors.shape[0]} vectors")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(vectors.shape[1])])
        for lab, row in zip(labels, vectors):
            writer.writerow([lab] + [repr(float(v)) for v in row])
