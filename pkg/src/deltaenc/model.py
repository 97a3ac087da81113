"""The delta-encoder: architecture, training, code sampling, synthesis.

The model learns intra-class deformations from same-class sample pairs of
seen classes (encoder bottleneck Z), then applies deformation codes to one
or few anchor samples of an unseen class to synthesize a training set for
it. Ablation variants rewire the encoder input, the noise injection, the
decoder conditioning, or replace the whole model with the closed-form
linear offset baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .data import DatasetError, FeatureDataset
from .nn import (
    AdamState,
    ConfigError,
    Dense,
    DropoutSpec,
    ShapeError,
    TrainingError,
    adam_step,
    weighted_l1_loss,
)
from .seeding import derive_seed

VARIANTS = (
    "full",            # encoder sees (X, Y); nonparametric Z at synthesis
    "ae_nonparam",     # encoder sees X only, no input noise; nonparametric Z
    "dae_nonparam",    # encoder sees 20%-dropout X; nonparametric Z
    "dae_randZ",       # trained like dae_nonparam; Z ~ N(0,1) at synthesis
    "dae_attr_zeroshot",  # decoder conditions on class attributes; Z ~ N(0,1)
    "linear_offset",   # closed form: Y_u + (X_s - Y_s), no parameters
)

_DAE_VARIANTS = ("dae_nonparam", "dae_randZ", "dae_attr_zeroshot")
_RANDZ_VARIANTS = ("dae_randZ", "dae_attr_zeroshot")


class StateError(RuntimeError):
    """Operation requires a trained model."""


@dataclass(frozen=True)
class ArchConfig:
    feature_dim: int = 2048
    hidden_dim: int = 8192
    z_dim: int = 16
    variant: str = "full"
    attr_dim: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.feature_dim < 1 or self.hidden_dim < 1 or self.z_dim < 1:
            raise ConfigError("feature_dim, hidden_dim and z_dim must be positive")
        if self.z_dim >= self.feature_dim:
            raise ConfigError(
                f"z_dim ({self.z_dim}) must be smaller than feature_dim "
                f"({self.feature_dim}); the bottleneck is the point")
        if self.variant == "dae_attr_zeroshot" and self.attr_dim < 1:
            raise ConfigError("variant dae_attr_zeroshot requires attr_dim > 0")

    @property
    def encoder_in(self) -> int:
        return 2 * self.feature_dim if self.variant == "full" else self.feature_dim

    @property
    def cond_dim(self) -> int:
        """Width of the vector the decoder is conditioned on."""
        return self.attr_dim if self.variant == "dae_attr_zeroshot" else self.feature_dim

    @property
    def decoder_in(self) -> int:
        return self.z_dim + self.cond_dim

    @property
    def code_dim(self) -> int:
        """Length of a deformation code (raw offsets for linear_offset)."""
        return self.feature_dim if self.variant == "linear_offset" else self.z_dim

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "hidden_dim": self.hidden_dim,
            "z_dim": self.z_dim,
            "variant": self.variant,
            "attr_dim": self.attr_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            feature_dim=int(d["feature_dim"]),
            hidden_dim=int(d["hidden_dim"]),
            z_dim=int(d["z_dim"]),
            variant=str(d["variant"]),
            attr_dim=int(d.get("attr_dim", 0)),
        )


@dataclass
class DeltaCode:
    """One deformation code plus where it came from: a (class, x_row, y_row)
    seen-class pair, or "random" for the standard-normal variants."""

    z: np.ndarray
    provenance: tuple[int, int, int] | str


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 10
    batch_size: int = 128
    dropout: DropoutSpec | None = None  # resolved per variant when unset
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")


class DeltaEncoderModel:
    """Encoder/decoder pair (or the parameterless linear-offset stand-in)."""

    def __init__(self, arch: ArchConfig, layers: dict[str, Dense] | None,
                 dtype=np.float32):
        self.arch = arch
        self.layers = layers or {}
        self.dtype = np.dtype(dtype).type
        self.trained = arch.variant == "linear_offset"
        self.fingerprint: dict = {}

    @property
    def has_params(self) -> bool:
        return bool(self.layers)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers.items():
            out[f"{name}.w"] = layer.w
            out[f"{name}.b"] = layer.b
        return out

    def astype(self, dtype) -> "DeltaEncoderModel":
        dtype = np.dtype(dtype).type
        if dtype != self.dtype:
            for layer in self.layers.values():
                layer.w = layer.w.astype(dtype)
                layer.b = layer.b.astype(dtype)
            self.dtype = dtype
        return self

    def encode(self, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
        """Deterministic eval-mode encoding; y is required for the full variant."""
        if self.arch.variant == "linear_offset":
            if y is None:
                raise ConfigError("linear_offset codes need both pair samples")
            return x - y
        if self.arch.variant == "full":
            if y is None:
                raise ConfigError("variant 'full' encodes (x, y) pairs")
            x = np.concatenate([x, y], axis=1)
        h, _ = self.layers["enc_hidden"].forward(x.astype(self.dtype, copy=False))
        z, _ = self.layers["enc_out"].forward(h)
        return z

    def decode(self, z: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """Deterministic eval-mode decoding of codes against a conditioning batch."""
        if self.arch.variant == "linear_offset":
            return cond + z
        dec_in = np.concatenate(
            [z.astype(self.dtype, copy=False), cond.astype(self.dtype, copy=False)], axis=1)
        h, _ = self.layers["dec_hidden"].forward(dec_in)
        out, _ = self.layers["dec_out"].forward(h)
        return out


def build_model(arch: ArchConfig, seed: int = 0, dtype=np.float32) -> DeltaEncoderModel:
    """Initialized, untrained model; layer init is deterministic in seed."""
    if arch.variant == "linear_offset":
        return DeltaEncoderModel(arch, None, dtype)
    rng = np.random.default_rng(seed)
    layers = {
        "enc_hidden": Dense.create(arch.encoder_in, arch.hidden_dim, "leaky_relu", rng, dtype),
        "enc_out": Dense.create(arch.hidden_dim, arch.z_dim, "linear", rng, dtype),
        "dec_hidden": Dense.create(arch.decoder_in, arch.hidden_dim, "leaky_relu", rng, dtype),
        "dec_out": Dense.create(arch.hidden_dim, arch.feature_dim, "linear", rng, dtype),
    }
    return DeltaEncoderModel(arch, layers, dtype)


def _seen_class_rows(dataset: FeatureDataset) -> dict[int, np.ndarray]:
    rows = {}
    for c in dataset.seen_class_ids:
        idx = dataset.class_indices(int(c))
        if idx.size < 2:
            raise DatasetError(
                f"seen class {dataset.class_names[int(c)]!r} has {idx.size} sample(s); "
                f"pair sampling needs at least 2")
        rows[int(c)] = idx
    if not rows:
        raise DatasetError("dataset has no seen classes")
    return rows


def _draw_pairs(class_rows: dict[int, np.ndarray], n: int, rng: np.random.Generator):
    """n uniform (class, ordered distinct pair) draws; returns row indices."""
    class_ids = np.fromiter(class_rows.keys(), dtype=np.int64)
    chosen = class_ids[rng.integers(0, class_ids.size, size=n)]
    xi = np.empty(n, dtype=np.int64)
    yi = np.empty(n, dtype=np.int64)
    for t, c in enumerate(chosen):
        rows = class_rows[int(c)]
        a = int(rng.integers(0, rows.size))
        b = int(rng.integers(0, rows.size - 1))
        if b >= a:
            b += 1
        xi[t], yi[t] = rows[a], rows[b]
    return xi, yi, chosen


def make_training_pairs(dataset: FeatureDataset, seed: int = 0) -> Iterator[tuple[int, int, int]]:
    """Endless stream of (x_row, y_row, class_id) same-class index pairs.

    A seen class is drawn uniformly, then an ordered pair of two distinct
    samples from it; x_row != y_row always.
    """
    class_rows = _seen_class_rows(dataset)
    rng = np.random.default_rng(seed)
    while True:
        xi, yi, cls = _draw_pairs(class_rows, 1, rng)
        yield int(xi[0]), int(yi[0]), int(cls[0])


def _resolve_dropout(arch: ArchConfig, config: TrainConfig) -> DropoutSpec:
    if config.dropout is not None:
        return config.dropout
    placement = "input_and_hidden" if arch.variant in _DAE_VARIANTS else "hidden_only"
    return DropoutSpec(rate=0.5, placement=placement, input_rate=0.2)


def _forward_backward(model: DeltaEncoderModel, x: np.ndarray, y: np.ndarray,
                      cond: np.ndarray, dropout: DropoutSpec | None = None,
                      rng: np.random.Generator | None = None,
                      loss_weights: np.ndarray | None = None):
    """One reconstruction pass; dropout=None means deterministic eval-mode.

    Returns (loss, grads). Pass loss_weights to differentiate the loss at
    frozen adaptive weights (gradient checking).
    """
    arch = model.arch
    train = dropout is not None
    rate = dropout.rate if train else 0.0

    if arch.variant == "full":
        enc_in = np.concatenate([x, y], axis=1)
    else:
        enc_in = x
        if train and dropout.placement == "input_and_hidden" and dropout.input_rate > 0:
            from .nn import dropout_mask

            enc_in = enc_in * dropout_mask(enc_in.shape, dropout.input_rate, rng, enc_in.dtype)

    enc_hidden = model.layers["enc_hidden"]
    enc_out = model.layers["enc_out"]
    dec_hidden = model.layers["dec_hidden"]
    dec_out = model.layers["dec_out"]

    h1, c1 = enc_hidden.forward(enc_in, train=train, dropout_rate=rate, rng=rng)
    z, c2 = enc_out.forward(h1)
    dec_in = np.concatenate([z, cond], axis=1)
    h2, c3 = dec_hidden.forward(dec_in, train=train, dropout_rate=rate, rng=rng)
    x_hat, c4 = dec_out.forward(h2)

    loss, d_xhat = weighted_l1_loss(x, x_hat, weights=loss_weights)

    dh2, gw4, gb4 = dec_out.backward(c4, d_xhat)
    ddec_in, gw3, gb3 = dec_hidden.backward(c3, dh2)
    dz = ddec_in[:, : arch.z_dim]
    dh1, gw2, gb2 = enc_out.backward(c2, dz)
    _, gw1, gb1 = enc_hidden.backward(c1, dh1)
    grads = {
        "enc_hidden.w": gw1, "enc_hidden.b": gb1,
        "enc_out.w": gw2, "enc_out.b": gb2,
        "dec_hidden.w": gw3, "dec_hidden.b": gb3,
        "dec_out.w": gw4, "dec_out.b": gb4,
    }
    return loss, grads


def reconstruction_loss(model: DeltaEncoderModel, x: np.ndarray, y: np.ndarray,
                        cond: np.ndarray, loss_weights: np.ndarray | None = None):
    """Eval-mode (loss, grads) for a batch; the gradient-check entry point."""
    return _forward_backward(model, x, y, cond, loss_weights=loss_weights)


def _batch_inputs(model, dataset, features, xi, yi, cls):
    x = features[xi]
    y = features[yi]
    if model.arch.variant == "dae_attr_zeroshot":
        cond = dataset.require_attributes()[cls].astype(model.dtype)
    else:
        cond = y
    return x, y, cond


def train(model: DeltaEncoderModel, dataset: FeatureDataset,
          config: TrainConfig | None = None) -> list[float]:
    """Reconstruction training on seen-class pairs; returns per-epoch mean loss.

    One epoch is ceil(seen samples / batch_size) batches of freshly drawn
    pairs. The model is updated in place.
    """
    config = config or TrainConfig()
    if model.arch.variant == "linear_offset":
        raise ConfigError("linear_offset is closed-form; nothing to train")
    if model.arch.variant == "dae_attr_zeroshot":
        dataset.require_attributes()
    model.astype(np.dtype(config.precision))
    class_rows = _seen_class_rows(dataset)
    dropout = _resolve_dropout(model.arch, config)
    rng = np.random.default_rng(derive_seed(config.seed, 0xD7A1))

    params = model.params()
    adam = AdamState.create(params, lr=config.learning_rate)
    features = dataset.features.astype(model.dtype)
    n_batches = max(1, math.ceil(dataset.seen_sample_count() / config.batch_size))

    history: list[float] = []
    for epoch in range(config.epochs):
        total = 0.0
        for batch in range(n_batches):
            xi, yi, cls = _draw_pairs(class_rows, config.batch_size, rng)
            x, y, cond = _batch_inputs(model, dataset, features, xi, yi, cls)
            loss, grads = _forward_backward(model, x, y, cond, dropout=dropout, rng=rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch}")
            try:
                adam_step(params, grads, adam)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {batch}: {exc}") from exc
            total += loss
        history.append(total / n_batches)

    if config.epochs > 0:
        model.trained = True
    model.fingerprint = {
        "seed": config.seed,
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "loss_curve": [float(v) for v in history],
    }
    return history


def sample_z(model: DeltaEncoderModel, dataset: FeatureDataset, count: int,
             seed: int = 0) -> list[DeltaCode]:
    """Draw deformation codes for synthesis.

    Nonparametric variants encode a fresh random same-class seen pair per
    code (eval mode); dae_randZ / dae_attr_zeroshot draw standard normals;
    linear_offset codes are the raw pair offsets X_s - Y_s.
    """
    if model.has_params and not model.trained:
        raise StateError("model is untrained; train() it or load a checkpoint")
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    rng = np.random.default_rng(seed)
    if count == 0:
        return []

    if model.arch.variant in _RANDZ_VARIANTS:
        z = rng.standard_normal((count, model.arch.z_dim)).astype(model.dtype)
        return [DeltaCode(z=z[i], provenance="random") for i in range(count)]

    class_rows = _seen_class_rows(dataset)
    xi, yi, cls = _draw_pairs(class_rows, count, rng)
    features = dataset.features.astype(model.dtype)
    x, y = features[xi], features[yi]
    if model.arch.variant == "linear_offset":
        z = x - y
    elif model.arch.variant == "full":
        z = model.encode(x, y)
    else:
        z = model.encode(x)
    return [
        DeltaCode(z=z[i], provenance=(int(cls[i]), int(xi[i]), int(yi[i])))
        for i in range(count)
    ]


def synthesize(model: DeltaEncoderModel, codes: list[DeltaCode],
               anchor: np.ndarray) -> np.ndarray:
    """Apply every code to one anchor: row i is decode(z_i, anchor).

    For dae_attr_zeroshot the "anchor" is the class attribute vector; for
    linear_offset it is anchor + code. Deterministic given (codes, anchor).
    """
    anchor = np.asarray(anchor, dtype=model.dtype).reshape(-1)
    want = model.arch.cond_dim if model.arch.variant != "linear_offset" else model.arch.feature_dim
    if anchor.shape[0] != want:
        raise ShapeError(f"anchor length {anchor.shape[0]} != expected {want}")
    if not codes:
        return np.empty((0, model.arch.feature_dim), dtype=model.dtype)
    z = np.stack([np.asarray(c.z, dtype=model.dtype) for c in codes])
    cond = np.broadcast_to(anchor, (z.shape[0], anchor.shape[0]))
    return model.decode(z, np.ascontiguousarray(cond))


def synthesize_kshot(model: DeltaEncoderModel, codes: list[DeltaCode],
                     anchors: np.ndarray, total: int | None = None):
    """Split a synthesis budget as evenly as possible across k anchors.

    The first (total mod k) anchors get ceil(total/k) samples, the rest the
    floor; each block is synthesized independently from its anchor. Returns
    (samples, anchor_index_per_row).
    """
    anchors = np.atleast_2d(np.asarray(anchors))
    k = anchors.shape[0]
    if k == 0:
        raise ValueError("synthesize_kshot needs at least one anchor")
    total = len(codes) if total is None else total
    if total < k:
        raise ValueError(f"total ({total}) must be >= number of anchors ({k})")
    if len(codes) < total:
        raise ValueError(f"{len(codes)} codes cannot fill a budget of {total}")

    base, rem = divmod(total, k)
    blocks = []
    owners = []
    offset = 0
    for j in range(k):
        size = base + (1 if j < rem else 0)
        blocks.append(synthesize(model, codes[offset: offset + size], anchors[j]))
        owners.append(np.full(size, j, dtype=np.int64))
        offset += size
    return np.concatenate(blocks, axis=0), np.concatenate(owners)
