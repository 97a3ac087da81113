"""Episodic N-way k-shot evaluation.

An episode draws N unseen classes and k support samples per class; every
remaining sample of those classes is a query. The evaluator synthesizes a
per-class training set from the support anchors, fits a linear softmax
classifier on it, and scores query accuracy. Nearest-neighbor on the raw
support vectors is the reference baseline.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import FeatureDataset
from .model import DeltaEncoderModel, sample_z, synthesize, synthesize_kshot
from .nn import AdamState, adam_step, softmax, softmax_cross_entropy
from .seeding import derive_seed


class EpisodeError(ValueError):
    """Episode request the dataset cannot satisfy."""


@dataclass
class Episode:
    """One few-shot task. Labels are episode-local: position in class_ids."""

    n_way: int
    k_shot: int
    class_ids: np.ndarray     # (N,) dataset class ids in draw order
    support_x: np.ndarray     # (N, k, d)
    support_idx: np.ndarray   # (N, k) dataset row indices
    query_x: np.ndarray       # (M, d)
    query_y: np.ndarray       # (M,) values in 0..N-1
    query_idx: np.ndarray     # (M,)
    seed: int


def draw_episode(dataset: FeatureDataset, n_way: int, k_shot: int, seed: int = 0) -> Episode:
    """Uniform class and support choice without replacement; the query set is
    every non-support sample of the drawn classes."""
    if n_way < 2 or k_shot < 1:
        raise EpisodeError(f"need n_way >= 2 and k_shot >= 1, got {n_way}-way {k_shot}-shot")
    unseen = dataset.unseen_class_ids
    if unseen.size < n_way:
        raise EpisodeError(f"dataset has {unseen.size} unseen classes, episode wants {n_way}")
    rng = np.random.default_rng(seed)
    classes = rng.choice(unseen, size=n_way, replace=False)

    support_x, support_idx, query_parts = [], [], []
    for local, c in enumerate(classes):
        rows = dataset.class_indices(int(c))
        if rows.size <= k_shot:
            raise EpisodeError(
                f"class {dataset.class_names[int(c)]!r} has {rows.size} samples; "
                f"{k_shot}-shot episodes need more so the query set is non-empty")
        picked = rng.choice(rows, size=k_shot, replace=False)
        support_idx.append(picked)
        support_x.append(dataset.features[picked])
        rest = rows[~np.isin(rows, picked)]
        query_parts.append((rest, np.full(rest.size, local, dtype=np.int64)))

    query_idx = np.concatenate([p[0] for p in query_parts])
    query_y = np.concatenate([p[1] for p in query_parts])
    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        class_ids=np.asarray(classes, dtype=np.int64),
        support_x=np.stack(support_x),
        support_idx=np.stack(support_idx),
        query_x=dataset.features[query_idx],
        query_y=query_y,
        query_idx=query_idx,
        seed=seed,
    )


@dataclass
class ClassifierConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 50
    tol: float = 1e-5
    patience: int = 5


@dataclass
class LinearClassifier:
    """One dense layer followed by softmax."""

    w: np.ndarray  # (d, n_classes)
    b: np.ndarray  # (n_classes,)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x.astype(self.w.dtype, copy=False) @ self.w + self.b

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        # argmax takes the first maximum, i.e. ties go to the lowest class index
        return np.argmax(self.logits(x), axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == y))


def train_linear_classifier(samples: np.ndarray, labels: np.ndarray,
                            config: ClassifierConfig | None = None,
                            seed: int = 0, n_classes: int | None = None) -> LinearClassifier:
    """Softmax cross-entropy with Adam; zero-initialized, deterministic in seed.

    Stops early once the best epoch loss has not improved by tol for
    `patience` consecutive epochs.
    """
    config = config or ClassifierConfig()
    samples = np.asarray(samples)
    labels = np.asarray(labels, dtype=np.int64)
    if samples.ndim != 2 or samples.shape[0] != labels.shape[0]:
        raise ValueError(f"samples {samples.shape} do not match {labels.shape[0]} labels")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    present = np.unique(labels)
    missing = sorted(set(range(n_classes)) - set(int(v) for v in present))
    if missing:
        raise ValueError(f"classes {missing} have no training samples")

    dtype = samples.dtype if samples.dtype in (np.float32, np.float64) else np.float64
    clf = LinearClassifier(
        w=np.zeros((samples.shape[1], n_classes), dtype=dtype),
        b=np.zeros(n_classes, dtype=dtype),
    )
    params = {"w": clf.w, "b": clf.b}
    adam = AdamState.create(params, lr=config.learning_rate)
    rng = np.random.default_rng(seed)
    samples = samples.astype(dtype, copy=False)

    best = np.inf
    streak = 0
    n = samples.shape[0]
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start: start + config.batch_size]
            logits = samples[idx] @ clf.w + clf.b
            loss, dlogits = softmax_cross_entropy(logits, labels[idx])
            grads = {"w": samples[idx].T @ dlogits, "b": dlogits.sum(axis=0)}
            adam_step(params, grads, adam)
            total += loss * idx.size
        epoch_loss = total / n
        if best - epoch_loss < config.tol:
            streak += 1
            if streak >= config.patience:
                break
        else:
            streak = 0
        best = min(best, epoch_loss)
    return clf


def baseline_nearest_neighbor(episode: Episode) -> float:
    """Label each query by its Euclidean-nearest support vector's class;
    ties resolve to the lowest class index."""
    flat = episode.support_x.reshape(-1, episode.support_x.shape[-1]).astype(np.float64)
    q = episode.query_x.astype(np.float64)
    d2 = ((q[:, None, :] - flat[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)  # first minimum = lowest class on ties
    pred = nearest // episode.k_shot
    return float(np.mean(pred == episode.query_y))


@dataclass
class EvalReport:
    """Per-episode accuracies with their aggregate and the full run config.

    elapsed_s is informational only and never serialized, so repeated runs
    of the same configuration produce identical bytes.
    """

    accuracies: list[float]
    mean: float
    std: float
    config: dict = field(default_factory=dict)
    elapsed_s: float | None = None

    @classmethod
    def from_accuracies(cls, accs, config=None, elapsed_s=None) -> "EvalReport":
        accs = [float(a) for a in accs]
        return cls(
            accuracies=accs,
            mean=float(np.mean(accs)) if accs else float("nan"),
            std=float(np.std(accs)) if accs else float("nan"),
            config=dict(config or {}),
            elapsed_s=elapsed_s,
        )

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "accuracies": self.accuracies,
            "mean": self.mean,
            "std": self.std,
        }

    def to_json(self) -> str:
        import json

        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def csv_rows(self) -> list[tuple[int, float]]:
        return list(enumerate(self.accuracies))


def run_episode(model: DeltaEncoderModel, dataset: FeatureDataset, episode: Episode,
                samples_per_class: int = 1024, seed: int = 0,
                clf_config: ClassifierConfig | None = None) -> float:
    """Synthesize a per-class training set from the support anchors, train the
    linear classifier on it, return query accuracy."""
    parts = []
    attr_variant = model.arch.variant == "dae_attr_zeroshot"
    for local, c in enumerate(episode.class_ids):
        codes = sample_z(model, dataset, samples_per_class, seed=derive_seed(seed, local))
        if attr_variant:
            synth = synthesize(model, codes, dataset.require_attributes()[int(c)])
        else:
            synth, _ = synthesize_kshot(model, codes, episode.support_x[local],
                                        total=samples_per_class)
        parts.append(synth)
    x = np.concatenate(parts, axis=0)
    y = np.repeat(np.arange(episode.n_way, dtype=np.int64), samples_per_class)
    clf = train_linear_classifier(x, y, clf_config, seed=derive_seed(seed, episode.n_way),
                                  n_classes=episode.n_way)
    return clf.accuracy(episode.query_x, episode.query_y)


def _episode_accuracy(model, dataset, n_way, k_shot, samples_per_class, seed, i, clf_config):
    episode = draw_episode(dataset, n_way, k_shot, seed=derive_seed(seed, i, 0))
    return run_episode(model, dataset, episode, samples_per_class,
                       seed=derive_seed(seed, i, 1), clf_config=clf_config)


def evaluate(model: DeltaEncoderModel, dataset: FeatureDataset, n_way: int = 5,
             k_shot: int = 1, episodes: int = 10, samples_per_class: int = 1024,
             seed: int = 0, clf_config: ClassifierConfig | None = None,
             jobs: int = 1, extra_config: dict | None = None) -> EvalReport:
    """Mean/std accuracy over independent episodes with derived seeds.

    Episodes are order-independent, so jobs > 1 computes them in parallel
    and reduces in episode-index order; output is identical to a serial run.
    """
    start = time.perf_counter()
    if jobs > 1 and episodes > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_episode_accuracy, model, dataset, n_way, k_shot,
                            samples_per_class, seed, i, clf_config)
                for i in range(episodes)
            ]
            accs = [f.result() for f in futures]
    else:
        accs = [
            _episode_accuracy(model, dataset, n_way, k_shot, samples_per_class,
                              seed, i, clf_config)
            for i in range(episodes)
        ]
    config = {
        "evaluator": "delta_encoder",
        "arch": model.arch.to_dict(),
        "n_way": n_way,
        "k_shot": k_shot,
        "episodes": episodes,
        "samples_per_class": samples_per_class,
        "seed": seed,
    }
    config.update(extra_config or {})
    return EvalReport.from_accuracies(accs, config, time.perf_counter() - start)


def evaluate_nearest_neighbor(dataset: FeatureDataset, n_way: int = 5, k_shot: int = 1,
                              episodes: int = 10, seed: int = 0,
                              extra_config: dict | None = None) -> EvalReport:
    """Nearest-neighbor baseline over the same episode stream evaluate() uses."""
    start = time.perf_counter()
    accs = []
    for i in range(episodes):
        episode = draw_episode(dataset, n_way, k_shot, seed=derive_seed(seed, i, 0))
        accs.append(baseline_nearest_neighbor(episode))
    config = {
        "evaluator": "nearest_neighbor",
        "n_way": n_way,
        "k_shot": k_shot,
        "episodes": episodes,
        "seed": seed,
    }
    config.update(extra_config or {})
    return EvalReport.from_accuracies(accs, config, time.perf_counter() - start)


def sweep_samples(model: DeltaEncoderModel, dataset: FeatureDataset, n_way: int,
                  k_shot: int, counts: list[int], episodes: int = 10, seed: int = 0,
                  clf_config: ClassifierConfig | None = None,
                  jobs: int = 1) -> list[tuple[int, EvalReport]]:
    """evaluate() at several synthesis budgets over a shared episode stream;
    at the default budget the report equals evaluate()'s exactly."""
    out = []
    for count in counts:
        report = evaluate(model, dataset, n_way, k_shot, episodes=episodes,
                          samples_per_class=count, seed=seed, clf_config=clf_config,
                          jobs=jobs)
        out.append((int(count), report))
    return out
