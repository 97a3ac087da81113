"""Batch command-line front end.

Subcommands: gen | train | eval | ablate | sweep | export-embeddings.
Flag precedence is CLI > TOML config file (--config) > built-in defaults;
the master seed falls back to the DENC_SEED environment variable. All
primary outputs land under --out-dir with fixed filenames and are
byte-identical for identical (flags, seed); --jobs only parallelizes
across episodes and never changes output bytes.

Exit codes: 0 success, 2 usage/config error, 3 data/format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .data import (
    DatasetError,
    FormatError,
    GenerationError,
    SyntheticSpec,
    export_embeddings,
    gen_synthetic,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
)
from .fewshot import (
    EpisodeError,
    EvalReport,
    draw_episode,
    evaluate,
    evaluate_nearest_neighbor,
    sweep_samples,
)
from .model import (
    VARIANTS,
    ArchConfig,
    StateError,
    TrainConfig,
    build_model,
    sample_z,
    synthesize,
    synthesize_kshot,
    train,
)
from .nn import ConfigError, TrainingError
from .seeding import derive_seed

_ARCH = ArchConfig()
_TRAIN = TrainConfig()
_SYN = SyntheticSpec()
_DEFAULTS = {
    "variant": _ARCH.variant,
    "hidden_dim": _ARCH.hidden_dim,
    "z_dim": _ARCH.z_dim,
    "learning_rate": _TRAIN.learning_rate,
    "epochs": _TRAIN.epochs,
    "batch_size": _TRAIN.batch_size,
    "precision": _TRAIN.precision,
    "n_way": 5,
    "k_shot": 1,
    "episodes": 10,
    "samples_per_class": 1024,
    "classes": _SYN.n_classes,
    "unseen": _SYN.n_unseen,
    "per_class": _SYN.samples_per_class,
    "dim": _SYN.feature_dim,
    "basis": _SYN.basis_size,
    "scale": _SYN.deformation_scale,
    "separation": _SYN.separation,
}


@dataclass
class RunConfig:
    """Fully resolved configuration of one CLI invocation; everything that
    influences the numbers goes into the report fingerprint."""

    command: str
    dataset: str | None = None
    model: str | None = None
    variant: str | None = None
    hidden_dim: int | None = None
    z_dim: int | None = None
    learning_rate: float | None = None
    epochs: int | None = None
    batch_size: int | None = None
    precision: str | None = None
    n_way: int | None = None
    k_shot: int | None = None
    episodes: int | None = None
    samples_per_class: int | None = None
    baseline: str | None = None
    counts: list[int] | None = None
    seed: int = 0
    out_dir: str = "."
    jobs: int = 1

    def fingerprint(self) -> dict:
        # out_dir and jobs affect where/how, never what; keeping them out
        # lets a --jobs 4 run reproduce a serial report byte-for-byte
        skip = {"out_dir", "jobs"}
        return {k: v for k, v in asdict(self).items() if v is not None and k not in skip}


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc


def _pick(args: argparse.Namespace, cfg: dict, key: str, default=None):
    v = getattr(args, key, None)
    if v is not None:
        return v
    if key in cfg:
        return cfg[key]
    return _DEFAULTS.get(key, default)


def _pick_seed(args: argparse.Namespace, cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("DENC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"DENC_SEED must be an integer, got {env!r}") from exc
    return 0


def _out_dir(args) -> Path:
    out = Path(getattr(args, "out_dir", None) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _fmt(v: float) -> str:
    return repr(float(v))


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_gen(args, cfg) -> int:
    seed = _pick_seed(args, cfg)
    try:
        spec = SyntheticSpec(
            n_classes=_pick(args, cfg, "classes"),
            n_unseen=_pick(args, cfg, "unseen"),
            samples_per_class=_pick(args, cfg, "per_class"),
            feature_dim=_pick(args, cfg, "dim"),
            basis_size=_pick(args, cfg, "basis"),
            deformation_scale=_pick(args, cfg, "scale"),
            separation=_pick(args, cfg, "separation"),
            nonlinear=not args.linear,
            seed=seed,
        )
    except DatasetError as exc:  # invalid flag combination, not bad data
        raise ConfigError(str(exc)) from exc
    dataset = gen_synthetic(spec)
    out = _out_dir(args) / "dataset.dencfs"
    save_dataset(dataset, out)
    print(out)
    return 0


def _resolve_arch(args, cfg, dataset, variant: str) -> ArchConfig:
    # linear_offset has neither networks nor a bottleneck; its codes are raw
    # d-dimensional offsets, so the z flag is meaningless for it
    z_dim = 1 if variant == "linear_offset" else _pick(args, cfg, "z_dim")
    return ArchConfig(
        feature_dim=dataset.d,
        hidden_dim=_pick(args, cfg, "hidden_dim"),
        z_dim=z_dim,
        variant=variant,
        attr_dim=dataset.attr_dim if variant == "dae_attr_zeroshot" else 0,
    )


def _resolve_train_config(args, cfg, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=_pick(args, cfg, "learning_rate"),
        epochs=_pick(args, cfg, "epochs"),
        batch_size=_pick(args, cfg, "batch_size"),
        precision=_pick(args, cfg, "precision"),
        seed=seed,
    )


def cmd_train(args, cfg) -> int:
    seed = _pick_seed(args, cfg)
    dataset = load_dataset(args.dataset)
    variant = _pick(args, cfg, "variant")
    if variant == "linear_offset":
        raise ConfigError("linear_offset has no parameters; use it directly with eval")
    arch = _resolve_arch(args, cfg, dataset, variant)
    tc = _resolve_train_config(args, cfg, seed)
    model = build_model(arch, seed=seed, dtype=np.dtype(tc.precision).type)
    t0 = time.perf_counter()
    history = train(model, dataset, tc)
    out = _out_dir(args)
    save_model(model, out / "model.dencm")
    _write_csv(out / "loss.csv", ["epoch", "loss"],
               [(e, _fmt(v)) for e, v in enumerate(history)])
    _note(f"trained {variant} in {time.perf_counter() - t0:.1f}s "
          f"({len(history)} epochs, final loss {history[-1] if history else float('nan')})")
    print(out / "model.dencm")
    return 0


def _write_report(out: Path, report: EvalReport) -> None:
    (out / "report.json").write_text(report.to_json())
    _write_csv(out / "report.csv", ["episode", "accuracy"],
               [(i, _fmt(a)) for i, a in report.csv_rows()])


def cmd_eval(args, cfg) -> int:
    seed = _pick_seed(args, cfg)
    dataset = load_dataset(args.dataset)
    n_way = _pick(args, cfg, "n_way")
    k_shot = _pick(args, cfg, "k_shot")
    episodes = _pick(args, cfg, "episodes")
    spc = _pick(args, cfg, "samples_per_class")
    run = RunConfig(command="eval", dataset=args.dataset, model=args.model,
                    baseline=args.baseline, n_way=n_way, k_shot=k_shot,
                    episodes=episodes, samples_per_class=spc, seed=seed,
                    out_dir=str(_out_dir(args)), jobs=args.jobs or 1)

    if args.baseline is not None and args.model is not None:
        raise ConfigError("--baseline and --model are mutually exclusive")
    if args.baseline is not None:
        if args.baseline != "nn":
            raise ConfigError(f"unknown baseline {args.baseline!r}; only 'nn' is built in")
        report = evaluate_nearest_neighbor(dataset, n_way, k_shot, episodes, seed,
                                           extra_config={"run": run.fingerprint()})
    else:
        model = _load_or_build_model(args, cfg, dataset)
        run.variant = model.arch.variant
        report = evaluate(model, dataset, n_way, k_shot, episodes=episodes,
                          samples_per_class=spc, seed=seed, jobs=run.jobs,
                          extra_config={"run": run.fingerprint()})
    out = _out_dir(args)
    _write_report(out, report)
    _note(f"eval finished in {report.elapsed_s:.1f}s")
    print(f"mean={report.mean} std={report.std}")
    return 0


def _load_or_build_model(args, cfg, dataset):
    if args.model is not None:
        model = load_model(args.model)
        if model.arch.feature_dim != dataset.d:
            raise ConfigError(
                f"model expects {model.arch.feature_dim}-d features, dataset has {dataset.d}")
        return model
    variant = _pick(args, cfg, "variant")
    if variant != "linear_offset":
        raise ConfigError(
            f"variant {variant!r} needs a trained checkpoint; pass --model, "
            f"or use --variant linear_offset / --baseline nn")
    return build_model(_resolve_arch(args, cfg, dataset, variant), seed=0)


def cmd_ablate(args, cfg) -> int:
    seed = _pick_seed(args, cfg)
    dataset = load_dataset(args.dataset)
    n_way = _pick(args, cfg, "n_way")
    k_shot = _pick(args, cfg, "k_shot")
    episodes = _pick(args, cfg, "episodes")
    spc = _pick(args, cfg, "samples_per_class")
    tc_base = _resolve_train_config(args, cfg, seed)

    rows = []
    for vidx, variant in enumerate(VARIANTS):
        if variant == "dae_attr_zeroshot" and dataset.attributes is None:
            rows.append((variant, "skipped", "skipped"))
            _note(f"{variant}: skipped (dataset has no class attributes)")
            continue
        t0 = time.perf_counter()
        arch = _resolve_arch(args, cfg, dataset, variant)
        model = build_model(arch, seed=derive_seed(seed, vidx), dtype=np.float32)
        if variant != "linear_offset":
            tc = TrainConfig(learning_rate=tc_base.learning_rate, epochs=tc_base.epochs,
                             batch_size=tc_base.batch_size, precision=tc_base.precision,
                             seed=derive_seed(seed, vidx))
            train(model, dataset, tc)
        report = evaluate(model, dataset, n_way, k_shot, episodes=episodes,
                          samples_per_class=spc, seed=seed, jobs=args.jobs or 1)
        rows.append((variant, _fmt(report.mean), _fmt(report.std)))
        _note(f"{variant}: mean={report.mean:.4f} std={report.std:.4f} "
              f"({time.perf_counter() - t0:.1f}s)")
    out = _out_dir(args)
    _write_csv(out / "ablate.csv", ["variant", "mean", "std"], rows)
    print(out / "ablate.csv")
    return 0


def cmd_sweep(args, cfg) -> int:
    seed = _pick_seed(args, cfg)
    dataset = load_dataset(args.dataset)
    try:
        counts = [int(tok) for tok in args.counts.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"--counts must be comma-separated integers: {exc}") from exc
    if not counts:
        raise ConfigError("--counts is empty")
    model = _load_or_build_model(args, cfg, dataset)
    n_way = _pick(args, cfg, "n_way")
    k_shot = _pick(args, cfg, "k_shot")
    episodes = _pick(args, cfg, "episodes")
    results = sweep_samples(model, dataset, n_way, k_shot, counts,
                            episodes=episodes, seed=seed, jobs=args.jobs or 1)
    rows = []
    for count, report in results:
        rows.extend((count, i, _fmt(a)) for i, a in report.csv_rows())
        _note(f"count={count}: mean={report.mean:.4f}")
    out = _out_dir(args)
    _write_csv(out / "sweep.csv", ["count", "episode", "accuracy"], rows)
    print(out / "sweep.csv")
    return 0


def cmd_export_embeddings(args, cfg) -> int:
    seed = _pick_seed(args, cfg)
    dataset = load_dataset(args.dataset)
    model = _load_or_build_model(args, cfg, dataset)
    n_way = _pick(args, cfg, "n_way")
    k_shot = _pick(args, cfg, "k_shot")
    spc = _pick(args, cfg, "samples_per_class")
    episode = draw_episode(dataset, n_way, k_shot, seed=derive_seed(seed, 0, 0))

    vectors, labels = [], []
    for local, c in enumerate(episode.class_ids):
        name = dataset.class_names[int(c)]
        codes = sample_z(model, dataset, spc, seed=derive_seed(seed, 0, 1, local))
        if model.arch.variant == "dae_attr_zeroshot":
            synth = synthesize(model, codes, dataset.require_attributes()[int(c)])
        else:
            synth, _ = synthesize_kshot(model, codes, episode.support_x[local], total=spc)
        vectors.append(synth)
        labels.extend([name] * synth.shape[0])
        vectors.append(episode.support_x[local])
        labels.extend([f"{name}/anchor"] * episode.k_shot)
    out = _out_dir(args)
    export_embeddings(np.concatenate(vectors, axis=0), labels, out / "embeddings.csv")
    print(out / "embeddings.csv")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file (flags override it)")
    p.add_argument("--seed", type=int, help="master seed (env DENC_SEED as fallback)")
    p.add_argument("--out-dir", dest="out_dir", help="output directory (default .)")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-way", dest="n_way", type=int)
    p.add_argument("--k-shot", dest="k_shot", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    p.add_argument("--jobs", type=int, default=1, help="parallel episodes")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hidden", dest="hidden_dim", type=int)
    p.add_argument("--z-dim", dest="z_dim", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--precision", choices=["float32", "float64"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deltaenc",
        description="Few-shot learning by synthesizing feature-space samples "
                    "from learned intra-class deformations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic benchmark dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--unseen", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--basis", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--separation", type=float)
    p.add_argument("--linear", action="store_true", help="disable the nonlinearity")
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a synthesis model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--variant", choices=[v for v in VARIANTS if v != "linear_offset"])
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="episodic N-way k-shot evaluation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model")
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--baseline", choices=["nn"])
    _add_eval_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every runnable variant")
    p.add_argument("--dataset", required=True)
    _add_train_flags(p)
    _add_eval_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="accuracy vs. synthesis budget")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model")
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--counts", required=True, help="comma-separated sample counts")
    _add_eval_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings",
                       help="dump synthesized vectors + anchors for external plotting")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model")
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    p.add_argument("--n-way", dest="n_way", type=int)
    p.add_argument("--k-shot", dest="k_shot", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        cfg = _load_config_file(getattr(args, "config", None))
        return args.func(args, cfg)
    except ConfigError as exc:
        _note(f"error: {exc}")
        return 2
    except (FormatError, DatasetError, EpisodeError, StateError,
            FileNotFoundError, IsADirectoryError) as exc:
        _note(f"error: {exc}")
        return 3
    except (TrainingError, GenerationError, FloatingPointError) as exc:
        _note(f"error: {exc}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
