import time

import numpy as np
import pytest

import deltaenc as de
from deltaenc.nn import DropoutSpec
from deltaenc.seeding import derive_seed

BENCH_SEEDS = (0, 1, 2, 3, 4)
BENCH_ARCH = dict(feature_dim=64, hidden_dim=256, z_dim=8)
N_WAY = 4  # the 16/4 split leaves four unseen classes, so episodes use all of them
K_SHOT = 1
EPISODES = 10
SPC = 1024


def bench_train_config(seed):
    # desk-scale training: the paper-default lr of 1e-5 over 10 epochs moves
    # nothing at 800 samples, so the benchmark trains harder but keeps the
    # same optimizer/loss/architecture
    return de.TrainConfig(learning_rate=1e-3, epochs=200, batch_size=64,
                          dropout=DropoutSpec(rate=0.1), seed=seed)


def _noncentering(model, ds, seed):
    radii = []
    for c in ds.unseen_class_ids:
        rows = ds.features[ds.class_indices(int(c))]
        mu = rows.mean(axis=0)
        radii.append(np.sqrt(((rows - mu) ** 2).sum(axis=1).mean()))
    sigma = float(np.mean(radii))
    displaced = total = 0
    for i in range(EPISODES):
        episode = de.draw_episode(ds, N_WAY, K_SHOT, seed=derive_seed(seed, i, 0))
        for local in range(N_WAY):
            anchor = episode.support_x[local][0]
            codes = de.sample_z(model, ds, SPC, seed=derive_seed(seed, i, 2, local))
            synth = de.synthesize(model, codes, anchor)
            displaced += int(np.linalg.norm(anchor - synth.mean(axis=0)) > 0.1 * sigma)
            total += 1
    return displaced, total


def _run_bench_seed(seed):
    t0 = time.perf_counter()
    ds = de.gen_synthetic(de.SyntheticSpec(seed=seed))

    full = de.build_model(de.ArchConfig(**BENCH_ARCH, variant="full"), seed=seed)
    de.train(full, ds, bench_train_config(seed))
    ae = de.build_model(de.ArchConfig(**BENCH_ARCH, variant="ae_nonparam"), seed=seed)
    de.train(ae, ds, bench_train_config(seed))
    lo = de.build_model(de.ArchConfig(**BENCH_ARCH, variant="linear_offset"), seed=seed)

    out = {
        "full": de.evaluate(full, ds, N_WAY, K_SHOT, episodes=EPISODES,
                            samples_per_class=SPC, seed=seed).mean,
        "full16": de.evaluate(full, ds, N_WAY, K_SHOT, episodes=EPISODES,
                              samples_per_class=16, seed=seed).mean,
        "lo": de.evaluate(lo, ds, N_WAY, K_SHOT, episodes=EPISODES,
                          samples_per_class=SPC, seed=seed).mean,
        "ae": de.evaluate(ae, ds, N_WAY, K_SHOT, episodes=EPISODES,
                          samples_per_class=SPC, seed=seed).mean,
        "nn1": de.evaluate_nearest_neighbor(ds, N_WAY, K_SHOT,
                                            episodes=EPISODES, seed=seed).mean,
        "nn5": de.evaluate_nearest_neighbor(ds, N_WAY, 5,
                                            episodes=EPISODES, seed=seed).mean,
    }
    out["noncenter"] = _noncentering(full, ds, seed)
    out["elapsed_s"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def bench():
    """Five-seed benchmark sweep shared by all acceptance criteria."""
    return {seed: _run_bench_seed(seed) for seed in BENCH_SEEDS}
