import numpy as np
import pytest

from deltaenc.data import SyntheticSpec, gen_synthetic
from deltaenc.fewshot import (
    Episode,
    EpisodeError,
    EvalReport,
    baseline_nearest_neighbor,
    draw_episode,
    evaluate,
    evaluate_nearest_neighbor,
    run_episode,
    sweep_samples,
    train_linear_classifier,
)
from deltaenc.model import ArchConfig, TrainConfig, build_model, train
from deltaenc.nn import DropoutSpec


def episodic_dataset(seed=0, per_class=20, n_unseen=6, **kw):
    return gen_synthetic(SyntheticSpec(
        n_classes=10, n_unseen=n_unseen, samples_per_class=per_class,
        feature_dim=16, basis_size=4, deformation_scale=2.0, separation=1.0,
        seed=seed, **kw))


def separable_dataset(seed=0):
    return gen_synthetic(SyntheticSpec(
        n_classes=10, n_unseen=6, samples_per_class=20, feature_dim=16,
        basis_size=4, deformation_scale=0.5, separation=20.0, seed=seed))


class TestDrawEpisode:
    def test_counting(self):
        ds = episodic_dataset()
        ep = draw_episode(ds, 5, 1, seed=3)
        assert ep.support_x.shape == (5, 1, 16)
        assert ep.query_x.shape == (95, 16)  # 5 classes x 19 remaining

    def test_all_unseen_classes(self):
        ds = episodic_dataset()
        ep = draw_episode(ds, 6, 1, seed=3)
        assert set(ep.class_ids) == set(int(c) for c in ds.unseen_class_ids)

    def test_same_seed_identical(self):
        ds = episodic_dataset()
        a = draw_episode(ds, 5, 2, seed=9)
        b = draw_episode(ds, 5, 2, seed=9)
        assert np.array_equal(a.class_ids, b.class_ids)
        assert np.array_equal(a.support_idx, b.support_idx)
        assert np.array_equal(a.query_idx, b.query_idx)

    def test_too_many_ways(self):
        ds = episodic_dataset()
        with pytest.raises(EpisodeError):
            draw_episode(ds, 7, 1, seed=0)

    def test_k_equals_class_size(self):
        ds = episodic_dataset(per_class=5)
        with pytest.raises(EpisodeError, match="query"):
            draw_episode(ds, 5, 5, seed=0)

    def test_support_query_disjoint_and_complete(self):
        ds = episodic_dataset()
        for seed in range(10):
            ep = draw_episode(ds, 4, 3, seed=seed)
            support = set(ep.support_idx.ravel().tolist())
            query = set(ep.query_idx.tolist())
            assert not (support & query)
            expected = set()
            for c in ep.class_ids:
                expected.update(ds.class_indices(int(c)).tolist())
            assert support | query == expected

    def test_supports_come_from_unseen_split(self):
        ds = episodic_dataset()
        ep = draw_episode(ds, 5, 2, seed=1)
        assert all(not ds.seen[int(c)] for c in ep.class_ids)


class TestLinearClassifier:
    def test_separable_clouds_reach_full_accuracy(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(40, 8)) + np.r_[np.full(4, 8.0), np.zeros(4)]
        b = rng.normal(size=(40, 8)) - np.r_[np.full(4, 8.0), np.zeros(4)]
        x = np.vstack([a, b])
        y = np.repeat([0, 1], 40)
        clf = train_linear_classifier(x, y, seed=0)
        assert clf.accuracy(x, y) == 1.0

    def test_identical_samples_split_by_tie_rule(self):
        x = np.ones((20, 4))
        y = np.repeat([0, 1], 10)
        clf = train_linear_classifier(x, y, seed=0)
        # indistinguishable classes: argmax tie goes to class 0, so accuracy
        # is exactly the class-0 share
        assert clf.accuracy(x, y) == 0.5

    def test_single_far_sample_per_class_classifies_itself(self):
        x = np.eye(3) * 50.0
        y = np.arange(3)
        clf = train_linear_classifier(x, y, seed=0)
        assert np.array_equal(clf.predict(x), y)

    def test_missing_class_rejected(self):
        with pytest.raises(ValueError, match=r"\[1\]"):
            train_linear_classifier(np.zeros((4, 2)), np.array([0, 0, 2, 2]), n_classes=3)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        clf = train_linear_classifier(rng.normal(size=(30, 5)),
                                      rng.integers(0, 3, 30), seed=1, n_classes=3)
        p = clf.predict_proba(rng.normal(size=(12, 5)))
        np.testing.assert_allclose(p.sum(axis=1), np.ones(12), atol=1e-6)

    def test_deterministic_in_seed(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(60, 6))
        y = rng.integers(0, 3, 60)
        a = train_linear_classifier(x, y, seed=7, n_classes=3)
        b = train_linear_classifier(x, y, seed=7, n_classes=3)
        assert np.array_equal(a.w, b.w) and np.array_equal(a.b, b.b)

    def test_random_guess_floor_with_shuffled_labels(self):
        ds = episodic_dataset(seed=5)
        ep = draw_episode(ds, 4, 1, seed=5)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(400, 16))
        y = np.repeat(np.arange(4), 100)
        rng.shuffle(y)  # labels carry no signal
        clf = train_linear_classifier(x, y, seed=3, n_classes=4)
        acc = clf.accuracy(ep.query_x, ep.query_y)
        m = ep.query_y.size
        sigma = np.sqrt(0.25 * 0.75 / m)
        assert abs(acc - 0.25) <= 3 * sigma + 1e-9


class TestNearestNeighbor:
    def _episode_1d(self, supports, queries, query_labels, k=1):
        supports = np.asarray(supports, dtype=np.float32).reshape(-1, k, 1)
        return Episode(
            n_way=supports.shape[0], k_shot=k,
            class_ids=np.arange(supports.shape[0]),
            support_x=supports,
            support_idx=np.zeros((supports.shape[0], k), dtype=np.int64),
            query_x=np.asarray(queries, dtype=np.float32).reshape(-1, 1),
            query_y=np.asarray(query_labels, dtype=np.int64),
            query_idx=np.zeros(len(query_labels), dtype=np.int64),
            seed=0,
        )

    def test_distance_comparison(self):
        ep = self._episode_1d([0.0, 10.0], [2.0], [0])
        assert baseline_nearest_neighbor(ep) == 1.0

    def test_query_on_support_vector(self):
        ep = self._episode_1d([0.0, 10.0], [10.0], [1])
        assert baseline_nearest_neighbor(ep) == 1.0

    def test_equidistant_tie_goes_to_lowest_class(self):
        ep = self._episode_1d([0.0, 10.0], [5.0], [0])
        assert baseline_nearest_neighbor(ep) == 1.0
        ep = self._episode_1d([0.0, 10.0], [5.0], [1])
        assert baseline_nearest_neighbor(ep) == 0.0

    def test_accuracy_invariant_to_class_reordering(self):
        ds = episodic_dataset()
        ep = draw_episode(ds, 4, 2, seed=11)
        perm = np.array([2, 0, 3, 1])
        relabel = np.argsort(perm)
        flipped = Episode(
            n_way=4, k_shot=2,
            class_ids=ep.class_ids[perm],
            support_x=ep.support_x[perm],
            support_idx=ep.support_idx[perm],
            query_x=ep.query_x,
            query_y=relabel[ep.query_y],
            query_idx=ep.query_idx,
            seed=ep.seed,
        )
        assert baseline_nearest_neighbor(flipped) == baseline_nearest_neighbor(ep)


class TestRunEpisode:
    def test_separable_benchmark_high_accuracy(self):
        ds = separable_dataset()
        model = build_model(ArchConfig(16, 32, 4, "linear_offset"))
        ep = draw_episode(ds, 5, 1, seed=2)
        acc = run_episode(model, ds, ep, samples_per_class=128, seed=2)
        assert acc > 0.9

    def test_accuracy_in_unit_interval(self):
        ds = episodic_dataset()
        model = build_model(ArchConfig(16, 32, 4, "linear_offset"))
        ep = draw_episode(ds, 4, 2, seed=3)
        acc = run_episode(model, ds, ep, samples_per_class=32, seed=3)
        assert 0.0 <= acc <= 1.0


class TestEvaluate:
    def test_single_episode_mean_and_std(self):
        ds = episodic_dataset()
        model = build_model(ArchConfig(16, 32, 4, "linear_offset"))
        report = evaluate(model, ds, 4, 1, episodes=1, samples_per_class=32, seed=5)
        assert report.mean == report.accuracies[0]
        assert report.std == 0.0

    def test_same_master_seed_identical_report(self):
        ds = episodic_dataset()
        model = build_model(ArchConfig(16, 32, 4, "linear_offset"))
        a = evaluate(model, ds, 4, 1, episodes=4, samples_per_class=32, seed=8)
        b = evaluate(model, ds, 4, 1, episodes=4, samples_per_class=32, seed=8)
        assert a.to_json() == b.to_json()

    def test_parallel_matches_serial(self):
        ds = episodic_dataset()
        model = build_model(ArchConfig(16, 32, 4, "linear_offset"))
        serial = evaluate(model, ds, 4, 1, episodes=6, samples_per_class=32, seed=2, jobs=1)
        parallel = evaluate(model, ds, 4, 1, episodes=6, samples_per_class=32, seed=2, jobs=3)
        assert serial.accuracies == parallel.accuracies
        assert serial.to_json() == parallel.to_json()

    def test_mean_is_arithmetic_mean(self):
        report = EvalReport.from_accuracies([0.5, 0.7, 0.9])
        assert report.mean == pytest.approx(0.7)
        assert all(0 <= a <= 1 for a in report.accuracies)

    def test_nn_baseline_uses_same_episode_stream(self):
        ds = episodic_dataset()
        report = evaluate_nearest_neighbor(ds, 4, 1, episodes=3, seed=4)
        accs = []
        from deltaenc.seeding import derive_seed

        for i in range(3):
            ep = draw_episode(ds, 4, 1, seed=derive_seed(4, i, 0))
            accs.append(baseline_nearest_neighbor(ep))
        assert report.accuracies == accs


class TestSweep:
    def test_single_count_equals_evaluate(self):
        ds = episodic_dataset()
        model = build_model(ArchConfig(16, 32, 4, "linear_offset"))
        direct = evaluate(model, ds, 4, 1, episodes=3, samples_per_class=48, seed=6)
        [(count, swept)] = sweep_samples(model, ds, 4, 1, [48], episodes=3, seed=6)
        assert count == 48
        assert swept.accuracies == direct.accuracies

    def test_empty_counts(self):
        ds = episodic_dataset()
        model = build_model(ArchConfig(16, 32, 4, "linear_offset"))
        assert sweep_samples(model, ds, 4, 1, [], episodes=2, seed=0) == []

    def test_trend_on_trained_model(self):
        # more synthesized samples should not hurt on the transfer benchmark
        ds = gen_synthetic(SyntheticSpec(seed=0))
        model = build_model(ArchConfig(64, 256, 8, "full"), seed=0)
        train(model, ds, TrainConfig(learning_rate=1e-3, epochs=60, batch_size=64,
                                     seed=0, dropout=DropoutSpec(rate=0.1)))
        results = dict(sweep_samples(model, ds, 4, 1, [16, 256], episodes=4, seed=0))
        assert results[256].mean >= results[16].mean
