import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stnreid.data import PartialBenchmark, synth_dataset, make_partial_benchmark
from stnreid.evaluation import (CmcReport, DistanceMatrix, bench_matching, cmc, evaluate_distances,
                                evaluate_protocol, feature_distance, score_no_stn, score_pair_batch,
                                score_stn, single_shot_splits, write_bench_csv)
from stnreid.stn import STN, affine_warp
from stnreid.trainer import STNReID, TrainConfig


def cmc_oracle(values, pids, gids, ranks):
    """Full sort of (distance, index) tuples per probe."""
    hits = np.zeros(len(ranks))
    for q in range(len(pids)):
        order = sorted(range(len(gids)), key=lambda g: (values[q][g], g))
        first = next(i for i, g in enumerate(order) if gids[g] == pids[q])
        hits += [first < k for k in ranks]
    return hits / len(pids)


class OneHotModel:
    """Features are the identity one-hot encoded by the (constant) first pixel."""

    def __init__(self, n):
        self.n = n

    def features(self, images):
        ids = np.rint(images[:, 0, 0, 0] * 10).astype(int)
        return np.eye(self.n)[ids]

    def affine(self, holistic, partial):
        return holistic


@pytest.fixture(scope="module")
def model():
    return STNReID.build(TrainConfig(), num_ids=4)


@pytest.fixture(scope="module")
def images():
    return synth_dataset(4, 4, 64, 32, seed=3).images


class TestCmc:
    def test_oracle_200_random_matrices(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            q, g = int(rng.integers(1, 51)), int(rng.integers(1, 81))
            nid = int(rng.integers(1, min(q, g) + 1))
            gids = np.concatenate([np.arange(nid), rng.integers(0, nid, g - nid)])
            pids = rng.integers(0, nid, q)
            # coarse values so ties are common
            vals = rng.integers(0, 5, (q, g)).astype(float)
            ranks = (1, 3, 5, 10)
            got = cmc(DistanceMatrix(vals, pids, gids), ranks)
            assert np.array_equal(got, cmc_oracle(vals, pids, gids, ranks))

    def test_true_match_nearest(self):
        vals = np.ones((3, 3)) - np.eye(3)
        assert cmc(DistanceMatrix(vals, np.arange(3), np.arange(3)), (1,))[0] == 1.0

    def test_true_match_always_second(self):
        q = 4
        gids = np.arange(2 * q)
        vals = np.full((q, 2 * q), 10.0)
        for i in range(q):
            vals[i, q + i] = 0.0  # an impostor is nearest
            vals[i, i] = 1.0
        acc = cmc(DistanceMatrix(vals, np.arange(q), gids), (1, 3))
        assert acc.tolist() == [0.0, 1.0]

    def test_ties_by_gallery_index(self):
        vals = np.zeros((1, 3))
        assert cmc(DistanceMatrix(vals, np.array([2]), np.arange(3)), (1, 2, 3)).tolist() == [0, 0, 1]

    def test_missing_probe_id(self):
        with pytest.raises(ValueError, match="no gallery"):
            cmc(DistanceMatrix(np.zeros((1, 2)), np.array([5]), np.array([0, 1])))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_in_rank(self, seed):
        rng = np.random.default_rng(seed)
        gids = np.arange(12) % 6
        acc = cmc(DistanceMatrix(rng.random((7, 12)), rng.integers(0, 6, 7), gids), range(1, 13))
        assert (np.diff(acc) >= 0).all() and acc[-1] == 1.0

    def test_shape_check(self):
        with pytest.raises(ValueError):
            DistanceMatrix(np.zeros((2, 3)), np.arange(2), np.arange(2))


class TestReport:
    def test_mean_of_repeats(self):
        rng = np.random.default_rng(1)
        full = DistanceMatrix(rng.random((20, 40)), rng.integers(0, 10, 20), np.arange(40) % 10)
        rep = evaluate_distances(full, repeats=10, seed=4)
        assert rep.num_repeats == 10
        assert rep.per_repeat.shape == (10, 3)
        assert rep.rank1 == np.mean(rep.per_repeat[:, 0])
        assert (np.diff(rep.mean) >= 0).all()

    def test_single_shot(self):
        gids = np.repeat(np.arange(5), 3)
        for cols in single_shot_splits(gids, 10, 0):
            assert sorted(gids[cols].tolist()) == list(range(5))

    def test_csv(self, tmp_path):
        rep = CmcReport((1, 3), np.array([[0.5, 1.0], [0.7, 1.0]]))
        rep.write_csv(tmp_path / "c.csv")
        rows = list(csv.reader(open(tmp_path / "c.csv")))
        assert rows[0] == ["rank", "accuracy_mean", "accuracy_std"]
        assert float(rows[1][1]) == pytest.approx(0.6)

    def test_perfect_model(self):
        n = 6
        imgs = np.zeros((2 * n, 3, 16, 16), np.float32)
        imgs[:, 0, 0, 0] = np.tile(np.arange(n), 2) / 10
        bench = PartialBenchmark(imgs[:n], np.arange(n), [], imgs[n:], np.arange(n))
        rep = evaluate_protocol(OneHotModel(n), bench, repeats=10, seed=0)
        assert rep.rank1 == 1.0

    def test_fixed_seed_identical(self, model):
        bench = make_partial_benchmark(synth_dataset(4, 4, 64, 32, seed=1), 0)
        a = evaluate_protocol(model, bench, 3, seed=2)
        b = evaluate_protocol(model, bench, 3, seed=2)
        np.testing.assert_array_equal(a.per_repeat, b.per_repeat)


class TestScoring:
    def test_n1_equals_batched(self, model, images):
        probe, gallery = images[:1], images[1:]
        batched = score_pair_batch(model, probe, gallery)
        single = np.array([score_pair_batch(model, probe, gallery[i:i + 1])[0] for i in range(len(gallery))])
        np.testing.assert_allclose(batched, single, atol=1e-5)

    def test_chunking_invariant(self, model, images):
        full = score_stn(model, images[:3], np.zeros(3), images, np.zeros(16), chunk=16).values
        for chunk in (1, 5, 7):
            np.testing.assert_allclose(score_stn(model, images[:3], np.zeros(3), images, np.zeros(16),
                                                 chunk=chunk).values, full, atol=1e-5)

    def test_permutation_equivariant(self, model, images):
        perm = np.random.default_rng(0).permutation(15)
        d = score_pair_batch(model, images[:1], images[1:])
        dp = score_pair_batch(model, images[:1], images[1:][perm])
        np.testing.assert_allclose(dp, d[perm], atol=1e-5)

    def test_no_stn_identity_equivalence(self, model, images):
        # a fresh STN is the identity, so both paths agree
        nostn = score_no_stn(model, images[:2], [0, 0], images, np.zeros(16))
        stn = score_stn(model, images[:2], [0, 0], images, np.zeros(16))
        assert nostn.values.shape == (2, 16)
        np.testing.assert_allclose(nostn.values, stn.values, atol=1e-5)
        np.testing.assert_allclose(np.diag(nostn.values[:, :2]), 0, atol=1e-6)

    def test_affined_comes_from_stn(self, images):
        m = STNReID.build(TrainConfig(), num_ids=4)
        fc4 = m.stn.loc.net.layers[-1][1]
        fc4.bias.value[:] = [0.5, 0, 0, 0, 0.5, 0]
        out = m.affine(images[:2], images[2:4])
        np.testing.assert_allclose(out, affine_warp(images[:2], np.tile([0.5, 0, 0, 0, 0.5, 0], (2, 1))),
                                   atol=1e-6)

    def test_metric(self):
        a, b = np.array([[3.0, 4.0]]), np.array([[0.0, 0.0]])
        assert feature_distance(a, b)[0] == 5.0
        assert feature_distance(a, 2 * a, "cosine")[0] == pytest.approx(0.0)
        with pytest.raises(ValueError):
            feature_distance(a, b, "manhattan")


class TestBench:
    def test_rows(self, model, images, tmp_path):
        gallery = np.concatenate([images, images])
        rows = bench_matching(model, images[0], gallery, batch_sizes=(1, 2, 4), repeats=1)
        assert [r.batch_size for r in rows] == [1, 2, 4]
        assert all(r.median_s > 0 for r in rows)
        write_bench_csv(rows, tmp_path / "b.csv")
        head = open(tmp_path / "b.csv").readline().strip()
        assert head == "batch_size,median_s,per_pair_us"

    def test_gallery_too_small(self, model, images):
        with pytest.raises(ValueError):
            bench_matching(model, images[0], images[:4], batch_sizes=(8,))
