import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stnreid.data import (DIRECTIONS, DatasetIndex, augment, crop_rect, generate_partial,
                          generate_partials, hflip, load_dataset, make_partial_benchmark, make_rng,
                          palette, pk_sample, random_crop, synth_dataset, write_dataset)
from stnreid.stn import affine_warp
from stnreid.tensorio import write_ppm


@pytest.fixture(scope="module")
def small():
    return synth_dataset(10, 6, 64, 32, seed=0)


class TestPartial:
    def test_top_half_example(self):
        img = np.random.default_rng(0).random((1, 3, 256, 128)).astype(np.float32)
        part, spec = generate_partial(img, make_rng(0), direction="top", removed=0.5)
        assert spec.rect == (128, 256, 0, 128)
        assert part.shape == img.shape
        # the first and last output rows land exactly on kept rows 128 and 255
        np.testing.assert_allclose(part[0, :, 0], img[0, :, 128], atol=1e-6)
        np.testing.assert_allclose(part[0, :, -1], img[0, :, 255], atol=1e-6)

    def test_minimum_removal_keeps_80_percent(self):
        for d in DIRECTIONS:
            r0, r1, c0, c1 = crop_rect(d, 0.8, 256, 128)
            extent = (r1 - r0) if d in ("top", "bottom") else (c1 - c0)
            full = 256 if d in ("top", "bottom") else 128
            assert extent == round(0.8 * full)

    @pytest.mark.parametrize("direction,expect", [("top", (96, 256, 0, 128)), ("bottom", (0, 160, 0, 128)),
                                                  ("left", (0, 256, 48, 128)), ("right", (0, 256, 0, 80))])
    def test_anchor_opposite_side(self, direction, expect):
        assert crop_rect(direction, 0.625, 256, 128) == expect

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(16, 40), st.integers(16, 40))
    def test_shape_and_sub_rectangle(self, seed, h, w):
        rng = np.random.default_rng(seed)
        img = rng.random((1, 2, h, w)).astype(np.float32)
        part, spec = generate_partial(img, make_rng(seed))
        assert part.shape == img.shape
        r0, r1, c0, c1 = spec.rect
        assert 0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w
        assert 0.4 <= spec.keep_fraction <= 0.8
        crop = img[..., r0:r1, c0:c1]
        # bilinear output is a convex combination of crop pixels
        assert part.min() >= crop.min() - 1e-6 and part.max() <= crop.max() + 1e-6

    def test_theta_reproduces_partial(self):
        img = np.random.default_rng(2).random((1, 3, 64, 32)).astype(np.float32)
        part, spec = generate_partial(img, make_rng(3))
        again = affine_warp(img, spec.theta(64, 32)[None])
        np.testing.assert_array_equal(part, again)

    def test_monte_carlo_statistics(self):
        rng = make_rng(42)
        img = np.zeros((1, 1, 16, 16), np.float32)
        dirs, removed = [], []
        for _ in range(10_000):
            _, spec = generate_partial(img, rng)
            dirs.append(spec.direction)
            removed.append(1 - spec.keep_fraction)
        for d in DIRECTIONS:
            assert 0.23 <= dirs.count(d) / 10_000 <= 0.27
        hist, _ = np.histogram(removed, bins=8, range=(0.2, 0.6))
        assert min(removed) >= 0.2 and max(removed) <= 0.6
        # each of 8 bins expects 1250; 4 sigma of binomial noise is ~135
        assert np.abs(hist - 1250).max() < 140

    def test_batched_matches_single(self):
        imgs = np.random.default_rng(0).random((4, 3, 32, 16)).astype(np.float32)
        parts, specs = generate_partials(imgs, make_rng(9))
        for i, s in enumerate(specs):
            one, _ = generate_partial(imgs[i:i + 1], make_rng(0), direction=s.direction,
                                      removed=1 - s.keep_fraction)
            np.testing.assert_array_equal(parts[i], one[0])

    def test_too_small(self):
        with pytest.raises(ValueError):
            generate_partial(np.zeros((1, 3, 8, 32)), make_rng(0))


class TestPK:
    def test_paper_batch(self, small):
        b = pk_sample(small, 8, 4, make_rng(0))
        assert b.images.shape[0] == 32
        ids, counts = np.unique(b.labels, return_counts=True)
        assert len(ids) == 8 and set(counts) == {4}

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 10), st.integers(2, 9))
    def test_multiset(self, small, seed, p, k):
        b = pk_sample(small, p, k, make_rng(seed))
        _, counts = np.unique(b.labels, return_counts=True)
        assert len(counts) == p and set(counts) == {k}
        np.testing.assert_array_equal(small.pids[b.indices], b.labels)

    def test_two_ids_has_positive_and_negatives(self):
        idx = synth_dataset(2, 3, 32, 16)
        b = pk_sample(idx, 2, 2, make_rng(1))
        for a in range(4):
            same = b.labels == b.labels[a]
            assert same.sum() - 1 >= 1 and (~same).sum() >= 2

    def test_deterministic(self, small):
        a = pk_sample(small, 4, 4, make_rng(5))
        b = pk_sample(small, 4, 4, make_rng(5))
        assert a.images.tobytes() == b.images.tobytes()

    def test_too_few_ids(self, small):
        with pytest.raises(ValueError):
            pk_sample(small, 11, 2, make_rng(0))


class TestAugment:
    def test_all_off_is_identity(self):
        img = np.random.default_rng(0).random((3, 32, 16))
        assert augment(img, make_rng(0)) is img

    def test_hflip_involution(self):
        img = np.random.default_rng(0).random((3, 32, 16))
        np.testing.assert_array_equal(hflip(hflip(img)), img)
        np.testing.assert_array_equal(augment(augment(img, make_rng(0), hflip_on=True, flip_prob=1.0),
                                              make_rng(1), hflip_on=True, flip_prob=1.0), img)

    def test_random_crop_window(self):
        img = np.random.default_rng(0).random((3, 32, 16))
        out = random_crop(img, make_rng(3), pad=10)
        padded = np.pad(img, ((0, 0), (10, 10), (10, 10)))
        hits = [(dy, dx) for dy in range(21) for dx in range(21)
                if np.array_equal(padded[:, dy:dy + 32, dx:dx + 16], out)]
        assert hits

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_partial_aug_shape(self, seed):
        img = np.random.default_rng(seed).random((3, 32, 16)).astype(np.float32)
        out = augment(img, make_rng(seed), True, True, True, partial_prob=1.0)
        assert out.shape == img.shape


class TestSynth:
    def test_counts(self):
        d = synth_dataset(10, 6, 256, 128)
        assert d.images.shape == (60, 3, 256, 128)
        assert d.num_ids == 10
        assert set(np.bincount(d.pids)) == {6}
        assert d.images.min() >= 0 and d.images.max() <= 1

    def test_same_id_close(self, small):
        for members in small.by_id():
            a, b = small.images[members[0]], small.images[members[1]]
            assert np.abs(a - b).mean() < 0.25

    def test_nearest_centroid_learnable(self, small):
        # centroids from half the images, classify the other half
        x = small.images.reshape(len(small), -1)
        train = np.concatenate([m[:3] for m in small.by_id()])
        test = np.concatenate([m[3:] for m in small.by_id()])
        cents = np.stack([x[train][small.pids[train] == i].mean(0) for i in range(10)])
        pred = ((x[test][:, None] - cents[None]) ** 2).sum(-1).argmin(1)
        assert (pred == small.pids[test]).mean() >= 0.9

    def test_byte_identical(self):
        a = synth_dataset(3, 2, 32, 16, seed=7)
        b = synth_dataset(3, 2, 32, 16, seed=7)
        assert a.images.tobytes() == b.images.tobytes()
        assert not np.array_equal(a.images, synth_dataset(3, 2, 32, 16, seed=8).images)

    def test_palette_separable(self):
        p = palette(125)
        gaps = np.abs(p[:, None] - p[None]).max(-1)
        assert gaps[~np.eye(len(p), dtype=bool)].min() >= 0.2 - 1e-6
        with pytest.raises(ValueError):
            synth_dataset(126, 2)

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            synth_dataset(1, 6)


class TestLoad:
    def test_example_layout(self, tmp_path, caplog):
        img = np.zeros((3, 8, 4), np.float32)
        for name in ["0001_c1_000.ppm", "0001_c2_001.ppm", "0002_c1_000.ppm"]:
            write_ppm(tmp_path / name, img)
        (tmp_path / "readme.txt").write_text("hi")
        with caplog.at_level(logging.WARNING):
            d = load_dataset(tmp_path)
        assert len(d) == 3 and d.num_ids == 2
        assert d.pids.tolist() == [0, 0, 1]
        assert d.cams.tolist() == [1, 2, 1]
        assert "readme.txt" in caplog.text

    def test_distractor_ids_skipped(self, tmp_path):
        img = np.zeros((3, 8, 4), np.float32)
        write_ppm(tmp_path / "-1_c1_000.ppm", img)
        write_ppm(tmp_path / "0007_c1_000.ppm", img)
        assert len(load_dataset(tmp_path)) == 1

    def test_empty(self, tmp_path):
        with pytest.raises(ValueError):
            load_dataset(tmp_path)

    def test_roundtrip(self, tmp_path):
        d = synth_dataset(3, 2, 32, 16)
        paths = write_dataset(d, tmp_path)
        assert len(paths) == 6
        back = load_dataset(tmp_path)
        order = [paths.index(type(paths[0])(p)) for p in back.paths]
        np.testing.assert_array_equal(back.pids, d.pids[order])
        assert np.abs(back.images - d.images[order]).max() <= 0.5 / 255 + 1e-6


def test_partial_benchmark_split(small):
    bench = make_partial_benchmark(small, 0)
    assert len(bench.probes) == len(bench.gallery) == 30
    assert set(bench.probe_ids) == set(bench.gallery_ids) == set(range(10))
    assert bench.probes.shape[1:] == (3, 64, 32)
