import csv

import numpy as np
import pytest

from stnreid.data import make_rng, synth_dataset
from stnreid.reid import TERM_NAMES
from stnreid.tensorio import load_named
from stnreid.trainer import (METRICS_HEADER, TABLE2, Checkpoint, MatrixRow, STNReID, TrainConfig,
                             load_config, lr_schedule, merge_checkpoints, parse_config_text,
                             run_experiment_matrix, table2_config, train_reid_only, train_single_stage,
                             train_stage1, train_stage2_pm, train_stage2_mm, train_step, write_matrix_csv)

TINY = TrainConfig(image_height=32, image_width=16, extractor_channels="4,8,8,8", P=4, K=2,
                   total_epochs=3, decay_epoch=2, steps_per_epoch=2, lr_initial=1e-3, lr_decayed=1e-4)


@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(5, 4, 32, 16, seed=3)


@pytest.fixture(scope="module")
def stage1(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("s1")
    return train_stage1(tiny_data, table2_config("Ep1", TINY), out), out


# ---------------------------------------------------------------------------
# config


def test_config_defaults_match_reported_settings():
    c = TrainConfig()
    assert (c.lr_initial, c.lr_decayed) == (2e-4, 2e-5)
    assert (c.P, c.K, c.margin, c.weight_decay) == (8, 4, 0.3, 5e-4)
    assert (c.total_epochs, c.decay_epoch) == (30, 15)


def test_parse_config_text_types_and_comments():
    cfg = parse_config_text("""
        # weak ReID
        use_tri = false   # no triplet
        label_smooth = yes
        margin = 0.5
        P = 4
        pt_warmstart = none
        data_dir = /tmp/x
    """)
    assert cfg.use_tri is False and cfg.label_smooth is True
    assert cfg.margin == 0.5 and cfg.P == 4
    assert cfg.pt_warmstart is None and cfg.data_dir == "/tmp/x"


@pytest.mark.parametrize("text, match", [
    ("bogus = 1", "unknown key"),
    ("margin 0.3", "key = value"),
    ("P = four", "cannot parse"),
    ("hflip = maybe", "boolean"),
    ("use_id = false\nuse_tri = false", "use_id or use_tri"),
    ("decay_epoch = 30", "decay_epoch"),
    ("K = 1", "P and K"),
])
def test_parse_config_text_rejects(text, match):
    with pytest.raises(ValueError, match=match):
        parse_config_text(text)


def test_config_text_round_trip():
    cfg = TINY.replace(pt_warmstart="/a/b.stnt", label_smooth=True, seed=7)
    assert parse_config_text(cfg.to_text()) == cfg


def test_load_config_concatenates_files(tmp_path):
    a, b = tmp_path / "a.cfg", tmp_path / "b.cfg"
    a.write_text("margin = 0.4\nP = 4\n")
    b.write_text("margin = 0.6\n")
    cfg = load_config([a, b])
    assert cfg.margin == 0.6 and cfg.P == 4


def test_lr_schedule_single_step_decay():
    c = TrainConfig()
    assert lr_schedule(0, c) == 2e-4
    assert lr_schedule(c.decay_epoch - 1, c) == 2e-4
    assert lr_schedule(c.decay_epoch, c) == 2e-5
    assert lr_schedule(c.total_epochs - 1, c) == 2e-5


def test_table2_rows():
    assert TABLE2["Ep1"] == dict(pt_warmstart=None, label_smooth=False, use_id=True, use_tri=False)
    ep5 = table2_config("Ep5", TINY)
    assert ep5.use_tri and ep5.label_smooth and ep5.pt_warmstart == "auto"
    assert ep5.image_height == TINY.image_height


# ---------------------------------------------------------------------------
# training loop


def test_ep1_history_has_zero_triplet_terms(stage1):
    res, _ = stage1
    assert len(res.history) == TINY.total_epochs
    for row in res.history:
        assert row["tri_h"] == row["tri_p"] == row["tri_a"] == 0.0
        assert row["id_h"] > 0 and row["stn"] > 0
        assert row["total"] == pytest.approx(sum(row[t] for t in TERM_NAMES), rel=1e-9)


def test_metrics_csv_and_checkpoints(stage1):
    _, out = stage1
    with open(out / "metrics.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == METRICS_HEADER
    assert rows[0] == ["epoch", "lr", "loss_total", "loss_id_h", "loss_id_p", "loss_id_a",
                       "loss_tri_h", "loss_tri_p", "loss_tri_a", "loss_stn"]
    assert [int(r[0]) for r in rows[1:]] == list(range(TINY.total_epochs))
    assert [float(r[1]) for r in rows[1:]] == [1e-3, 1e-3, 1e-4]
    assert (out / f"ckpt_epoch_{TINY.total_epochs}.stnt").exists()
    assert (out / "ckpt_final.stnt").exists()


def test_repeated_batch_loss_decreases(tiny_data):
    cfg = table2_config("Ep5", TINY).replace(pt_warmstart=None)
    model = STNReID.build(cfg, tiny_data.num_ids)
    imgs = tiny_data.images[:8].copy()
    labels = tiny_data.pids[:8]
    losses = []
    for t in range(1, 21):
        # same partial crops every step: only the parameters change
        losses.append(train_step(model, imgs, labels, cfg, make_rng(0), 1e-3, t)["total"])
    assert losses[19] < losses[4]


def test_training_is_deterministic(tiny_data, tmp_path):
    cfg = table2_config("Ep1", TINY)
    a = train_single_stage(tiny_data, cfg, tmp_path / "a")
    b = train_single_stage(tiny_data, cfg, tmp_path / "b")
    assert a.history == b.history
    assert (tmp_path / "a/ckpt_final.stnt").read_bytes() == (tmp_path / "b/ckpt_final.stnt").read_bytes()


def test_seed_changes_run(tiny_data):
    a = train_single_stage(tiny_data, table2_config("Ep1", TINY))
    b = train_single_stage(tiny_data, table2_config("Ep1", TINY.replace(seed=1)))
    assert a.history[-1]["total"] != b.history[-1]["total"]


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(stage1, tmp_path):
    res, _ = stage1
    path = tmp_path / "c.stnt"
    res.checkpoint.save(path)
    back = Checkpoint.load(path)
    assert back.epoch == TINY.total_epochs
    assert back.config_text == res.checkpoint.config_text
    assert parse_config_text(back.config_text) == table2_config("Ep1", TINY)
    assert set(back.tensors) == set(res.checkpoint.tensors)
    for k, v in res.checkpoint.tensors.items():
        np.testing.assert_array_equal(back.tensors[k], v)
    assert back.metrics["loss_total"] == pytest.approx(res.history[-1]["total"], rel=1e-6)
    raw = load_named(path)
    assert "meta.config" in raw and "meta.epoch" in raw


def test_checkpoint_rebuilds_identical_model(stage1, tiny_data):
    res, _ = stage1
    model = res.checkpoint.to_model()
    imgs = tiny_data.images[:6]
    np.testing.assert_array_equal(model.features(imgs), res.model.features(imgs))
    np.testing.assert_array_equal(model.affine(imgs, imgs[::-1]), res.model.affine(imgs, imgs[::-1]))


def test_warm_start_copies_extractor_but_not_classifier(stage1, tiny_data, tmp_path):
    res, _ = stage1
    path = tmp_path / "pre.stnt"
    res.checkpoint.save(path)
    cfg = TINY.replace(pt_warmstart=str(path), total_epochs=1, decay_epoch=0, steps_per_epoch=1)
    # zero lr: the warm-started weights come through untouched
    cfg = cfg.replace(lr_initial=0.0, lr_decayed=0.0, weight_decay=0.0)
    fresh = STNReID.build(cfg, tiny_data.num_ids)
    warm = train_reid_only(tiny_data, cfg).model
    np.testing.assert_array_equal(warm.reid.body.layers[0][1].weight.value,
                                  res.model.reid.body.layers[0][1].weight.value)
    np.testing.assert_array_equal(warm.reid.classifier.weight.value, fresh.reid.classifier.weight.value)


# ---------------------------------------------------------------------------
# two-stage


def test_pm_keeps_stn_bit_identical(stage1, tiny_data):
    res, _ = stage1
    before = res.checkpoint.section("stn.")
    pm = train_stage2_pm(tiny_data, res.checkpoint, table2_config("Ep5", TINY).replace(pt_warmstart=None))
    after = pm.model.stn.state_dict("stn.")
    assert set(before) == set(after)
    for k in before:
        np.testing.assert_array_equal(after[k], before[k], err_msg=k)
    for _, p in pm.model.stn.named_parameters():
        assert p.frozen
        assert not p.adam_m.any() and not p.adam_v.any()
    # the ReID part did move
    assert not np.array_equal(pm.model.reid.body.layers[0][1].weight.value,
                              res.model.reid.body.layers[0][1].weight.value)


def test_pm_requires_stn(tiny_data):
    bare = Checkpoint.from_model(STNReID.build(TINY, tiny_data.num_ids, with_stn=False))
    with pytest.raises(ValueError, match="no stn"):
        train_stage2_pm(tiny_data, bare, TINY)


def test_pm_loss_decreases_over_epochs():
    # full PK batches: with tiny batches the epoch averages are dominated by sampling noise
    data = synth_dataset(8, 4, 32, 16, seed=3)
    base = TrainConfig(image_height=32, image_width=16, P=8, K=4, steps_per_epoch=8, total_epochs=12,
                       decay_epoch=8, lr_initial=1e-3, lr_decayed=1e-4)
    s1 = train_stage1(data, table2_config("Ep1", base.replace(total_epochs=3, decay_epoch=2)))
    pm = train_stage2_pm(data, s1.checkpoint, table2_config("Ep5", base).replace(pt_warmstart=None))
    losses = [r["total"] for r in pm.history]
    rises = sum(b > a for a, b in zip(losses[2:], losses[3:]))
    assert rises <= 1, losses
    assert losses[-1] < losses[2]


@pytest.fixture(scope="module")
def baseline(tiny_data):
    return train_reid_only(tiny_data, table2_config("Ep5", TINY).replace(pt_warmstart=None)).checkpoint


def test_merge_composes_without_training(stage1, baseline, tiny_data):
    res, _ = stage1
    merged = merge_checkpoints(baseline, res.checkpoint)
    assert train_stage2_mm(baseline, res.checkpoint).tensors.keys() == merged.tensors.keys()
    model = merged.to_model()
    imgs = tiny_data.images[:6]
    np.testing.assert_array_equal(model.features(imgs), baseline.to_model().features(imgs))
    np.testing.assert_array_equal(model.affine(imgs, imgs[::-1]), res.model.affine(imgs, imgs[::-1]))


def test_merge_is_idempotent(stage1, baseline):
    res, _ = stage1
    once = merge_checkpoints(baseline, res.checkpoint)
    twice = merge_checkpoints(once, once)
    assert once.tensors.keys() == twice.tensors.keys()
    for k in once.tensors:
        np.testing.assert_array_equal(once.tensors[k], twice.tensors[k])


def test_merge_rejects_bad_inputs(stage1, baseline, tiny_data):
    res, _ = stage1
    with pytest.raises(ValueError, match="no stn"):
        merge_checkpoints(baseline, baseline)
    wide = Checkpoint.from_model(STNReID.build(TINY.replace(extractor_channels="4,8,8,16"), tiny_data.num_ids))
    with pytest.raises(ValueError, match="feature dim mismatch"):
        merge_checkpoints(wide, res.checkpoint)


# ---------------------------------------------------------------------------
# matrix


def test_experiment_matrix_rows(tiny_data, tmp_path):
    cfg = TINY.replace(total_epochs=2, decay_epoch=1)
    rows = run_experiment_matrix(tiny_data, [(r, table2_config(r, cfg)) for r in ("Ep1", "Ep5")],
                                 repeats=2, work_dir=tmp_path)
    assert [r.name for r in rows] == ["Ep1", "Ep5"]
    for r in rows:
        assert 0.0 <= r.rank1_with_stn <= 1.0 and 0.0 <= r.rank1_without_stn <= 1.0
    assert (tmp_path / "pretrain_seed0.stnt").exists()
    write_matrix_csv(rows, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "row,rank1_with_stn,rank1_without_stn,improvement"
    assert len(lines) == 3


def test_matrix_auto_warm_start_needs_work_dir(tiny_data):
    with pytest.raises(ValueError, match="work_dir"):
        run_experiment_matrix(tiny_data, [("Ep5", table2_config("Ep5", TINY))], repeats=1)


def test_matrix_row_improvement():
    assert MatrixRow("x", 0.75, 0.5).improvement == 0.25
