import numpy as np
import pytest

from isgan.dataset import (
    AugmentPolicy,
    DatasetError,
    augment,
    binary_attribute,
    body_boxes,
    by_split,
    factor_collisions,
    load_celeb_layout,
    load_market_layout,
    load_synthetic_dir,
    num_identities,
    parse_market_name,
    pk_sample,
    resize,
    save_image,
    synth_benchmark,
    synth_generate,
    write_synthetic_dir,
)


def _png(path, value=0.5, size=(16, 8)):
    path.parent.mkdir(parents=True, exist_ok=True)
    save_image(path, np.full(size + (3,), value, dtype=np.float32))


def test_parse_market_name():
    assert parse_market_name("0002_c1s1_000451_03.jpg") == (2, 1)
    assert parse_market_name("-1_c3s2_000001_00.jpg") == (-1, 3)
    assert parse_market_name("readme.jpg") is None


def test_market_layout_remaps_and_filters(tmp_path):
    for name in ["0007_c1s1_0001_00.png", "0007_c2s1_0002_00.png", "0031_c1s1_0001_00.png",
                 "0000_c1s1_0001_00.png", "-1_c2s1_0001_00.png", "bad.png"]:
        _png(tmp_path / "bounding_box_train" / name)
    for name in ["0050_c1s1_0001_00.png"]:
        _png(tmp_path / "query" / name)
    for name in ["0050_c2s1_0001_00.png", "0060_c1s1_0001_00.png"]:
        _png(tmp_path / "bounding_box_test" / name)
    recs = load_market_layout(tmp_path)
    train = by_split(recs, "train")
    assert sorted(r.identity for r in train) == [0, 0, 1]
    assert [r.pid for r in train] == ["7", "7", "31"]
    q, g = by_split(recs, "query"), by_split(recs, "gallery")
    assert q[0].identity == g[0].identity == 0 and g[1].identity == 1
    assert q[0].camera_id == 1 and g[0].camera_id == 2
    assert recs[0].pixels().shape == (16, 8, 3)


def test_two_files_same_id_give_one_class(tmp_path):
    _png(tmp_path / "bounding_box_train" / "0007_c1s1_0001_00.png")
    _png(tmp_path / "bounding_box_train" / "0007_c2s1_0001_00.png")
    recs = load_market_layout(tmp_path, {"train": "bounding_box_train"})
    assert num_identities(recs) == 1
    assert [r.identity for r in recs] == [0, 0]


def test_empty_split_is_fatal(tmp_path):
    (tmp_path / "bounding_box_train").mkdir()
    with pytest.raises(DatasetError, match="empty split"):
        load_market_layout(tmp_path)


def test_celeb_layout(tmp_path):
    for split, pids in [("train", ["a", "b"]), ("query", ["c"]), ("gallery", ["c", "d"])]:
        for pid in pids:
            _png(tmp_path / split / pid / "x.png")
    recs = load_celeb_layout(tmp_path)
    assert [r.identity for r in by_split(recs, "train")] == [0, 1]
    assert by_split(recs, "query")[0].identity == by_split(recs, "gallery")[0].identity
    assert {r.camera_id for r in recs} == {0}


def test_synth_generate_counts_and_determinism():
    recs = synth_generate(0, 20, 16)
    assert len(recs) == 320
    triples = {(r.factors.torso_color, r.factors.leg_color, r.factors.body_shape) for r in recs}
    assert len(triples) == 20
    assert not factor_collisions(recs)
    a = synth_generate(1, 2, 2)
    b = synth_generate(1, 2, 2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.pixels(), y.pixels())


def test_same_identity_shares_clothing_and_shape():
    recs = synth_generate(3, 5, 6)
    for ident in range(5):
        f = [(r.factors.torso_color, r.factors.leg_color, r.factors.body_shape) for r in recs if r.identity == ident]
        assert len(set(f)) == 1


def test_synth_rejects_bad_resolution():
    with pytest.raises(ValueError):
        synth_generate(0, 2, 2, resolution=(60, 32))


def test_benchmark_splits_disjoint():
    recs = synth_benchmark(0, 6, 4, 5, queries_per_id=2)
    train, q, g = by_split(recs, "train"), by_split(recs, "query"), by_split(recs, "gallery")
    assert len(train) == 30 and len(q) == 8 and len(g) == 12
    train_triples = {(r.factors.torso_color, r.factors.leg_color, r.factors.body_shape) for r in train}
    test_triples = {(r.factors.torso_color, r.factors.leg_color, r.factors.body_shape) for r in q + g}
    assert not train_triples & test_triples


def test_torso_region_carries_torso_color():
    from isgan.dataset import CLOTH_PALETTE

    recs = synth_generate(5, 4, 3)
    for r in recs:
        top, bottom, left, right = body_boxes(r.factors, (64, 32))["torso"]
        assert bottom > top and right > left
        if not r.factors.occlusion:
            region = r.pixels()[top:bottom, left:right]
            np.testing.assert_allclose(region.reshape(-1, 3).mean(0), CLOTH_PALETTE[r.factors.torso_color],
                                       atol=1e-5)


def test_synthetic_dir_round_trip(tmp_path):
    recs = synth_generate(2, 3, 2)
    write_synthetic_dir(recs, tmp_path)
    back = load_synthetic_dir(tmp_path)
    assert [r.identity for r in back] == [r.identity for r in recs]
    assert back[0].factors == recs[0].factors
    np.testing.assert_allclose(back[0].pixels(), recs[0].pixels(), atol=1 / 255)


def test_binary_attributes():
    recs = synth_generate(0, 20, 4)
    for name in ("torso_color", "leg_color", "x_offset", "bg_color", "body_shape", "occlusion"):
        y = binary_attribute(recs, name)
        assert y.shape == (80,) and set(np.unique(y)) <= {0, 1}
    with pytest.raises(KeyError):
        binary_attribute(recs, "hat")


def test_augment_identity_and_flip():
    img = np.random.default_rng(0).random((64, 32, 3)).astype(np.float32)
    rng = np.random.default_rng(1)
    np.testing.assert_array_equal(augment(img, rng, AugmentPolicy.identity((64, 32))), resize(img, (64, 32)))
    flip = AugmentPolicy(size=(64, 32), flip_p=1.0, crop=False, erase_p=0.0)
    twice = augment(augment(img, rng, flip), rng, flip)
    np.testing.assert_array_equal(twice, img)


def test_augment_erase_changes_a_rectangle():
    img = np.full((64, 32, 3), 0.2, dtype=np.float32)
    pol = AugmentPolicy(size=(64, 32), flip_p=0.0, crop=False, erase_p=1.0, fill=(0.9, 0.9, 0.9))
    out = augment(img, np.random.default_rng(3), pol)
    changed = np.argwhere((out != img).any(axis=2))
    assert len(changed)
    (r0, c0), (r1, c1) = changed.min(0), changed.max(0)
    assert len(changed) == (r1 - r0 + 1) * (c1 - c0 + 1)


def test_pk_sample_pairs():
    recs = synth_generate(0, 6, 4)
    batch = pk_sample(recs, 3, 4, np.random.default_rng(0))
    assert batch.images.shape == (12, 64, 32, 3)
    a, p = batch.pair_index[:, 0], batch.pair_index[:, 1]
    assert (a != p).all()
    np.testing.assert_array_equal(batch.labels[a], batch.labels[p])
    again = pk_sample(recs, 3, 4, np.random.default_rng(0))
    np.testing.assert_array_equal(again.record_index, batch.record_index)


def test_pk_sample_smallest_batch():
    recs = synth_generate(0, 2, 2)
    one = [r for r in recs if r.identity == 0]
    batch = pk_sample(one, 1, 2, np.random.default_rng(0))
    assert sorted(batch.record_index.tolist()) in ([0, 1], [0, 0], [1, 1])
    assert batch.pair_index.tolist() == [[0, 1], [1, 0]]


def test_pk_sample_errors_and_worker_invariance():
    recs = synth_generate(0, 3, 2)
    with pytest.raises(ValueError):
        pk_sample(recs, 4, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        pk_sample(recs, 2, 1, np.random.default_rng(0))
    pol = AugmentPolicy(size=(64, 32))
    tf = lambda r, g: augment(r, g, pol)  # noqa: E731
    one = pk_sample(recs, 2, 3, np.random.default_rng(7), tf, workers=1)
    many = pk_sample(recs, 2, 3, np.random.default_rng(7), tf, workers=3)
    np.testing.assert_array_equal(one.images, many.images)
