import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daclab.datagen import (
    AugConfig,
    Dataset,
    Experience,
    OODSource,
    cutmix,
    cutmix_box,
    load_idx,
    load_image,
    make_split_stream,
    sample_ood_batch,
    save_image,
    shapes_dataset,
    write_idx,
    write_patch_cache,
)
from daclab.datagen.augment import Pyramid, render_views, draw_view_params
from daclab.errors import FormatError, ShapeError
from daclab.numerics import ItemStream, seeded_rng


def toy_dataset(n_classes=10, per_class=6):
    y = np.repeat(np.arange(n_classes), per_class)
    x = np.random.default_rng(0).uniform(size=(len(y), 1, 4, 4)).astype(np.float32)
    return Dataset(x, y, np.zeros(len(y), bool), n_classes).with_holdout(0.5, 0)


# -- streams --------------------------------------------------------------------

def test_split_stream_partitions_classes():
    stream = make_split_stream(toy_dataset(), 5, 2, seed=3)
    assert [e.task_id for e in stream] == [1, 2, 3, 4, 5]
    seen = [c for e in stream for c in e.classes]
    assert sorted(seen) == list(range(10))
    for e in stream:
        assert set(np.unique(e.train_y)) == set(e.classes) == set(np.unique(e.test_y))
        assert len(e.train_y) == len(e.test_y) == 6
    again = make_split_stream(toy_dataset(), 5, 2, seed=3)
    assert [e.classes for e in again] == [e.classes for e in stream]


def test_split_stream_needs_enough_classes():
    with pytest.raises(ValueError, match="12"):
        make_split_stream(toy_dataset(), 4, 3, seed=0)


def test_experience_label_validation():
    x = np.zeros((2, 1, 2, 2), np.float32)
    with pytest.raises(ValueError, match="not in"):
        Experience(1, (0, 1), x, np.array([0, 5]), x, np.array([0, 1]))
    e = Experience(1, (3, 7), x, np.array([7, 3]), x, np.array([3, 3]))
    assert e.local_labels(e.train_y).tolist() == [1, 0]


# -- shapes ---------------------------------------------------------------------

def test_shapes_counts_and_determinism():
    ds = shapes_dataset(4, n_classes=8, samples_per_class=100, image_size=16)
    assert len(ds) == 800 and ds.x.shape == (800, 3, 16, 16)
    assert ds.x.min() >= 0 and ds.x.max() <= 1
    assert np.bincount(ds.y).tolist() == [100] * 8
    assert ds.test_mask.sum() == 160
    assert np.array_equal(ds.x, shapes_dataset(4, 8, 100, 16).x)
    with pytest.raises(ValueError):
        shapes_dataset(0, 1, 10)


def test_shapes_calibration_linear_vs_cnn():
    """Raw pixels are not linearly perfect; a small CNN fits each task to >= 0.90."""
    from daclab.dcl import AdaptConfig, InitMessage, adapt, initial_model
    from daclab.eval import fit_softmax_probe, ProbeConfig
    from daclab.models import ArchSpec

    ds = shapes_dataset(0, n_classes=30, samples_per_class=100, image_size=16)
    flat = ds.x.reshape(len(ds), -1).astype(np.float64)
    clf = fit_softmax_probe(flat[~ds.test_mask], ds.y[~ds.test_mask], 30, ProbeConfig(max_iters=500))
    linear_acc = np.mean(clf(flat[ds.test_mask]) == ds.y[ds.test_mask])
    assert linear_acc < 1.0

    stream = make_split_stream(ds, 5, 6, seed=0)
    arch = ArchSpec("smallcnn", (3, 16, 16), hidden=(8, 16), dense=64)
    init = InitMessage.from_model(initial_model(arch, 0), 1)
    for exp in stream[:2]:
        res = adapt(init, exp, AdaptConfig(iterations=600, learning_rate=3e-3), arch, seed=exp.task_id)
        assert res.test_accuracy >= 0.90, (exp.task_id, res.test_accuracy)


# -- idx --------------------------------------------------------------------------

def test_idx_round_trip_and_errors(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(7, 5, 4), dtype=np.uint8)
    labels = np.arange(7) % 3
    write_idx(tmp_path / "i", tmp_path / "l", imgs, labels)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert len(ds) == 7 and ds.x.shape == (7, 1, 5, 4)
    np.testing.assert_allclose(ds.x[:, 0], imgs / 255.0, atol=1e-7)

    bad = bytearray((tmp_path / "i").read_bytes())
    bad[:4] = bytes.fromhex("DEADBEEF")
    (tmp_path / "bad").write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="DEADBEEF"):
        load_idx(tmp_path / "bad", tmp_path / "l")

    write_idx(tmp_path / "i2", tmp_path / "l2", imgs, labels[:5])
    with pytest.raises(FormatError, match="count mismatch"):
        load_idx(tmp_path / "i2", tmp_path / "l2")


def test_idx_gzip(tmp_path):
    import gzip

    imgs = np.zeros((2, 3, 3), np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", imgs, np.array([0, 1]))
    (tmp_path / "i.gz").write_bytes(gzip.compress((tmp_path / "i").read_bytes()))
    assert len(load_idx(tmp_path / "i.gz", tmp_path / "l")) == 2


# -- images and sources ---------------------------------------------------------------

def test_png_and_ppm_decode(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, size=(3, 6, 5)).astype(np.float32) / 255
    save_image(tmp_path / "a.png", img)
    save_image(tmp_path / "a.ppm", img)
    np.testing.assert_allclose(load_image(tmp_path / "a.png"), img, atol=1e-6)
    np.testing.assert_allclose(load_image(tmp_path / "a.ppm"), img, atol=1e-6)
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(FormatError):
        load_image(tmp_path / "junk.png")
    with pytest.raises(FormatError):
        OODSource.single_image(tmp_path / "missing.png").pyramids()


def test_identity_pipeline_returns_resized_original(structured_image_path):
    src = OODSource.single_image(structured_image_path)
    full = load_image(structured_image_path)
    aug = AugConfig.identity(out_size=full.shape[1:])
    batch = sample_ood_batch(src, aug, 3, ItemStream(0, "id")).data
    for img in batch:
        np.testing.assert_allclose(img, full, atol=1e-6)
    small = sample_ood_batch(src, AugConfig.identity(out_size=(16, 16)), 2, ItemStream(0, "id")).data
    assert np.array_equal(small[0], small[1])
    # a 128 -> 16 identity resize averages 8x8 blocks
    np.testing.assert_allclose(small[0], full.reshape(3, 16, 8, 16, 8).mean(axis=(2, 4)), atol=1e-5)


def test_noise_source_is_uniform():
    src = OODSource.noise(size=64, seed=2)
    batch = sample_ood_batch(src, AugConfig.identity(out_size=(64, 64)), 9, ItemStream(0, "n")).data
    assert batch.size > 100_000
    assert abs(batch.mean() - 0.5) < 0.01
    assert abs(batch.var() - 1 / 12) < 0.005


def test_batches_in_range_and_deterministic(structured_image_path):
    src = OODSource.single_image(structured_image_path)
    aug = AugConfig()
    a = sample_ood_batch(src, aug, 16, ItemStream(9, "x")).data
    b = sample_ood_batch(src, aug, 16, ItemStream(9, "x")).data
    assert a.shape == (16, 3, 16, 16) and a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)
    assert not np.array_equal(a[0], a[1])


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 9), st.integers(0, 1000))
def test_items_independent_of_batch_split(split, seed):
    src = OODSource.noise(size=32)
    aug = AugConfig(out_size=(8, 8))
    whole = sample_ood_batch(src, aug, 10, ItemStream(seed, "s")).data
    stream = ItemStream(seed, "s")
    parts = np.concatenate(
        [sample_ood_batch(src, aug, split, stream).data, sample_ood_batch(src, aug, 10 - split, stream).data]
    )
    assert np.array_equal(whole, parts)


def test_grayscale_output_channels(structured_image_path):
    aug = AugConfig(out_size=(12, 10), channels=1)
    batch = sample_ood_batch(OODSource.single_image(structured_image_path), aug, 4, ItemStream(0, "g")).data
    assert batch.shape == (4, 1, 12, 10)


def test_image_folder_and_patch_cache(tmp_path, structured_image_path):
    folder = tmp_path / "imgs"
    folder.mkdir()
    for k in range(2):
        save_image(folder / f"{k}.png", np.full((3, 20, 20), k / 2, np.float32))
    aug = AugConfig(out_size=(8, 8), cutmix=False, brightness=0, contrast=0, saturation=0)
    src = OODSource("image_folder", str(folder))
    batch = sample_ood_batch(src, aug, 20, ItemStream(0, "f")).data
    values = {round(float(v), 3) for v in batch.reshape(20, -1).max(axis=1)}
    assert values <= {0.0, 0.502} and len(values) == 2

    write_patch_cache(tmp_path / "cache.bin", OODSource.single_image(structured_image_path), AugConfig(), 5, seed=1)
    cached = OODSource("patch_cache", str(tmp_path / "cache.bin"))
    out = sample_ood_batch(cached, AugConfig(), 7, ItemStream(0, "c")).data
    assert out.shape == (7, 3, 16, 16)
    assert np.array_equal(out[5], out[0])


def test_source_validation():
    with pytest.raises(ValueError):
        OODSource("webcam")
    with pytest.raises(ValueError):
        OODSource("single_image")
    with pytest.raises(ValueError):
        OODSource.real_data(np.zeros((0, 3, 4, 4)))


def test_aug_config_validation():
    with pytest.raises(ValueError):
        AugConfig(crop_scale=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugConfig(flip_p=1.5)
    with pytest.raises(ValueError):
        AugConfig(cutmix_beta=0)


def test_flip_only_mirrors():
    img = np.random.default_rng(0).uniform(size=(3, 8, 8)).astype(np.float32)
    aug = AugConfig(out_size=(8, 8), crop_scale=(1, 1), crop_ratio=(1, 1), rotation=0, flip_p=1.0,
                    brightness=0, contrast=0, saturation=0, cutmix=False)
    params = draw_view_params((8, 8), aug, seeded_rng(0, "f"))
    out = render_views([Pyramid(img)], [0], [params], aug)[0]
    np.testing.assert_allclose(out, img[:, :, ::-1], atol=1e-6)


# -- cutmix ---------------------------------------------------------------------------

def test_cutmix_degenerate_and_full():
    rng = np.random.default_rng(0)
    x1, x2 = np.zeros((3, 8, 8)), np.ones((3, 8, 8))
    assert np.array_equal(cutmix(x1, x2, rng, lam=1.0), x1)
    assert np.array_equal(cutmix(x1, x2, rng, lam=0.0), x2)
    with pytest.raises(ShapeError):
        cutmix(x1, np.ones((3, 8, 7)), rng)


def test_cutmix_box_arithmetic():
    top, left, h, w = cutmix_box((32, 32), 0.75, np.random.default_rng(0))
    assert (h, w) == (16, 16)
    assert 0 <= top <= 16 and 0 <= left <= 16
    x1, x2 = np.zeros((3, 32, 32)), np.ones((3, 32, 32))
    assert cutmix(x1, x2, np.random.default_rng(1), lam=0.75).mean() == 0.25


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_cutmix_area_fraction(lam, seed):
    x1, x2 = np.zeros((1, 20, 20)), np.ones((1, 20, 20))
    side = round(np.sqrt(1 - lam) * 20)
    assert cutmix(x1, x2, np.random.default_rng(seed), lam=lam).sum() == side * side
