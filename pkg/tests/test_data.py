import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from pixeldamage.data import (AugmentParams, Sample, SplitManifest, apply_split, augment, derive_binary_mask,
                              generate_synthetic, load_dataset, split, write_dataset, write_sample)
from pixeldamage.tensor import RngState


def save_pair(d, sid, image_hw3, mask, mask_mode="L"):
    Image.fromarray(image_hw3.astype(np.uint8)).save(d / f"image_{sid}.png")
    Image.fromarray(mask.astype(np.uint8), mode=mask_mode).save(d / f"mask_{sid}.png")


def test_600_pair_resized_to_288(tmp_path):
    g = np.random.default_rng(0)
    mask = np.zeros((600, 600), np.uint8)
    mask[:, 300:] = 3
    save_pair(tmp_path, "0001", g.integers(0, 256, (600, 600, 3)), mask)
    (s,) = load_dataset(tmp_path)
    assert s.image.shape == (3, 288, 288) and s.mask.shape == (288, 288)
    assert s.image.dtype == np.float32 and s.source_id == "0001"
    assert set(np.unique(s.mask)) == {0, 3}


def test_all_zero_mask_is_valid(tmp_path):
    save_pair(tmp_path, "a", np.full((288, 288, 3), 90), np.zeros((288, 288)))
    (s,) = load_dataset(tmp_path)
    assert s.mask.max() == 0


def test_bad_pairs_reported_and_skipped(tmp_path):
    good = np.zeros((288, 288))
    save_pair(tmp_path, "good", np.zeros((288, 288, 3)), good)
    save_pair(tmp_path, "badval", np.zeros((288, 288, 3)), np.full((288, 288), 7))
    save_pair(tmp_path, "small", np.zeros((100, 100, 3)), np.zeros((100, 100)))
    save_pair(tmp_path, "mismatch", np.zeros((300, 300, 3)), np.zeros((320, 320)))
    save_pair(tmp_path, "rect", np.zeros((300, 320, 3)), np.zeros((300, 320)))
    Image.fromarray(np.zeros((288, 288, 3), np.uint8)).save(tmp_path / "image_lonely.png")
    errors = []
    samples = load_dataset(tmp_path, errors=errors)
    assert [s.source_id for s in samples] == ["good"]
    assert sorted(e[0] for e in errors) == ["badval", "lonely", "mismatch", "rect", "small"]
    assert any("missing mask" in m for _, m in errors)


def test_rgb_mask_rejected(tmp_path):
    Image.fromarray(np.zeros((288, 288, 3), np.uint8)).save(tmp_path / "image_x.png")
    Image.fromarray(np.zeros((288, 288, 3), np.uint8)).save(tmp_path / "mask_x.png")
    errors = []
    assert load_dataset(tmp_path, errors=errors) == []
    assert "single channel" in errors[0][1]


def test_binary_mask():
    assert derive_binary_mask(np.zeros((4, 4), np.uint8)).max() == 0
    assert np.all(derive_binary_mask(np.full((4, 4), 5, np.uint8)) == 1)
    m = np.random.default_rng(1).integers(0, 7, size=(16, 16))
    b = derive_binary_mask(m)
    assert int(b.sum()) == int(np.count_nonzero(m))
    assert set(np.unique(b)) <= {0, 1}


def small_sample(size=32, seed=0):
    g = np.random.default_rng(seed)
    return Sample(g.uniform(0, 255, (3, size, size)).astype(np.float32),
                  g.integers(0, 7, (size, size)).astype(np.uint8), "s")


def test_degenerate_augment_is_identity():
    s = small_sample()
    out = augment(s, RngState(0), size=32, params=AugmentParams(1.0, 0.0, False, 0.0))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)


def test_flip_is_involution():
    s = small_sample()
    p = AugmentParams(1.0, 0.0, True, 0.0)
    once = augment(s, RngState(0), size=32, params=p)
    assert not np.array_equal(once.mask, s.mask)
    twice = augment(once, RngState(0), size=32, params=p)
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)


def test_random_augment_contract():
    s = small_sample(48)
    for i in range(20):
        out = augment(s, RngState(i), size=48)
        assert out.image.shape == (3, 48, 48) and out.mask.shape == (48, 48)
        assert out.mask.dtype == np.uint8 and out.mask.max() <= 6
        assert out.image.min() >= 0 and out.image.max() <= 255


def test_augment_is_deterministic():
    s = small_sample(48)
    a, b = augment(s, RngState(9), size=48), augment(s, RngState(9), size=48)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)


@pytest.mark.parametrize("params", [AugmentParams(1.2, 10.0, True, 0.0), AugmentParams(0.8, -12.0, False, 0.0)])
def test_image_and_mask_share_geometry(params):
    # a coarse label map rendered into the image: after transforming both, they must still agree
    blocks = np.random.default_rng(3).integers(1, 7, (8, 8))
    mask = np.kron(blocks, np.ones((8, 8), int)).astype(np.uint8)
    image = np.repeat((mask * 30.0)[None], 3, axis=0).astype(np.float32)
    out = augment(Sample(image, mask, "g"), RngState(0), size=64, params=params)
    decoded = np.rint(out.image[0] / 30.0)
    # bilinear blending smears label edges, so compare away from them
    m = out.mask
    interior = (ndimage.minimum_filter(m, 3) == ndimage.maximum_filter(m, 3)) & (m > 0)
    assert interior.sum() > 1000
    assert np.mean(decoded[interior] == m[interior]) > 0.99


def test_split_sizes_and_partition():
    ids = [f"{i:04d}" for i in range(1695)]
    m = split(ids, 0)
    assert (len(m.train), len(m.test)) == (1356, 339)
    assert set(m.train) | set(m.test) == set(ids) and not set(m.train) & set(m.test)
    m10 = split([str(i) for i in range(10)], 1)
    assert (len(m10.train), len(m10.test)) == (8, 2)
    assert split(ids, 5) == split(ids, 5)
    assert split(ids, 5) != split(ids, 6)


def test_manifest_round_trip(tmp_path):
    m = split([str(i) for i in range(10)], 3)
    m.save(tmp_path / "split.json")
    assert SplitManifest.load(tmp_path / "split.json") == m
    with pytest.raises(ValueError):
        SplitManifest(["a"], ["a"], 0)


def test_apply_split():
    samples = [small_sample(16, i) for i in range(5)]
    for i, s in enumerate(samples):
        s.source_id = str(i)
    train, test = apply_split(samples, split(samples, 0))
    assert len(train) == 4 and len(test) == 1


def test_synthetic_pairs_load(tmp_path):
    samples = generate_synthetic(8, RngState(1), size=64)
    write_dataset(samples, tmp_path)
    loaded = load_dataset(tmp_path, size=64)
    assert len(loaded) == 8
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)


def test_synthetic_covers_all_classes():
    samples = generate_synthetic(30, RngState(2), size=96)
    hist = np.bincount(np.concatenate([s.mask.ravel() for s in samples]), minlength=7)
    assert np.all(hist > 0)


def test_synthetic_byte_identical():
    a = generate_synthetic(3, RngState(5), size=64)
    b = generate_synthetic(3, RngState(5), size=64)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()


def test_write_sample_names(tmp_path):
    write_sample(small_sample(16), tmp_path, "z")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["image_z.png", "mask_z.png"]
