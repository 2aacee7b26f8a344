import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from continuum.data import (SegSample, add_gaussian_noise, load_image_dir, noisy_copy, save_sample_png, split,
                            stack, synth_blobs)
from continuum.metrics import (MetricReport, accuracy, average_hausdorff, binarize, dice, evaluate, mean_report,
                               reports_to_csv)


def brute_ahd(a, b):
    pa, pb = np.argwhere(a), np.argwhere(b)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return math.hypot(*a.shape)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[1:3, 1:3] = True
    assert dice(a, a) == 1.0
    far = np.zeros((4, 4), bool)
    far[0, 0] = True
    assert dice(a, far) == 0.0
    shifted = np.zeros((4, 4), bool)
    shifted[1:3, 2:4] = True
    assert dice(a, shifted) == 0.5
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_accuracy_examples():
    a = np.random.default_rng(0).random((8, 8)) > 0.5
    assert accuracy(a, a) == 1.0
    assert accuracy(a, ~a) == 0.0
    b = np.zeros((64, 64), bool)
    c = b.copy()
    c[5, 7] = True
    assert accuracy(b, c) == 1.0 - 1.0 / 4096


def test_ahd_examples():
    a = np.zeros((8, 8), bool)
    a[2:5, 3:6] = True
    assert average_hausdorff(a, a) == 0.0
    p, q = np.zeros((6, 6), bool), np.zeros((6, 6), bool)
    p[0, 0], q[3, 4] = True, True
    assert average_hausdorff(p, q) == 5.0


def test_ahd_degenerate_cases():
    empty, one = np.zeros((3, 4), bool), np.zeros((3, 4), bool)
    one[1, 1] = True
    assert average_hausdorff(empty, empty) == 0.0
    assert average_hausdorff(empty, one) == 5.0
    assert average_hausdorff(one, empty) == 5.0


def test_ahd_matches_brute_force_on_100_random_pairs():
    rng = np.random.default_rng(42)
    for _ in range(100):
        h, w = rng.integers(1, 17, size=2)
        density = rng.uniform(0.02, 0.6)
        a, b = rng.random((h, w)) < density, rng.random((h, w)) < density
        assert abs(average_hausdorff(a, b) - brute_ahd(a, b)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 12), st.integers(1, 12))
def test_metric_symmetry_and_self_distance(seed, h, w):
    rng = np.random.default_rng(seed)
    a, b = rng.random((h, w)) < 0.3, rng.random((h, w)) < 0.3
    assert dice(a, b) == dice(b, a)
    assert average_hausdorff(a, b) == average_hausdorff(b, a)
    if a.any():
        assert dice(a, a) == 1.0 and average_hausdorff(a, a) == 0.0


def test_metric_shape_checks():
    with pytest.raises(ValueError):
        dice(np.zeros((3, 3)), np.zeros((3, 4)))
    assert dice(np.ones((1, 1, 3, 3)), np.ones((3, 3))) == 1.0


def test_binarize_threshold():
    np.testing.assert_array_equal(binarize(np.array([0.49, 0.5, 0.9])), [False, True, True])


def test_report_validation_and_csv():
    with pytest.raises(ValueError):
        MetricReport(1.2, 0.5, 0.0)
    with pytest.raises(ValueError):
        MetricReport(0.5, 0.5, -1.0)
    reps = evaluate([np.ones((2, 2)), np.zeros((2, 2))], [np.ones((2, 2)), np.ones((2, 2))])
    text = reports_to_csv(reps)
    assert text.splitlines()[0] == "sample_id,dice,accuracy,ahd"
    assert len(text.splitlines()) == 3
    m = mean_report(reps)
    assert m.dice == 0.5 and m.accuracy == 0.5


def test_synth_blobs_basic_contract():
    assert synth_blobs(0) == []
    a, b = synth_blobs(4, 32, seed=3), synth_blobs(4, 32, seed=3)
    for s, t in zip(a, b):
        assert np.array_equal(s.image, t.image) and np.array_equal(s.mask, t.mask)
    assert a[0].image.shape == (1, 32, 32) and a[0].mask.shape == (1, 32, 32)
    assert all(0.0 <= s.image.min() and s.image.max() <= 1.0 for s in a)
    with pytest.raises(ValueError):
        synth_blobs(1, 30)


def test_synth_blobs_foreground_brighter_than_background():
    hits = total = 0
    for s in synth_blobs(20, 64, seed=1):
        fg = s.mask[0] > 0
        bg_mean = s.image[0][~fg].mean()
        hits += int((s.image[0][fg] > bg_mean).sum())
        total += int(fg.sum())
    assert total > 0 and hits / total >= 0.99


def test_seg_sample_validation():
    with pytest.raises(ValueError):
        SegSample(np.zeros((1, 4, 4)), np.full((1, 4, 4), 0.5))
    with pytest.raises(ValueError):
        SegSample(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


def test_noise_statistics():
    img = np.full((1, 200, 200), 0.5)
    assert np.array_equal(add_gaussian_noise(img, 0.0), img)
    raw = add_gaussian_noise(img, 0.2, seed=1, clamp=False) - img
    n = raw.size
    assert abs(raw.mean()) <= 3 * 0.2 / math.sqrt(n)
    assert abs(raw.std() - 0.2) <= 0.05 * 0.2
    clamped = add_gaussian_noise(img, 0.5, seed=1)
    assert clamped.min() >= 0.0 and clamped.max() <= 1.0
    with pytest.raises(ValueError):
        add_gaussian_noise(img, -0.1)


def test_noisy_copy_keeps_masks():
    data = synth_blobs(3, 16, seed=0)
    noisy = noisy_copy(data, 0.3, seed=2)
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(data, noisy))
    assert not np.array_equal(data[0].image, noisy[0].image)


def test_split_is_seeded_partition():
    data = synth_blobs(10, 16, seed=0)
    tr, va = split(data, 0.2, seed=5)
    assert len(tr) == 8 and len(va) == 2
    assert {id(s) for s in tr} | {id(s) for s in va} == {id(s) for s in data}
    tr2, va2 = split(data, 0.2, seed=5)
    assert [id(s) for s in va] == [id(s) for s in va2]
    X, Y = stack(tr)
    assert X.shape == (8, 1, 16, 16) and Y.shape == (8, 1, 16, 16)


def test_png_roundtrip(tmp_path):
    (tmp_path / "img").mkdir()
    (tmp_path / "msk").mkdir()
    data = synth_blobs(3, 32, seed=4)
    for i, s in enumerate(data):
        save_sample_png(s, tmp_path / "img" / f"{i}.png", tmp_path / "msk" / f"{i}.png")
    back = load_image_dir(tmp_path / "img", tmp_path / "msk", 32)
    assert len(back) == 3
    for s, t in zip(data, back):
        assert np.abs(s.image - t.image).max() <= 1 / 255 + 1e-12
        assert np.array_equal(s.mask, t.mask)
        assert np.isin(t.mask, (0.0, 1.0)).all()


def test_png_resize_and_rgb(tmp_path):
    (tmp_path / "i").mkdir()
    (tmp_path / "m").mkdir()
    Image.fromarray(np.zeros((20, 20, 3), np.uint8)).save(tmp_path / "i" / "a.png")
    Image.fromarray(np.full((20, 20), 255, np.uint8)).save(tmp_path / "m" / "a.png")
    (s,) = load_image_dir(tmp_path / "i", tmp_path / "m", 16)
    assert s.image.shape == (3, 16, 16) and s.mask.shape == (1, 16, 16)
    assert s.mask.min() == 1.0


def test_image_dir_errors(tmp_path):
    (tmp_path / "i").mkdir()
    (tmp_path / "m").mkdir()
    assert load_image_dir(tmp_path / "i", tmp_path / "m", 16) == []
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "i" / "lonely.png")
    with pytest.raises(ValueError, match="lonely.png"):
        load_image_dir(tmp_path / "i", tmp_path / "m", 16)
    (tmp_path / "i" / "lonely.png").unlink()
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "i" / "x.bmp")
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "m" / "x.bmp")
    with pytest.raises(ValueError, match="PNG"):
        load_image_dir(tmp_path / "i", tmp_path / "m", 16)
