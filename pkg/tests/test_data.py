import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ophthmae import kernels
from ophthmae.data import (EmptyImageError, ImageRecord, Manifest, augment, eval_transform, load_image,
                           preprocess_image, quality_filter, read_manifest, resize_cubic, sample_rng,
                           save_image, split_counts, split_dataset, threshold_crop, write_manifest)


def catmull_rom_oracle(img, out_h, out_w, a=-0.5):
    """Scalar loop: separable bicubic with half-pixel centers and clamped taps."""
    def w(t):
        t = abs(t)
        if t <= 1:
            return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
        if t < 2:
            return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
        return 0.0

    def axis(src, n_out):
        n = len(src)
        out = []
        for j in range(n_out):
            c = (j + 0.5) * n / n_out - 0.5
            base = math.floor(c)
            out.append(sum(w(c - k) * src[min(max(k, 0), n - 1)] for k in range(base - 1, base + 3)))
        return out

    c, h, _ = img.shape
    out = np.zeros((c, out_h, out_w))
    for ch in range(c):
        rows = [axis(list(img[ch, r]), out_w) for r in range(h)]
        cols = np.array(rows)
        for j in range(out_w):
            out[ch, :, j] = axis(list(cols[:, j]), out_h)
    return out


@pytest.mark.parametrize("shape,out", [((1, 5, 7), (9, 4)), ((3, 8, 8), (8, 13)), ((2, 3, 3), (1, 1))])
def test_resize_matches_scalar_oracle(shape, out):
    img = np.random.default_rng(0).uniform(0, 255, shape)
    np.testing.assert_allclose(kernels.resize_cubic_float(img, *out), catmull_rom_oracle(img, *out), atol=1e-9)


def test_numpy_fallback_matches_numba_path():
    """Both backends, each in a fresh interpreter, give the same kernel outputs."""
    code = ("import numpy as np, sys; from ophthmae import kernels, _accel;"
            "x=np.random.default_rng(1).normal(size=(4,33));"
            "img=np.random.default_rng(2).uniform(0,255,(3,17,23));"
            "np.savez(sys.argv[1], b=np.array(_accel.backend_name()), f=kernels.gelu_forward(x),"
            " g=kernels.gelu_grad(x), r=kernels.resize_cubic_float(img, 31, 12))")
    results = {}
    for flag in ("0", "1"):
        path = os.path.join(os.environ.get("TMPDIR", "/tmp"), f"ophthmae_backend_{flag}_{os.getpid()}.npz")
        subprocess.run([sys.executable, "-c", code, path], check=True,
                       env={**os.environ, "OPHTHMAE_DISABLE_NUMBA": flag})
        results[flag] = dict(np.load(path))
        os.remove(path)
    assert str(results["1"]["b"]) == "numpy"
    for key in ("f", "g", "r"):
        np.testing.assert_allclose(results["0"][key], results["1"][key], rtol=1e-12, atol=1e-10)


# --------------------------------------------------------------------------
# cropping, resizing, augmentation
# --------------------------------------------------------------------------

def test_threshold_crop_block_oracle():
    img = np.zeros((3, 10, 10), dtype=np.uint8)
    img[:, 3:7, 2:6] = 200
    img[0, 0, 0] = 10            # below the CFP threshold: treated as background
    out = threshold_crop(img, 15)
    assert out.shape == (3, 4, 4)
    assert np.all(out == 200)
    np.testing.assert_array_equal(threshold_crop(out, 15), out)


def test_threshold_crop_empty_raises():
    with pytest.raises(EmptyImageError, match="empty after threshold"):
        threshold_crop(np.full((3, 5, 5), 14, dtype=np.uint8), 15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 60))
def test_threshold_crop_matches_bounding_box(seed, threshold):
    rng = np.random.default_rng(seed)
    img = (rng.random((3, 12, 9)) < 0.05) * rng.integers(0, 256, (3, 12, 9))
    img = img.astype(np.uint8)
    keep = img.max(axis=0) >= threshold
    if not keep.any():
        with pytest.raises(EmptyImageError):
            threshold_crop(img, threshold)
        return
    rows, cols = np.flatnonzero(keep.any(1)), np.flatnonzero(keep.any(0))
    expect = np.where(keep[None], img, 0)[:, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    out = threshold_crop(img, threshold)
    np.testing.assert_array_equal(out, expect)
    np.testing.assert_array_equal(threshold_crop(out, threshold), out)


def test_resize_constant_and_identity():
    const = np.full((3, 7, 11), 93, dtype=np.uint8)
    np.testing.assert_array_equal(resize_cubic(const, 16), np.full((3, 16, 16), 93, dtype=np.uint8))
    img = np.random.default_rng(0).integers(0, 256, (3, 16, 16)).astype(np.uint8)
    same = resize_cubic(img, 16)
    np.testing.assert_array_equal(same, img)
    assert same is not img


def test_resize_rejects_empty():
    with pytest.raises(ValueError):
        resize_cubic(np.zeros((3, 0, 4), dtype=np.uint8), 8)


def test_preprocess_oct_uses_its_own_threshold():
    img = np.zeros((1, 20, 20), dtype=np.uint8)
    img[0, 5:15, 5:15] = 25          # kept at 15 (CFP), dropped at 30 (OCT)
    img[0, 8:12, 8:12] = 100
    assert preprocess_image(img, "CFP", 32).shape == (3, 32, 32)
    np.testing.assert_array_equal(threshold_crop(np.repeat(img, 3, 0), 30).shape, (3, 4, 4))
    # modalities without a threshold are only resized
    assert preprocess_image(img, "SlitLamp", 20).shape == (3, 20, 20)


def test_augment_deterministic_and_shaped():
    img = np.random.default_rng(0).integers(0, 256, (3, 40, 30)).astype(np.uint8)
    a = augment(img, sample_rng(1, 2, 3), out_size=24)
    b = augment(img, sample_rng(1, 2, 3), out_size=24)
    assert a.shape == (3, 24, 24) and a.dtype == np.float32
    np.testing.assert_array_equal(a, b)
    full = augment(img, sample_rng(0), out_size=24, full_crop=True, flip=False)
    flipped = augment(img, sample_rng(0), out_size=24, full_crop=True, flip=True)
    np.testing.assert_array_equal(full[..., ::-1], flipped)


def test_eval_transform_center_crop_size():
    img = np.random.default_rng(0).integers(0, 256, (1, 50, 70)).astype(np.uint8)
    assert eval_transform(img, 64).shape == (3, 64, 64)


def test_sample_rng_independent_of_call_order():
    first = [sample_rng(7, e, i).random() for e in range(2) for i in range(3)]
    second = [sample_rng(7, e, i).random() for e in reversed(range(2)) for i in reversed(range(3))]
    assert first == list(reversed(second))


# --------------------------------------------------------------------------
# quality filter and splits
# --------------------------------------------------------------------------

@pytest.mark.parametrize("modality,ratio,verdict", [
    ("CFP", 0.04, "keep"), ("CFP", 0.0399999, "exclude"), ("CFP", 0.5, "keep"),
    ("FFA", 0.01, "keep"), ("FFA", 0.0099999, "exclude"), ("ICGA", 0.0, "exclude"),
    ("OCT", 0.0, "keep"), ("SlitLamp", None, "keep"),
])
def test_quality_filter_strict_less_than(modality, ratio, verdict):
    assert quality_filter(ImageRecord("x.png", modality, [], ratio)) == verdict


def test_quality_filter_needs_ratio_for_filtered_modalities():
    with pytest.raises(ValueError):
        quality_filter(ImageRecord("x.png", "CFP", []))


@pytest.mark.parametrize("n,expect", [(100, (55, 15, 30)), (20, (11, 3, 6)), (3, (1, 0, 2)), (7, (3, 1, 3))])
def test_split_counts(n, expect):
    assert split_counts(n) == expect


def _manifest(n, k=2):
    recs = [ImageRecord(f"img{i}.png", "CFP", [i % k], 0.1) for i in range(n)]
    return Manifest("toy", [f"c{j}" for j in range(k)], recs)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 200), st.integers(0, 1000))
def test_split_disjoint_covering(n, seed):
    out = split_dataset(_manifest(n), seed)
    parts = {s: {r.path for r in out.split(s)} for s in ("train", "val", "test")}
    assert tuple(len(parts[s]) for s in ("train", "val", "test")) == split_counts(n)
    assert set.union(*parts.values()) == {r.path for r in out.records}
    assert sum(len(p) for p in parts.values()) == n


def test_split_deterministic_and_validated():
    a, b = split_dataset(_manifest(40), 3), split_dataset(_manifest(40), 3)
    assert [r.split for r in a.records] == [r.split for r in b.records]
    with pytest.raises(ValueError):
        split_dataset(_manifest(2), 0)
    with pytest.raises(ValueError):
        split_dataset(a, 0)


# --------------------------------------------------------------------------
# files and manifests
# --------------------------------------------------------------------------

def test_image_roundtrip_and_grayscale(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (3, 9, 5)).astype(np.uint8)
    save_image(rgb, tmp_path / "a.png")
    np.testing.assert_array_equal(load_image(tmp_path / "a.png"), rgb)
    gray = rgb[:1]
    save_image(gray, tmp_path / "g.ppm")
    loaded = load_image(tmp_path / "g.ppm")
    assert loaded.shape == (3, 9, 5)
    np.testing.assert_array_equal(loaded[2], gray[0])
    (tmp_path / "x.jpg").write_bytes(b"not an image")
    with pytest.raises(ValueError, match="PNG and PPM"):
        load_image(tmp_path / "x.jpg")


def test_manifest_roundtrip_and_validation(tmp_path):
    m = split_dataset(_manifest(10, 3), 0)
    write_manifest(m, tmp_path / "m.jsonl")
    back = read_manifest(tmp_path / "m.jsonl")
    assert back.classes == m.classes and back.name == "toy"
    assert [r.to_json() for r in back.records] == [r.to_json() for r in m.records]
    with pytest.raises(ValueError, match="unique"):
        Manifest("d", ["a"], [ImageRecord("x", "CFP", [0], 0.1), ImageRecord("x", "CFP", [0], 0.1)])
    with pytest.raises(ValueError, match="out of range"):
        Manifest("d", ["a"], [ImageRecord("x", "CFP", [1], 0.1)])
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"classes": ["a"]}) + "\n" + json.dumps({"modality": "CFP"}) + "\n")
    with pytest.raises(ValueError, match="missing key"):
        read_manifest(bad)
    with pytest.raises(ValueError, match="modality"):
        ImageRecord("x", "XRay", [])
