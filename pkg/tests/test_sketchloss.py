import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from sketchforge import sketchloss as sl

from helpers import rel_err


def circle_sketch(size=64, radius=20.0, width=1.5, center=None):
    cy, cx = center or (size / 2, size / 2)
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(yy - cy, xx - cx)
    return sl.SketchImage(np.exp(-0.5 * ((r - radius) / width) ** 2))


def box_sketch(size=64, lo=16, hi=48):
    strokes = np.zeros((size, size))
    strokes[lo:hi, [lo, hi - 1]] = 1.0
    strokes[[lo, hi - 1], lo:hi] = 1.0
    return sl.SketchImage(strokes)


# --- the photo-to-sketch operator ---

def test_constant_image_gives_empty_sketch():
    for value in (0.0, 0.3, 1.0):
        sketch = sl.local_sketch_estimate(np.full((32, 32, 3), value))
        assert np.abs(sketch.strokes).max() < 1e-12


def test_step_edge_response_band():
    x = np.zeros((40, 40, 3))
    x[:, 20:, :] = 1.0
    strokes = sl.local_sketch_estimate(x).strokes
    row = strokes[20]  # interior row, away from top/bottom borders
    band = row[16:25]
    far = np.concatenate([row[:8], row[33:]])
    assert band.max() > 0.5
    assert far.max() < 1e-4
    assert row.argmax() in range(17, 24)


def test_step_edge_matches_bruteforce_kernel_convolution():
    # independent oracle: apply the same discrete DoG by explicit summation
    x = np.zeros((40, 40, 3))
    x[:, 20:, :] = 1.0
    gray = x @ sl.LUMA
    profile = gray[20]

    def blur_1d(sig, sigma):
        k = sl._gaussian_kernel(sigma)
        r = len(k) // 2
        padded = np.concatenate([sig[:r][::-1], sig, sig[-r:][::-1]])  # reflect
        return np.array([np.dot(padded[i:i + 2 * r + 1], k) for i in range(len(sig))])

    dog_1d = blur_1d(profile, sl.DOG_SIGMA1) - blur_1d(profile, sl.DOG_SIGMA2)
    expected = np.tanh(sl.DOG_GAIN * dog_1d**2)
    got = sl.local_sketch_estimate(x).strokes[20]
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_rotation_equivariance_90deg():
    rng = np.random.default_rng(0)
    x = rng.random((32, 32, 3))
    a = sl.local_sketch_estimate(np.rot90(x, axes=(0, 1)).copy()).strokes
    b = np.rot90(sl.local_sketch_estimate(x).strokes, axes=(0, 1))
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_sketch_output_range():
    rng = np.random.default_rng(1)
    strokes = sl.local_sketch_estimate(rng.random((24, 24, 3))).strokes
    assert strokes.min() >= 0.0 and strokes.max() < 1.0


def test_dog_preserves_dc_and_is_self_adjoint():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((20, 20))
    b = rng.standard_normal((20, 20))
    assert abs((sl.dog_filter(a) * b).sum() - (a * sl.dog_filter(b)).sum()) < 1e-10
    assert np.abs(sl.dog_filter(np.full((16, 16), 3.7))).max() < 1e-12


# --- the embedding encoder ---

def test_identical_sketches_embed_identically():
    sk = circle_sketch()
    e1 = sl.local_embed(sk)
    e2 = sl.local_embed(sl.SketchImage(sk.strokes.copy()))
    np.testing.assert_array_equal(e1.values, e2.values)
    assert e1.values @ e2.values == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_embedding_is_unit_norm(seed):
    rng = np.random.default_rng(seed)
    emb = sl.local_embed(sl.SketchImage(rng.random((50, 70))))
    assert emb.normalized
    assert np.linalg.norm(emb.values) == pytest.approx(1.0, abs=1e-9)
    assert emb.values.shape == (sl.EMBED_DIM,)


def test_zero_sketch_embeds_deterministically():
    e1 = sl.local_embed(sl.SketchImage(np.zeros((32, 32))))
    e2 = sl.local_embed(sl.SketchImage(np.zeros((64, 64))))
    assert np.all(np.isfinite(e1.values))
    assert np.linalg.norm(e1.values) == pytest.approx(1.0, abs=1e-9)
    # the epsilon bias dominates regardless of input size
    np.testing.assert_allclose(e1.values, e2.values, atol=1e-9)


def test_normalization_scale_invariance():
    sk = circle_sketch()
    emb, cache = sl.embed_forward(sk.strokes)
    proj, bias = sl._projection()
    resized = sl.bilinear_resize(sk.strokes, sl.EMBED_INPUT_SIZE, sl.EMBED_INPUT_SIZE)
    cell = sl.EMBED_INPUT_SIZE // sl.POOL_CELLS
    pooled = resized.reshape(sl.POOL_CELLS, cell, sl.POOL_CELLS, cell).mean(axis=(1, 3))
    raw = proj @ pooled.reshape(-1) + bias
    for c in (0.5, 3.0, 1000.0):
        scaled = c * raw
        np.testing.assert_allclose(scaled / np.linalg.norm(scaled), emb.values, atol=1e-12)


def test_translation_drops_cosine_but_stays_above_unrelated():
    rng = np.random.default_rng(33)
    for _ in range(5):
        radius = rng.uniform(14, 22)
        base = circle_sketch(64, radius=radius)
        shifted = sl.SketchImage(np.roll(base.strokes, 5, axis=1))  # ~1 pooled cell
        unrelated = box_sketch(64, lo=8, hi=28)
        e = sl.local_embed(base).values
        cos_shift = float(e @ sl.local_embed(shifted).values)
        cos_unrel = float(e @ sl.local_embed(unrelated).values)
        assert cos_shift < 1.0 - 1e-6
        assert cos_shift > cos_unrel


# --- the loss ---

def test_matching_sketch_scores_minus_one():
    rng = np.random.default_rng(3)
    x = rng.random((48, 48, 3))
    rx = sl.bilinear_resize(x, sl.EMBED_INPUT_SIZE, sl.EMBED_INPUT_SIZE)
    estimated = sl.local_sketch_estimate(rx)
    provider = sl.LocalSketchLossProvider()
    loss, grad = provider.evaluate(x, estimated)
    assert loss == pytest.approx(-1.0, abs=1e-9)
    assert grad.shape == x.shape


def test_orthogonal_embeddings_score_zero():
    rng = np.random.default_rng(4)
    e1 = sl.local_embed(circle_sketch()).values
    v = rng.standard_normal(sl.EMBED_DIM)
    e2 = v - (v @ e1) * e1
    e2 /= np.linalg.norm(e2)
    assert -float(e1 @ e2) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_loss_bounded_by_cauchy_schwarz(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((16, 16, 3))
    sk = sl.SketchImage(rng.random((24, 24)))
    loss, _ = sl.LocalSketchLossProvider().evaluate(x, sk)
    assert -1.0 <= loss <= 1.0


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.random((16, 16, 3))
    sk = circle_sketch(32, radius=10)
    provider = sl.LocalSketchLossProvider()
    loss, grad = provider.evaluate(x, sk)
    v = rng.standard_normal(x.shape)
    h = 1e-6
    lp, _ = provider.evaluate(x + h * v, sk)
    lm, _ = provider.evaluate(x - h * v, sk)
    fd = (lp - lm) / (2 * h)
    assert rel_err(fd, float((grad * v).sum())) < 1e-3


def test_loss_ranking_on_synthetic_suite():
    # renders that contain the sketched shape score closer to the sketch
    sk = circle_sketch(64, radius=20)
    yy, xx = np.mgrid[0:64, 0:64]
    disk = (np.hypot(yy - 32, xx - 32) < 20).astype(float)
    photo_match = np.stack([disk * 0.8, disk * 0.5, disk * 0.3], axis=-1)
    photo_other = np.zeros((64, 64, 3))
    photo_other[8:20, 8:56] = 0.9  # a thin horizontal bar
    provider = sl.LocalSketchLossProvider()
    loss_match, _ = provider.evaluate(photo_match, sk)
    loss_other, _ = provider.evaluate(photo_other, sk)
    assert loss_match < loss_other


def test_bilinear_resize_adjoint_identity():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((13, 17, 3))
    y = rng.standard_normal((32, 24, 3))
    lhs = float((sl.bilinear_resize(x, 32, 24) * y).sum())
    rhs = float((x * sl.bilinear_resize_adjoint(y, 13, 17)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_resize_preserves_constants():
    out = sl.bilinear_resize(np.full((9, 11), 0.42), 224, 224)
    np.testing.assert_allclose(out, 0.42, atol=1e-12)


# --- sketch file io ---

def test_load_sketch_dark_strokes_on_light_background(tmp_path):
    img = np.full((20, 20), 255, dtype=np.uint8)
    img[5:15, 10] = 0  # dark stroke
    path = tmp_path / "sk.png"
    Image.fromarray(img, mode="L").save(path)
    sketch, meta = sl.load_sketch_png(path)
    assert meta["stroke_polarity"] == "dark"
    assert sketch.strokes[10, 10] == pytest.approx(1.0)
    assert sketch.strokes[0, 0] == pytest.approx(0.0)


def test_load_sketch_light_strokes_on_dark_background(tmp_path):
    img = np.zeros((20, 20), dtype=np.uint8)
    img[5:15, 10] = 255
    path = tmp_path / "sk.png"
    Image.fromarray(img, mode="L").save(path)
    sketch, meta = sl.load_sketch_png(path)
    assert meta["stroke_polarity"] == "light"
    assert sketch.strokes[10, 10] == pytest.approx(1.0)


def test_sketch_png_roundtrip(tmp_path):
    sk = circle_sketch(32, radius=10)
    path = tmp_path / "c.png"
    sl.save_sketch_png(sk, path)
    loaded, meta = sl.load_sketch_png(path)
    assert meta["stroke_polarity"] == "dark"
    assert np.abs(loaded.strokes - sk.strokes).max() < 1.0 / 255.0 + 1e-9


def test_sketch_image_validation():
    with pytest.raises(ValueError):
        sl.SketchImage(np.full((4, 4), 1.5))
    with pytest.raises(ValueError):
        sl.SketchImage(np.zeros((4, 4, 2)))
