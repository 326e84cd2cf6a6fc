import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrpipe.augment import (DEFAULT_POLICY, PRESET_NAMES, AffineParams, AugmentationPolicy, affine_batch,
                             affine_matrix, apply_affine, augment_training_batch, mixup_batch, preset,
                             ricap_assemble, ricap_batch, ricap_layout, sample_affine)

IDENTITY = AffineParams(0, 0, 0, False, 1, 0)


def rand_batch(rng, b=6, c=1, h=9, w=11):
    imgs = rng.random((b, c, h, w)).astype(np.float32)
    labels = np.eye(3)[rng.integers(0, 3, b)]
    return imgs, labels


# --- affine ---------------------------------------------------------------------

def test_sample_affine_statistics():
    rng = np.random.default_rng(0)
    draws = [sample_affine(rng) for _ in range(10_000)]
    rot = np.array([d.rotation_deg for d in draws])
    assert abs(rot.mean()) < 0.5 and rot.min() >= -15 and rot.max() <= 15
    flips = np.mean([d.flip_horizontal for d in draws])
    assert 0.47 <= flips <= 0.53
    for name, lo, hi in (("shift_x_frac", -0.15, 0.15), ("shift_y_frac", -0.15, 0.15),
                         ("scale", 0.85, 1.15), ("shear_deg", -15, 15)):
        vals = np.array([getattr(d, name) for d in draws])
        assert vals.min() >= lo and vals.max() <= hi
        # uniform: the mean sits at the centre within 4 standard errors
        assert abs(vals.mean() - (lo + hi) / 2) < 4 * (hi - lo) / math.sqrt(12 * len(vals))


def test_sample_affine_replay():
    a = [sample_affine(np.random.default_rng(5)) for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_affine_params_reject_out_of_range():
    with pytest.raises(ValueError, match="rotation_deg"):
        AffineParams(rotation_deg=16)
    with pytest.raises(ValueError, match="scale"):
        AffineParams(scale=1.2)


def test_identity_and_flip(rng):
    img = rng.random((2, 7, 5)).astype(np.float32)
    assert np.array_equal(apply_affine(img, IDENTITY), img)
    flip = AffineParams(flip_horizontal=True)
    assert np.array_equal(apply_affine(img, flip), img[:, :, ::-1])
    assert np.array_equal(apply_affine(apply_affine(img, flip), flip), img)


@given(st.builds(AffineParams, st.floats(-15, 15), st.floats(-0.15, 0.15), st.floats(-0.15, 0.15),
                 st.booleans(), st.floats(0.85, 1.15), st.floats(-15, 15)),
       st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_constant_image_stays_constant(params, value):
    img = np.full((1, 12, 10), value, np.float32)
    assert np.array_equal(apply_affine(img, params), img)


@given(st.builds(AffineParams, st.floats(-15, 15), st.floats(-0.15, 0.15), st.floats(-0.15, 0.15),
                 st.booleans(), st.floats(0.85, 1.15), st.floats(-15, 15)))
@settings(max_examples=100, deadline=None)
def test_affine_preserves_range(params):
    img = np.random.default_rng(0).random((1, 16, 16)).astype(np.float32)
    img[0, 0, 0], img[0, 1, 1] = 0.0, 1.0
    out = apply_affine(img, params)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def scipy_reference(img, p):
    """Independent warp through scipy.ndimage in (row, col) coordinates."""
    ndimage = pytest.importorskip("scipy.ndimage")
    _, h, w = img.shape
    mat, shift = affine_matrix(p, h, w)
    inv = np.linalg.inv(mat)
    swap = np.array([[0, 1], [1, 0]])
    m_rc = swap @ inv @ swap
    c_rc = np.array([(h - 1) / 2, (w - 1) / 2])
    t_rc = shift[::-1]
    offset = c_rc - m_rc @ (c_rc + t_rc)
    out = np.stack([ndimage.affine_transform(ch.astype(np.float64), m_rc, offset, order=1, mode="nearest")
                    for ch in img])
    return out[:, :, ::-1] if p.flip_horizontal else out


def test_affine_matches_scipy(rng):
    img = rng.random((1, 20, 24)).astype(np.float32)
    for _ in range(25):
        p = sample_affine(rng)
        assert np.allclose(apply_affine(img, p), scipy_reference(img, p), atol=1e-5)


def test_affine_pure_shift_moves_content():
    img = np.zeros((1, 10, 10), np.float32)
    img[0, 4, 4] = 1.0
    out = apply_affine(img, AffineParams(shift_x_frac=0.1, shift_y_frac=-0.1))
    assert out[0, 3, 5] == 1.0 and out.sum() == 1.0


def test_affine_batch_worker_independent(rng):
    imgs, _ = rand_batch(rng, b=8)
    a = affine_batch(imgs, np.random.default_rng(9), workers=1)
    b = affine_batch(imgs, np.random.default_rng(9), workers=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a[0], a[1]) or not np.array_equal(imgs[0], imgs[1])


# --- mixup ----------------------------------------------------------------------

def test_mixup_lambda_one_identity(rng):
    imgs, labels = rand_batch(rng)
    out, lab = mixup_batch(imgs, labels, 0.1, rng, lam=1.0)
    assert np.array_equal(out, imgs) and np.array_equal(lab, labels)


def test_mixup_self_pair_half(rng):
    imgs, labels = rand_batch(rng)
    out, lab = mixup_batch(imgs, labels, 0.1, rng, lam=0.5, partner=np.arange(len(imgs)))
    assert np.array_equal(out, imgs) and np.array_equal(lab, labels)


def test_mixup_label_linearity():
    imgs = np.zeros((2, 1, 2, 2), np.float32)
    labels = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    _, lab = mixup_batch(imgs, labels, 0.1, np.random.default_rng(0), lam=0.3, partner=np.array([1, 0]))
    assert np.allclose(lab[0], [0.3, 0.7, 0.0], atol=1e-12)


def test_mixup_replay_matches_formula(rng):
    imgs, labels = rand_batch(rng)
    out, lab = mixup_batch(imgs, labels, 0.1, np.random.default_rng(3))
    replay = np.random.default_rng(3)
    lam = replay.beta(0.1, 0.1)
    perm = replay.permutation(len(imgs))
    assert np.allclose(out, lam * imgs + (1 - lam) * imgs[perm], atol=1e-6)
    assert np.allclose(lab, lam * labels + (1 - lam) * labels[perm], atol=1e-12)


def test_mixup_bounds_and_simplex(rng):
    for _ in range(200):
        imgs, labels = rand_batch(rng)
        labels = rng.dirichlet([1, 1, 1], len(imgs))
        out, lab = mixup_batch(imgs, labels, 0.4, rng)
        # recover the pairing by replay-free bounds: each output lies between some pair
        lo = np.minimum(imgs[:, None], imgs[None]).min(axis=1)
        hi = np.maximum(imgs[:, None], imgs[None]).max(axis=1)
        assert np.all(out >= lo - 1e-6) and np.all(out <= hi + 1e-6)
        assert np.all(lab >= 0) and np.allclose(lab.sum(axis=1), 1, atol=1e-9)


def test_mixup_per_example_option(rng):
    imgs, labels = rand_batch(rng)
    out, _ = mixup_batch(imgs, labels, 0.4, np.random.default_rng(1), per_example=True)
    replay = np.random.default_rng(1)
    lam = replay.beta(0.4, 0.4, size=len(imgs))
    perm = replay.permutation(len(imgs))
    assert np.allclose(out, lam[:, None, None, None] * imgs + (1 - lam[:, None, None, None]) * imgs[perm], atol=1e-6)


def test_mixup_shape_mismatch(rng):
    imgs, labels = rand_batch(rng)
    with pytest.raises(ValueError):
        mixup_batch(imgs, labels[:-1], 0.1, rng)


def test_beta_sampler_against_scipy():
    stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(11)
    n = 20_000
    for alpha in (0.1, 0.3, 1.0):
        x = rng.beta(alpha, alpha, n)
        sigma = math.sqrt(1 / (4 * (2 * alpha + 1)))
        assert abs(x.mean() - 0.5) < 3 * sigma / math.sqrt(n)
        assert stats.kstest(x, stats.beta(alpha, alpha).cdf).pvalue > 1e-3
    x = rng.beta(0.1, 0.1, n)
    assert np.mean((x <= 0.05) | (x >= 0.95)) > 0.5


# --- RICAP ----------------------------------------------------------------------

def test_ricap_full_boundary_reproduces_donor(rng):
    imgs, labels = rand_batch(rng, b=5)
    out, lab = ricap_batch(imgs, labels, 0.3, np.random.default_rng(2), uv=(1.0, 1.0))
    replay = np.random.default_rng(2)
    for i in range(5):
        layout = ricap_layout(replay, 5, 9, 11, 0.3, uv=(1.0, 1.0))
        d = layout.donors[0]
        assert np.array_equal(out[i], imgs[d]) and np.array_equal(lab[i], labels[d])


def test_ricap_constant_donors_pixel_accounting():
    values = np.array([0, 1 / 3, 2 / 3, 1], np.float64)
    h, w = 10, 14
    imgs = np.broadcast_to(values[:, None, None, None], (4, 1, h, w)).copy()
    labels = np.eye(4, 3)
    labels[3] = [1 / 3, 1 / 3, 1 / 3]
    rng = np.random.default_rng(4)
    for _ in range(300):
        layout = ricap_layout(rng, 4, h, w, 0.3)
        img, lab = ricap_assemble(imgs, labels, layout)
        # brute force: walk every output pixel and find the quadrant it belongs to
        total = 0.0
        for y in range(h):
            for x in range(w):
                q = (0 if y < layout.h else 2) + (0 if x < layout.w else 1)
                total += values[layout.donors[q]]
        assert math.isclose(img.mean(), total / (h * w), abs_tol=1e-12)
        assert math.isclose(lab.sum(), 1.0, abs_tol=1e-9)


def test_ricap_crops_come_from_donor_positions(rng):
    imgs, labels = rand_batch(rng, b=4, h=8, w=8)
    layout = ricap_layout(np.random.default_rng(0), 4, 8, 8, 0.3)
    out, _ = ricap_assemble(imgs, labels, layout)
    for (y, x, qh, qw), d, (y0, x0) in zip(layout.quadrants(8, 8), layout.donors, layout.offsets):
        assert np.array_equal(out[:, y:y + qh, x:x + qw], imgs[d, :, y0:y0 + qh, x0:x0 + qw])


def test_ricap_conservation_many_draws(rng):
    imgs, labels = rand_batch(rng, b=4, h=7, w=5)
    labels = rng.dirichlet([1, 1, 1], 4)
    for _ in range(500):
        out, lab = ricap_batch(imgs, labels, 0.3, rng)
        assert out.shape == imgs.shape
        assert np.allclose(lab.sum(axis=1), 1, atol=1e-9) and np.all(lab >= 0)


def test_ricap_errors(rng):
    imgs, labels = rand_batch(rng, b=3)
    with pytest.raises(ValueError, match="at least 4"):
        ricap_batch(imgs, labels, 0.3, rng)
    imgs, labels = rand_batch(rng, b=4, h=1, w=5)
    with pytest.raises(ValueError, match="2x2"):
        ricap_batch(imgs, labels, 0.3, rng)


def test_ricap_boundary_rounding_half_up():
    layout = ricap_layout(np.random.default_rng(0), 4, 4, 4, 0.3, uv=(0.625, 0.125))
    assert (layout.w, layout.h) == (3, 1)  # 2.5 -> 3, 0.5 -> 1


# --- combination policy -----------------------------------------------------------

def test_all_disabled_is_identity(rng):
    imgs, labels = rand_batch(rng)
    out, lab = augment_training_batch(imgs, labels, AugmentationPolicy(), rng)
    assert np.array_equal(out, imgs) and np.array_equal(lab, labels)


def test_conv_mixup_lambda_one_equals_affine_only(rng):
    imgs, labels = rand_batch(rng)
    conv = AugmentationPolicy(conventional_enabled=True)
    a, la = augment_training_batch(imgs, labels, conv, np.random.default_rng(8))
    b, lb = augment_training_batch(imgs, labels, DEFAULT_POLICY, np.random.default_rng(8), mixup_lam=1.0)
    assert np.array_equal(a, b) and np.array_equal(la, lb)


def test_default_policy():
    assert DEFAULT_POLICY.conventional_enabled and DEFAULT_POLICY.mixup_enabled and not DEFAULT_POLICY.ricap_enabled
    assert DEFAULT_POLICY.mixup_alpha == 0.1
    assert DEFAULT_POLICY.name == "conv+mixup"


def test_presets_and_config_round_trip():
    for name in PRESET_NAMES:
        p = preset(name)
        assert p.name == name
        assert AugmentationPolicy.from_config(p.to_config()) == p
    with pytest.raises(ValueError):
        preset("cutout")


def test_ricap_skipped_on_small_batch(rng):
    imgs, labels = rand_batch(rng, b=3)
    out, lab = augment_training_batch(imgs, labels, preset("ricap"), rng)
    assert np.array_equal(out, imgs)


def test_augment_deterministic_across_workers(rng):
    imgs, labels = rand_batch(rng, b=8)
    policy = preset("conv+mixup+ricap")
    a = augment_training_batch(imgs, labels, policy, np.random.default_rng(77), workers=1)
    b = augment_training_batch(imgs, labels, policy, np.random.default_rng(77), workers=4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
