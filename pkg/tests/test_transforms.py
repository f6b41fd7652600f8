import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_grad
from naturalae import autodiff as ad
from naturalae.autodiff import Tensor
from naturalae.imaging import octagon_support, render_stop_sign, resize_array
from naturalae.transforms import (
    TransformConfig,
    TransformParams,
    apply_angle,
    apply_distance,
    apply_illumination,
    apply_photographing,
    apply_pipeline,
    blur_kernel_for,
    gaussian_kernel,
    sample_transform,
    tilt_homography,
)


def _psnr(a, b):
    mse = np.mean((a - b) ** 2)
    return 10 * np.log10(1.0 / mse) if mse > 0 else np.inf


# ------------------------------------------------------------ sampling


def test_degenerate_ranges_give_fixed_params():
    cfg = TransformConfig(scale=(0.5, 0.5), angle=(10, 10), brightness=(0.1, 0.1), contrast=(1.2, 1.2),
                          noise_sigma=(0.02, 0.02))
    a = sample_transform(cfg, np.random.default_rng(1), 5, 64, (64, 64))
    b = sample_transform(cfg, np.random.default_rng(2), 5, 64, (64, 64))
    for name in ("scale", "angle", "brightness", "contrast", "noise_sigma", "blur_kernel", "homography"):
        assert getattr(a, name) == getattr(b, name)
    assert (a.scale, a.brightness, a.contrast, a.noise_sigma) == (0.5, 0.1, 1.2, 0.02)


def test_sampling_is_deterministic():
    cfg = TransformConfig()
    s1 = [sample_transform(cfg, r, 8, 64, (64, 64)) for r in [np.random.default_rng(3)] * 20]
    s2 = [sample_transform(cfg, r, 8, 64, (64, 64)) for r in [np.random.default_rng(3)] * 20]
    assert s1 == s2


def test_scale_mean_law_of_large_numbers():
    rng = np.random.default_rng(0)
    cfg = TransformConfig()
    scales = [sample_transform(cfg, rng, 4, 64, (64, 64)).scale for _ in range(10_000)]
    assert abs(np.mean(scales) - 0.65) <= 0.02


def test_empty_scene_corpus_rejected():
    with pytest.raises(ValueError, match="empty"):
        sample_transform(TransformConfig(), np.random.default_rng(0), 0, 64, (64, 64))


@pytest.mark.parametrize("field,value", [("scale", (0.5, 0.2)), ("scale", (0.0, 0.5)), ("contrast", (-1.0, 1.0)),
                                         ("noise_sigma", (-0.1, 0.0))])
def test_bad_ranges_rejected(field, value):
    with pytest.raises(ValueError):
        TransformConfig(**{field: value})


def test_params_invariants():
    with pytest.raises(ValueError):
        TransformParams(blur_kernel=4)
    with pytest.raises(ValueError):
        TransformParams(contrast=0.0)
    with pytest.raises(ValueError):
        TransformParams(homography=((1, 0, 0), (0, 0, 0), (0, 0, 1)))


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_blur_kernel_monotone_in_scale(s1, s2):
    lo, hi = sorted((s1, s2))
    assert blur_kernel_for(lo) >= blur_kernel_for(hi)
    k = blur_kernel_for(lo)
    assert k % 2 == 1 and 1 <= k <= 9


# ------------------------------------------------------------ distance


def test_distance_identity_and_constant(rng):
    x = rng.random((16, 16, 3))
    np.testing.assert_array_equal(apply_distance(Tensor(x), 1.0, 1).data, x)
    c = np.full((16, 16, 3), 0.37)
    for k in (3, 5, 7, 9):
        np.testing.assert_allclose(apply_distance(Tensor(c), 1.0, k).data, 0.37, atol=1e-15)


@pytest.mark.parametrize("k", [3, 5, 7, 9])
def test_gaussian_kernel_normalized(k):
    assert abs(gaussian_kernel(k).sum() - 1.0) <= 1e-12


# --------------------------------------------------------------- angle


def test_angle_identity(rng):
    x = rng.random((10, 10, 3))
    np.testing.assert_array_equal(apply_angle(Tensor(x), np.eye(3)).data, x)


def test_angle_translation():
    x = np.random.default_rng(0).random((6, 8, 1))
    out = apply_angle(Tensor(x), [[1, 0, 2], [0, 1, 0], [0, 0, 1]]).data
    np.testing.assert_allclose(out[:, 2:], x[:, :-2], atol=1e-15)
    np.testing.assert_array_equal(out[:, :2], 0.0)


@pytest.mark.parametrize("angle", [15.0, 30.0, 45.0])
def test_angle_round_trip_psnr(angle):
    # photo-like content: smooth field, so only interpolation loss remains
    x = resize_array(np.random.default_rng(0).random((8, 8, 3)), 8.0)
    h = tilt_homography(angle, 64)
    back = apply_angle(apply_angle(Tensor(x), h), np.linalg.inv(h)).data
    assert _psnr(back[16:48, 16:48], x[16:48, 16:48]) >= 30.0


def test_singular_homography_rejected():
    with pytest.raises(ValueError, match="singular"):
        apply_angle(Tensor(np.zeros((4, 4, 1))), [[1, 0, 0], [0, 1e-10, 0], [0, 0, 1]])


# --------------------------------------------------------- illumination


def test_illumination_cases():
    x = Tensor(np.full((4, 4, 3), 0.5))
    assert apply_illumination(x, 0.0, 1.0) is x
    np.testing.assert_allclose(apply_illumination(x, 0.2, 1.0).data, 0.7)
    y = Tensor(np.random.default_rng(0).random((4, 4, 3)))
    np.testing.assert_allclose(apply_illumination(y, 0.0, 1e-4).data, 0.5, atol=1e-4)


# --------------------------------------------------------- photographing


def test_photographing_moments_and_determinism():
    x = Tensor(np.full((64, 64, 3), 0.5))
    assert apply_photographing(x, 0.0, 1) is x
    a = apply_photographing(x, 0.1, 42).data
    b = apply_photographing(x, 0.1, 42).data
    assert a.tobytes() == b.tobytes()
    assert 0.09 <= a.std() <= 0.11


# ------------------------------------------------------------- pipeline


def test_neutral_pipeline_on_black_scene():
    sign, _ = render_stop_sign(64)
    out = apply_pipeline(sign, TransformParams(), np.zeros((64, 64, 3))).data
    sup = octagon_support(64)[..., 0] > 0
    np.testing.assert_array_equal(out[sup], sign[sup])


def test_pipeline_gradient(rng):
    sign = rng.random((16, 16, 3))
    scene = rng.random((24, 24, 3))
    p = TransformParams(scale=0.8, blur_kernel=5, homography=tuple(map(tuple, tilt_homography(35.0, 13))),
                        brightness=0.05, contrast=1.1, position=(4, 6))
    w = rng.normal(size=(24, 24, 3))
    err = check_grad(lambda s: ad.sum_all(ad.mul(apply_pipeline(s, p, scene), Tensor(w))), [sign])
    assert err <= 1e-3


def test_order_illumination_then_noise_is_observable(rng):
    x = Tensor(rng.random((16, 16, 3)))
    doc = apply_photographing(apply_illumination(x, 0.1, 1.3), 0.05, 7).data
    swapped = apply_illumination(apply_photographing(x, 0.05, 7), 0.1, 1.3).data
    assert not np.allclose(doc, swapped)
    p = TransformParams(brightness=0.1, contrast=1.3, noise_sigma=0.05, noise_seed=7)
    out = apply_pipeline(x, p, np.zeros((16, 16, 3)), alpha=np.ones((16, 16, 1))).data
    np.testing.assert_array_equal(out, doc)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pipeline_maps_unit_range(seed):
    rng = np.random.default_rng(seed)
    sign, _ = render_stop_sign(32)
    p = sample_transform(TransformConfig(), rng, 1, 32, (48, 48))
    out = apply_pipeline(sign, p, rng.random((48, 48, 3))).data
    assert out.min() >= 0.0 and out.max() <= 1.0
