import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import check_grad
from naturalae import autodiff as ad
from naturalae.autodiff import Tensor
from naturalae.imaging import (
    OUTSIDE,
    RED_BACKGROUND,
    SIGN_WHITE,
    WHITE_LETTER,
    WHITE_STRIPE,
    PPMError,
    compose,
    init_mask,
    init_perturbation,
    load_pgm,
    load_ppm,
    octagon_support,
    render_stop_sign,
    save_pgm,
    save_ppm,
)

LABELS = (OUTSIDE, RED_BACKGROUND, WHITE_LETTER, WHITE_STRIPE)


@pytest.mark.parametrize("size", [32, 64, 97, 128])
def test_regions_partition_canvas(size):
    _, reg = render_stop_sign(size)
    assert sum(reg.count(lab) for lab in LABELS) == size * size
    assert set(np.unique(reg.labels)) <= set(LABELS)


def test_red_outnumbers_letters():
    _, reg = render_stop_sign(64)
    assert reg.count(RED_BACKGROUND) > reg.count(WHITE_LETTER) > 0
    assert reg.count(WHITE_STRIPE) > 0


def test_letter_fraction_scale_invariant():
    fracs = []
    for size in (64, 128):
        _, reg = render_stop_sign(size)
        fracs.append(reg.count(WHITE_LETTER) / (size * size - reg.count(OUTSIDE)))
    assert abs(fracs[0] - fracs[1]) <= 0.05


def test_white_pixels_are_exactly_letters_and_stripes():
    img, reg = render_stop_sign(64)
    white = np.all(img == SIGN_WHITE, axis=-1)
    np.testing.assert_array_equal(white, (reg.labels == WHITE_LETTER) | (reg.labels == WHITE_STRIPE))


def test_too_small_canvas_rejected():
    with pytest.raises(ValueError, match="minimum"):
        render_stop_sign(31)


def test_init_mask_matches_regions():
    _, reg = render_stop_sign(64)
    m = init_mask(reg)
    assert m.shape == (64, 64, 1)
    assert set(np.unique(m)) == {0.0, 1.0}
    np.testing.assert_array_equal(m[..., 0] == 1.0, reg.labels == RED_BACKGROUND)
    assert m[reg.labels == WHITE_LETTER].max() == 0.0
    assert m[reg.labels == OUTSIDE].max() == 0.0


def test_init_perturbation_white():
    d = init_perturbation(64)
    assert d.shape == (64, 64, 3)
    assert np.all(d == 1.0)


def test_compose_alpha_rule(rng):
    sign, _ = render_stop_sign(64)
    bg = rng.random((64, 64, 3))
    out = compose(sign, bg, (0, 0)).data
    sup = octagon_support(64)[..., 0] > 0
    np.testing.assert_array_equal(out[sup], sign[sup])
    np.testing.assert_array_equal(out[~sup], bg[~sup])
    assert out[0, 0].tolist() == bg[0, 0].tolist()


def test_compose_rejects_out_of_bounds():
    sign, _ = render_stop_sign(32)
    with pytest.raises(ValueError, match="does not fit"):
        compose(sign, np.zeros((40, 40, 3)), (10, 0))


def test_compose_gradient(rng):
    sign = rng.random((32, 32, 3))
    bg = rng.random((48, 48, 3))
    w = rng.normal(size=(48, 48, 3))
    err = check_grad(lambda s: ad.sum_all(ad.mul(compose(s, bg, (5, 7), scale=0.8), Tensor(w))), [sign])
    assert err <= 1e-3


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (5, 6, 3), elements=st.floats(0, 1)), st.integers(0, 10), st.integers(0, 10))
def test_compose_keeps_unit_range(sign, top, left):
    bg = np.full((20, 20, 3), 0.3)
    out = compose(sign, bg, (top, left), alpha=np.ones((5, 6, 1))).data
    assert out.min() >= 0.0 and out.max() <= 1.0


# ------------------------------------------------------------------ I/O


def test_ppm_round_trip(tmp_path, rng):
    img = rng.random((7, 11, 3))
    p = tmp_path / "a.ppm"
    save_ppm(img, p)
    back = load_ppm(p)
    np.testing.assert_array_equal(back, np.rint(img * 255) / 255)
    save_ppm(back, tmp_path / "b.ppm")
    assert (tmp_path / "b.ppm").read_bytes() == p.read_bytes()


def test_white_pixel_body(tmp_path):
    p = tmp_path / "w.ppm"
    save_ppm(np.ones((1, 1, 3)), p)
    assert p.read_bytes() == b"P6\n1 1\n255\n\xff\xff\xff"


def test_pgm_round_trip(tmp_path, rng):
    g = rng.integers(0, 256, (5, 4)).astype(np.uint8)
    save_pgm(g, tmp_path / "g.pgm")
    np.testing.assert_array_equal(load_pgm(tmp_path / "g.pgm"), g)


@pytest.mark.parametrize(
    "payload,match",
    [
        (b"P5\n1 1\n255\n\x00", "unsupported format"),
        (b"P6\n2 2\n255\n\x00\x00", "truncated payload"),
        (b"P6\n2 2\n65535\n" + b"\x00" * 24, "maxval"),
        (b"P6\n2 x\n255\n", "malformed header at byte 5"),
        (b"P6\n2", "truncated header"),
    ],
)
def test_ppm_errors_with_positions(tmp_path, payload, match):
    p = tmp_path / "bad.ppm"
    p.write_bytes(payload)
    with pytest.raises(PPMError, match=match):
        load_ppm(p)


def test_ppm_header_comments(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff")
    np.testing.assert_array_equal(load_ppm(p)[0, 0], [0.0, 128 / 255, 1.0])
