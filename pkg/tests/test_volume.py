import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from platevol.errors import DimensionMismatch
from platevol.model import BinaryMask, HeightMap
from platevol.plate import PixelScale
from platevol.volume import food_volume, intake

UNIT = PixelScale(1.0)


def test_direct_product():
    m = np.zeros((20, 20), bool)
    m[:10, :10] = True
    v = food_volume(BinaryMask(m), HeightMap(np.full((20, 20), 10.0)), UNIT)
    assert v.volume_ml == pytest.approx(1.0)
    assert v.n_food_pixels == 100


def test_empty_mask():
    v = food_volume(BinaryMask(np.zeros((5, 5), bool)), HeightMap(np.ones((5, 5))), UNIT)
    assert v.volume_ml == 0.0 and v.n_food_pixels == 0


def test_spherical_cap_riemann_sum():
    a, h = 50.0, 20.0
    big_r = (a * a + h * h) / (2 * h)
    yy, xx = np.indices((121, 121)) - 60.0
    rho2 = xx**2 + yy**2
    z = np.where(rho2 <= a * a, np.sqrt(np.clip(big_r**2 - rho2, 0, None)) - (big_r - h), 0.0)
    v = food_volume(BinaryMask(z > 0), HeightMap(z), UNIT)
    analytic = math.pi * h * h * (3 * big_r - h) / 3 / 1000.0
    assert v.volume_ml == pytest.approx(analytic, rel=0.02)


def test_negative_heights_clamped_and_counted():
    hm = HeightMap(np.array([[5.0, -3.0], [2.0, 0.0]]))
    v = food_volume(BinaryMask(np.ones((2, 2), bool)), hm, UNIT)
    assert v.volume_ml == pytest.approx(0.007) and v.n_clamped_pixels == 1


def test_invalid_pixels_contribute_nothing():
    hm = HeightMap(np.full((2, 2), 5.0), valid=np.array([[True, False], [True, True]]))
    v = food_volume(BinaryMask(np.ones((2, 2), bool)), hm, UNIT)
    assert v.volume_ml == pytest.approx(0.015) and v.n_invalid_pixels == 1


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        food_volume(BinaryMask(np.ones((2, 2), bool)), HeightMap(np.ones((2, 3))), UNIT)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 3.0))
def test_volume_properties(seed, dx):
    r = np.random.default_rng(seed)
    hm = HeightMap(r.normal(3, 4, (9, 11)))
    a = r.random((9, 11)) < 0.4
    b = (r.random((9, 11)) < 0.4) & ~a
    s = PixelScale(dx)
    va, vb = food_volume(BinaryMask(a), hm, s).volume_ml, food_volume(BinaryMask(b), hm, s).volume_ml
    vab = food_volume(BinaryMask(a | b), hm, s).volume_ml
    assert vab == pytest.approx(va + vb, rel=1e-12, abs=1e-15)
    assert vab >= va - 1e-15
    v2 = food_volume(BinaryMask(a), hm, PixelScale(2 * dx)).volume_ml
    assert v2 == pytest.approx(4 * va, rel=1e-12, abs=1e-15)


def test_intake_examples():
    r = intake(100.0, 40.0)
    assert (r.intake_ml, r.intake_percent) == (60.0, 60.0)
    same = intake(73.2, 73.2)
    assert (same.intake_ml, same.intake_percent) == (0.0, 0.0)
    neg = intake(100.0, 110.0)
    assert (neg.intake_ml, neg.intake_percent) == (-10.0, -10.0)
    assert "negative_intake" in neg.flags


def test_intake_zero_reference():
    r = intake(0.0, 0.0)
    assert r.intake_percent == 0.0 and "zero_reference" in r.flags
    with pytest.raises(ValueError):
        intake(-1.0, 0.0)


@given(st.floats(0, 1e4))
def test_intake_self_is_zero(x):
    r = intake(x, x)
    assert r.intake_ml == 0.0 and r.intake_percent == 0.0
