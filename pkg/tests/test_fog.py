"""Scattering-model rendering and inversion."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fogflow.fog import BETA_DENSE, BETA_LIGHT, FogParams, add_fog, defog, transmittance


@pytest.fixture
def clean_and_depth():
    rng = np.random.default_rng(3)
    return rng.random((12, 10, 3)), rng.uniform(5.0, 50.0, (12, 10))


def test_no_fog_is_identity(clean_and_depth):
    img, depth = clean_and_depth
    np.testing.assert_array_equal(add_fog(img, depth, FogParams(0.0)), img)


def test_scalar_inversion_oracle():
    # foggy 0.5, A 0.8, t 0.5 -> (0.5 - 0.4) / 0.5
    depth = np.full((1, 1), np.log(2.0) / 0.1)
    out = defog(np.full((1, 1, 1), 0.5), depth, FogParams(0.1, (0.8,)))
    assert out.item() == pytest.approx(0.2, abs=1e-12)


def test_far_field_tends_to_airlight():
    out = add_fog(np.zeros((2, 2, 3)), np.full((2, 2), 1e4), FogParams(0.12, (0.7, 0.8, 0.9)))
    np.testing.assert_allclose(out, np.broadcast_to([0.7, 0.8, 0.9], (2, 2, 3)))


@pytest.mark.parametrize("beta", [BETA_LIGHT, BETA_DENSE, 0.135])
def test_roundtrip(clean_and_depth, beta):
    img, depth = clean_and_depth
    p = FogParams(beta, (0.85, 0.8, 0.75))
    assert np.abs(defog(add_fog(img, depth, p), depth, p) - img).max() <= 1e-6


def test_contrast_decays_by_transmittance():
    rng = np.random.default_rng(9)
    img = rng.random((8, 8, 3))
    for d in (5.0, 20.0, 45.0):
        depth = np.full((8, 8), d)
        t = float(transmittance(depth, BETA_DENSE)[0, 0, 0])
        out = add_fog(img, depth, FogParams(BETA_DENSE))
        np.testing.assert_allclose(out.std(axis=(0, 1)), t * img.std(axis=(0, 1)), rtol=1e-12)


def test_light_vs_dense_far_field():
    assert transmittance(np.array([[50.0]]), BETA_LIGHT).item() > 0.2
    assert transmittance(np.array([[50.0]]), BETA_DENSE).item() < 0.05


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 3, 3), elements=st.floats(0, 1)),
       st.floats(0.0, 0.2), st.floats(1.0, 60.0))
def test_fog_is_convex_blend(img, beta, d):
    p = FogParams(beta)
    out = add_fog(img, np.full((3, 3), d), p)
    lo = np.minimum(img, p.A[0]) - 1e-12
    hi = np.maximum(img, p.A[0]) + 1e-12
    assert np.all((lo <= out) & (out <= hi))


@pytest.mark.parametrize("kw", [dict(beta=-0.1), dict(beta=float("nan")),
                                dict(beta=0.1, A=(0.0, 0.5, 0.5)), dict(beta=0.1, A=(1.2,))])
def test_param_validation(kw):
    with pytest.raises(ValueError):
        FogParams(**kw)


def test_depth_validation():
    with pytest.raises(ValueError):
        add_fog(np.zeros((2, 2, 3)), np.array([[1.0, 0.0], [1.0, 1.0]]), FogParams())
    with pytest.raises(ValueError):
        add_fog(np.zeros((2, 3, 3)), np.ones((2, 2)), FogParams())


def test_airlight_channel_mismatch():
    with pytest.raises(ValueError):
        add_fog(np.zeros((2, 2, 3)), np.ones((2, 2)), FogParams(0.1, (0.5, 0.6)))


def test_params_dict_roundtrip():
    p = FogParams(0.07, (0.9, 0.8, 0.7))
    assert FogParams.from_dict(p.to_dict()) == p
    assert FogParams.from_dict({"beta": 0.1, "A": 0.6}).A == (0.6, 0.6, 0.6)


def test_min_transmittance_clamps_inverse():
    depth = np.full((1, 1), 1e4)
    p = FogParams(0.12, (0.8,))
    assert np.isfinite(defog(np.full((1, 1, 1), 0.9), depth, p)).all()
