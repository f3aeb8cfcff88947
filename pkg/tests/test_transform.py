import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atlasforge.errors import GeometryError
from atlasforge.grid import ImageGrid, LabelMap
from atlasforge.transform import (
    Affine2D,
    BSplineFFD,
    DisplacementField,
    Rigid2D,
    apply_point,
    bending_energy,
    bending_gradient,
    bspline_weights,
    compose_fields,
    ffd_displacement,
    load_transform,
    refine_ffd,
    resample_intensity,
    resample_labels,
    save_transform,
    shift_field,
    to_field,
)

REF = ImageGrid(np.zeros((20, 24)), (1.0, 1.0))


def test_apply_point_examples():
    assert apply_point(Rigid2D(0, 0, 0), (3, 4)) == (3, 4)
    x, y = apply_point(Rigid2D(math.pi / 2, 0, 0), (1, 0))
    assert abs(x) < 1e-9 and abs(y - 1) < 1e-9
    assert apply_point(Affine2D([[2, 0], [0, 2]], [1, 0]), (1, 1)) == (3, 2)


def test_rigid_about_center_fixes_center():
    r = Rigid2D(0.3, 0, 0, center=(5.0, 7.0))
    assert np.allclose(apply_point(r, (5, 7)), (5, 7))


def test_angle_wrapped():
    assert Rigid2D(3 * math.pi).theta == pytest.approx(math.pi)


def test_bspline_partition_of_unity():
    t = np.linspace(0, 1, 11)
    w = bspline_weights(t)
    assert np.allclose(w.sum(axis=-1) if w.shape[-1] == 4 else w.sum(axis=0), 1.0)


def _ffd(value=None, spacing=4.0):
    ffd = BSplineFFD.zeros(REF, spacing)
    if value is not None:
        cp = np.zeros_like(ffd.control_points)
        cp[...] = value
        ffd = ffd.with_points(cp)
    return ffd


def test_ffd_zero_and_constant():
    assert ffd_displacement(_ffd(), (3.0, 5.0)) == (0.0, 0.0)
    c = _ffd((1.5, -2.0))
    for p in [(0, 0), (3.3, 7.9), (23, 19)]:
        assert np.allclose(ffd_displacement(c, p), (1.5, -2.0))


def test_ffd_single_control_point():
    ffd = _ffd()
    cp = np.zeros_like(ffd.control_points)
    k, j = 2, 3  # control point (j, k) sits at ((j-1)δ, (k-1)δ)
    cp[k, j, 0] = 1.0
    ffd = ffd.with_points(cp)
    d = ffd.grid_spacing
    dx, dy = ffd_displacement(ffd, ((j - 1) * d, (k - 1) * d))
    assert dx == pytest.approx(4 / 9, abs=1e-12) and dy == 0


def test_ffd_outside_domain():
    with pytest.raises(GeometryError):
        ffd_displacement(_ffd(), (-1.0, 0.0))


def test_dense_matches_pointwise():
    rng = np.random.default_rng(1)
    ffd = _ffd()
    ffd = ffd.with_points(rng.normal(size=ffd.control_points.shape))
    dense = to_field(ffd, REF).data
    for y in range(0, 20, 3):
        for x in range(0, 24, 5):
            assert np.allclose(dense[y, x], ffd_displacement(ffd, (x, y)), atol=1e-9)


def test_refine_is_exact():
    rng = np.random.default_rng(2)
    ffd = _ffd(spacing=8.0)
    ffd = ffd.with_points(rng.normal(size=ffd.control_points.shape))
    fine = refine_ffd(ffd)
    assert fine.grid_spacing == 4.0
    assert np.allclose(fine.dense(REF), ffd.dense(REF), atol=1e-12)


def test_bending_energy_examples():
    assert bending_energy(_ffd()) == 0
    assert bending_energy(_ffd((2.0, 3.0))) == pytest.approx(0, abs=1e-12)
    ffd = _ffd()
    ny, nx = ffd.lattice_shape
    cp = np.zeros((ny, nx, 2))
    cp[..., 0] = 0.7 * np.arange(nx)[None, :]
    assert bending_energy(ffd.with_points(cp)) == pytest.approx(0, abs=1e-9)


def test_bending_gradient_finite_difference():
    rng = np.random.default_rng(3)
    ffd = _ffd()
    cp = rng.normal(size=ffd.control_points.shape)
    g = bending_gradient(ffd.with_points(cp))
    h = 1e-6
    for idx in [(0, 0, 0), (2, 3, 1), (4, 5, 0)]:
        a, b = cp.copy(), cp.copy()
        a[idx] += h
        b[idx] -= h
        fd = (bending_energy(ffd.with_points(a)) - bending_energy(ffd.with_points(b))) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_to_field_examples():
    assert not to_field(Rigid2D(0, 0, 0), REF).data.any()
    f = to_field(Rigid2D(0, 2, -1), REF)
    assert np.allclose(f.data[..., 0], 2) and np.allclose(f.data[..., 1], -1)


def _rand_field(seed, scale=2.0):
    rng = np.random.default_rng(seed)
    return DisplacementField(rng.normal(scale=scale, size=REF.shape + (2,)), REF.spacing)


def test_compose_identities_and_translations():
    z = DisplacementField.zeros(REF)
    f = _rand_field(4)
    assert np.allclose(compose_fields(z, f).data, f.data)
    assert np.allclose(compose_fields(f, z).data, f.data)
    a = to_field(Affine2D.identity().shifted((1.0, 2.0)), REF)
    b = to_field(Affine2D.identity().shifted((-3.0, 0.5)), REF)
    c = compose_fields(a, b).data
    assert np.allclose(c[..., 0], -2.0) and np.allclose(c[..., 1], 2.5)


def test_resample_intensity_examples():
    rng = np.random.default_rng(5)
    img = ImageGrid(rng.normal(size=REF.shape))
    assert np.array_equal(resample_intensity(img, DisplacementField.zeros(img)).data, img.data)
    shifted = resample_intensity(img, to_field(Rigid2D(0, 3, 2), img)).data
    assert np.array_equal(shifted[:-2, :-3], img.data[2:, 3:])
    out = resample_intensity(img, _rand_field(6, 5.0)).data
    assert out.min() >= img.data.min() and out.max() <= img.data.max()


def test_resample_labels_examples():
    rng = np.random.default_rng(7)
    lab = LabelMap(rng.integers(0, 3, REF.shape).astype(np.uint8))
    assert resample_labels(lab, DisplacementField.zeros(lab)) == lab
    assert resample_labels(lab, to_field(Rigid2D(0, 0.4, 0), lab)) == lab
    out = resample_labels(lab, _rand_field(8, 6.0))
    assert set(np.unique(out.data)) <= {0, 1, 2}


def test_shift_field_matches_crop():
    rng = np.random.default_rng(9)
    img = ImageGrid(rng.normal(size=REF.shape))
    fld = _rand_field(10, 1.0)
    full = resample_intensity(img, fld).data
    sub = DisplacementField(fld.data[4:12, 5:15], fld.spacing)
    cropped = resample_intensity(img, shift_field(sub, (5.0, 4.0))).data
    assert np.allclose(cropped, full[4:12, 5:15])


@pytest.mark.parametrize(
    "t",
    [Rigid2D(0.25, 1.5, -2.0, (3.0, 4.0)), Affine2D([[1.1, 0.2], [-0.1, 0.95]], [3.0, -1.0])],
)
def test_linear_transform_round_trip(tmp_path, t):
    p = save_transform(t, tmp_path / "t.txt")
    assert load_transform(p) == t


def test_ffd_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    ffd = _ffd()
    ffd = ffd.with_points(rng.normal(size=ffd.control_points.shape))
    back = load_transform(save_transform(ffd, tmp_path / "w.ffd"))
    assert np.array_equal(back.control_points, ffd.control_points)
    assert back.grid_spacing == ffd.grid_spacing


@settings(max_examples=30, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-5, 5), st.floats(-5, 5))
def test_rigid_matches_affine(theta, tx, ty):
    r = Rigid2D(theta, tx, ty, (2.0, 3.0))
    a = r.as_affine()
    assert a.det == pytest.approx(1.0)
    assert np.allclose(r.apply(7.0, -1.0), a.apply(7.0, -1.0))
