import numpy as np
import pytest

from atlasforge.errors import ConfigError, NumericError, RegistrationError
from atlasforge.grid import ImageGrid
from atlasforge.registration import (
    BlockMatchParams,
    Correspondence,
    FfdParams,
    block_match,
    block_match_register,
    ffd_objective,
    ffd_register,
    fit_transform_lts,
    lncc_map,
    ncc,
)
from atlasforge.transform import (
    Affine2D,
    BSplineFFD,
    Rigid2D,
    bending_energy,
    physical_center,
    resample_intensity,
    to_field,
)
from support import textured, warp_pair


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------

def test_ncc_examples():
    a = textured((16, 16)).data
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, -a) == pytest.approx(-1.0)
    assert ncc(a, np.full_like(a, 4.0)) == 0.0
    with pytest.raises(NumericError):
        ncc(a, a, mask=np.eye(16, dtype=bool) & (np.arange(16) < 1))


def _lncc_oracle(a, b, sigma):
    # independent windowed statistics with scipy's gaussian filter
    from scipy.ndimage import gaussian_filter

    kw = dict(sigma=sigma, mode="nearest", truncate=3.0)
    ma, mb = gaussian_filter(a, **kw), gaussian_filter(b, **kw)
    cov = gaussian_filter(a * b, **kw) - ma * mb
    va = gaussian_filter(a * a, **kw) - ma**2
    vb = gaussian_filter(b * b, **kw) - mb**2
    return cov / np.sqrt(va * vb)


def test_lncc_invariances_and_oracle():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(16, 16))
    for b in (a, a + 10, 3 * a):
        assert np.allclose(lncc_map(a, b, 2.0), 1.0, atol=1e-9)
    b = rng.normal(size=(16, 16))
    assert np.allclose(lncc_map(a, b, 2.0), _lncc_oracle(a, b, 2.0), atol=1e-6)


# ---------------------------------------------------------------------------
# block matching
# ---------------------------------------------------------------------------

def test_block_match_identity():
    img = textured((64, 64))
    corrs = block_match(img, img)
    assert corrs and all(c.ref_point == c.flo_point for c in corrs)


def test_block_match_integer_shift():
    img = textured((64, 64))
    moved = ImageGrid(np.roll(img.data, 3, axis=1))  # flo(p) = ref(p - 3): content shifted by +3
    shifts = [round(c.flo_point[0] - c.ref_point[0]) for c in block_match(img, moved, BlockMatchParams(search_radius=4))]
    values, counts = np.unique(shifts, return_counts=True)
    assert values[np.argmax(counts)] == 3


def test_block_match_constant_image():
    img = ImageGrid(np.full((32, 32), 5.0))
    with pytest.raises(NumericError):
        block_match(img, img)


def _points(n=30, seed=2):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 60, size=(n, 2))


def test_lts_recovers_rigid():
    p = _points()
    true = Rigid2D(0.1, 2.0, -1.0)
    q = np.column_stack(true.apply(p[:, 0], p[:, 1]))
    t = fit_transform_lts((p, q), "rigid")
    assert abs(t.theta - 0.1) < 1e-6 and abs(t.tx - 2) < 1e-6 and abs(t.ty + 1) < 1e-6


def test_lts_recovers_affine():
    p = _points()
    q = p @ np.array([[1.1, 0], [0, 0.9]]).T
    corrs = [Correspondence(tuple(a), tuple(b), 1.0) for a, b in zip(p, q)]
    t = fit_transform_lts(corrs, "affine")
    assert np.allclose(t.m, [[1.1, 0], [0, 0.9]], atol=1e-6) and np.allclose(t.t, 0, atol=1e-6)


def test_lts_outliers():
    rng = np.random.default_rng(3)
    p = _points(40)
    true = Rigid2D(-0.15, 1.0, 3.0)
    q = np.column_stack(true.apply(p[:, 0], p[:, 1]))
    bad = rng.choice(40, 12, replace=False)
    q[bad] += rng.uniform(15, 30, size=(12, 2)) * rng.choice([-1, 1], size=(12, 2))
    t = fit_transform_lts((p, q), "rigid", keep_fraction=0.5)
    assert abs(t.theta + 0.15) < 1e-3 and abs(t.tx - 1) < 1e-3 and abs(t.ty - 3) < 1e-3


def test_lts_errors():
    p = _points(3)
    with pytest.raises(NumericError):
        fit_transform_lts((p, p), "affine")
    line = np.column_stack([np.arange(6.0), np.arange(6.0)])
    with pytest.raises(NumericError):
        fit_transform_lts((line, line), "affine")
    with pytest.raises(ConfigError):
        fit_transform_lts((p, p), "projective")


def test_register_identity_is_exact():
    img = textured()
    for model in ("rigid", "affine"):
        t = block_match_register(img, img, model).as_affine()
        assert np.allclose(t.m, np.eye(2), atol=1e-9) and np.allclose(t.t, 0, atol=1e-9)


@pytest.mark.parametrize("shift", [(5.0, 3.0), (-4.0, 2.0), (2.5, -1.5), (0.0, -5.0)])
def test_register_translation(shift):
    img = textured()
    # flo(p) = ref(p - t), so a reference point p appears at p + t in flo
    flo = resample_intensity(img, to_field(Rigid2D(0, -shift[0], -shift[1]), img))
    t = block_match_register(img, flo, "rigid")
    assert abs(t.tx - shift[0]) <= 0.5 and abs(t.ty - shift[1]) <= 0.5


@pytest.mark.parametrize("theta", [0.2, -0.2, 0.1])
def test_register_rotation(theta):
    img = textured()
    c = physical_center(img)
    flo = resample_intensity(img, to_field(Rigid2D(-theta, 0, 0, c), img))
    t = block_match_register(img, flo, "rigid")
    assert abs(t.theta - theta) <= 0.02


def test_implausible_transform_rejected():
    img = textured((64, 64), seed=4)
    other = textured((64, 64), seed=5, sigma=1.0)
    try:
        t = block_match_register(img, other, "affine")
    except RegistrationError:
        return
    assert 0.2 <= t.as_affine().det <= 5


# ---------------------------------------------------------------------------
# FFD
# ---------------------------------------------------------------------------

def test_ffd_identity():
    img = textured((64, 64))
    res = ffd_register(img, img)
    assert np.abs(res.ffd.control_points).max() < 0.1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ffd_recovers_warp(seed):
    ref, flo, true = warp_pair(seed=seed)
    res = ffd_register(ref, flo)
    err = np.hypot(*(res.field.data - true.data).transpose(2, 0, 1))
    mask = np.zeros(ref.shape, bool)
    mask[8:-8, 8:-8] = True
    assert err[mask].mean() <= 0.5


def test_ffd_regularisation_monotone():
    ref, flo, _ = warp_pair(seed=3, shape=(64, 64))
    free = ffd_register(ref, flo, params=FfdParams(bending_weight=0.0))
    stiff = ffd_register(ref, flo, params=FfdParams(bending_weight=1e6))
    assert bending_energy(stiff.ffd) < bending_energy(free.ffd)


def _fd_check(params, seed=6):
    ref, flo, _ = warp_pair(shape=(32, 32), seed=seed)
    rng = np.random.default_rng(seed)
    ffd = BSplineFFD.zeros(ref, 8.0)
    ffd = ffd.with_points(rng.normal(scale=0.5, size=ffd.control_points.shape))
    init = to_field(Affine2D.identity().shifted((0.3, -0.2)), ref)
    _, grad = ffd_objective(ref, flo, ffd, init, params)
    cp = np.array(ffd.control_points)
    fd = np.zeros_like(cp)
    h = 1e-4
    for idx in np.ndindex(cp.shape):
        a, b = cp.copy(), cp.copy()
        a[idx] += h
        b[idx] -= h
        fa, _ = ffd_objective(ref, flo, ffd.with_points(a), init, params)
        fb, _ = ffd_objective(ref, flo, ffd.with_points(b), init, params)
        fd[idx] = (fa - fb) / (2 * h)
    return np.linalg.norm(grad - fd) / np.linalg.norm(fd)


@pytest.mark.parametrize("similarity", ["NCC", "SSD"])
def test_gradient_matches_finite_differences(similarity):
    assert _fd_check(FfdParams(similarity=similarity, bending_weight=0.0)) <= 1e-3
    assert _fd_check(FfdParams(similarity=similarity, bending_weight=0.05)) <= 1e-3


def test_ffd_params_validation():
    with pytest.raises(ConfigError):
        FfdParams(similarity="MI")
    with pytest.raises(ConfigError):
        BlockMatchParams(block_size=0)
