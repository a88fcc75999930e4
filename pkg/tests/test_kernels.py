import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.polynomial.legendre import leggauss

from maxtomo.constants import C0, EPS0
from maxtomo.grid import VoxelGrid
from maxtomo.kernels import (
    NEAR_OFFSETS,
    apply_kernel,
    assemble_electric_kernel,
    assemble_magnetic_kernel,
    cube_demag_tensor,
    curl_dyad,
    dense_matrix,
    electric_dyad,
    equivalent_radius,
    scalar_green,
    self_term_scalar,
    static_dyad,
)

from conftest import K0, OMEGA


def random_field(rng, dims):
    return rng.normal(size=(3,) + dims) + 1j * rng.normal(size=(3,) + dims)


def test_scalar_green_values():
    assert scalar_green(1.0, 0.0) == pytest.approx(1 / (4 * np.pi))
    g = scalar_green(0.1, 6.229)
    assert abs(g) == pytest.approx(0.79577, rel=1e-5)
    assert np.angle(g) == pytest.approx(-0.6229, rel=1e-9)
    r = np.linspace(0.01, 3, 50)
    h = scalar_green(r, K0) * np.exp(1j * K0 * r)
    assert np.all(np.abs(h.imag) < 1e-15) and np.all(h.real > 0)
    with pytest.raises(ValueError):
        scalar_green(0.0, K0)


def test_self_term_static_and_quadrature():
    dv = 0.005**3
    a = equivalent_radius(dv)
    assert a == pytest.approx(3.102e-3, rel=1e-3)
    s0 = self_term_scalar(dv, 0.0)
    assert s0 == pytest.approx(a * a / 2) and s0.real == pytest.approx(4.812e-6, rel=1e-3)
    # radial quadrature of 1/(4 pi r) over the sphere: int 4 pi r^2 / (4 pi r) dr
    x, w = leggauss(20)
    r = 0.5 * a * (x + 1)
    quad = np.sum(0.5 * a * w * r)
    assert s0 == pytest.approx(quad, rel=1e-12)


def test_self_term_dynamic_limits():
    dv = 0.005**3
    a = equivalent_radius(dv)
    # dynamic formula vs radial quadrature of exp(-ikr)/(4 pi r)
    x, w = leggauss(40)
    r = 0.5 * a * (x + 1)
    for k in (K0, 50.0):
        quad = np.sum(0.5 * a * w * r * np.exp(-1j * k * r))
        assert self_term_scalar(dv, k) == pytest.approx(quad, rel=1e-12)
    small = self_term_scalar(dv, 1e-3)
    assert small.real == pytest.approx(a * a / 2, rel=1e-6)
    s = self_term_scalar(dv, K0)
    assert abs(s.imag) < 0.05 * s.real


def test_electric_dyad_offaxis_zero_on_axis():
    d = electric_dyad(np.array([[0.03, 0.0, 0.0]]), K0)[0]
    assert d[0, 1] == 0 and d[0, 2] == 0 and d[1, 2] == 0


def test_electric_dyad_matches_finite_difference_hessian():
    r0 = np.array([0.02, -0.013, 0.031])
    h = 1e-5
    hess = np.zeros((3, 3), complex)
    e = np.eye(3)

    def g(p):
        return scalar_green(np.linalg.norm(p), K0)

    for i in range(3):
        for j in range(3):
            hess[i, j] = (g(r0 + h * e[i] + h * e[j]) - g(r0 + h * e[i] - h * e[j]) - g(r0 - h * e[i] + h * e[j]) + g(r0 - h * e[i] - h * e[j])) / (4 * h * h)
    expect = K0**2 * g(r0) * np.eye(3) + hess
    np.testing.assert_allclose(electric_dyad(r0[None], K0)[0], expect, rtol=1e-6)
    np.testing.assert_allclose(static_dyad(r0[None])[0], (electric_dyad(r0[None], 0.0)[0]).real, rtol=1e-12)


def test_curl_dyad_is_cross_product_with_gradient():
    r0 = np.array([0.01, 0.02, -0.015])
    h = 1e-7
    grad = np.array([(scalar_green(np.linalg.norm(r0 + h * e), K0) - scalar_green(np.linalg.norm(r0 - h * e), K0)) / (2 * h) for e in np.eye(3)])
    j = np.array([0.3, -1.0, 0.7])
    np.testing.assert_allclose(curl_dyad(r0[None], K0)[0] @ j, np.cross(grad, j), rtol=1e-6)


def test_newell_tensor_properties():
    n0 = cube_demag_tensor(np.zeros(3))
    np.testing.assert_allclose(n0, np.eye(3) / 3, atol=1e-12)
    offs = np.array([[1, 0, 0], [1, 1, 0], [2, -1, 3], [0, 0, 4]])
    n = cube_demag_tensor(offs)
    np.testing.assert_allclose(np.trace(n, axis1=1, axis2=2), 0, atol=1e-12)
    np.testing.assert_allclose(n, np.transpose(n, (0, 2, 1)), atol=1e-15)
    np.testing.assert_allclose(cube_demag_tensor(-offs), n, atol=1e-12)


def test_newell_tensor_against_gauss_quadrature():
    # -N(d) is the double cube average of grad grad (1/4 pi r) for separated unit cubes
    x, w = leggauss(6)
    p = 0.5 * (x + 1)
    pts = np.stack(np.meshgrid(p, p, p, indexing="ij"), -1).reshape(-1, 3)
    wt = np.einsum("i,j,k->ijk", w, w, w).reshape(-1) / 8
    d = np.array([2.0, 1.0, 0.0])
    sep = (pts[:, None, :] + d) - pts[None, :, :]
    avg = np.einsum("a,b,abij->ij", wt, wt, static_dyad(sep))
    np.testing.assert_allclose(-cube_demag_tensor(d), avg, atol=2e-6 * np.abs(avg).max() + 1e-9)


def test_near_table_uses_exact_cube_integrals():
    g = VoxelGrid.centered((6, 6, 6), 0.005)
    L = assemble_electric_kernel(g, K0)
    dv = g.voxel_volume
    scale = 1 / (1j * OMEGA * EPS0)
    far = (5, 1, 0)
    r = np.array(far) * g.resolution
    np.testing.assert_allclose(L.block(0, 1, far), scale * dv**2 * electric_dyad(r[None], K0)[0][0, 1], rtol=1e-12)
    near = (2, 1, 0)
    r = np.array(near) * g.resolution
    expect = scale * dv**2 * (electric_dyad(r[None], K0)[0] - static_dyad(r[None])[0] - cube_demag_tensor(np.array(near)) / dv)
    assert L.block(0, 1, near) == pytest.approx(expect[0, 1], rel=1e-12)
    s = self_term_scalar(dv, K0)
    assert L.block(0, 0, (0, 0, 0)) == pytest.approx(scale * dv * ((2 / 3) * K0**2 * s - 1 / 3), rel=1e-12)
    assert NEAR_OFFSETS >= 1


def test_kernel_block_symmetries():
    g = VoxelGrid.centered((4, 5, 3), 0.01)
    L = assemble_electric_kernel(g, K0)
    K = assemble_magnetic_kernel(g, K0)
    for d in [(1, 0, 0), (1, 2, -1), (-3, 1, 2), (0, -4, 1)]:
        md = tuple(-x for x in d)
        for p in range(3):
            assert K.block(p, p, d) == 0
            for q in range(3):
                assert L.block(p, q, d) == pytest.approx(L.block(q, p, d), rel=1e-13)
                assert L.block(p, q, d) == pytest.approx(L.block(p, q, md), rel=1e-13)
                assert K.block(p, q, d) == pytest.approx(-K.block(q, p, d), rel=1e-13, abs=1e-300)
                assert K.block(p, q, d) == pytest.approx(-K.block(p, q, md), rel=1e-13, abs=1e-300)
    assert L.block(0, 1, (2, 0, 0)) == 0


def test_magnetic_static_limit_is_biot_savart():
    g = VoxelGrid.centered((5, 1, 1), 0.01)
    K = assemble_magnetic_kernel(g, 1e-9)
    d = 3 * g.resolution
    # tested H (x dV) at +d x-hat from a unit y-directed current in voxel 0
    hz = K.block(2, 1, (3, 0, 0)) / g.voxel_volume
    # J dV x (r - r') / (4 pi R^3) with y x x = -z
    assert hz.real == pytest.approx(-g.voxel_volume / (4 * np.pi * d * d), rel=1e-9)
    assert K.block(0, 1, (3, 0, 0)) == 0


def test_kernels_translation_invariant_and_cached():
    a = VoxelGrid((4, 4, 4), 0.01, (0.0, 0.0, 0.0))
    b = VoxelGrid((4, 4, 4), 0.01, (0.3, -0.1, 0.2))
    La, Lb = assemble_electric_kernel(a, K0), assemble_electric_kernel(b, K0)
    for p in range(3):
        for q in range(3):
            np.testing.assert_array_equal(La.tables[p][q], Lb.tables[p][q])
    assert assemble_electric_kernel(a, K0) is La
    assert assemble_electric_kernel(a, 2 * K0) is not La
    with pytest.raises(ValueError):
        assemble_electric_kernel(a, 0.0)


@given(
    st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
    st.sampled_from(["electric", "magnetic"]),
    st.integers(0, 2**32 - 1),
)
def test_fft_equals_dense(dims, kind, seed):
    g = VoxelGrid.centered(dims, 0.01)
    ker = assemble_electric_kernel(g, K0) if kind == "electric" else assemble_magnetic_kernel(g, K0)
    x = random_field(np.random.default_rng(seed), dims)
    y = apply_kernel(ker, x)
    dense = dense_matrix(ker) @ x.reshape(3, -1).reshape(-1)
    np.testing.assert_allclose(y.reshape(-1), dense, rtol=1e-12, atol=1e-12 * np.abs(dense).max())


def test_fft_matches_direct_summation(rng):
    # dense matrix built independently from the dyad formulas (far-field rule only)
    g = VoxelGrid.centered((4, 4, 4), 0.01)
    K = assemble_magnetic_kernel(g, K0)
    c = g.centers().reshape(-1, 3)
    n = len(c)
    x = random_field(rng, g.dims)
    xv = x.reshape(3, n)
    out = np.zeros((3, n), complex)
    for m in range(n):
        r = c[m] - c
        ok = np.arange(n) != m
        out[:, m] = g.voxel_volume**2 * np.einsum("nij,jn->i", curl_dyad(r[ok], K0), xv[:, ok])
    np.testing.assert_allclose(apply_kernel(K, x).reshape(3, n), out, rtol=1e-12, atol=1e-12 * np.abs(out).max())


def test_apply_kernel_linearity_and_zero(rng):
    g = VoxelGrid.centered((3, 4, 2), 0.01)
    L = assemble_electric_kernel(g, K0)
    x1, x2 = random_field(rng, g.dims), random_field(rng, g.dims)
    a = 0.3 - 2j
    np.testing.assert_allclose(apply_kernel(L, a * x1 + x2), a * apply_kernel(L, x1) + apply_kernel(L, x2), rtol=1e-11, atol=1e-20)
    assert not np.any(apply_kernel(L, np.zeros((3,) + g.dims)))
    with pytest.raises(ValueError):
        apply_kernel(L, np.zeros((3, 2, 2, 2)))


def test_electric_dense_operator_symmetric():
    g = VoxelGrid.centered((3, 3, 3), 0.01)
    mask = np.ones(g.dims, bool)
    mask[0, 0, 0] = False
    A = dense_matrix(assemble_electric_kernel(g, K0), mask)
    np.testing.assert_allclose(A, A.T, rtol=0, atol=1e-13 * np.abs(A).max())
    B = dense_matrix(assemble_magnetic_kernel(g, K0), mask)
    np.testing.assert_allclose(B, B.T, rtol=0, atol=1e-13 * np.abs(B).max())


def test_c0_consistency():
    assert C0 == pytest.approx(1 / np.sqrt(EPS0 * 1.25663706212e-6), rel=1e-9)
