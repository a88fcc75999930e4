"""Internal field of a plane-wave-illuminated homogeneous sphere (Mie series).

Written in the Bohren & Huffman ``exp(-i w t)`` convention and conjugated at
the end to match the solver's ``exp(+i w t)`` phasors. Independent of the
package code on purpose.
"""

import numpy as np
from scipy.special import spherical_jn, spherical_yn


def _n_terms(x):
    return int(np.ceil(abs(x) + 4.05 * abs(x) ** (1 / 3) + 2)) + 4


def _pi_tau(nmax, mu):
    pi = np.zeros((nmax + 1,) + mu.shape)
    tau = np.zeros_like(pi)
    pi[1] = 1.0
    tau[1] = mu
    for n in range(2, nmax + 1):
        pi[n] = ((2 * n - 1) * mu * pi[n - 1] - n * pi[n - 2]) / (n - 1)
        tau[n] = n * mu * pi[n] - (n + 1) * pi[n - 1]
    return pi, tau


def _jn(n, z):
    # complex-argument spherical Bessel via scipy (supports complex z)
    return spherical_jn(n, z), spherical_jn(n, z, derivative=True)


def internal_field(points, center, radius, eps_rel, k0):
    """Total electric field inside the sphere for ``E_inc = x exp(-i k0 z)``.

    ``eps_rel`` uses the ``exp(+i w t)`` sign convention (negative imaginary
    part for loss). Returns an ``(N, 3)`` complex array.
    """
    m = np.sqrt(np.conj(eps_rel))  # BH refractive index, Im(m) >= 0
    if m.imag < 0:
        m = -m
    x = k0 * radius
    mx = m * x
    nmax = _n_terms(abs(mx))
    n = np.arange(1, nmax + 1)
    jx, djx = _jn(n, x)
    yx, dyx = spherical_yn(n, x), spherical_yn(n, x, derivative=True)
    hx = jx + 1j * yx
    dhx = djx + 1j * dyx
    jmx, djmx = _jn(n, mx)
    xh_p = hx + x * dhx  # [x h_n(x)]'
    mxj_p = jmx + mx * djmx  # [mx j_n(mx)]'
    wronskian = 1j / x  # j_n [x h_n]' - h_n [x j_n]'
    c = wronskian / (jmx * xh_p - hx * mxj_p)
    d = m * wronskian / (m * m * jmx * xh_p - hx * mxj_p)

    p = np.asarray(points, float) - np.asarray(center, float)
    r = np.linalg.norm(p, axis=1)
    r = np.where(r == 0, 1e-12 * radius, r)
    cos_t = np.clip(p[:, 2] / r, -1, 1)
    sin_t = np.sqrt(1 - cos_t**2)
    phi = np.arctan2(p[:, 1], p[:, 0])
    rho = m * k0 * r
    pi, tau = _pi_tau(nmax, cos_t)
    Er = np.zeros(len(r), complex)
    Et = np.zeros(len(r), complex)
    Ep = np.zeros(len(r), complex)
    for i, nn in enumerate(n):
        En = 1j**nn * (2 * nn + 1) / (nn * (nn + 1))
        z, dz = _jn(nn, rho)
        rz_p = (z + rho * dz) / rho  # (rho z)'/rho
        # M_o1n and N_e1n with spherical Bessel j_n
        M_t = np.cos(phi) * pi[nn] * z
        M_p = -np.sin(phi) * tau[nn] * z
        N_r = np.cos(phi) * nn * (nn + 1) * sin_t * pi[nn] * z / rho
        N_t = np.cos(phi) * tau[nn] * rz_p
        N_p = -np.sin(phi) * pi[nn] * rz_p
        Er += En * (-1j * d[i] * N_r)
        Et += En * (c[i] * M_t - 1j * d[i] * N_t)
        Ep += En * (c[i] * M_p - 1j * d[i] * N_p)
    ex = Er * sin_t * np.cos(phi) + Et * cos_t * np.cos(phi) - Ep * np.sin(phi)
    ey = Er * sin_t * np.sin(phi) + Et * cos_t * np.sin(phi) + Ep * np.cos(phi)
    ez = Er * cos_t - Et * sin_t
    return np.conj(np.stack([ex, ey, ez], axis=1))
