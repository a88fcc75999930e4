"""Free-space Green's-function operators on a regular voxel grid.

Operators are discretized with piecewise-constant (three vector components
per voxel) basis functions and stored in Galerkin (tested) form, i.e. the
entry coupling voxels ``m`` and ``n`` approximates ``<b_m, O b_n>``. Off
diagonal entries use the midpoint rule, ``dV**2 * kernel(r_m - r_n)``,
except for the static ``grad grad (1/4 pi r)`` part of the electric kernel
between nearby cubes, which is integrated exactly (Newell's cube-to-cube
formulas). The tables are translation invariant, so products are evaluated
as zero-padded circular convolutions with FFTs of size ``2 * dims``.
"""

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft

from .constants import C0, EPS0
from .grid import VoxelGrid

ELECTRIC = "electric"
MAGNETIC = "magnetic"

#: Offsets with max |index| up to this use exact cube-to-cube static integrals.
NEAR_OFFSETS = 4


def fft_workers():
    """Worker count for FFTs, from ``MAXTOMO_THREADS`` (0 or unset: auto)."""
    value = int(os.environ.get("MAXTOMO_THREADS", "0") or 0)
    if value <= 0:
        return os.cpu_count() or 1
    return value


def scalar_green(r, k0):
    """``exp(-i k0 r) / (4 pi r)``; raises for ``r <= 0``."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("scalar Green's function is singular at r = 0; use self_term_scalar")
    return np.exp(-1j * k0 * r) / (4.0 * np.pi * r)


def equivalent_radius(voxel_volume):
    return (3.0 * voxel_volume / (4.0 * np.pi)) ** (1.0 / 3.0)


def self_term_scalar(voxel_volume, k0):
    """Integral of the scalar Green's function over the equal-volume sphere.

    Closed form ``((1 + i k0 a) exp(-i k0 a) - 1) / k0**2``, which tends to
    ``a**2 / 2`` as ``k0 -> 0``.
    """
    if voxel_volume <= 0:
        raise ValueError("voxel_volume must be positive")
    a = equivalent_radius(voxel_volume)
    x = k0 * a
    if abs(x) < 1e-4:
        # series avoids cancellation: a^2 (1/2 - i x/3 - x^2/8 + ...)
        return a * a * (0.5 - 1j * x / 3.0 - x * x / 8.0 + 1j * x**3 / 30.0)
    return ((1.0 + 1j * x) * np.exp(-1j * x) - 1.0) / k0**2


def electric_dyad(rvec, k0):
    """``(k0^2 I + grad grad) g`` at separations ``rvec[..., 3]`` (nonzero)."""
    r = np.linalg.norm(rvec, axis=-1)
    rhat = rvec / r[..., None]
    g = scalar_green(r, k0)
    ikr = 1j * k0 * r
    a = g * (k0**2 - (1.0 + ikr) / r**2)
    b = g * (3.0 + 3.0 * ikr - (k0 * r) ** 2) / r**2
    out = b[..., None, None] * rhat[..., :, None] * rhat[..., None, :]
    out += a[..., None, None] * np.eye(3)
    return out


def static_dyad(rvec):
    """``grad grad (1 / 4 pi r)`` at nonzero separations."""
    r = np.linalg.norm(rvec, axis=-1)
    rhat = rvec / r[..., None]
    out = 3.0 * rhat[..., :, None] * rhat[..., None, :] - np.eye(3)
    return out / (4.0 * np.pi * r[..., None, None] ** 3)


def _ratio(fn, num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = fn(num / den)
    return np.where(den != 0, out, 0.0)


def _newell_f(x, y, z):
    x, y, z = np.abs(x), np.abs(y), np.abs(z)
    r = np.sqrt(x * x + y * y + z * z)
    return (
        0.5 * y * (z * z - x * x) * _ratio(np.arcsinh, y, np.sqrt(x * x + z * z))
        + 0.5 * z * (y * y - x * x) * _ratio(np.arcsinh, z, np.sqrt(x * x + y * y))
        - x * y * z * _ratio(np.arctan, y * z, x * r)
        + (2 * x * x - y * y - z * z) * r / 6.0
    )


def _newell_g(x, y, z):
    r = np.sqrt(x * x + y * y + z * z)
    return (
        x * y * z * _ratio(np.arcsinh, z, np.sqrt(x * x + y * y))
        + y / 6.0 * (3 * z * z - y * y) * _ratio(np.arcsinh, x, np.sqrt(y * y + z * z))
        + x / 6.0 * (3 * z * z - x * x) * _ratio(np.arcsinh, y, np.sqrt(x * x + z * z))
        - z**3 / 6.0 * _ratio(np.arctan, x * y, z * r)
        - z * y * y / 2.0 * _ratio(np.arctan, x * z, y * r)
        - z * x * x / 2.0 * _ratio(np.arctan, y * z, x * r)
        - x * y * r / 3.0
    )


def _second_difference(fn, x, y, z):
    total = 0.0
    weights = ((-1, 1.0), (0, -2.0), (1, 1.0))
    for i, ci in weights:
        for j, cj in weights:
            for k, ck in weights:
                total = total + ci * cj * ck * fn(x + i, y + j, z + k)
    return total


def cube_demag_tensor(offsets):
    """Cube-averaged static tensor ``N`` for integer offsets (unit cubes).

    ``-dV * N(offset)`` is the exact Galerkin entry of ``grad div int g0``
    between two cubes; ``N(0) = I / 3`` and ``N`` is traceless elsewhere.
    """
    d = np.asarray(offsets, float)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    scale = -1.0 / (4.0 * np.pi)
    out = np.empty(d.shape[:-1] + (3, 3))
    out[..., 0, 0] = scale * _second_difference(_newell_f, x, y, z)
    out[..., 1, 1] = scale * _second_difference(_newell_f, y, x, z)
    out[..., 2, 2] = scale * _second_difference(_newell_f, z, y, x)
    out[..., 0, 1] = out[..., 1, 0] = scale * _second_difference(_newell_g, x, y, z)
    out[..., 0, 2] = out[..., 2, 0] = scale * _second_difference(_newell_g, x, z, y)
    out[..., 1, 2] = out[..., 2, 1] = scale * _second_difference(_newell_g, y, z, x)
    return out


def curl_dyad(rvec, k0):
    """Matrix of ``J -> grad(g) x J`` at separations ``rvec[..., 3]`` (nonzero)."""
    r = np.linalg.norm(rvec, axis=-1)
    gp = -scalar_green(r, k0) * (1.0 + 1j * k0 * r) / r
    u = gp[..., None] * rvec / r[..., None]
    out = np.zeros(rvec.shape[:-1] + (3, 3), dtype=complex)
    out[..., 0, 1], out[..., 0, 2] = -u[..., 2], u[..., 1]
    out[..., 1, 0], out[..., 1, 2] = u[..., 2], -u[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -u[..., 1], u[..., 0]
    return out


def _circulant_offsets(grid):
    """Offset vectors (meters) in circulant layout ``2 * dims``, plus a validity mask."""
    axes = []
    valid = []
    for n in grid.dims:
        idx = np.arange(2 * n)
        d = np.where(idx < n, idx, idx - 2 * n)
        axes.append(d)
        valid.append(idx != n)
    D = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).astype(float)
    V = valid[0][:, None, None] & valid[1][None, :, None] & valid[2][None, None, :]
    return D * grid.resolution, V


@dataclass(frozen=True, eq=False)
class ToeplitzKernel:
    """Translation-invariant 3x3 block operator in Galerkin form.

    ``tables[p][q]`` holds ``block(pq)(offset)`` in circulant layout and
    ``spectra[p][q]`` its FFT (``None`` for identically zero blocks).
    """

    kind: str
    k0: float
    grid: VoxelGrid
    tables: tuple
    spectra: tuple

    def block(self, p, q, offset):
        """Entry of block ``(p, q)`` at integer voxel offset ``offset``."""
        t = self.tables[p][q]
        if t is None:
            return 0.0
        idx = tuple(int(o) % (2 * n) for o, n in zip(offset, self.grid.dims))
        return t[idx]


def _make_kernel(kind, k0, grid, dyads, self_block):
    table = dyads * grid.voxel_volume**2
    table[0, 0, 0] = self_block
    tables, spectra = [], []
    for p in range(3):
        trow, srow = [], []
        for q in range(3):
            t = np.ascontiguousarray(table[..., p, q])
            if not np.any(t):
                trow.append(None)
                srow.append(None)
                continue
            t.flags.writeable = False
            s = scipy.fft.fftn(t, workers=fft_workers())
            s.flags.writeable = False
            trow.append(t)
            srow.append(s)
        tables.append(tuple(trow))
        spectra.append(tuple(srow))
    return ToeplitzKernel(kind, float(k0), grid, tuple(tables), tuple(spectra))


def _offset_dyads(grid, k0, fn):
    R, valid = _circulant_offsets(grid)
    out = np.zeros(R.shape[:-1] + (3, 3), dtype=complex)
    nonzero = valid & (np.linalg.norm(R, axis=-1) > 0)
    out[nonzero] = fn(R[nonzero], k0)
    return out


@lru_cache(maxsize=8)
def assemble_electric_kernel(grid, k0):
    """Scattered-field operator ``L`` (the propagation part of ``Z_bb``).

    ``L[j] = (i w eps0)^-1 (k0^2 + grad div) int g j``. The self block uses
    the equal-volume sphere for the dynamic part and the cube depolarization
    for the static part: ``(i w eps0)^-1 dV [(2/3) k0^2 S - 1/3] I``.
    """
    if k0 <= 0:
        raise ValueError("the electric kernel needs k0 > 0")
    omega = k0 * C0
    scale = 1.0 / (1j * omega * EPS0)
    dv = grid.voxel_volume
    dyads = _offset_dyads(grid, k0, electric_dyad)
    # swap the midpoint static part for the exact cube integral nearby
    R, valid = _circulant_offsets(grid)
    steps = np.rint(R / grid.resolution)
    near = valid & (np.abs(steps).max(axis=-1) <= NEAR_OFFSETS) & np.any(steps != 0, axis=-1)
    dyads[near] += -static_dyad(R[near]) - cube_demag_tensor(steps[near]) / dv
    dyads *= scale
    s = self_term_scalar(grid.voxel_volume, k0)
    self_block = scale * grid.voxel_volume * ((2.0 / 3.0) * k0**2 * s - 1.0 / 3.0) * np.eye(3)
    return _make_kernel(ELECTRIC, k0, grid, dyads, self_block)


@lru_cache(maxsize=8)
def assemble_magnetic_kernel(grid, k0):
    """Curl operator ``K[j] = curl int g j``; the self block vanishes."""
    if k0 < 0:
        raise ValueError("k0 must be non-negative")
    dyads = _offset_dyads(grid, k0, curl_dyad)
    return _make_kernel(MAGNETIC, k0, grid, dyads, np.zeros((3, 3)))


def apply_kernel(kernel, x):
    """Apply ``kernel`` to a 3-component field ``x`` of shape ``(3, nx, ny, nz)``."""
    dims = kernel.grid.dims
    x = np.asarray(x)
    if x.shape != (3,) + dims:
        raise ValueError(f"field shape {x.shape} does not match grid {dims}")
    shape = tuple(2 * n for n in dims)
    workers = fft_workers()
    xs = [scipy.fft.fftn(x[q], s=shape, workers=workers) if np.any(x[q]) else None for q in range(3)]
    y = np.zeros((3,) + dims, dtype=complex)
    for p in range(3):
        acc = None
        for q in range(3):
            spec = kernel.spectra[p][q]
            if spec is None or xs[q] is None:
                continue
            term = spec * xs[q]
            acc = term if acc is None else acc + term
        if acc is not None:
            y[p] = scipy.fft.ifftn(acc, workers=workers)[: dims[0], : dims[1], : dims[2]]
    return y


def dense_matrix(kernel, mask=None):
    """Explicit matrix of the kernel, component-major ordering.

    Row/column index is ``p * n + v`` with ``v`` the C-order index of a voxel
    (restricted to ``mask`` when given). Intended for small grids and tests.
    """
    idx = np.argwhere(np.ones(kernel.grid.dims, bool) if mask is None else mask)
    n = len(idx)
    off = idx[:, None, :] - idx[None, :, :]
    dims = np.asarray(kernel.grid.dims)
    off = off % (2 * dims)
    out = np.zeros((3 * n, 3 * n), dtype=complex)
    for p in range(3):
        for q in range(3):
            t = kernel.tables[p][q]
            if t is not None:
                out[p * n : (p + 1) * n, q * n : (q + 1) * n] = t[off[..., 0], off[..., 1], off[..., 2]]
    return out
