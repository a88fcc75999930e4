"""VIE and VSIE forward solvers and B1+ synthesis.

Body unknowns live on masked voxels only, ordered component-major: the
vector ``j`` of length ``3 n`` stores all x components (mask C-order), then
all y, then all z.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla

from .coil import assemble_coupling, incident_fields
from .constants import EPS0, MU0, wavenumber
from .exceptions import SolverError
from .kernels import apply_kernel, assemble_electric_kernel, assemble_magnetic_kernel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-6
    max_iter: int = 1000
    restart: int = 50
    method: str = "gmres"  # or "direct": dense LU, for small problems and oracles

    def __post_init__(self):
        if self.method not in ("gmres", "direct"):
            raise ValueError("method must be 'gmres' or 'direct'")
        if not 0 < self.tol < 1:
            raise ValueError("tol must lie in (0, 1)")
        if self.max_iter < 1 or self.restart < 1:
            raise ValueError("iteration caps must be positive")


@dataclass(frozen=True, eq=False)
class B1Set:
    """Per-channel complex B1+ volumes (tesla), shape ``(L, nx, ny, nz)``."""

    grid: object
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, complex)
        if data.ndim != 4 or data.shape[1:] != self.grid.dims:
            raise ValueError(f"B1 data shape {data.shape} does not match grid {self.grid.dims}")
        if not np.all(np.isfinite(data)):
            raise ValueError("B1 values must be finite")
        object.__setattr__(self, "data", data)

    @property
    def n_channels(self):
        return self.data.shape[0]

    @classmethod
    def from_masked(cls, grid, mask, values):
        data = np.zeros((len(values),) + grid.dims, complex)
        for l, v in enumerate(values):
            data[l][mask] = v
        return cls(grid, data)

    def masked(self, mask):
        """``(L, n_masked)`` array of values on ``mask``."""
        return self.data[:, mask]


@dataclass(eq=False)
class VsieSolution:
    j_c: np.ndarray
    j_b: np.ndarray
    residual: float = 0.0
    iterations: int = 0


class BodyOperator:
    """Galerkin body operators ``Zbb(eps)`` and ``Kbb`` restricted to the mask."""

    def __init__(self, eps_field):
        self.grid = eps_field.grid
        self.mask = np.asarray(eps_field.mask, bool)
        self.omega = eps_field.omega
        self.k0 = wavenumber(self.omega)
        self.n = int(self.mask.sum())
        chi = eps_field.chi
        if self.n and np.any(np.abs(chi) < 1e-12):
            raise ValueError("contrast vanishes on a masked voxel; raise eps_r above 1")
        self.chi = chi
        self.L = assemble_electric_kernel(self.grid, self.k0)
        self.K = assemble_magnetic_kernel(self.grid, self.k0)
        dv = self.grid.voxel_volume
        self.gram_term = np.tile(dv / (1j * self.omega * EPS0 * chi), 3)
        self.diagonal = self.gram_term - self.L.tables[0][0][0, 0, 0]

    def with_eps(self, eps_field):
        """Cheap copy for new permittivities on the same grid and mask."""
        other = object.__new__(BodyOperator)
        other.__dict__.update(self.__dict__)
        chi = eps_field.chi
        dv = self.grid.voxel_volume
        other.chi = chi
        other.gram_term = np.tile(dv / (1j * self.omega * EPS0 * chi), 3)
        other.diagonal = other.gram_term - self.L.tables[0][0][0, 0, 0]
        return other

    def scatter(self, x):
        out = np.zeros((3,) + self.grid.dims, complex)
        out[:, self.mask] = np.asarray(x).reshape(3, self.n)
        return out

    def gather(self, field):
        return field[:, self.mask].reshape(-1)

    def zbb(self, x):
        return self.gram_term * x - self.gather(apply_kernel(self.L, self.scatter(x)))

    def kbb(self, x):
        return self.gather(apply_kernel(self.K, self.scatter(x)))

    def dzbb_coefficient(self):
        """``d Zbb / d eps_k`` acts on voxel ``k`` as this per-voxel factor."""
        dv = self.grid.voxel_volume
        return -dv / (1j * self.omega * EPS0 * self.chi**2)

    def b1(self, h_tested):
        """``mu0 F h``: co-rotating projection of a tested magnetic field."""
        h = np.asarray(h_tested).reshape(3, self.n)
        return MU0 * (h[0] + 1j * h[1]) / self.grid.voxel_volume

    def b1_adjoint(self, t):
        """Transpose of :meth:`b1` applied to a per-voxel vector ``t``."""
        t = np.asarray(t)
        return MU0 * np.concatenate([t, 1j * t, np.zeros_like(t)]) / self.grid.voxel_volume


def b1_from_field(h_field):
    """``mu0 (Hx + i Hy)`` for a field already in A/m, shape ``(3, ...)``."""
    h = np.asarray(h_field)
    return MU0 * (h[0] + 1j * h[1])


def _krylov(matvec, rhs, diagonal, x0, cfg, what):
    """Right-Jacobi-preconditioned restarted GMRES; true residual is checked."""
    n = rhs.shape[0]
    norm_b = np.linalg.norm(rhs)
    if norm_b == 0:
        return np.zeros(n, complex), 0.0, 0
    if cfg.method == "direct":
        a = np.column_stack([matvec(e) for e in np.eye(n, dtype=complex)])
        x = scipy.linalg.solve(a, rhs)
        return x, np.linalg.norm(a @ x - rhs) / norm_b, 0
    inv_d = 1.0 / diagonal
    op = spla.LinearOperator((n, n), matvec=lambda y: matvec(inv_d * y), dtype=complex)
    y0 = None if x0 is None else diagonal * x0
    count = [0]

    def callback(_):
        count[0] += 1

    restart = min(cfg.restart, n)
    cycles = max(1, -(-cfg.max_iter // restart))
    y, _ = spla.gmres(
        op, rhs, x0=y0, rtol=cfg.tol, atol=0.0, restart=restart, maxiter=cycles,
        callback=callback, callback_type="pr_norm",
    )
    x = inv_d * y
    res = np.linalg.norm(matvec(x) - rhs) / norm_b
    if res > cfg.tol * 1.0001:
        raise SolverError(f"{what} did not converge in {count[0]} iterations", res)
    return x, res, count[0]


def solve_vie(body, e_inc, cfg=SolverConfig(), x0=None):
    """Solve ``Zbb(eps) jb = e_inc`` (tested incident field) for ``jb``.

    ``body`` is a :class:`BodyOperator` or a complex permittivity field.
    """
    if not isinstance(body, BodyOperator):
        body = BodyOperator(body)
    if body.n == 0:
        raise ValueError("empty mask")
    e_inc = np.asarray(e_inc, complex)
    if e_inc.shape != (3 * body.n,):
        raise ValueError("e_inc must have length 3 * n_masked")
    jb, res, _ = _krylov(body.zbb, e_inc, body.diagonal, x0, cfg, "VIE solve")
    return jb


class VsieSystem:
    """Block VSIE system solved through the Schur complement on the body.

    ``(Zbb - Zcb Zcc^-1 Zcb^T) jb = r_b - Zcb Zcc^-1 r_c`` and
    ``jc = Zcc^-1 (r_c - Zcb^T jb)``. The block matrix is complex symmetric,
    so the same routine also solves the transposed (adjoint) system.
    """

    def __init__(self, body, coupling):
        self.body = body
        self.coupling = coupling
        try:
            self.lu = scipy.linalg.lu_factor(coupling.Zcc, check_finite=True)
        except (scipy.linalg.LinAlgError, ValueError) as exc:
            raise SolverError("Zcc factorization failed; insert a lossy lumped element") from exc
        if not np.all(np.isfinite(self.lu[0])) or np.min(np.abs(np.diag(self.lu[0]))) < 1e-14 * np.abs(coupling.Zcc).max():
            raise SolverError("Zcc is singular; insert a lossy lumped element")
        Zcb = coupling.Zcb
        self.W = scipy.linalg.lu_solve(self.lu, Zcb.T) if Zcb.size else np.zeros((coupling.Zcc.shape[0], 0))

    def with_body(self, body):
        other = object.__new__(VsieSystem)
        other.__dict__.update(self.__dict__)
        other.body = body
        return other

    def schur(self, x):
        return self.body.zbb(x) - self.coupling.Zcb @ (self.W @ x)

    def solve(self, r_c, r_b=None, cfg=SolverConfig(), x0=None):
        body = self.body
        zr = scipy.linalg.lu_solve(self.lu, r_c)
        if body.n == 0:
            return zr, np.zeros(0, complex), 0.0, 0
        rhs = -self.coupling.Zcb @ zr
        if r_b is not None:
            rhs = rhs + r_b
        jb, res, its = _krylov(self.schur, rhs, body.diagonal, x0, cfg, "VSIE Schur solve")
        jc = zr - self.W @ jb
        return jc, jb, res, its

    def block_residual(self, r_c, jc, jb, r_b=None):
        """Relative residual of the full block system for ``(jc, jb)``."""
        Zcb, Zcc = self.coupling.Zcb, self.coupling.Zcc
        top = Zcc @ jc + Zcb.T @ jb - r_c
        bottom = Zcb @ jc + self.body.zbb(jb) - (0 if r_b is None else r_b)
        denom = np.sqrt(np.linalg.norm(r_c) ** 2 + (0 if r_b is None else np.linalg.norm(r_b) ** 2))
        return np.sqrt(np.linalg.norm(top) ** 2 + np.linalg.norm(bottom) ** 2) / denom


def solve_vsie(eps_field, coil, channel, cfg=SolverConfig(), coupling=None, x0=None):
    """Coil and body currents for one driven channel."""
    body = BodyOperator(eps_field)
    if coupling is None:
        coupling = assemble_coupling(coil, body.grid, body.mask, body.k0, body.omega)
    system = VsieSystem(body, coupling)
    v = coil.excitation(channel)
    jc, jb, _, its = system.solve(v, cfg=cfg, x0=x0)
    res = system.block_residual(v, jc, jb) if body.n else 0.0
    return VsieSolution(jc, jb, res, its)


def b1plus_vie(body, j_b, h_inc):
    """``mu0 F (h_inc + Kbb jb)`` on masked voxels."""
    return body.b1(h_inc + body.kbb(j_b))


def b1plus_vsie(body, coupling, sol):
    """``mu0 F (Kcb jc + Kbb jb)`` on masked voxels."""
    h = coupling.Kcb @ sol.j_c
    if body.n:
        h = h + body.kbb(sol.j_b)
    return body.b1(h)


@dataclass(eq=False)
class ForwardResult:
    b1: np.ndarray  # (L, n_masked)
    j_c: list = field(default_factory=list)
    j_b: list = field(default_factory=list)


class ForwardModel:
    """Per-channel forward simulations for a fixed grid, mask and coil.

    In ``vsie`` mode the coil currents are re-solved for every permittivity;
    in ``vie`` mode the tested incident fields ``(e_inc, h_inc)`` per channel
    stay fixed.
    """

    def __init__(self, grid, mask, omega, coil=None, mode="vsie", incident=None, cfg=SolverConfig(), coupling=None):
        if mode not in ("vie", "vsie"):
            raise ValueError(f"unknown forward mode {mode!r}")
        self.grid, self.mask, self.omega, self.coil, self.mode, self.cfg = grid, np.asarray(mask, bool), omega, coil, mode, cfg
        self.k0 = wavenumber(omega)
        self._body = None
        if mode == "vsie":
            if coil is None:
                raise ValueError("vsie mode needs a coil")
            self.coupling = coupling if coupling is not None else assemble_coupling(coil, grid, self.mask, self.k0, omega)
            self.channels = [p.channel for p in coil.ports]
        else:
            if incident is None:
                raise ValueError("vie mode needs incident fields")
            self.incident = [(np.asarray(e, complex), np.asarray(h, complex)) for e, h in incident]
            self.channels = list(range(len(self.incident)))
            self.coupling = coupling
        self._system = None
        self._warm = {}

    @property
    def n_channels(self):
        return len(self.channels)

    def body(self, eps_field):
        if self._body is None:
            self._body = BodyOperator(eps_field)
            if self.mode == "vsie":
                self._system = VsieSystem(self._body, self.coupling)
            return self._body
        return self._body.with_eps(eps_field)

    def system(self, body):
        return self._system.with_body(body)

    def simulate(self, eps_field, warm_start=True):
        body = self.body(eps_field)
        out = ForwardResult(np.zeros((self.n_channels, body.n), complex))
        system = self.system(body) if self.mode == "vsie" else None
        for l, ch in enumerate(self.channels):
            x0 = self._warm.get(l) if warm_start else None
            if self.mode == "vsie":
                jc, jb, _, _ = system.solve(self.coil.excitation(ch), cfg=self.cfg, x0=x0)
                out.b1[l] = body.b1(self.coupling.Kcb @ jc + body.kbb(jb))
            else:
                e_inc, h_inc = self.incident[l]
                jb = solve_vie(body, e_inc, self.cfg, x0=x0)
                jc = None
                out.b1[l] = b1plus_vie(body, jb, h_inc)
            self._warm[l] = jb
            out.j_c.append(jc)
            out.j_b.append(jb)
        return out


def vie_incident_from_coil(coil, coupling, reference_eps=None, cfg=SolverConfig()):
    """Per-channel incident fields for VIE mode.

    Coil currents come from a VSIE solve at ``reference_eps`` (the EP guess
    the incident fields are computed with) or from free space when ``None``.
    """
    incident = []
    for port in coil.ports:
        if reference_eps is None:
            jc = scipy.linalg.solve(coupling.Zcc, coil.excitation(port.channel))
        else:
            jc = solve_vsie(reference_eps, coil, port.channel, cfg, coupling=coupling).j_c
        incident.append(incident_fields(coupling, jc))
    return incident


def add_peak_snr_noise(b1, snr, seed, mask=None):
    """Add complex white Gaussian noise at a given peak SNR.

    Per channel the noise standard deviation is ``max |B1+| / snr`` (maximum
    over ``mask``, or the whole volume), split evenly between real and
    imaginary parts. Noise is added on ``mask`` only.
    """
    if not snr > 0:
        raise ValueError("snr must be positive")
    if np.isinf(snr):
        return B1Set(b1.grid, b1.data.copy())
    mask = np.ones(b1.grid.dims, bool) if mask is None else np.asarray(mask, bool)
    rng = np.random.default_rng(seed)
    data = b1.data.copy()
    n = int(mask.sum())
    for l in range(b1.n_channels):
        std = np.abs(data[l][mask]).max() / snr
        noise = rng.normal(size=n) + 1j * rng.normal(size=n)
        data[l][mask] += std / np.sqrt(2.0) * noise
    return B1Set(b1.grid, data)


def shim_zero_phase(b1, v):
    """Rotate the phase of ``b1`` so that it vanishes at voxel ``v``.

    ``b1`` is any complex array and ``v`` an index into it.
    """
    b1 = np.asarray(b1)
    ref = b1[v]
    if abs(ref) == 0:
        raise ValueError("cannot shim on a voxel with zero field")
    return b1 * (np.conj(ref) / abs(ref))
