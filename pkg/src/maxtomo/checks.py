"""Finite-difference gradient oracle on a small two-compartment instance."""

from dataclasses import dataclass

import numpy as np

from .coil import assemble_coupling, make_loop_array
from .constants import DEFAULT_FREQUENCY_HZ, angular_frequency, wavenumber
from .forward import ForwardModel, SolverConfig, vie_incident_from_coil
from .grid import EPMap, VoxelGrid, complex_permittivity
from .inverse import GmtObjective, data_weights, masked_index, shim


@dataclass
class GradCheckResult:
    mode: str
    shim: bool
    f_d: float
    max_rel_error_eps_r: float
    max_rel_error_sigma: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def max_rel_error(self):
        return max(self.max_rel_error_eps_r, self.max_rel_error_sigma)


def small_instance(size=4, resolution=0.01, n_channels=1, segments=12, seed=0):
    """Fully masked ``size^3`` block with an inner column, plus a loop array.

    Returns ``(truth EPMap, start (eps_r, sigma), coil)``; the start point is
    a random perturbation of the truth so that ``f_d > 0``.
    """
    grid = VoxelGrid.centered((size,) * 3, resolution)
    eps_r = np.full(grid.dims, 40.0)
    sigma = np.full(grid.dims, 0.3)
    lo, hi = size // 4, size - size // 4
    eps_r[lo:hi, lo:hi, :] = 60.0  # inner column
    sigma[lo:hi, lo:hi, :] = 0.5
    truth = EPMap(grid, eps_r, sigma, np.ones(grid.dims, bool))
    half = 0.5 * size * resolution
    rng = np.random.default_rng(seed)
    n = truth.n_masked
    e0 = truth.eps_r[truth.mask] * 0.8 + rng.uniform(0, 3, n)
    s0 = truth.sigma_e[truth.mask] * 1.3 + rng.uniform(0, 0.1, n)
    coil = make_loop_array(n_channels, segments_per_loop=segments, former_radius=2.5 * half, loop_radius=1.5 * half)
    return truth, (e0, s0), coil


def gradient_check(mode="vsie", shim_on=False, size=4, rel_step=1e-4, n_channels=1, seed=0):
    """Compare the adjoint gradient of ``f_d`` with central differences.

    Uses dense direct solves so that the cost is a smooth function of the
    parameters down to roundoff.
    """
    truth, (e0, s0), coil = small_instance(size, n_channels=n_channels, seed=seed)
    grid, mask = truth.grid, truth.mask
    omega = angular_frequency(DEFAULT_FREQUENCY_HZ)
    cfg = SolverConfig(method="direct")
    coupling = assemble_coupling(coil, grid, mask, wavenumber(omega), omega)
    incident = vie_incident_from_coil(coil, coupling) if mode == "vie" else None
    model = ForwardModel(grid, mask, omega, coil=coil, mode=mode, incident=incident, cfg=cfg, coupling=coupling)
    b1 = model.simulate(complex_permittivity(truth, omega)).b1
    v = masked_index(mask, (size // 2,) * 3) if shim_on else None
    if v is not None:
        b1 = shim(b1, v)
    obj = GmtObjective(model, b1, data_weights(b1), alpha=0.0, shim_voxel=v)
    ev = obj.evaluate(e0, s0)
    n = len(e0)
    num = np.zeros((2, n))
    for k in range(n):
        for which, base in enumerate((e0, s0)):
            h = rel_step * base[k]
            up, dn = base.copy(), base.copy()
            up[k] += h
            dn[k] -= h
            args_up = (up, s0) if which == 0 else (e0, up)
            args_dn = (dn, s0) if which == 0 else (e0, dn)
            num[which, k] = (obj.cost(*args_up) - obj.cost(*args_dn)) / (2 * h)
    ana = np.stack([ev.grad_eps_r, ev.grad_sigma])
    rel = np.abs(ana - num) / np.abs(num)
    return GradCheckResult(mode, shim_on, ev.f_d, float(rel[0].max()), float(rel[1].max()), ana, num)
