"""Glue between run configurations and the library objects."""

import numpy as np

from .coil import assemble_coupling, make_loop_array, mask_bounding_box
from .constants import angular_frequency, wavenumber
from .forward import ForwardModel, SolverConfig, vie_incident_from_coil
from .grid import EPMap, PhantomSpec, VoxelGrid, build_phantom, complex_permittivity
from .inverse import GmtConfig


def grid_from_config(cfg):
    return VoxelGrid.centered(tuple(cfg.grid.dims), cfg.grid.resolution_m)


def phantom_from_config(cfg):
    if cfg.phantom is None:
        raise ValueError("configuration has no 'phantom' section")
    return build_phantom(PhantomSpec.from_dict(cfg.phantom), grid_from_config(cfg))


def coil_from_config(cfg, grid=None, mask=None):
    c = cfg.coil
    box = None if grid is None or mask is None else mask_bounding_box(grid, mask)
    return make_loop_array(
        c.n_channels,
        shape=c.shape,
        former_radius=c.former_radius_m,
        segments_per_loop=c.segments_per_loop,
        wire_radius=c.wire_radius_m,
        loop_radius=c.loop_radius_m,
        loop_width=c.loop_width_m,
        loop_height=c.loop_height_m,
        capacitors_per_loop=c.capacitors_per_loop,
        capacitance=c.capacitance_f,
        drive_voltage=c.drive_voltage_v,
        sample_box=box,
    )


def solver_from_config(cfg):
    s = cfg.solver
    return SolverConfig(tol=s.tol, max_iter=s.max_iter, restart=s.restart, method=s.method)


def gmt_from_config(cfg, **overrides):
    g = cfg.gmt
    kw = dict(
        alpha=g.alpha,
        weight_mode=g.weight_mode,
        max_iter=g.max_iter,
        eps_min_delta=g.eps_min_delta,
        eps_max=g.eps_max,
        sigma_max=g.sigma_max_s_per_m,
        eps_r0=g.eps_r0,
        sigma0=g.sigma0_s_per_m,
        mode=g.mode,
        shim_voxel=None if g.shim_voxel is None else tuple(g.shim_voxel),
        memory=g.memory,
    )
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return GmtConfig(**kw)


class Setup:
    """Grid, mask, coil and couplings for one run configuration."""

    def __init__(self, cfg, grid, mask):
        self.cfg = cfg
        self.grid = grid
        self.mask = np.asarray(mask, bool)
        self.omega = angular_frequency(cfg.coil.frequency_hz)
        self.k0 = wavenumber(self.omega)
        self.solver = solver_from_config(cfg)
        self.coil = coil_from_config(cfg, grid, self.mask)
        self.coupling = assemble_coupling(self.coil, grid, self.mask, self.k0, self.omega)

    def incident(self, reference_ep=None):
        ref = None if reference_ep is None else complex_permittivity(reference_ep, self.omega)
        return vie_incident_from_coil(self.coil, self.coupling, ref, self.solver)

    def model(self, mode="vsie", incident=None):
        if mode == "vie" and incident is None:
            incident = self.incident()
        return ForwardModel(self.grid, self.mask, self.omega, coil=self.coil, mode=mode, incident=incident, cfg=self.solver, coupling=self.coupling)

    def uniform_ep(self, eps_r, sigma):
        n = int(self.mask.sum())
        return EPMap.from_masked(self.grid, self.mask, np.full(n, float(eps_r)), np.full(n, float(sigma)))
