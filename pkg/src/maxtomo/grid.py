"""Voxel grid, electrical-property maps and analytic phantoms.

Membership is decided by voxel-center inclusion; there is no partial-volume
averaging, so a phantom is exactly reproducible at a given resolution.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_positive, check_volume
from .constants import EPS0

PHANTOM_SHAPES = ("cylinder", "two-compartment-cylinder", "layered-sphere")


def _frozen(array):
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class VoxelGrid:
    """Regular isotropic voxel grid.

    Parameters
    ----------
    dims : tuple of int
        Number of voxels ``(nx, ny, nz)``.
    resolution : float
        Voxel edge length in meters.
    origin : tuple of float
        Corner of voxel ``(0, 0, 0)`` in meters.
    """

    dims: tuple
    resolution: float
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims!r}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError("origin must have three coordinates")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "resolution", check_positive(self.resolution, "resolution"))

    @classmethod
    def centered(cls, dims, resolution):
        """Grid whose geometric center sits at the coordinate origin."""
        dims = tuple(int(d) for d in dims)
        origin = tuple(-0.5 * d * resolution for d in dims)
        return cls(dims, resolution, origin)

    @property
    def n_voxels(self):
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self):
        return self.resolution**3

    @property
    def extent(self):
        """``(lower, upper)`` corners of the grid box."""
        lo = np.asarray(self.origin)
        return lo, lo + self.resolution * np.asarray(self.dims)

    @property
    def center(self):
        lo, hi = self.extent
        return 0.5 * (lo + hi)

    def voxel_center(self, i, j, k):
        return np.asarray(self.origin) + self.resolution * (np.array([i, j, k]) + 0.5)

    def centers(self):
        """Voxel-center coordinates, shape ``dims + (3,)``."""
        axes = [self.origin[a] + self.resolution * (np.arange(n) + 0.5) for a, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True)
class EPMap:
    """Per-voxel relative permittivity and conductivity with a sample mask."""

    grid: VoxelGrid
    eps_r: np.ndarray
    sigma_e: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        dims = self.grid.dims
        mask = check_volume(self.mask, dims, "mask", dtype=bool)
        eps_r = check_volume(self.eps_r, dims, "eps_r", dtype=float)
        sigma = check_volume(self.sigma_e, dims, "sigma_e", dtype=float)
        if np.any(eps_r[mask] < 1.0) or np.any(sigma[mask] < 0.0):
            raise ValueError("masked voxels need eps_r >= 1 and sigma_e >= 0")
        eps_r = np.where(mask, eps_r, 1.0)
        sigma = np.where(mask, sigma, 0.0)
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "eps_r", _frozen(eps_r))
        object.__setattr__(self, "sigma_e", _frozen(sigma))

    @classmethod
    def vacuum(cls, grid):
        return cls(grid, np.ones(grid.dims), np.zeros(grid.dims), np.zeros(grid.dims, bool))

    @classmethod
    def from_masked(cls, grid, mask, eps_r_values, sigma_values):
        """Build a map from per-masked-voxel vectors (C order of the mask)."""
        mask = np.asarray(mask, bool)
        eps_r = np.ones(grid.dims)
        sigma = np.zeros(grid.dims)
        eps_r[mask] = eps_r_values
        sigma[mask] = sigma_values
        return cls(grid, eps_r, sigma, mask)

    @property
    def n_masked(self):
        return int(self.mask.sum())


@dataclass(frozen=True)
class ComplexPermittivityField:
    grid: VoxelGrid
    eps: np.ndarray
    omega: float
    mask: np.ndarray

    @property
    def chi(self):
        """Contrast ``eps - 1`` on masked voxels, in mask order."""
        return self.eps[self.mask] - 1.0


def complex_permittivity(ep, omega):
    """Complex relative permittivity ``eps_r + sigma / (i omega eps0)``.

    Uses the ``exp(+i omega t)`` convention, so lossy voxels have a negative
    imaginary part. Unmasked voxels are exactly ``1 + 0j``.
    """
    check_positive(omega, "omega")
    eps = ep.eps_r + ep.sigma_e / (1j * omega * EPS0)
    eps = np.where(ep.mask, eps, 1.0 + 0.0j)
    return ComplexPermittivityField(ep.grid, _frozen(eps), float(omega), ep.mask)


@dataclass(frozen=True)
class Compartment:
    radius: float
    eps_r: float
    sigma_e: float


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and properties of an analytic phantom.

    For cylinders, ``compartments[0]`` is the outer shell and the optional
    second entry is an inner cylinder shifted by ``inner_offset`` (meters,
    transverse). For the layered sphere, compartments are concentric layers
    ordered by strictly decreasing radius. The cylinder axis is ``z``.
    """

    shape: str
    compartments: tuple
    length: float = 0.0
    center: tuple = None
    inner_offset: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.shape not in PHANTOM_SHAPES:
            raise ValueError(f"unknown phantom shape {self.shape!r}; expected one of {PHANTOM_SHAPES}")
        comps = tuple(c if isinstance(c, Compartment) else Compartment(*c) for c in self.compartments)
        object.__setattr__(self, "compartments", comps)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        shape = data.pop("shape")
        if shape == "layered-sphere":
            comps = [Compartment(l["radius_m"], l["eps_r"], l["sigma_s_per_m"]) for l in data.pop("layers", [])]
        else:
            comps = [Compartment(data.pop("radius_m"), data.pop("eps_r"), data.pop("sigma_s_per_m"))]
            if "inner" in data:
                inner = data.pop("inner")
                comps.append(Compartment(inner["radius_m"], inner["eps_r"], inner["sigma_s_per_m"]))
        kwargs = {}
        if "length_m" in data:
            kwargs["length"] = data.pop("length_m")
        if "center_m" in data:
            kwargs["center"] = tuple(data.pop("center_m"))
        if "inner_offset_m" in data:
            kwargs["inner_offset"] = tuple(data.pop("inner_offset_m"))
        if data:
            raise ValueError(f"unknown phantom keys: {sorted(data)}")
        return cls(shape, tuple(comps), **kwargs)


def _center(spec, grid):
    return grid.center if spec.center is None else np.asarray(spec.center, float)


def _assign(grid, members, comps):
    """Later (inner) members overwrite earlier (outer) ones."""
    eps_r = np.ones(grid.dims)
    sigma = np.zeros(grid.dims)
    mask = np.zeros(grid.dims, bool)
    for inside, comp in zip(members, comps):
        eps_r[inside] = comp.eps_r
        sigma[inside] = comp.sigma_e
        mask |= inside
    return EPMap(grid, eps_r, sigma, mask)


def cylinder_membership(spec, grid):
    """Boolean volumes (outer, [inner]) of voxel centers inside each cylinder."""
    c = _center(spec, grid)
    r = grid.centers() - c
    in_slab = np.abs(r[..., 2]) <= 0.5 * spec.length
    members = [in_slab & (r[..., 0] ** 2 + r[..., 1] ** 2 <= spec.compartments[0].radius ** 2)]
    if len(spec.compartments) > 1:
        dx, dy = spec.inner_offset
        rho2 = (r[..., 0] - dx) ** 2 + (r[..., 1] - dy) ** 2
        members.append(in_slab & (rho2 <= spec.compartments[1].radius ** 2))
    return members


def build_cylinder_phantom(spec, grid):
    """Voxelize a one- or two-compartment cylinder along ``z``."""
    if spec.shape not in ("cylinder", "two-compartment-cylinder"):
        raise ValueError(f"not a cylinder spec: {spec.shape!r}")
    expected = 1 if spec.shape == "cylinder" else 2
    if len(spec.compartments) != expected:
        raise ValueError(f"{spec.shape} needs {expected} compartment(s)")
    check_positive(spec.length, "length")
    outer = spec.compartments[0]
    check_positive(outer.radius, "radius")
    c = _center(spec, grid)
    lo, hi = grid.extent
    half = np.array([outer.radius, outer.radius, 0.5 * spec.length])
    tol = 1e-9 * grid.resolution
    if np.any(c - half < lo - tol) or np.any(c + half > hi + tol):
        raise ValueError("cylinder exceeds the grid bounds")
    if expected == 2:
        inner = spec.compartments[1]
        offset = np.hypot(*spec.inner_offset)
        if inner.radius <= 0 or inner.radius + offset >= outer.radius:
            raise ValueError("inner compartment must lie strictly inside the outer one")
    return _assign(grid, cylinder_membership(spec, grid), spec.compartments)


def sphere_membership(spec, grid):
    c = _center(spec, grid)
    r2 = np.sum((grid.centers() - c) ** 2, axis=-1)
    return [r2 <= comp.radius**2 for comp in spec.compartments]


def build_layered_sphere_phantom(spec, grid):
    """Concentric spheres; the innermost containing layer sets the voxel EP."""
    if spec.shape != "layered-sphere":
        raise ValueError(f"not a layered-sphere spec: {spec.shape!r}")
    radii = [comp.radius for comp in spec.compartments]
    if any(r <= 0 for r in radii) or any(b >= a for a, b in zip(radii, radii[1:])):
        raise ValueError("layer radii must be positive and strictly decreasing")
    return _assign(grid, sphere_membership(spec, grid), spec.compartments)


def build_phantom(spec, grid):
    if spec.shape == "layered-sphere":
        return build_layered_sphere_phantom(spec, grid)
    return build_cylinder_phantom(spec, grid)


def compartment_labels(spec, grid):
    """Integer label volume: 0 outside, 1 outer compartment, 2 inner, ..."""
    members = sphere_membership(spec, grid) if spec.shape == "layered-sphere" else cylinder_membership(spec, grid)
    labels = np.zeros(grid.dims, int)
    for idx, inside in enumerate(members, start=1):
        labels[inside] = idx
    return labels
