"""Electrical properties tomography from multi-channel B1+ maps.

Forward modelling couples a thin-wire coil to a voxelized body (VSIE) or
drives the body with fixed incident fields (VIE); the inverse solver fits
permittivity and conductivity with adjoint gradients and L-BFGS-B.
"""

from .calibration import Calibrator, calibrate, cross_calibration_scale
from .coil import WireCoil, make_loop_array
from .exceptions import SolverError
from .forward import B1Set, ForwardModel, SolverConfig, solve_vie, solve_vsie
from .grid import EPMap, PhantomSpec, VoxelGrid, build_phantom, complex_permittivity
from .inverse import GmtConfig, GMTReconstructor, OptTrace, reconstruct
from .metrics import MetricReport, coil_current_error, pnae, ssim3d

__version__ = "0.1.0"

__all__ = [
    "B1Set",
    "Calibrator",
    "EPMap",
    "ForwardModel",
    "GMTReconstructor",
    "GmtConfig",
    "MetricReport",
    "OptTrace",
    "PhantomSpec",
    "SolverConfig",
    "SolverError",
    "VoxelGrid",
    "WireCoil",
    "build_phantom",
    "calibrate",
    "coil_current_error",
    "complex_permittivity",
    "cross_calibration_scale",
    "make_loop_array",
    "pnae",
    "reconstruct",
    "solve_vie",
    "solve_vsie",
    "ssim3d",
]
