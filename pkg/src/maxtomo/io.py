"""Volume files and run configuration.

A volume file is one UTF-8 JSON header line followed by a raw little-endian
payload. Channels are stored one after another; inside a channel ``x``
varies fastest. Complex data is interleaved ``re, im``.
"""

import json
from dataclasses import dataclass, field, fields

import numpy as np

from .grid import EPMap, VoxelGrid
from .forward import B1Set

MAGIC = "MAXTOMO1"
ORDER = "x-fastest little-endian"
KINDS = ("epmap", "b1set", "field")
_DTYPES = {"f64": np.dtype("<f8"), "c128": np.dtype("<c16")}


@dataclass
class VolumeFile:
    """In-memory volume: ``data`` has shape ``(channels, nx, ny, nz)``."""

    kind: str
    resolution: float
    data: np.ndarray
    origin: tuple = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError("volume data must have shape (channels, nx, ny, nz)")
        if np.iscomplexobj(self.data):
            self.data = self.data.astype(np.complex128, copy=False)
        else:
            self.data = self.data.astype(np.float64, copy=False)

    @property
    def dtype(self):
        return "c128" if np.iscomplexobj(self.data) else "f64"

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape[1:])

    def header(self):
        h = {
            "magic": MAGIC,
            "kind": self.kind,
            "dims": list(self.dims),
            "resolution_m": float(self.resolution),
            "channels": int(self.data.shape[0]),
            "dtype": self.dtype,
            "order": ORDER,
        }
        if self.origin is not None:
            h["origin_m"] = [float(o) for o in self.origin]
        if self.meta:
            h["meta"] = self.meta
        return h

    def grid(self):
        if self.origin is None:
            return VoxelGrid.centered(self.dims, self.resolution)
        return VoxelGrid(self.dims, self.resolution, tuple(self.origin))


def write_volume(path, vol):
    header = json.dumps(vol.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(vol.data.transpose(0, 3, 2, 1)).astype(_DTYPES[vol.dtype], copy=False)
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(payload.tobytes())


def read_volume(path):
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        h = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed volume header") from exc
    if h.get("magic") != MAGIC:
        raise ValueError(f"{path}: not a {MAGIC} volume file")
    if h.get("order") != ORDER or h.get("dtype") not in _DTYPES:
        raise ValueError(f"{path}: unsupported layout {h.get('order')!r}/{h.get('dtype')!r}")
    dims = tuple(int(d) for d in h["dims"])
    channels = int(h["channels"])
    dt = _DTYPES[h["dtype"]]
    expected = channels * int(np.prod(dims)) * dt.itemsize
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=dt).reshape((channels,) + dims[::-1]).transpose(0, 3, 2, 1)
    return VolumeFile(h["kind"], float(h["resolution_m"]), data.astype(dt.newbyteorder("="), copy=True), h.get("origin_m"), h.get("meta", {}))


# conversions


def epmap_to_volume(ep):
    data = np.stack([ep.eps_r, ep.sigma_e, ep.mask.astype(float)])
    return VolumeFile("epmap", ep.grid.resolution, data, tuple(ep.grid.origin), {"channels": ["eps_r", "sigma_s_per_m", "mask"]})


def volume_to_epmap(vol):
    if vol.kind != "epmap" or vol.data.shape[0] != 3 or vol.dtype != "f64":
        raise ValueError("volume is not an EP map")
    return EPMap(vol.grid(), vol.data[0], vol.data[1], vol.data[2] > 0.5)


def b1set_to_volume(b1, mask=None, meta=None):
    m = dict(meta or {})
    if mask is not None:
        m["mask_voxels"] = int(np.count_nonzero(mask))
    return VolumeFile("b1set", b1.grid.resolution, b1.data, tuple(b1.grid.origin), m)


def volume_to_b1set(vol):
    if vol.kind != "b1set" or vol.dtype != "c128":
        raise ValueError("volume is not a B1+ set")
    return B1Set(vol.grid(), vol.data)


# run configuration


def _strict(cls, data, section):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValueError(f"section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return cls(**data)


@dataclass
class GridSection:
    dims: tuple = (12, 12, 12)
    resolution_m: float = 0.01


@dataclass
class CoilSection:
    n_channels: int = 8
    shape: str = "circle"
    former_radius_m: float = 0.10
    segments_per_loop: int = 12
    wire_radius_m: float = 1e-3
    loop_radius_m: float = 0.04
    loop_width_m: float = 0.05
    loop_height_m: float = 0.08
    capacitors_per_loop: int = 0
    capacitance_f: float = None
    drive_voltage_v: float = 1.0
    frequency_hz: float = 297.2e6


@dataclass
class SolverSection:
    tol: float = 1e-6
    max_iter: int = 1000
    restart: int = 50
    method: str = "gmres"


@dataclass
class GmtSection:
    alpha: float = 2e-4
    weight_mode: str = "sqrt"
    max_iter: int = 500
    eps_min_delta: float = 0.05
    eps_max: float = 100.0
    sigma_max_s_per_m: float = 3.0
    eps_r0: float = 21.1
    sigma0_s_per_m: float = 0.2
    mode: str = "vsie"
    shim_voxel: tuple = None
    memory: int = 10


@dataclass
class NoiseSection:
    snr: float = float("inf")
    seed: int = 0


@dataclass
class CalibrationSection:
    weight_mode: str = "sqrt"
    max_iter: int = 500
    v_target_v: float = None
    v_ref_v: float = None


@dataclass
class OutputsSection:
    directory: str = "."
    trace: str = "trace.tsv"


@dataclass
class RunConfig:
    grid: GridSection = field(default_factory=GridSection)
    phantom: dict = None
    epmap_path: str = None
    coil: CoilSection = field(default_factory=CoilSection)
    solver: SolverSection = field(default_factory=SolverSection)
    gmt: GmtSection = field(default_factory=GmtSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    outputs: OutputsSection = field(default_factory=OutputsSection)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ValueError("run configuration must be a JSON object")
        known = {f.name.replace("_", "-") if f.name == "epmap_path" else f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown configuration sections: {sorted(unknown)}")
        if "phantom" in data and "epmap-path" in data:
            raise ValueError("give either 'phantom' or 'epmap-path', not both")
        return cls(
            grid=_strict(GridSection, data.get("grid"), "grid"),
            phantom=data.get("phantom"),
            epmap_path=data.get("epmap-path"),
            coil=_strict(CoilSection, data.get("coil"), "coil"),
            solver=_strict(SolverSection, data.get("solver"), "solver"),
            gmt=_strict(GmtSection, data.get("gmt"), "gmt"),
            noise=_strict(NoiseSection, data.get("noise"), "noise"),
            calibration=_strict(CalibrationSection, data.get("calibration"), "calibration"),
            outputs=_strict(OutputsSection, data.get("outputs"), "outputs"),
        )

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: invalid JSON ({exc})") from exc
