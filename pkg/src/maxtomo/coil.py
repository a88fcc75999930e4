"""Thin-wire transmit coil: geometry, MoM self matrix and body coupling.

Wires are polylines of straight segments carrying hat (triangular) current
basis functions centered on interior nodes; on closed loops every node
carries one. Ports use the delta-gap model and lumped elements are series
impedances inserted at a basis node.

Sign conventions follow the Galerkin block system

    [[Zcc, Zcb^T], [Zcb, Zbb]] [jc; jb] = [v; 0]

with ``Zcc = -<f, E(f)>`` and ``Zcb = -<b, E(f)>``, which keeps the block
matrix complex symmetric.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .constants import C0, EPS0, MU0
from .exceptions import SolverError

LUMPED_KINDS = ("capacitor", "inductor", "resistor")


@dataclass(frozen=True)
class Port:
    basis: int
    voltage: complex
    channel: int


@dataclass(frozen=True)
class Lumped:
    basis: int
    kind: str
    value: float

    def impedance(self, omega):
        if self.kind == "capacitor":
            return 1.0 / (1j * omega * self.value)
        if self.kind == "inductor":
            return 1j * omega * self.value
        return complex(self.value)


@dataclass(frozen=True, eq=False)
class WireCoil:
    """Thin-wire coil.

    ``basis[n] = (seg_in, seg_out)``: the hat function of basis ``n`` rises
    along ``seg_in`` (which ends at its node) and falls along ``seg_out``
    (which starts there). Segment direction defines positive current.
    """

    nodes: np.ndarray
    segments: np.ndarray
    wire_radius: float
    basis: np.ndarray
    ports: tuple = ()
    lumped: tuple = ()
    loops: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.wire_radius <= 0:
            raise ValueError("wire radius must be positive")
        lengths = self.segment_lengths
        if np.any(lengths <= 0):
            raise ValueError("degenerate segment")
        if self.wire_radius >= 0.5 * lengths.min():
            raise ValueError("wire radius must be much smaller than the shortest segment")
        channels = [p.channel for p in self.ports]
        if len(set(channels)) != len(channels):
            raise ValueError("each channel needs exactly one port")
        if len(channels) > self.n_basis:
            raise ValueError("more channels than basis functions")

    @property
    def n_basis(self):
        return len(self.basis)

    @property
    def n_channels(self):
        return len(self.ports)

    @property
    def segment_lengths(self):
        a, b = self.nodes[self.segments[:, 0]], self.nodes[self.segments[:, 1]]
        return np.linalg.norm(b - a, axis=1)

    def excitation(self, channel):
        """Delta-gap voltage vector ``v`` driving one channel."""
        v = np.zeros(self.n_basis, complex)
        for port in self.ports:
            if port.channel == channel:
                v[port.basis] = port.voltage
                return v
        raise ValueError(f"no port for channel {channel}")

    def lumped_impedances(self, omega):
        z = np.zeros(self.n_basis, complex)
        for item in self.lumped:
            z[item.basis] += item.impedance(omega)
        return z

    def pieces(self):
        """Basis pieces as arrays ``(basis, segment, rising)``."""
        b = np.repeat(np.arange(self.n_basis), 2)
        seg = self.basis.reshape(-1)
        rising = np.tile([True, False], self.n_basis)
        return b, seg, rising


def _loop_polygon(shape, n_seg, loop_radius, width, height):
    """Closed planar polygon in local (u, v) coordinates, counter-clockwise."""
    if shape == "circle":
        t = 2 * np.pi * np.arange(n_seg) / n_seg
        return np.stack([loop_radius * np.cos(t), loop_radius * np.sin(t)], axis=1)
    if shape != "rectangle":
        raise ValueError(f"unknown loop shape {shape!r}")
    if n_seg % 2 or n_seg < 4:
        raise ValueError("rectangular loops need an even number (>= 4) of segments")
    half = n_seg // 2
    n_w = max(1, min(half - 1, int(round(half * width / (width + height)))))
    n_h = half - n_w
    corners = np.array([[-width / 2, -height / 2], [width / 2, -height / 2], [width / 2, height / 2], [-width / 2, height / 2]])
    pts = []
    for side, count in enumerate([n_w, n_h, n_w, n_h]):
        a, b = corners[side], corners[(side + 1) % 4]
        for i in range(count):
            pts.append(a + (b - a) * i / count)
    return np.array(pts)


def _segment_hits_box(p0, p1, lo, hi, samples=32):
    t = np.linspace(0.0, 1.0, samples)[:, None]
    pts = p0 + t * (p1 - p0)
    return bool(np.any(np.all((pts >= lo) & (pts <= hi), axis=1)))


def make_loop_array(
    n_channels,
    shape="circle",
    former_radius=0.1,
    segments_per_loop=16,
    wire_radius=1e-3,
    loop_radius=0.04,
    loop_width=0.05,
    loop_height=0.08,
    center=(0.0, 0.0, 0.0),
    capacitors_per_loop=0,
    capacitance=None,
    drive_voltage=1.0,
    sample_box=None,
):
    """Planar loops tangent to a cylindrical former around the ``z`` axis.

    Loop ``k`` sits at azimuth ``2 pi k / n_channels`` with its normal
    pointing radially. Its port is on the loop's first basis function;
    capacitors, if any, are spread evenly over the remaining nodes.

    Raises ``ValueError`` if a loop crosses ``sample_box = (lo, hi)``.
    """
    if n_channels < 1 or segments_per_loop < 3:
        raise ValueError("need at least one loop of three segments")
    if capacitors_per_loop and not capacitance:
        raise ValueError("capacitance required when capacitors_per_loop > 0")
    if capacitors_per_loop >= segments_per_loop:
        raise ValueError("too many capacitors for the loop discretization")
    local = _loop_polygon(shape, segments_per_loop, loop_radius, loop_width, loop_height)
    center = np.asarray(center, float)
    nodes, segments, basis, ports, lumped, loops = [], [], [], [], [], []
    for k in range(n_channels):
        phi = 2 * np.pi * k / n_channels
        normal = np.array([np.cos(phi), np.sin(phi), 0.0])
        tangent = np.array([-np.sin(phi), np.cos(phi), 0.0])
        axial = np.array([0.0, 0.0, 1.0])
        pts = center + former_radius * normal + local[:, :1] * tangent + local[:, 1:] * axial
        base = len(nodes)
        nodes.extend(pts)
        n = len(pts)
        seg = [(base + i, base + (i + 1) % n) for i in range(n)]
        segments.extend(seg)
        # basis at node i: rises on segment i-1, falls on segment i
        basis.extend((base + (i - 1) % n, base + i) for i in range(n))
        ports.append(Port(base, complex(drive_voltage), k))
        for c in range(capacitors_per_loop):
            node = (c + 1) * n // (capacitors_per_loop + 1)
            lumped.append(Lumped(base + node, "capacitor", float(capacitance)))
        loops.append(tuple(range(base, base + n)))
    nodes = np.asarray(nodes)
    segments = np.asarray(segments, int)
    if sample_box is not None:
        lo, hi = (np.asarray(b, float) for b in sample_box)
        for a, b in segments:
            if _segment_hits_box(nodes[a], nodes[b], lo, hi):
                raise ValueError("coil loop intersects the sample bounding box")
    return WireCoil(nodes, segments, float(wire_radius), np.asarray(basis, int), tuple(ports), tuple(lumped), tuple(loops))


def mask_bounding_box(grid, mask):
    """Axis-aligned box (meters) enclosing all masked voxels."""
    idx = np.argwhere(mask)
    if len(idx) == 0:
        return None
    lo = np.asarray(grid.origin) + grid.resolution * idx.min(axis=0)
    hi = np.asarray(grid.origin) + grid.resolution * (idx.max(axis=0) + 1)
    return lo, hi


def _segment_frames(coil):
    a = coil.nodes[coil.segments[:, 0]]
    b = coil.nodes[coil.segments[:, 1]]
    lengths = np.linalg.norm(b - a, axis=1)
    return a, (b - a) / lengths[:, None], lengths


def _segment_pair_integrals(coil, k0, order):
    """Reduced-kernel double integrals over every segment pair.

    Returns ``M[A, B, alpha, beta] = int_A int_B phi_alpha phi_beta g`` with
    ``phi_0 = 1 - u`` (falling), ``phi_1 = u`` (rising), and ``I[A, B]`` the
    integral of ``g`` alone. The ``1 / (4 pi R)`` part of the inner integral
    is done in closed form, the smooth remainder by Gauss quadrature.
    """
    start, tang, lengths = _segment_frames(coil)
    a2 = coil.wire_radius**2
    u, w = np.polynomial.legendre.leggauss(order)
    u, w = 0.5 * (u + 1.0), 0.5 * w
    # outer points on A: (S, Q, 3)
    P = start[:, None, :] + (u[None, :, None] * lengths[:, None, None]) * tang[:, None, :]
    wl = w[None, :] * lengths[:, None]
    S = len(lengths)
    M = np.zeros((S, S, 2, 2), complex)
    I = np.zeros((S, S), complex)
    phi_outer = np.stack([1.0 - u, u])  # (2, Q)
    for A in range(S):
        # geometry of outer points of A relative to every B
        d = P[A][None, :, None, :] - P[:, None, :, :]  # (B, Qa, Qb, 3)
        R = np.sqrt(np.sum(d * d, axis=-1) + a2)
        smooth = np.where(R > 0, (np.exp(-1j * k0 * R) - 1.0) / (4 * np.pi * R), 0.0)
        # inner smooth integrals with weights phi_beta
        inner_s = np.einsum("bij,bj,kj->bik", smooth, wl, phi_outer)  # (B, Qa, 2)
        inner_s0 = np.einsum("bij,bj->bi", smooth, wl)
        # analytic 1/(4 pi R) part over B for each outer point
        rel = P[A][None, :, :] - start[:, None, :]  # (B, Qa, 3)
        t0 = np.einsum("bqk,bk->bq", rel, tang)
        rho2 = np.sum(rel * rel, axis=-1) - t0**2
        rho = np.sqrt(np.maximum(rho2, 0.0) + a2)
        L = lengths[:, None]
        J0 = np.arcsinh((L - t0) / rho) + np.arcsinh(t0 / rho)
        J1 = np.sqrt((L - t0) ** 2 + rho**2) - np.sqrt(t0**2 + rho**2)
        int_u = (J1 + t0 * J0) / L  # integral of u' dt
        sing0 = J0 / (4 * np.pi)
        sing1 = int_u / (4 * np.pi)
        inner = np.stack([inner_s[..., 0] + sing0 - sing1, inner_s[..., 1] + sing1], axis=-1)  # (B, Qa, 2)
        M[A] = np.einsum("q,aq,bqk->bak", wl[A], phi_outer, inner)
        I[A] = np.einsum("q,bq->b", wl[A], inner_s0 + sing0)
    # average both orderings: symmetric by construction
    M = 0.5 * (M + M.transpose(1, 0, 3, 2))
    I = 0.5 * (I + I.T)
    return M, I


def assemble_Zcc(coil, omega, order=8, include_lumped=True):
    """Thin-wire EFIE Galerkin matrix ``Zcc`` (ohms).

    ``Z_mn = i w mu0 int int f_m . f_n g + (i w eps0)^-1 int int div f_m div f_n g``
    with the reduced kernel ``g(sqrt(d^2 + a^2))``. Lumped series impedances
    are added on the diagonal when ``include_lumped``.
    """
    if omega <= 0:
        raise ValueError("omega must be positive")
    k0 = omega * np.sqrt(EPS0 * MU0)
    _, tang, lengths = _segment_frames(coil)
    b_idx, seg, rising = coil.pieces()
    if len(np.unique(np.round(coil.nodes, 12), axis=0)) != len(coil.nodes):
        raise ValueError("coincident coil nodes")
    M, I = _segment_pair_integrals(coil, k0, order)
    alpha = rising.astype(int)
    slope = np.where(rising, 1.0, -1.0) / lengths[seg]
    dots = tang[seg] @ tang[seg].T
    vec = dots * M[seg[:, None], seg[None, :], alpha[:, None], alpha[None, :]]
    sca = np.outer(slope, slope) * I[seg[:, None], seg[None, :]]
    piece = 1j * omega * MU0 * vec + sca / (1j * omega * EPS0)
    m = coil.n_basis
    Z = np.zeros((m, m), complex)
    np.add.at(Z, (b_idx[:, None], b_idx[None, :]), piece)
    Z = 0.5 * (Z + Z.T)
    if include_lumped:
        Z[np.diag_indices(m)] += coil.lumped_impedances(omega)
    return Z


@dataclass(frozen=True, eq=False)
class CouplingOperators:
    """Coil-body coupling, component-major rows ``p * n_masked + v``."""

    Zcb: np.ndarray
    Kcb: np.ndarray
    Zcc: np.ndarray


def _line_quadrature(coil, order):
    start, tang, lengths = _segment_frames(coil)
    u, w = np.polynomial.legendre.leggauss(order)
    u, w = 0.5 * (u + 1.0), 0.5 * w
    pts = start[:, None, :] + (u[None, :, None] * lengths[:, None, None]) * tang[:, None, :]
    return pts, w[None, :] * lengths[:, None], u, tang, lengths


def coil_fields(coil, points, k0, omega, order=4, min_distance=None):
    """Fields at ``points`` (N, 3) due to unit coefficients of each basis.

    Returns ``(E, H)`` of shape ``(N, 3, m)`` in V/m and A/m per ampere.
    """
    pts, wl, u, tang, lengths = _line_quadrature(coil, order)
    points = np.asarray(points, float)
    m = coil.n_basis
    E = np.zeros((len(points), 3, m), complex)
    H = np.zeros((len(points), 3, m), complex)
    b_idx, seg, rising = coil.pieces()
    tol = 1e-12 if min_distance is None else min_distance
    for s in range(len(lengths)):
        d = points[:, None, :] - pts[s][None, :, :]  # (N, Q, 3)
        R = np.linalg.norm(d, axis=-1)
        close = R < tol
        if np.any(close):
            warnings.warn("quadrature point coincides with an evaluation point; perturbing", RuntimeWarning)
            d = np.where(close[..., None], d + tol, d)
            R = np.linalg.norm(d, axis=-1)
        g = np.exp(-1j * k0 * R) / (4 * np.pi * R)
        gp = -g * (1.0 + 1j * k0 * R) / R
        grad = gp[..., None] * d / R[..., None]  # (N, Q, 3)
        cross = np.cross(grad, tang[s])  # grad g x t
        for piece in np.nonzero(seg == s)[0]:
            phi = u if rising[piece] else 1.0 - u
            slope = (1.0 if rising[piece] else -1.0) / lengths[s]
            wphi = wl[s] * phi
            a_part = (g * wphi).sum(axis=1)[:, None] * tang[s]
            q_part = np.einsum("nqk,q->nk", grad, wl[s]) * slope
            E[:, :, b_idx[piece]] += (k0**2 * a_part + q_part) / (1j * omega * EPS0)
            H[:, :, b_idx[piece]] += np.einsum("nqk,q->nk", cross, wphi)
    return E, H


def check_clearance(coil, grid, mask):
    box = mask_bounding_box(grid, mask)
    if box is None:
        return
    for a, b in coil.segments:
        if _segment_hits_box(coil.nodes[a], coil.nodes[b], *box):
            raise ValueError("coil intersects the sample bounding box")


def assemble_coupling(coil, grid, mask, k0, omega=None, order=4):
    """Galerkin coupling blocks between the coil basis and masked voxels.

    ``Zcb`` holds minus the tested electric field of each coil basis and
    ``Kcb`` the tested magnetic field (both scaled by the voxel volume).
    """
    omega = k0 * C0 if omega is None else omega
    check_clearance(coil, grid, mask)
    centers = grid.centers()[mask]
    E, H = coil_fields(coil, centers, k0, omega, order=order, min_distance=1e-9 * grid.resolution)
    dv = grid.voxel_volume
    # (N, 3, m) -> component-major (3N, m)
    Zcb = -dv * E.transpose(1, 0, 2).reshape(-1, coil.n_basis)
    Kcb = dv * H.transpose(1, 0, 2).reshape(-1, coil.n_basis)
    return CouplingOperators(Zcb, Kcb, assemble_Zcc(coil, omega))


def incident_fields(coupling, j_c):
    """Tested incident fields ``(e_inc, h_inc)`` produced by coil currents.

    ``e_inc = -Zcb j_c`` so that the VIE ``Zbb jb = e_inc`` reproduces the
    VSIE body currents for the same ``j_c``.
    """
    j_c = np.asarray(j_c)
    if j_c.shape[0] != coupling.Zcb.shape[1]:
        raise ValueError("coil current vector has the wrong length")
    return -coupling.Zcb @ j_c, coupling.Kcb @ j_c


def free_space_currents(coil, Zcc, channel):
    """Coil currents of one driven channel with no sample present."""
    try:
        return scipy.linalg.solve(Zcc, coil.excitation(channel))
    except scipy.linalg.LinAlgError as exc:
        raise SolverError("singular Zcc; insert a lossy lumped element") from exc
