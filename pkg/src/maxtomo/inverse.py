"""Global Maxwell Tomography: cost, adjoint gradients and the optimizer loop.

Everything here works on masked-voxel vectors. Channel maps are arrays of
shape ``(L, n_masked)``; per-voxel body currents use the component-major
layout of :mod:`maxtomo.forward`.

Gradient bookkeeping: ``f_d`` is real, the B1+ maps are holomorphic in the
complex permittivity ``eps`` (unless shimmed), and
``df = -2 / (eta^2 f_d) * Re sum_l t_l . dB_l``. Pulling ``t_l`` back through
the forward system costs one transposed solve per channel; the block VSIE
matrix is complex symmetric, so the transposed solve reuses the forward
Schur machinery.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .constants import EPS0
from .exceptions import SolverError
from .forward import ForwardModel, SolverConfig, solve_vie
from .grid import EPMap, complex_permittivity
from .metrics import coil_current_error

logger = logging.getLogger(__name__)

TV_SMOOTHING = 1e-6
FD_ZERO = 1e-14


# ---------------------------------------------------------------- weights


def data_weights(measured, mode="sqrt"):
    """Per-channel weights from measured magnitudes, shape ``(L, n)``.

    ``sqrt``: ``sqrt(|B| / max |B|)`` (favours high-SNR regions mildly);
    ``linear``: ``|B| / max |B|``.
    """
    mag = np.abs(np.asarray(measured))
    peak = mag.max(axis=1, keepdims=True)
    if np.any(peak == 0):
        raise ValueError("a measured channel is identically zero")
    ratio = mag / peak
    if mode == "sqrt":
        return np.sqrt(ratio)
    if mode == "linear":
        return ratio
    raise ValueError(f"unknown weight mode {mode!r}")


def weights_sqrt(measured):
    return data_weights(measured, "sqrt")


def weights_linear(measured):
    return data_weights(measured, "linear")


# ------------------------------------------------------- data consistency


def pair_products(b):
    """``P[l, l'] = b_l * conj(b_l')`` for all ordered pairs, shape ``(L, L, n)``."""
    b = np.asarray(b)
    return b[:, None, :] * np.conj(b)[None, :, :]


def data_consistency(measured, simulated, weights):
    """Weighted data-consistency term.

    Returns ``(f_d, eta, delta)`` with ``delta[l, l'] = Bm_l conj(Bm_l') -
    B_l conj(B_l')`` over all ordered channel pairs (diagonal included).
    """
    measured, simulated, weights = (np.asarray(a) for a in (measured, simulated, weights))
    if measured.shape != simulated.shape or weights.shape != measured.shape:
        raise ValueError("measured, simulated and weights must share shape (L, n)")
    ww = weights[:, None, :] * weights[None, :, :]
    meas_pairs = pair_products(measured)
    eta = np.sqrt(np.sum(np.abs(ww * meas_pairs) ** 2))
    if eta == 0:
        raise ValueError("normalization eta vanishes: no weighted measured signal")
    delta = meas_pairs - pair_products(simulated)
    f_d = np.sqrt(np.sum(np.abs(ww * delta) ** 2)) / eta
    return f_d, eta, delta


def sensitivity(simulated, weights, delta):
    """``t_l = sum_l' w_l^2 w_l'^2 conj(delta_ll') conj(B_l')``."""
    w2 = np.asarray(weights) ** 2
    return np.einsum("ln,mn,lmn,mn->ln", w2, w2, np.conj(delta), np.conj(simulated))


def b1_gradient(measured, simulated, weights):
    """Wirtinger coefficient ``g`` with ``df_d = Re sum_l g_l . dB_l``.

    Returns ``(f_d, eta, g)``; ``g`` is zero at an exact fit.
    """
    f_d, eta, delta = data_consistency(measured, simulated, weights)
    if f_d < FD_ZERO:
        return f_d, eta, np.zeros_like(np.asarray(simulated))
    t = sensitivity(simulated, weights, delta)
    return f_d, eta, -2.0 * t / (eta**2 * f_d)


# -------------------------------------------------------------- shimming


def shim_factors(b1, v):
    """Unit phasors ``conj(B_v) / |B_v|`` per channel, shape ``(L,)``."""
    ref = np.asarray(b1)[..., v]
    if np.any(np.abs(ref) == 0):
        raise ValueError("cannot shim on a voxel with zero field")
    return np.conj(ref) / np.abs(ref)


def shim(b1, v):
    """Zero-phase-at-``v`` shimmed maps; ``b1`` is ``(L, n)`` or ``(n,)``."""
    b1 = np.asarray(b1)
    s = shim_factors(b1, v)
    return b1 * (s[..., None] if b1.ndim > 1 else s)


def shim_derivatives(b1, db1, v):
    """Directional derivatives of the shimmed map.

    Given the holomorphic derivative ``db1 = (dB/d eps) d eps`` of an
    unshimmed map ``b1`` (1-D), returns ``(d beta, d conj(beta))`` along the
    same direction::

        d beta       = s dB - beta / (2 B_v) dB_v
        d conj(beta) = conj(beta) / (2 B_v) dB_v

    with ``s = conj(B_v) / |B_v|``. The single entry ``dB_v`` of the
    perturbed map at ``v`` is what couples every voxel to voxel ``v``.
    """
    b1, db1 = np.asarray(b1), np.asarray(db1)
    bv = b1[v]
    if bv == 0:
        raise ValueError("cannot shim on a voxel with zero field")
    s = np.conj(bv) / abs(bv)
    beta = b1 * s
    dbeta = s * db1 - beta / (2 * bv) * db1[v]
    dconj = np.conj(beta) / (2 * bv) * db1[v]
    return dbeta, dconj


def shim_pullback(b1, g, v):
    """Map a gradient w.r.t. shimmed maps back to the unshimmed maps.

    If ``df = Re sum g . d beta`` then ``df = Re sum g_tilde . dB`` with the
    returned ``g_tilde``. Works channelwise on ``(L, n)`` arrays.
    """
    b1, g = np.atleast_2d(b1), np.atleast_2d(g)
    s = shim_factors(b1, v)
    beta = b1 * s[:, None]
    total = np.sum(g * beta, axis=1)
    out = g * s[:, None]
    out[:, v] += -1j * total.imag / b1[:, v]
    return out


# -------------------------------------------------------------- regularizer


def _forward_pairs(mask):
    """Index pairs (p, q = p + e_a) with both voxels masked, in mask order."""
    order = -np.ones(mask.shape, int)
    order[mask] = np.arange(int(mask.sum()))
    pairs = []
    for axis in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(0, -1)
        b[axis] = slice(1, None)
        p, q = order[tuple(a)], order[tuple(b)]
        both = (p >= 0) & (q >= 0)
        pairs.append((p[both], q[both]))
    return pairs


def regularizer(eps_r, sigma, mask, alpha=1.0, sigma_max=3.0, smoothing=TV_SMOOTHING):
    """Smoothed isotropic total variation of ``(eps_r, sigma / sigma_max)``.

    ``f_r = sum_p sqrt(|D eps_r|^2 + |D sigma~|^2 + smoothing^2)`` with forward
    differences between masked neighbours. Returns ``alpha``-scaled
    ``(f_r, d f_r / d eps_r, d f_r / d sigma)`` on masked-voxel vectors.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    mask = np.asarray(mask, bool)
    eps_r = np.asarray(eps_r, float)
    sig = np.asarray(sigma, float) / sigma_max
    n = eps_r.shape[0]
    sq = np.full(n, smoothing**2)
    diffs = []
    for p, q in _forward_pairs(mask):
        de, ds = eps_r[q] - eps_r[p], sig[q] - sig[p]
        np.add.at(sq, p, de * de + ds * ds)
        diffs.append((p, q, de, ds))
    tv = np.sqrt(sq)
    f_r = tv.sum()
    ge = np.zeros(n)
    gs = np.zeros(n)
    for p, q, de, ds in diffs:
        ce, cs = de / tv[p], ds / tv[p]
        np.add.at(ge, q, ce)
        np.add.at(ge, p, -ce)
        np.add.at(gs, q, cs)
        np.add.at(gs, p, -cs)
    return alpha * f_r, alpha * ge, alpha * gs / sigma_max


# ----------------------------------------------------------- real mapping


def wirtinger_to_real(grad_eps, omega):
    """Real-parameter gradient from the Wirtinger derivative ``df/d eps``.

    With ``eps = eps_r + sigma / (i omega eps0)``:
    ``df/d eps_r = 2 Re g`` and ``df/d sigma = 2 Im g / (omega eps0)``.
    """
    if omega <= 0:
        raise ValueError("omega must be positive")
    g = np.asarray(grad_eps)
    return 2.0 * g.real, 2.0 * g.imag / (omega * EPS0)


# ------------------------------------------------------- adjoint gradient


def b1_jvp(model, eps_field, fwd, d_eps):
    """Holomorphic directional derivative ``(dB/d eps) d_eps`` per channel.

    Forward-mode counterpart of the adjoint gradient; used for checks.
    """
    body = model.body(eps_field)
    coef = np.tile(body.dzbb_coefficient() * d_eps, 3)
    out = np.zeros_like(fwd.b1)
    for l in range(model.n_channels):
        rhs_b = -coef * fwd.j_b[l]
        if model.mode == "vsie":
            system = model.system(body)
            djc, djb, _, _ = system.solve(np.zeros(model.coil.n_basis, complex), rhs_b, cfg=model.cfg)
            out[l] = body.b1(model.coupling.Kcb @ djc + body.kbb(djb))
        else:
            djb = solve_vie(body, rhs_b, model.cfg)
            out[l] = body.b1(body.kbb(djb))
    return out


def adjoint_eps_gradient(model, eps_field, fwd, g):
    """Wirtinger derivative ``df/d eps`` per masked voxel.

    ``g`` is the coefficient from :func:`b1_gradient` (after any shim
    pullback): ``df = Re sum_l g_l . dB_l``. For each channel, solve the
    transposed system ``A^T zeta = P^T g_l`` (``A`` symmetric) and contract
    with ``dA/d eps`` applied to the forward currents.
    """
    body = model.body(eps_field)
    coef = body.dzbb_coefficient()
    n = body.n
    total = np.zeros(n, complex)
    for l in range(model.n_channels):
        if not np.any(g[l]):
            continue
        h_adj = body.b1_adjoint(g[l])  # P^T g over tested fields
        rhs_b = body.kbb(h_adj)  # Kbb is symmetric
        if model.mode == "vsie":
            rhs_c = model.coupling.Kcb.T @ h_adj
            system = model.system(body)
            _, zeta_b, _, _ = system.solve(rhs_c, rhs_b, cfg=model.cfg)
        else:
            zeta_b = solve_vie(body, rhs_b, model.cfg)
        # df = Re sum g dB = -Re zeta^T (dA x) with dA x = coef * jb * d eps
        contraction = np.sum((zeta_b * fwd.j_b[l]).reshape(3, n), axis=0)
        total -= coef * contraction
    # df = Re(total . d eps) = 2 Re((df/d eps) d eps)
    return 0.5 * total


# ------------------------------------------------------------- objective


@dataclass(eq=False)
class Evaluation:
    f: float
    f_d: float
    f_r: float
    grad_eps_r: np.ndarray
    grad_sigma: np.ndarray
    b1: np.ndarray
    j_c: list = field(default_factory=list)


class GmtObjective:
    """Cost ``f = f_d + alpha f_r`` and its real gradient for a forward model."""

    def __init__(self, model, measured, weights, alpha=0.0, sigma_max=3.0, shim_voxel=None):
        self.model = model
        self.measured = np.asarray(measured, complex)
        self.weights = np.asarray(weights, float)
        if self.measured.shape != (model.n_channels, int(model.mask.sum())):
            raise ValueError("measurements must have shape (channels, n_masked)")
        self.alpha = float(alpha)
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        self.sigma_max = sigma_max
        self.shim_voxel = shim_voxel
        self.n_evaluations = 0

    def eps_field(self, eps_r, sigma):
        ep = EPMap.from_masked(self.model.grid, self.model.mask, eps_r, sigma)
        return complex_permittivity(ep, self.model.omega)

    def simulate(self, eps_r, sigma):
        eps = self.eps_field(eps_r, sigma)
        fwd = self.model.simulate(eps)
        b1 = fwd.b1 if self.shim_voxel is None else shim(fwd.b1, self.shim_voxel)
        return eps, fwd, b1

    def cost(self, eps_r, sigma):
        _, _, b1 = self.simulate(eps_r, sigma)
        f_d, _, _ = data_consistency(self.measured, b1, self.weights)
        f_r = regularizer(eps_r, sigma, self.model.mask, self.alpha, self.sigma_max)[0] if self.alpha else 0.0
        return f_d + f_r

    def evaluate(self, eps_r, sigma):
        self.n_evaluations += 1
        eps, fwd, b1 = self.simulate(eps_r, sigma)
        f_d, _, g = b1_gradient(self.measured, b1, self.weights)
        if self.shim_voxel is not None and np.any(g):
            g = shim_pullback(fwd.b1, g, self.shim_voxel)
        if np.any(g):
            ge, gs = wirtinger_to_real(adjoint_eps_gradient(self.model, eps, fwd, g), self.model.omega)
        else:
            ge, gs = np.zeros(len(eps_r)), np.zeros(len(eps_r))
        f_r = 0.0
        if self.alpha:
            f_r, re, rs = regularizer(eps_r, sigma, self.model.mask, self.alpha, self.sigma_max)
            ge, gs = ge + re, gs + rs
            f_r /= self.alpha
        return Evaluation(f_d + self.alpha * f_r, f_d, f_r, ge, gs, b1, fwd.j_c)


# ------------------------------------------------------------ reconstruct


@dataclass
class GmtConfig:
    """Reconstruction hyperparameters (SI units)."""

    alpha: float = 2e-4
    weight_mode: str = "sqrt"
    max_iter: int = 500
    eps_min_delta: float = 0.05
    eps_max: float = 100.0
    sigma_max: float = 3.0
    eps_r0: float = 21.1
    sigma0: float = 0.2
    mode: str = "vsie"
    shim_voxel: tuple = None
    memory: int = 10
    solver_tol: float = 1e-9  # Krylov tolerance inside the loop, see build_objective

    def __post_init__(self):
        if not 0 < self.solver_tol < 1:
            raise ValueError("solver_tol must lie in (0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.weight_mode not in ("sqrt", "linear"):
            raise ValueError("weight_mode must be 'sqrt' or 'linear'")
        if self.mode not in ("vie", "vsie"):
            raise ValueError("mode must be 'vie' or 'vsie'")
        if not 1.0 + self.eps_min_delta < self.eps_max or self.sigma_max <= 0 or self.eps_min_delta <= 0:
            raise ValueError("bounds are not ordered")
        if not (1.0 + self.eps_min_delta <= self.eps_r0 <= self.eps_max and 0.0 <= self.sigma0 <= self.sigma_max):
            raise ValueError("initial guess outside bounds")
        if self.max_iter < 0 or self.memory < 1:
            raise ValueError("max_iter must be >= 0 and memory >= 1")

    @property
    def bounds(self):
        return (1.0 + self.eps_min_delta, self.eps_max), (0.0, self.sigma_max)


@dataclass
class OptTrace:
    """Per-iteration history; row 0 is the initial guess."""

    f: list = field(default_factory=list)
    f_d: list = field(default_factory=list)
    f_r: list = field(default_factory=list)
    grad_inf: list = field(default_factory=list)
    coil_error: list = field(default_factory=list)

    def append(self, ev, coil_error=None):
        self.f.append(ev.f)
        self.f_d.append(ev.f_d)
        self.f_r.append(ev.f_r)
        self.grad_inf.append(float(max(np.abs(ev.grad_eps_r).max(initial=0), np.abs(ev.grad_sigma).max(initial=0))))
        self.coil_error.append(np.nan if coil_error is None else coil_error)

    def __len__(self):
        return len(self.f)

    def best_so_far(self):
        return np.minimum.accumulate(np.asarray(self.f))

    def to_tsv(self):
        lines = ["iteration\tf\tf_d\tf_r\tgrad_inf\tcoil_current_error"]
        for i in range(len(self)):
            lines.append(
                f"{i}\t{self.f[i]:.17g}\t{self.f_d[i]:.17g}\t{self.f_r[i]:.17g}\t{self.grad_inf[i]:.17g}\t{self.coil_error[i]:.17g}"
            )
        return "\n".join(lines) + "\n"


def _stack_currents(j_c):
    return np.concatenate([np.asarray(j) for j in j_c])


def reconstruct(objective, cfg, reference_currents=None, callback=None):
    """Bound-constrained L-BFGS-B reconstruction of ``(eps_r, sigma)``.

    The optimizer works in ``(eps_r, sigma / (omega eps0))`` coordinates so
    that both blocks act on the complex permittivity with equal weight.
    Returns ``(EPMap, OptTrace)`` for the lowest-cost iterate visited.
    """
    from .optim import minimize_lbfgsb

    n = int(objective.model.mask.sum())
    sig_scale = objective.model.omega * EPS0
    (e_lo, e_hi), (s_lo, s_hi) = cfg.bounds
    bounds = [(e_lo, e_hi)] * n + [(s_lo / sig_scale, s_hi / sig_scale)] * n
    x0 = np.concatenate([np.full(n, cfg.eps_r0), np.full(n, cfg.sigma0 / sig_scale)])
    ref = None if reference_currents is None else _stack_currents(reference_currents)
    trace = OptTrace()
    best = {"f": np.inf, "x": x0.copy()}
    cache = {}

    def split(x):
        return x[:n], x[n:] * sig_scale

    def fun(x):
        ev = objective.evaluate(*split(x))
        cache.clear()
        cache[x.tobytes()] = ev
        return ev.f, np.concatenate([ev.grad_eps_r, ev.grad_sigma * sig_scale])

    def record(x):
        key = x.tobytes()
        ev = cache.get(key)
        if ev is None:
            ev = objective.evaluate(*split(x))
            cache[key] = ev
        err = None
        if ref is not None and ev.j_c and ev.j_c[0] is not None:
            err = coil_current_error(_stack_currents(ev.j_c), ref)
        trace.append(ev, err)
        if ev.f < best["f"]:
            best["f"], best["x"] = ev.f, x.copy()
        logger.info("iter %d f=%.6e f_d=%.6e |g|=%.3e", len(trace) - 1, ev.f, ev.f_d, trace.grad_inf[-1])
        if callback is not None:
            callback(len(trace) - 1, ev)

    fun(x0)
    record(x0)
    if cfg.max_iter > 0:
        try:
            minimize_lbfgsb(fun, x0, bounds, cfg.max_iter, cfg.memory, record)
        except SolverError:
            logger.exception("forward/adjoint failure; returning the trace so far")
            raise
    eps_r, sigma = split(best["x"])
    ep = EPMap.from_masked(objective.model.grid, objective.model.mask, eps_r, sigma)
    return ep, trace


def build_objective(grid, mask, omega, measured, cfg, coil=None, incident=None, solver=SolverConfig(), coupling=None):
    """Assemble forward model and objective for a reconstruction run.

    Warm-started solves at a loose tolerance return the previous currents
    unchanged for small steps, which freezes the line search; the solver
    tolerance is therefore tightened to ``cfg.solver_tol``.
    """
    solver = replace(solver, tol=min(solver.tol, cfg.solver_tol))
    model = ForwardModel(grid, mask, omega, coil=coil, mode=cfg.mode, incident=incident, cfg=solver, coupling=coupling)
    measured = np.asarray(measured)
    weights = data_weights(measured, cfg.weight_mode)
    shim_voxel = None
    if cfg.shim_voxel is not None:
        shim_voxel = masked_index(mask, cfg.shim_voxel)
    return GmtObjective(model, measured, weights, cfg.alpha, cfg.sigma_max, shim_voxel)


def masked_index(mask, voxel):
    """Position of grid voxel ``(i, j, k)`` within the masked-voxel vector."""
    mask = np.asarray(mask, bool)
    voxel = tuple(int(v) for v in voxel)
    if not mask[voxel]:
        raise ValueError(f"voxel {voxel} is not inside the mask")
    return int(np.count_nonzero(mask.ravel()[: np.ravel_multi_index(voxel, mask.shape)]))


class GMTReconstructor(BaseEstimator):
    """Estimator front end to :func:`reconstruct`.

    ``forward_model`` is a :class:`~maxtomo.forward.ForwardModel`; ``fit``
    takes measured maps of shape ``(channels, n_masked)`` and stores
    ``eps_r_``, ``sigma_``, ``ep_map_`` and ``trace_``. ``predict`` returns the
    (optionally shimmed) simulated maps at the fitted properties.
    """

    def __init__(self, forward_model=None, alpha=2e-4, weight_mode="sqrt", max_iter=500, eps_r0=21.1, sigma0=0.2, shim_voxel=None, memory=10):
        self.forward_model = forward_model
        self.alpha = alpha
        self.weight_mode = weight_mode
        self.max_iter = max_iter
        self.eps_r0 = eps_r0
        self.sigma0 = sigma0
        self.shim_voxel = shim_voxel
        self.memory = memory

    def _config(self):
        return GmtConfig(
            alpha=self.alpha, weight_mode=self.weight_mode, max_iter=self.max_iter, eps_r0=self.eps_r0,
            sigma0=self.sigma0, mode=self.forward_model.mode, shim_voxel=self.shim_voxel, memory=self.memory,
        )

    def fit(self, X, y=None, reference_currents=None):
        if self.forward_model is None:
            raise ValueError("forward_model is required")
        m = self.forward_model
        cfg = self._config()
        X = np.asarray(X, complex)
        v = None if cfg.shim_voxel is None else masked_index(m.mask, cfg.shim_voxel)
        self.objective_ = GmtObjective(m, X, data_weights(X, cfg.weight_mode), cfg.alpha, cfg.sigma_max, v)
        self.ep_map_, self.trace_ = reconstruct(self.objective_, cfg, reference_currents)
        self.eps_r_ = self.ep_map_.eps_r[m.mask]
        self.sigma_ = self.ep_map_.sigma_e[m.mask]
        return self

    def predict(self, X=None):
        check_is_fitted(self, "ep_map_")
        return self.objective_.simulate(self.eps_r_, self.sigma_)[2]
