"""Reconstruction quality metrics: PNAE, 3-D SSIM and coil-current error."""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _mask_of(truth, mask):
    mask = np.ones(np.shape(truth), bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != np.shape(truth):
        raise ValueError("mask shape does not match the field")
    if not mask.any():
        raise ValueError("mask is empty")
    return mask


def pnae(truth, recon, mask=None):
    """Peak-normalized absolute error ``|y - x| / max_mask(x)``.

    Returns ``(per_voxel, mean)``; the per-voxel field is zero off the mask and
    the mean runs over the mask.
    """
    x = np.asarray(truth, float)
    y = np.asarray(recon, float)
    if x.shape != y.shape:
        raise ValueError("truth and recon shapes differ")
    mask = _mask_of(x, mask)
    peak = x[mask].max()
    if not peak > 0:
        raise ValueError("maximum of truth over the mask must be positive")
    err = np.where(mask, np.abs(y - x) / peak, 0.0)
    return err, float(err[mask].mean())


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    return w / w.sum()


def ssim3d(truth, recon, mask=None, size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Mean structural similarity over masked window centres.

    Local statistics use a normalized ``size^3`` Gaussian window; the dynamic
    range ``L`` is the truth maximum over the mask. Centres whose window
    leaves the volume are excluded (``valid`` correlation).
    """
    x = np.asarray(truth, float)
    y = np.asarray(recon, float)
    if x.shape != y.shape or x.ndim != 3:
        raise ValueError("truth and recon must be 3-D volumes of equal shape")
    mask = _mask_of(x, mask)
    if any(d < size for d in x.shape):
        raise ValueError(f"volume smaller than the {size}^3 SSIM window")
    h = size // 2
    inner = np.zeros_like(mask)
    inner[h:-h, h:-h, h:-h] = True
    centres = mask & inner
    if not centres.any():
        raise ValueError("mask has no voxel where the SSIM window fits")
    dyn = x[mask].max()
    if not dyn > 0:
        raise ValueError("maximum of truth over the mask must be positive")
    c1, c2 = (SSIM_K1 * dyn) ** 2, (SSIM_K2 * dyn) ** 2
    w = gaussian_window(size, sigma)

    def filt(a):
        return correlate(a, w, mode="constant")

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(np.clip(s[centres].mean(), -1.0, 1.0))


def coil_current_error(j_c, j_ref):
    """Relative L2 error ``||j_c - j_ref|| / ||j_ref||``."""
    j_c, j_ref = np.asarray(j_c), np.asarray(j_ref)
    if j_c.shape != j_ref.shape:
        raise ValueError("coil current vectors differ in length")
    ref = np.linalg.norm(j_ref)
    if ref == 0:
        raise ValueError("reference coil currents are zero")
    return float(np.linalg.norm(j_c - j_ref) / ref)


@dataclass
class MetricReport:
    pnae_mean: dict
    pnae_max: dict
    ssim: dict
    compartments: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def evaluate(truth, recon, labels=None):
    """Metric report for two :class:`~maxtomo.grid.EPMap` objects on one grid.

    ``labels`` (integer volume, 0 = background) adds per-compartment mean and
    standard deviation of the reconstruction.
    """
    if truth.eps_r.shape != recon.eps_r.shape:
        raise ValueError("EP maps live on different grids")
    mask = np.asarray(truth.mask, bool)
    report = MetricReport({}, {}, {})
    for name in ("eps_r", "sigma_e"):
        x, y = getattr(truth, name), getattr(recon, name)
        err, mean = pnae(x, y, mask)
        report.pnae_mean[name] = mean
        report.pnae_max[name] = float(err[mask].max())
        try:
            report.ssim[name] = ssim3d(x, y, mask)
        except ValueError:
            report.ssim[name] = None
    if labels is not None:
        for lab in np.unique(labels[mask]):
            sel = mask & (labels == lab)
            report.compartments[str(int(lab))] = {
                name: {"mean": float(getattr(recon, name)[sel].mean()), "std": float(getattr(recon, name)[sel].std())}
                for name in ("eps_r", "sigma_e")
            }
    return report
