"""Command-line pipeline: phantom -> forward -> reconstruct -> evaluate.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

import argparse
import json
import logging
import sys

import numpy as np

from .calibration import calibrate, cross_calibration_scale
from .checks import gradient_check
from .exceptions import SolverError
from .forward import B1Set, add_peak_snr_noise
from .grid import complex_permittivity
from .inverse import build_objective, data_weights, masked_index, reconstruct, shim
from .io import (
    RunConfig,
    b1set_to_volume,
    epmap_to_volume,
    read_volume,
    volume_to_b1set,
    volume_to_epmap,
    write_volume,
)
from .metrics import evaluate
from .pipeline import Setup, gmt_from_config, phantom_from_config

logger = logging.getLogger("maxtomo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _voxel(text):
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("voxel must be i,j,k") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("voxel must be i,j,k")
    return parts


def _load_config(path):
    return RunConfig() if path is None else RunConfig.load(path)


def _mask_from(path):
    return volume_to_epmap(read_volume(path)).mask


# subcommands


def cmd_phantom(args):
    cfg = _load_config(args.config)
    ep = phantom_from_config(cfg)
    write_volume(args.output, epmap_to_volume(ep))
    print(f"wrote {args.output}: {ep.n_masked} masked voxels")


def cmd_forward(args):
    cfg = _load_config(args.config)
    ep = volume_to_epmap(read_volume(args.epmap))
    setup = Setup(cfg, ep.grid, ep.mask)
    model = setup.model(args.mode)
    fwd = model.simulate(complex_permittivity(ep, setup.omega))
    b1 = fwd.b1
    if args.shim_voxel is not None:
        b1 = shim(b1, masked_index(ep.mask, args.shim_voxel))
    data = B1Set.from_masked(ep.grid, ep.mask, b1)
    snr = cfg.noise.snr if args.noise_snr is None else args.noise_snr
    seed = cfg.noise.seed if args.seed is None else args.seed
    if np.isfinite(snr):
        data = add_peak_snr_noise(data, snr, seed, ep.mask)
    write_volume(args.output, b1set_to_volume(data, ep.mask, {"mode": args.mode}))
    if args.currents is not None and fwd.j_c[0] is not None:
        with open(args.currents, "w", encoding="utf-8") as fh:
            json.dump({str(ch): [[c.real, c.imag] for c in jc] for ch, jc in zip(model.channels, fwd.j_c)}, fh)
    print(f"wrote {args.output}: {data.n_channels} channels")


def _read_currents(path):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return [np.array([complex(re, im) for re, im in raw[k]]) for k in sorted(raw, key=int)]


def cmd_reconstruct(args):
    cfg = _load_config(args.config)
    mask = _mask_from(args.mask_from)
    b1 = volume_to_b1set(read_volume(args.b1set))
    gmt = gmt_from_config(cfg, max_iter=args.max_iter, mode=args.mode, alpha=args.alpha)
    setup = Setup(cfg, b1.grid, mask)
    incident = None
    if gmt.mode == "vie":
        incident = setup.incident(setup.uniform_ep(gmt.eps_r0, gmt.sigma0))
    obj = build_objective(setup.grid, mask, setup.omega, b1.masked(mask), gmt, setup.coil, incident, setup.solver, setup.coupling)
    ref = None if args.reference_currents is None else _read_currents(args.reference_currents)
    ep, trace = reconstruct(obj, gmt, ref)
    write_volume(args.output, epmap_to_volume(ep))
    trace_path = args.trace or cfg.outputs.trace
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write(trace.to_tsv())
    print(f"wrote {args.output} and {trace_path}: {len(trace) - 1} iterations, best f = {min(trace.f):.6e}")


def cmd_calibrate(args):
    cfg = _load_config(args.config)
    meas = volume_to_b1set(read_volume(args.measured))
    sim = volume_to_b1set(read_volume(args.simulated))
    if meas.data.shape != sim.data.shape:
        raise ValueError("measured and simulated sets differ in shape")
    mask = np.ones(meas.grid.dims, bool) if args.mask_from is None else _mask_from(args.mask_from)
    m = meas.masked(mask)
    result = calibrate(m, sim.masked(mask), data_weights(m, cfg.calibration.weight_mode), cfg.calibration.max_iter)
    q = result.q
    v_t = args.v_target if args.v_target is not None else cfg.calibration.v_target_v
    v_r = args.v_ref if args.v_ref is not None else cfg.calibration.v_ref_v
    if v_t is not None and v_r is not None:
        q = cross_calibration_scale(q, v_t, v_r)
    with open(args.output, "w", encoding="utf-8") as fh:
        json.dump({str(l): [float(c.real), float(c.imag)] for l, c in enumerate(q)}, fh, indent=1)
    print(f"wrote {args.output}: residual {result.residual:.3e} after {result.iterations} iterations")


def cmd_evaluate(args):
    truth = volume_to_epmap(read_volume(args.truth))
    recon = volume_to_epmap(read_volume(args.recon))
    text = json.dumps(evaluate(truth, recon).to_dict(), indent=1, sort_keys=True)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)


def _pgm(path, image):
    with open(path, "wb") as fh:
        h, w = image.shape
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(image.astype(">u2").tobytes())


def cmd_export_slices(args):
    vol = read_volume(args.volume)
    axis = "xyz".index(args.axis)
    n = vol.dims[axis]
    if not 0 <= args.index < n:
        raise ValueError(f"slice index {args.index} outside [0, {n})")
    sidecar = {"source": args.volume, "kind": vol.kind, "axis": args.axis, "index": args.index, "images": []}
    for c in range(vol.data.shape[0]):
        plane = np.take(vol.data[c], args.index, axis=axis)
        values = np.abs(plane) if np.iscomplexobj(plane) else plane
        lo, hi = float(values.min()), float(values.max())
        scale = 65535.0 / (hi - lo) if hi > lo else 0.0
        # rows: second in-plane axis, columns: first
        img = np.rint((values - lo) * scale).T
        path = f"{args.prefix}_c{c}.pgm"
        _pgm(path, img)
        sidecar["images"].append({
            "file": path, "channel": c, "quantity": "magnitude" if np.iscomplexobj(plane) else "value",
            "min": lo, "max": hi, "levels": 65535,
        })
    with open(f"{args.prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)
    print(f"wrote {len(sidecar['images'])} slice image(s) with prefix {args.prefix}")


def cmd_gradcheck(args):
    worst = 0.0
    for mode in ("vie", "vsie") if args.mode == "both" else (args.mode,):
        r = gradient_check(mode, args.shim, size=args.size, rel_step=args.step)
        worst = max(worst, r.max_rel_error)
        print(f"{mode}{' shim' if args.shim else ''}: f_d={r.f_d:.6e} max rel error eps_r={r.max_rel_error_eps_r:.3e} sigma={r.max_rel_error_sigma:.3e}")
    print(f"max relative error {worst:.3e}")
    return 0 if worst < args.threshold else 2


def build_parser():
    p = _Parser(prog="maxtomo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="voxelize the configured phantom into an EP map")
    s.add_argument("--config", required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("forward", help="simulate B1+ maps for an EP map")
    s.add_argument("epmap")
    s.add_argument("--config")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--mode", choices=("vie", "vsie"), default="vsie")
    s.add_argument("--noise-snr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--shim-voxel", type=_voxel)
    s.add_argument("--currents", help="write per-channel coil currents (JSON)")
    s.set_defaults(func=cmd_forward)

    s = sub.add_parser("reconstruct", help="GMT reconstruction from B1+ maps")
    s.add_argument("b1set")
    s.add_argument("--config")
    s.add_argument("--mask-from", required=True, help="EP map file whose mask defines the unknowns")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--trace")
    s.add_argument("--mode", choices=("vie", "vsie"))
    s.add_argument("--max-iter", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--reference-currents")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("calibrate", help="per-channel complex weights between two B1+ sets")
    s.add_argument("measured")
    s.add_argument("simulated")
    s.add_argument("--config")
    s.add_argument("--mask-from")
    s.add_argument("--v-target", type=float)
    s.add_argument("--v-ref", type=float)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("evaluate", help="PNAE and SSIM between two EP maps")
    s.add_argument("truth")
    s.add_argument("recon")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-slices", help="write 16-bit PGM slices of a volume")
    s.add_argument("volume")
    s.add_argument("--axis", choices=("x", "y", "z"), default="z")
    s.add_argument("--index", type=int, required=True)
    s.add_argument("--prefix", required=True)
    s.set_defaults(func=cmd_export_slices)

    s = sub.add_parser("gradcheck", help="finite-difference check of the adjoint gradient")
    s.add_argument("--size", type=int, default=4)
    s.add_argument("--mode", choices=("vie", "vsie", "both"), default="both")
    s.add_argument("--shim", action="store_true")
    s.add_argument("--step", type=float, default=1e-4)
    s.add_argument("--threshold", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"maxtomo: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except SolverError as exc:
        print(f"maxtomo: numerical failure: {exc} (relative residual {exc.residual:.3e})", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError, OSError) as exc:
        print(f"maxtomo: {exc}", file=sys.stderr)
        return 1
    return 0 if code is None else code


if __name__ == "__main__":
    sys.exit(main())
