"""Command-line interface.

Exit codes: 0 success, 1 usage or input error, 2 numeric or validation
failure. Results go to stdout (JSON, or a bare number for ``nmae``);
diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .fit import FitConfig, NonFiniteLossError, fit
from .geometry import DEFAULT_CUTOFF, Molecule, random_rotation
from .io import (
    FormatError,
    mixture_molecule,
    parse_chgcar,
    parse_xyz,
    read_mixture,
    write_chgcar,
    write_mixture,
)
from .mixture import (
    DEFAULT_PRUNE,
    DensityGrid,
    GridMismatchError,
    GridSpec,
    eval_point,
    integrate,
    nmae,
    normalize,
    rasterize,
)
from .network import NetworkConfig, forward, init_params
from .tensors import check_rotation

THREADS_ENV = "FLOATORB_THREADS"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("floatorb")


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError(f"{THREADS_ENV} must be >= 1")
        return n
    return os.cpu_count() or 1


def _read(path: str) -> str:
    try:
        if path == "-":
            return sys.stdin.read()
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=1) + "\n")


def _triple(text: str, kind):
    parts = text.replace(",", " ").split()
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 values, got {text!r}")
    try:
        return tuple(kind(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad value in {text!r}") from None


def _shape(text):
    return _triple(text, int)


def _box(text):
    return _triple(text, float)


def _positive(kind):
    def conv(text):
        try:
            x = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
        if not x > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return x

    return conv


def _network_config(args) -> NetworkConfig:
    return NetworkConfig(
        m_e=args.m_e,
        cutoff=args.cutoff,
        symmetry_breaking=not args.no_symmetry_breaking,
        debias=not args.no_debias,
        floating=not args.no_floating,
        raw_projection=args.raw_projection,
    )


# --- grid selection ----------------------------------------------------------


def _grid_for(args, mol: Molecule | None, means: np.ndarray):
    """Grid spec plus the translation applied to the mixture and atoms."""
    if args.like:
        like_mol, like = parse_chgcar(_read(args.like))
        return like.spec, np.zeros(3), like_mol
    pts = mol.positions if mol is not None else means
    if args.box is not None:
        box = np.array(args.box)
    else:
        if len(pts) == 0:
            raise UsageError("empty mixture without atoms: give --box or --like")
        box = np.ptp(pts, axis=0) + 2.0 * args.margin
    if args.shape is not None:
        shape = args.shape
    else:
        shape = tuple(int(n) for n in np.maximum(np.ceil(box / args.spacing), 1))
    spec = GridSpec(np.diag(box), shape)
    shift = np.zeros(3)
    if not args.no_center and len(pts):
        shift = box / 2.0 - 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    return spec, shift, None


def _add_grid_options(p):
    g = p.add_argument_group("grid (default: atoms' bounding box plus margin, centered)")
    g.add_argument("--like", metavar="CHGCAR", help="reuse the grid and atoms of this file")
    g.add_argument("--box", type=_box, metavar="L[,L,L]", help="orthorhombic box edge(s), A")
    g.add_argument("--shape", type=_shape, metavar="N[,N,N]", help="grid points per axis")
    g.add_argument("--spacing", type=_positive(float), default=0.25, help="A (default 0.25)")
    g.add_argument("--margin", type=float, default=4.0, help="A around the atoms (default 4.0)")
    g.add_argument("--no-center", action="store_true", help="do not translate into the box")


# --- commands ------------------------------------------------------------------


def cmd_eval(args) -> int:
    mix, header = read_mixture(_read(args.mixture))
    mol = mixture_molecule(header)
    spec, shift, like_mol = _grid_for(args, mol, mix.means)
    mix = mix.translated(shift)
    if like_mol is not None:
        mol = like_mol
    elif mol is not None:
        mol = mol.transformed(translation=shift)
    n_elec = args.n_elec if args.n_elec is not None else header.get("n_elec")
    if args.normalize:
        if n_elec is None:
            raise UsageError("--normalize needs n_elec in the document or --n-elec")
        mix = normalize(mix, spec, n_elec, args.prune, args.threads)
    grid = rasterize(mix, spec, args.prune, args.threads)
    if mol is None:
        mol = Molecule([1], [[0.0, 0.0, 0.0]])
        log.warning("mixture document has no atoms; writing a placeholder H atom")
    _write(args.output, write_chgcar(mol, grid))
    if args.output not in (None, "-"):
        _emit({"shape": list(spec.shape), "integral": integrate(grid), "scale": mix.scale})
    return EXIT_OK


def _check_same_atoms(a: Molecule, b: Molecule) -> None:
    if sorted(a.numbers.tolist()) != sorted(b.numbers.tolist()):
        raise ValidationFailure("XYZ atoms do not match the atoms stored in the CHGCAR")


def cmd_fit(args) -> int:
    mol = parse_xyz(_read(args.xyz))
    ref_mol, ref = parse_chgcar(_read(args.chgcar))
    _check_same_atoms(mol, ref_mol)
    if args.like:
        _, other = parse_chgcar(_read(args.like))
        if not other.spec.same_as(ref.spec):
            raise GridMismatchError("--like grid differs from the reference grid")
    config = FitConfig(
        steps=args.steps,
        lr=args.lr,
        lr_decay=args.lr_decay,
        seed=args.seed,
        m_e=args.m_e,
        clamp_negative=not args.no_clamp,
        denominator=args.denominator,
        prune_threshold=args.prune,
        log_every=args.log_every,
        target_loss=None if args.target_nmae is None else args.target_nmae / 100.0,
    )
    mix, report = fit(mol, ref, config, k_per_atom=args.gaussians, threads=args.threads)
    summary = {k: v for k, v in report.summary().items() if k != "wall_time"}
    summary["history"] = report.history
    _write(args.output, write_mixture(mix, mol.n_valence, mol, meta={"fit": summary}))
    if args.report:
        _write(args.report, "\n".join(report.log_lines()) + "\n")
    log.info("fit finished in %.2f s", report.wall_time)
    if args.output not in (None, "-"):
        _emit({"final_nmae": report.final_nmae, "steps": report.steps, "best_step": report.best_step,
               "gaussians": len(mix)})
    return EXIT_OK


def cmd_nmae(args) -> int:
    ref_mol, ref = parse_chgcar(_read(args.ref))
    _, pred = parse_chgcar(_read(args.pred))
    n_elec = None
    if args.denominator == "nelec":
        n_elec = args.n_elec if args.n_elec is not None else ref_mol.n_valence
    sys.stdout.write(f"{nmae(pred, ref, n_elec):.6f}\n")
    return EXIT_OK


def cmd_forward(args) -> int:
    mol = parse_xyz(_read(args.xyz))
    params = init_params(args.seed, _network_config(args))
    res = forward(mol, params, clamp_negative=not args.no_clamp)
    if res.ties:
        log.warning("canonicalization ties on atoms %s", res.ties)
    meta = {"seed": args.seed, "config": _config_dict(params.config), "ties": res.ties}
    _write(args.output, write_mixture(res.mixture, mol.n_valence, mol, meta=meta))
    return EXIT_OK


def _config_dict(cfg: NetworkConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def _load_rotation(path: str) -> np.ndarray:
    try:
        R = np.loadtxt(path, ndmin=2)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return check_rotation(R)


def _mixture_deviation(a, b, R, t=np.zeros(3)) -> dict:
    scale = np.maximum(np.abs(a.weights), 1e-300)
    cov = np.einsum("ij,gjk,lk->gil", R, a.covariances, R)
    return {
        "weights": float(np.max(np.abs(b.weights - a.weights) / scale, initial=0.0)),
        "means": float(np.max(np.abs(b.means - (a.means @ R.T + t)), initial=0.0)),
        "covariances": float(np.max(np.abs(b.covariances - cov), initial=0.0)),
    }


def run_checks(mol: Molecule, params, n_rot: int, rng, tol: float, extra=()):
    """Property battery: Gaussian invariance, rotation, translation, reflection."""
    checks = []
    base = forward(mol, params)
    skipped = []
    if params.config.symmetry_breaking and base.ties:
        skipped.append({"name": "symmetry-breaking frames", "status": "tie-skip",
                        "atoms": base.ties})
        params = replace(params, config=replace(params.config, symmetry_breaking=False))
        base = forward(mol, params)
    m0 = base.mixture

    def record(name, dev):
        worst = max(dev.values()) if isinstance(dev, dict) else dev
        checks.append({"name": name, "max_deviation": worst, "tolerance": tol,
                       "detail": dev, "status": "pass" if worst <= tol else "fail"})

    rots = list(extra) + [random_rotation(rng) for _ in range(n_rot)]
    # Gaussian density invariance under joint rotation of point and mixture
    pts = m0.means[rng.integers(0, max(len(m0), 1), 16)] + rng.normal(0, 0.7, (16, 3)) \
        if len(m0) else rng.normal(0, 1, (16, 3))
    rho = eval_point(m0.replace(clamp_negative=False), pts)
    worst = 0.0
    for R in rots:
        rho_r = eval_point(m0.replace(clamp_negative=False).rotated(R), pts @ R.T)
        worst = max(worst, float(np.max(np.abs(rho_r - rho) / np.maximum(np.abs(rho), 1e-300))))
    record("gaussian_invariance", worst)

    worst = {}
    for R in rots:
        d = _mixture_deviation(m0, forward(mol.transformed(R), params).mixture, R)
        worst = {k: max(worst.get(k, 0.0), v) for k, v in d.items()}
    record("rotation", worst)

    t = rng.normal(0, 3.0, 3)
    record("translation", _mixture_deviation(m0, forward(mol.transformed(None, t), params).mixture,
                                             np.eye(3), t))
    P = rots[0] @ np.diag([1.0, 1.0, -1.0]) if rots else np.diag([1.0, 1.0, -1.0])
    mirrored = Molecule(mol.numbers, mol.positions @ P.T)
    mres = forward(mirrored, params)
    if params.config.symmetry_breaking and mres.ties:
        skipped.append({"name": "reflection", "status": "tie-skip", "atoms": mres.ties})
    else:
        record("reflection", _mixture_deviation(m0, mres.mixture, P))
    return checks, skipped


def cmd_check(args) -> int:
    mol = parse_xyz(_read(args.xyz))
    extra = [_load_rotation(args.rotation)] if args.rotation else []
    params = init_params(args.seed, _network_config(args))
    rng = np.random.default_rng(args.seed)
    checks, skipped = run_checks(mol, params, args.rotations, rng, args.tol, extra)
    ok = all(c["status"] == "pass" for c in checks)
    _emit({"ok": ok, "checks": checks, "skipped": skipped})
    for s in skipped:
        log.warning("%s skipped: canonicalization tie on atoms %s", s["name"], s["atoms"])
    return EXIT_OK if ok else EXIT_NUMERIC


# --- parser ------------------------------------------------------------------


def _add_network_options(p):
    p.add_argument("--seed", type=int, default=0, help="parameter seed (default 0)")
    p.add_argument("--m-e", type=int, default=4, help="Gaussians per valence electron (default 4)")
    p.add_argument("--cutoff", type=_positive(float), default=DEFAULT_CUTOFF,
                   help=f"neighbor cutoff, A (default {DEFAULT_CUTOFF})")
    p.add_argument("--no-symmetry-breaking", action="store_true")
    p.add_argument("--no-debias", action="store_true")
    p.add_argument("--no-floating", action="store_true", help="pin all means to their atoms")
    p.add_argument("--raw-projection", action="store_true",
                   help="debias with the raw projection (v.u)u instead of (v/|v|.u)u")
    p.add_argument("--no-clamp", action="store_true", help="do not clamp negative density")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floatorb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=_positive(int), default=None,
                        help=f"worker threads (default ${THREADS_ENV} or all cores)")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    # also accepted after the subcommand; SUPPRESS keeps the global value otherwise
    common.add_argument("--threads", type=_positive(int), default=argparse.SUPPRESS,
                        help=argparse.SUPPRESS)

    p = sub.add_parser("eval", parents=[common], help="rasterize a mixture document to a CHGCAR")
    p.add_argument("mixture")
    p.add_argument("-o", "--output", help="CHGCAR path (default stdout)")
    p.add_argument("--normalize", action="store_true", help="rescale to n_elec on this grid")
    p.add_argument("--n-elec", type=_positive(float))
    p.add_argument("--prune", type=float, default=DEFAULT_PRUNE,
                   help=f"Mahalanobis^2 pruning threshold (default {DEFAULT_PRUNE:g})")
    _add_grid_options(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit", parents=[common], help="fit a free mixture to a reference CHGCAR")
    p.add_argument("xyz")
    p.add_argument("chgcar")
    p.add_argument("-o", "--output", help="mixture document path (default stdout)")
    p.add_argument("--steps", type=int, default=FitConfig.steps)
    p.add_argument("--lr", type=_positive(float), default=FitConfig.lr)
    p.add_argument("--lr-decay", type=_positive(float), default=1.0, help="per-step factor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m-e", type=int, default=FitConfig.m_e)
    p.add_argument("--gaussians", type=int, help="total count, split by valence electrons")
    p.add_argument("--no-clamp", action="store_true")
    p.add_argument("--denominator", choices=("grid", "nelec"), default="nelec")
    p.add_argument("--prune", type=float, default=DEFAULT_PRUNE)
    p.add_argument("--log-every", type=_positive(int), default=100)
    p.add_argument("--target-nmae", type=_positive(float), help="stop once reached (percent)")
    p.add_argument("--report", help="write the loss log here")
    p.add_argument("--like", metavar="CHGCAR", help="require this grid to match the reference")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("nmae", parents=[common], help="NMAE (percent) between two CHGCAR grids")
    p.add_argument("pred")
    p.add_argument("ref")
    p.add_argument("--denominator", choices=("grid", "nelec"), default="grid")
    p.add_argument("--n-elec", type=_positive(float), help="default: valence count of ref atoms")
    p.set_defaults(func=cmd_nmae)

    p = sub.add_parser("forward", parents=[common], help="predict a mixture with the seeded network")
    p.add_argument("xyz")
    p.add_argument("-o", "--output", help="mixture document path (default stdout)")
    _add_network_options(p)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("check", parents=[common], help="run the equivariance property battery")
    p.add_argument("xyz")
    _add_network_options(p)
    p.add_argument("--rotations", type=int, default=5, help="random rotations (default 5)")
    p.add_argument("--rotation", metavar="FILE", help="extra 3x3 rotation matrix to test")
    p.add_argument("--tol", type=_positive(float), default=1e-8)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.threads is None:
            args.threads = default_threads()
        return args.func(args)
    except (UsageError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationFailure, GridMismatchError, NonFiniteLossError, ValueError,
            FloatingPointError, ZeroDivisionError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
