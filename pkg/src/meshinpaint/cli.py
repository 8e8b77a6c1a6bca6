"""Command-line interface: ``meshinpaint {preprocess,inpaint,refine,eval,gradcheck}``.

Settings come from built-in defaults, then an optional INI file
(``--config``), then command-line flags. The merged configuration is written
as ``config.ini`` next to the outputs, so a run can be repeated with
``--config out/config.ini``.

Exit codes: 0 success, 1 failed gradient check or processing error,
2 usage or configuration error, 3 training aborted on a non-finite value.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import fixtures, gcn
from .config import RunConfig
from .errors import ConfigError, MeshInpaintError, NumericError
from .io import load_mesh, save_mesh
from .mesh import Mesh
from .pipeline import (
    build_problem,
    compute_metrics,
    evaluate,
    gen_fake_holes,
    run_gradcheck,
    train,
    write_trace,
)
from .preprocess import preprocess
from .refine import refine

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3

# name -> callable returning (input mesh, ground truth or None)
FIXTURES = {
    "sphere-cap": lambda: fixtures.sphere_with_cap_hole(4, 4),
    "cube-edge": lambda: fixtures.cube_with_edge_hole(),
    "sphere": lambda: (fixtures.icosphere(3), fixtures.icosphere(3)),
}

# flag dest -> (section, key)
FLAG_KEYS = {
    "input": ("run", "input"),
    "gt": ("run", "gt"),
    "output": ("run", "output"),
    "type": ("run", "mesh_type"),
    "arch": ("run", "arch"),
    "seed": ("run", "seed"),
    "name": ("run", "name"),
    "steps": ("train", "steps"),
    "mu": ("refine", "mu"),
    "refine_target": ("refine", "target"),
    "p": ("augment", "p"),
    "k": ("augment", "k"),
    "mask_sets": ("augment", "mask_sets"),
    "width": ("model", "width"),
    "levels": ("model", "levels"),
    "w_nrm": ("train", "w_nrm"),
    "w_reg": ("train", "w_reg"),
    "sigma_s": ("bnf", "sigma_s"),
    "sigma_c": ("bnf", "sigma_c"),
    "remesh_iterations": ("remesh", "iterations"),
    "smooth_steps": ("smooth", "steps"),
    "vertex_distance": ("metrics", "vertex_distance"),
}


def _fixture(source: str):
    name = source.split(":", 1)[1]
    if name not in FIXTURES:
        raise ConfigError(f"unknown fixture {name!r}; available: {', '.join(sorted(FIXTURES))}")
    return FIXTURES[name]()


def read_input(source: str) -> Mesh:
    return _fixture(source)[0] if source.startswith("fixture:") else load_mesh(source)


def read_gt(source: str) -> Mesh:
    if source.startswith("fixture:"):
        gt = _fixture(source)[1]
        if gt is None:
            raise ConfigError(f"{source} has no ground truth")
        return gt
    return load_mesh(source)


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for dest, (sec, key) in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg.set(sec, key, value)
    return cfg


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")


def _write_mask(path: Path, mask) -> None:
    path.write_text("".join(f"{int(v)}\n" for v in mask))


def _read_mask(path) -> np.ndarray:
    try:
        return np.loadtxt(path, dtype=np.int8, ndmin=1)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read vertex mask {path}: {exc}") from None


def _prepare(cfg: RunConfig, out: Path):
    mesh = read_input(cfg["run"]["input"])
    pre = preprocess(mesh, cfg.preprocess())
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(pre.init_mesh, out / "m_init.ply")
    save_mesh(pre.smooth_mesh, out / "m_smooth.ply")
    _write_mask(out / "mask.txt", pre.real_mask.vertex)
    np.savetxt(out / "displacement.txt", pre.displacement, fmt="%.17g")
    return pre


def _summary(pre) -> str:
    m = pre.init_mesh
    frac = 1.0 - float(np.mean(pre.real_mask.vertex))
    holes = f"{pre.n_holes} hole" + ("" if pre.n_holes == 1 else "s")
    return (f"{holes}; initial mesh {m.n_vertices} vertices, {m.n_faces} faces; "
            f"masked fraction {frac:.4f}")


# ----------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    cfg = build_config(args)
    cfg.validate(need_input=True)
    out = Path(cfg["run"]["output"])
    pre = _prepare(cfg, out)
    cfg.write(out / "config.ini")
    print(_summary(pre))
    return EXIT_OK


def cmd_inpaint(args) -> int:
    cfg = build_config(args)
    cfg.validate(need_input=True)
    run = cfg["run"]
    out = Path(run["output"])
    t0 = time.perf_counter()
    pre = _prepare(cfg, out)
    cfg.write(out / "config.ini")
    print(_summary(pre))

    problem = build_problem(pre, run["arch"], cfg["model"]["levels"])
    masks = gen_fake_holes(pre.init_mesh, pre.real_mask, cfg.augmentation())
    model = gcn.GcnModel(cfg.model())
    tcfg = cfg.train()
    rows = []

    def progress(row):
        rows.append(row)
        if not args.quiet and (row.step == 1 or row.step % 10 == 0 or row.step == tcfg.steps):
            pos = " ".join(f"{v:.5f}" for v in row.pos)
            print(f"step {row.step:4d}  lr {row.lr:.4g}  e_pos {pos}  e_nrm {row.nrm:.5f}  "
                  f"e_reg {row.reg:.5f}  total {row.total:.5f}")

    try:
        train(problem, model, masks, tcfg, progress)
    except NumericError as exc:
        dump = out / "diagnostic"
        dump.mkdir(exist_ok=True)
        if rows:
            write_trace(rows, dump / "loss_trace.csv")
        gcn.save_checkpoint(model, dump / "checkpoint.bin", {"failed_step": exc.step})
        _write_json(dump / "error.json", {"message": str(exc), "step": exc.step})
        print(f"error: training aborted at step {exc.step}: {exc}; diagnostics in {dump}",
              file=sys.stderr)
        return EXIT_ABORT
    write_trace(rows, out / "loss_trace.csv")
    gcn.save_checkpoint(model, out / "checkpoint.bin", {"steps": tcfg.steps})

    m_cmp = evaluate(model, problem)
    save_mesh(m_cmp, out / "m_cmp.ply")
    mu = cfg.mu()
    r = cfg["refine"]
    res = refine(pre.init_mesh, pre.init_mesh.vertices, m_cmp.vertices, pre.real_mask.vertex, mu,
                 r["tolerance"], r["max_residual"], r["method"], r["target"])
    m_out = pre.init_mesh.with_vertices(res.x_out)
    save_mesh(m_out, out / "m_out.ply")
    print(f"refinement: mu {mu:g}, relative residual {res.residual:.3e}")

    if run["gt"]:
        gt = read_gt(run["gt"])
        vd = bool(cfg["metrics"]["vertex_distance"])
        report = {}
        for label, mesh in (("init", pre.init_mesh), ("cmp", m_cmp), ("out", m_out)):
            report[label] = compute_metrics(mesh, gt, pre.real_mask.vertex, vd).as_dict()
        report["refine_residual"] = res.residual
        _write_json(out / "metrics.json", report)
        for label in ("init", "cmp", "out"):
            m = report[label]
            hole = "n/a" if m["eps_hole"] is None else f"{m['eps_hole']:.4f}"
            print(f"{label:5s} eps_all {m['eps_all']:.4f}  eps_hole {hole}  (x1e-3)")
    print(f"done in {time.perf_counter() - t0:.1f} s; outputs in {out}")
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = build_config(args)
    cfg.validate()
    out = Path(cfg["run"]["output"])
    src = Path(args.run_dir) if args.run_dir else out
    init = load_mesh(src / "m_init.ply")
    cmp_ = load_mesh(src / "m_cmp.ply")
    mask = _read_mask(args.mask or src / "mask.txt")
    if cmp_.n_vertices != init.n_vertices or len(mask) != init.n_vertices:
        raise ConfigError("m_init.ply, m_cmp.ply and the mask must have matching vertex counts")
    mu = cfg.mu()
    r = cfg["refine"]
    res = refine(init, init.vertices, cmp_.vertices, mask, mu, r["tolerance"], r["max_residual"],
                 r["method"], r["target"])
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(init.with_vertices(res.x_out), out / "m_out.ply")
    print(f"refinement: mu {mu:g}, relative residual {res.residual:.3e}, {res.iterations} iterations")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = build_config(args)
    if not cfg["run"]["gt"]:
        raise ConfigError("eval needs a ground-truth mesh (--gt)")
    cfg.validate(need_input=True)
    mesh = read_input(cfg["run"]["input"])
    gt = read_gt(cfg["run"]["gt"])
    mask = _read_mask(args.mask) if args.mask else None
    if mask is not None and len(mask) != mesh.n_vertices:
        raise ConfigError(f"mask has {len(mask)} entries for {mesh.n_vertices} vertices")
    report = compute_metrics(mesh, gt, mask, bool(cfg["metrics"]["vertex_distance"]))
    out = Path(cfg["run"]["output"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", report.as_dict())
    save_mesh(mesh, out / "error.ply", scalars=report.signed_distance)
    hole = "n/a" if report.eps_hole is None else f"{report.eps_hole:.4f}"
    print(f"eps_all {report.eps_all:.4f}  eps_hole {hole}  (x1e-3)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    arch = args.arch or "sgcn"
    t0 = time.perf_counter()
    try:
        rep = run_gradcheck(arch, width=args.width or 8, seed=args.seed or 0, tolerance=args.tolerance,
                            corrupt=args.corrupt)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    status = "PASS" if rep.passed else "FAIL"
    print(f"{status} {arch}: max relative error {rep.max_rel_error:.3e} at {rep.worst_parameter} "
          f"(tolerance {rep.tolerance:g}, {rep.n_checked} entries, "
          f"{time.perf_counter() - t0:.1f} s)")
    return EXIT_OK if rep.passed else EXIT_FAIL


# ----------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file; flags override its values")
    p.add_argument("--input", help="mesh file (OBJ/PLY) or fixture:NAME")
    p.add_argument("--gt", help="ground-truth mesh or fixture:NAME")
    p.add_argument("--output", help="output directory")
    p.add_argument("--seed", type=int)


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=("sgcn", "mgcn"))
    p.add_argument("--type", choices=("cad", "noncad", "realscan"), help="mesh type (selects loss weights and mu)")
    p.add_argument("--name", help="mesh name, used to look up a known mu")
    p.add_argument("--steps", type=int)
    p.add_argument("--p", type=float, help="fake-hole seed probability")
    p.add_argument("--k", type=int, help="fake-hole ring radius")
    p.add_argument("--mask-sets", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--w-nrm", type=float, help="override the normal loss weight")
    p.add_argument("--w-reg", type=float, help="override the regularizer weight")
    p.add_argument("--sigma-s", type=float)
    p.add_argument("--sigma-c", type=float)
    p.add_argument("--remesh-iterations", type=int)
    p.add_argument("--smooth-steps", type=int)


def _add_refine(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mu", type=float, help="refinement anchor weight")
    p.add_argument("--refine-target", choices=("mix", "cmp"))


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshinpaint", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="fill holes, remesh, oversmooth")
    _add_common(p)
    _add_model(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("inpaint", help="preprocess, train, predict and refine")
    _add_common(p)
    _add_model(p)
    _add_refine(p)
    p.add_argument("--vertex-distance", action="store_const", const=True,
                   help="also report nearest-vertex metrics")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("refine", help="re-run refinement on an inpaint output directory")
    _add_common(p)
    _add_refine(p)
    p.add_argument("--type", choices=("cad", "noncad", "realscan"))
    p.add_argument("--name")
    p.add_argument("--run-dir", help="directory holding m_init.ply, m_cmp.ply, mask.txt (default: --output)")
    p.add_argument("--mask", help="vertex mask file (default: RUN_DIR/mask.txt)")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="distance metrics against a ground truth")
    _add_common(p)
    p.add_argument("--mask", help="vertex mask file of the evaluated mesh (0 = hole)")
    p.add_argument("--vertex-distance", action="store_const", const=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--arch", choices=("sgcn", "mgcn"))
    p.add_argument("--seed", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--corrupt", nargs="?", const="head.bias", metavar="PARAM",
                   help="perturb one analytic gradient entry to test the checker")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MeshInpaintError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
