"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed even when output capture is on.
"""
import csv
import json
import os
import time

import numpy as np
import pytest

from meshinpaint import fixtures
from meshinpaint.cli import main
from meshinpaint.closest import TriangleIndex
from meshinpaint.hierarchy import build_hierarchy, sum_pool, unpool
from meshinpaint.io import load_mesh, save_mesh
from meshinpaint.losses import face_normals_raw
from meshinpaint.mesh import bbox_diagonal, dilate
from meshinpaint.pipeline import AugmentationConfig, compute_metrics, gen_fake_holes, run_gradcheck
from meshinpaint.preprocess import HoleMask
from meshinpaint.refine import refine


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            status = "INFO" if ok is None else "PASS" if ok else "FAIL"
            print(f"\nACCEPTANCE {number}: {status}  {detail}")
    return emit


def _inpaint(out, *extra):
    t0 = time.perf_counter()
    code = main(["inpaint", "--output", str(out), "--quiet", *extra])
    return code, time.perf_counter() - t0


SPHERE_RUN = ["--input", "fixture:sphere-cap", "--gt", "fixture:sphere-cap", "--arch", "sgcn",
              "--type", "noncad", "--steps", "100", "--seed", "0"]


@pytest.fixture(scope="module")
def sphere_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("sphere")
    a, b = base / "a", base / "b"
    code_a, time_a = _inpaint(a, *SPHERE_RUN)
    code_b, _ = _inpaint(b, *SPHERE_RUN)
    assert code_a == 0 and code_b == 0
    return a, b, time_a


def _trace(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_1_gradients(report):
    t0 = time.perf_counter()
    reps = {arch: run_gradcheck(arch, tolerance=1e-4, h=1e-5) for arch in ("sgcn", "mgcn")}
    elapsed = time.perf_counter() - t0
    ok = all(r.passed and r.max_rel_error < 1e-4 for r in reps.values()) and elapsed < 120
    detail = ", ".join(f"{a} max rel err {r.max_rel_error:.2e}" for a, r in reps.items())
    report(1, ok, f"{detail}; {elapsed:.1f} s (limit 1e-4, 120 s)")
    assert ok


def test_2_hierarchy(report):
    mesh = fixtures.icosphere(4)
    h = build_hierarchy(mesh, 3)
    sizes = [m.n_vertices for m in h.levels]
    min_val = min(int(m.valences().min()) for m in h.levels[1:])
    rng = np.random.default_rng(0)
    worst = 0.0
    for merge in h.merges:
        for _ in range(5):
            f = rng.normal(size=(merge.n_fine, 3))
            g = rng.normal(size=(merge.n_coarse, 3))
            lhs = np.sum(unpool(g, merge) * f)
            rhs = np.sum(g * sum_pool(f, merge))
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1.0))
    ok = sizes == [2562, 1537, 922, 553] and min_val >= 4 and worst < 1e-12
    report(2, ok, f"sizes {sizes}, min coarse valence {min_val}, adjoint error {worst:.1e}")
    assert ok


def test_3_refinement(sphere_runs, report):
    run, _, _ = sphere_runs
    init = load_mesh(run / "m_init.ply")
    cmp_ = load_mesh(run / "m_cmp.ply")
    mask = np.loadtxt(run / "mask.txt", dtype=np.int8)
    metrics = json.loads((run / "metrics.json").read_text())
    fixed = refine(init, init.vertices, init.vertices.copy(), mask, 1.0)
    fixed_err = np.abs(fixed.x_out - init.vertices).max() / bbox_diagonal(init)
    residual = max(metrics["refine_residual"], fixed.residual)
    before, after = metrics["cmp"], metrics["out"]
    dec_all = after["eps_all"] < before["eps_all"]
    dec_hole = after["eps_hole"] < before["eps_hole"]
    ok = residual <= 1e-8 and fixed_err <= 1e-9 and dec_all and dec_hole
    report(3, ok, f"residual {residual:.1e}, fixed-point error {fixed_err:.1e} bbox, "
                  f"eps_all {before['eps_all']:.4f} -> {after['eps_all']:.4f}, "
                  f"eps_hole {before['eps_hole']:.4f} -> {after['eps_hole']:.4f}")
    # informational: the variant that keeps the Laplacian of the network output
    gt = fixtures.sphere_with_cap_hole(4, 4)[1]
    alt = refine(init, init.vertices, cmp_.vertices, mask, 1.0, target="cmp")
    m = compute_metrics(init.with_vertices(alt.x_out), gt, mask)
    report(3, None, f"target=cmp variant: eps_all {m.eps_all:.4f}, eps_hole {m.eps_hole:.4f}")
    assert ok


def test_4_end_to_end(sphere_runs, report):
    run, _, elapsed = sphere_runs
    metrics = json.loads((run / "metrics.json").read_text())
    trace = _trace(run / "loss_trace.csv")
    first, last = float(trace[0]["e_pos_0"]), float(trace[-1]["e_pos_0"])
    flat, out = metrics["init"]["eps_hole"], metrics["out"]["eps_hole"]
    ok = out <= 0.8 * flat and last < 0.5 * first and elapsed < 900 and len(trace) == 100
    report(4, ok, f"eps_hole flat {flat:.4f} -> out {out:.4f} ({100 * (1 - out / flat):.0f}% lower), "
                  f"E_pos {first:.4f} -> {last:.4f}, {elapsed:.0f} s")
    assert ok


def _hole_normal_error(run, gt, name="m_out.ply"):
    mesh = load_mesh(run / name)
    mask = np.loadtxt(run / "mask.txt", dtype=np.int8)
    hole = HoleMask.from_vertex_mask(mesh, mask).face == 0
    n = face_normals_raw(mesh.vertices, mesh.faces)[0][hole]
    centroids = mesh.vertices[mesh.faces[hole]].mean(axis=1)
    _, _, face = TriangleIndex(gt.vertices, gt.faces).query(centroids)
    ng = face_normals_raw(gt.vertices, gt.faces)[0][face]
    return float(np.degrees(np.mean(np.arccos(np.clip(np.sum(n * ng, axis=1), -1.0, 1.0)))))


def test_5_sharp_feature_ablation(tmp_path, report):
    common = ["--input", "fixture:cube-edge", "--arch", "mgcn", "--type", "cad", "--steps", "100", "--seed", "0"]
    gt = fixtures.cube_with_edge_hole()[1]
    errs, raw = {}, {}
    for lam in (4.0, 0.0):
        out = tmp_path / f"lam{lam:g}"
        code, _ = _inpaint(out, *common, "--w-nrm", str(lam), "--w-reg", str(lam))
        assert code == 0
        errs[lam] = _hole_normal_error(out, gt)
        raw[lam] = _hole_normal_error(out, gt, "m_cmp.ply")
    ok = errs[4.0] < errs[0.0]
    report(5, ok, f"mean hole normal error {errs[4.0]:.1f} deg with normal terms, {errs[0.0]:.1f} deg without")
    report(5, None, f"before refinement: {raw[4.0]:.1f} deg with normal terms, {raw[0.0]:.1f} deg without")
    assert ok


def test_6_augmentation_fraction(report):
    mesh = fixtures.fibonacci_sphere(20000)
    real = HoleMask.from_vertex_mask(mesh, np.ones(mesh.n_vertices, dtype=np.int8))
    masks = gen_fake_holes(mesh, real, AugmentationConfig(p=0.014, k=4, mask_sets=40, seed=0))
    frac = float(np.mean([np.mean(m.vertex == 0) for m in masks]))
    ok = abs(frac - 0.60) <= 0.10
    report(6, ok, f"mean masked fraction {100 * frac:.1f}% over {len(masks)} sets on {mesh.n_vertices} vertices")
    assert ok


FANDISK = os.environ.get("MESHINPAINT_FANDISK")
FANDISK_EPS_HOLE = 0.525


@pytest.mark.skipif(not FANDISK, reason="set MESHINPAINT_FANDISK to a fandisk mesh to run this check")
def test_7_fandisk(tmp_path, report):
    gt = load_mesh(FANDISK)
    seed = np.zeros(gt.n_vertices, dtype=bool)
    seed[0] = True
    holed, _ = fixtures.remove_vertex_set(gt, dilate(gt, seed, 4))
    save_mesh(holed, tmp_path / "holed.obj")
    out = tmp_path / "run"
    code, _ = _inpaint(out, "--input", str(tmp_path / "holed.obj"), "--gt", FANDISK, "--arch", "mgcn",
                       "--type", "cad", "--name", "fandisk", "--seed", "0")
    assert code == 0
    m = json.loads((out / "metrics.json").read_text())
    ratio = m["out"]["eps_hole"] / FANDISK_EPS_HOLE
    ok = 0.2 <= ratio <= 5.0 and m["out"]["eps_hole"] < m["init"]["eps_hole"]
    report(7, ok, f"eps_hole {m['out']['eps_hole']:.4f} (reference {FANDISK_EPS_HOLE}, ratio {ratio:.2f}), "
                  f"flat fill {m['init']['eps_hole']:.4f}")
    assert ok


def test_7_reported_when_fandisk_missing(report):
    if FANDISK:
        pytest.skip("fandisk supplied; the full check runs instead")
    report(7, None, "fandisk mesh not supplied; criteria 1-6 constitute acceptance")


def test_8_determinism(sphere_runs, report):
    a, b, _ = sphere_runs
    names = ["m_init.ply", "m_smooth.ply", "m_cmp.ply", "m_out.ply", "mask.txt", "displacement.txt",
             "loss_trace.csv", "checkpoint.bin", "metrics.json"]
    differ = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    ok = not differ
    report(8, ok, "all outputs byte-identical" if ok else f"differing files: {differ}")
    assert ok
