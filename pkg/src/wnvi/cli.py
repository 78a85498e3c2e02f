"""Command-line pipeline: generate -> infer -> report, plus mc-study.

Every artifact embeds the config hash and the seeds that produced it; with
a single thread all outputs are bit-reproducible.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, config_hash, dump_config, \
    load_config
from .constitutive import IsoParams, TransIsoParams
from .forward import default_tau, make_bc, make_material_map, \
    sample_observations, solve_ground_truth
from .inference import build_setup, load_checkpoint, save_checkpoint, train
from .mesh import ObservationGrid, build_grid
from .postproc import element_to_node_average, posterior_stats, read_field, \
    render_heatmap, write_field, write_trace_csv
from .residuals import conservation_residual_mc, generate_weight_functions, \
    locate_cells, stress_field_evaluator

MC_STUDY_COUNTS = (10, 50, 100, 500, 1000, 5000)
MC_STUDY_REFERENCE = 10_000


def _threads_default() -> int:
    return int(os.environ.get("WNVI_THREADS", "1"))


def _limit_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=n)
    except ImportError:
        os.environ.setdefault("OMP_NUM_THREADS", str(n))
        return contextlib.nullcontext()


def _meta(cfg: RunConfig, **extra) -> dict:
    meta = {"config": config_hash(cfg), "seed": cfg.seed}
    meta.update(extra)
    return meta


def _material_map(cfg: RunConfig, mesh):
    inclusion = None
    if cfg.inclusion:
        axis = np.asarray(cfg.inclusion_axis, dtype=float)
        axis = tuple(axis / np.linalg.norm(axis))
        inclusion = TransIsoParams(E=cfg.inclusion_E_transverse,
                                   E_a=cfg.inclusion_E_axial, nu=cfg.nu,
                                   G_a=cfg.inclusion_G_axial, a=axis)
    return make_material_map(mesh, IsoParams(cfg.background_E, cfg.nu),
                             inclusion, center=cfg.inclusion_center,
                             radius=cfg.inclusion_radius)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    mesh = build_grid(cfg.truth_n)
    mat = _material_map(cfg, mesh)
    bc = make_bc(mesh, fixed_edges=cfg.fixed_edges,
                 traction_edge=cfg.traction_edge, traction=cfg.traction)
    gt = solve_ground_truth(mesh, mat, bc)
    tau = cfg.tau if cfg.tau > 0 else default_tau(gt, cfg.noise_percent)
    obs = sample_observations(gt, cfg.obs_n, tau, seed=cfg.seed)

    meta = _meta(cfg, tau=f"{tau:.17g}")
    write_field(out / "observations.txt", "point", cfg.obs_n, obs.values, meta)
    write_field(out / "truth_u_nodes.txt", "node", cfg.truth_n, gt.u_nodes,
                meta)
    from .mesh import interpolate_p1
    u_true = interpolate_p1(mesh, gt.u_nodes, obs.points)
    write_field(out / "truth_u_obs.txt", "point", cfg.obs_n, u_true, meta)

    # truth projected onto the inversion mesh for later comparisons
    inv_mesh = build_grid(cfg.inversion_n)
    centroids = inv_mesh.centroids()
    lnE = np.full(inv_mesh.n_elements, np.log(cfg.background_E))
    if cfg.inclusion:
        inside = np.hypot(centroids[:, 0] - cfg.inclusion_center[0],
                          centroids[:, 1] - cfg.inclusion_center[1]) \
            < cfg.inclusion_radius
        lnE[inside] = np.nan      # transversely isotropic: no scalar E
    write_field(out / "truth_lnE_elem.txt", "elem", cfg.inversion_n, lnE, meta)
    fine_stress = gt.element_stress()
    sig = fine_stress[locate_cells(mesh, centroids)]
    write_field(out / "truth_stress_elem.txt", "elem", cfg.inversion_n, sig,
                meta)
    (out / "config_used.txt").write_text(dump_config(cfg), encoding="utf-8")
    print(f"generate: wrote {out} (tau={tau:.6g}, seed={cfg.seed})")
    return 0


def load_observations(cfg: RunConfig, data_dir: Path) -> ObservationGrid:
    kind, n, values, meta = read_field(data_dir / "observations.txt")
    if kind != "point" or n != cfg.obs_n:
        raise ConfigError(f"observations.txt is {kind}/{n}, config expects "
                          f"point/{cfg.obs_n}")
    from .forward import observation_points
    return ObservationGrid(points=observation_points(n), values=values,
                           tau=float(meta["tau"]))


# ---------------------------------------------------------------------------
# infer


def cmd_infer(cfg: RunConfig, data_dir: Path, out: Path,
              checkpoint: Path | None, iters: int | None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    obs = load_observations(cfg, data_dir)
    t0 = time.time()
    last = {"t": t0}

    def progress(t, res):
        now = time.time()
        if now - last["t"] > 10 or t == 0:
            last["t"] = now
            print(f"  iter {t:>7d}  elbo {res.value:>14.4f}  "
                  f"res_cons {res.res_cons:10.3e}  data {res.data_fit:10.3e}",
                  flush=True)

    result = train(cfg, obs, max_iters=iters, progress=progress)
    ckpt = checkpoint or (out / "checkpoint.npz")
    save_checkpoint(ckpt, cfg, result.params, result.lam, result.theta,
                    result.state, result.rng, result.iterations)
    write_trace_csv(out / "trace.csv", result.trace)
    print(f"infer: {result.iterations} iterations in {time.time() - t0:.1f}s "
          f"(converged={result.converged}); checkpoint {ckpt}")
    return 0


# ---------------------------------------------------------------------------
# report


def _load_truth(cfg: RunConfig, data_dir: Path) -> dict:
    truth = {}
    f = data_dir / "truth_lnE_elem.txt"
    if f.exists():
        truth["lnE"] = read_field(f)[2][:, 0]
    f = data_dir / "truth_u_obs.txt"
    if f.exists():
        vals = read_field(f)[2]
        truth["u1"], truth["u2"] = vals[:, 0], vals[:, 1]
    f = data_dir / "truth_stress_elem.txt"
    if f.exists():
        vals = read_field(f)[2]
        truth["s11"], truth["s12"], truth["s22"] = vals.T
    return truth


def cmd_report(cfg: RunConfig, data_dir: Path, checkpoint: Path,
               out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    obs = load_observations(cfg, data_dir)
    setup = build_setup(cfg, obs)
    meta_ckpt, params, lam, theta, _, _ = load_checkpoint(checkpoint)
    truth = _load_truth(cfg, data_dir)
    stats = posterior_stats(setup, params, lam, B=cfg.posterior_samples,
                            seed=cfg.seed + 3, truth=truth)

    meta = _meta(cfg, checkpoint_iteration=meta_ckpt["iteration"],
                 posterior_samples=cfg.posterior_samples)
    kinds = {"lnE": ("elem", cfg.inversion_n), "u1": ("point", cfg.obs_n),
             "u2": ("point", cfg.obs_n), "s11": ("elem", cfg.inversion_n),
             "s12": ("elem", cfg.inversion_n), "s22": ("elem", cfg.inversion_n),
             "lamc_inv": ("elem", cfg.inversion_n)}
    for name, st in stats.items():
        kind, n = kinds[name]
        write_field(out / f"stats_{name}.txt", kind, n, st.as_columns(), meta)

    mesh = setup.mesh
    render_heatmap(stats["lnE"].mean, mesh, out / "mean_lnE.ppm",
                   px=cfg.render_px)
    for c in ("s11", "s12", "s22"):
        render_heatmap(stats[c].mean, mesh, out / f"mean_{c}.ppm",
                       px=cfg.render_px)
    # model-error indicator spans orders of magnitude: render log10
    render_heatmap(np.log10(stats["lamc_inv"].mean), mesh,
                   out / "lamc_inv_log10.ppm", px=cfg.render_px)
    write_field(out / "lamc_inv_node.txt", "node", cfg.inversion_n,
                element_to_node_average(mesh, stats["lamc_inv"].mean), meta)
    # posterior-mean displacement fields at element centroids
    be = setup.displacement.basis(params, mesh.centroids())
    from .fields import dirichlet_mask
    if cfg.displacement_basis == "nn":
        d, _ = dirichlet_mask(mesh.centroids(), cfg.fixed_edges)
    else:
        d = np.ones(mesh.n_elements)
    for comp, b in (("u1", be.b1), ("u2", be.b2)):
        render_heatmap(d * (b.data @ params["mu_z"]), mesh,
                       out / f"mean_{comp}.ppm", px=cfg.render_px)

    summary = _summary(cfg, setup, stats, truth, obs)
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    trace_src = checkpoint.parent / "trace.csv"
    if trace_src.exists() and trace_src.resolve() != (out / "trace.csv").resolve():
        (out / "trace.csv").write_bytes(trace_src.read_bytes())
    print(summary)
    return 0


def inclusion_masks(cfg: RunConfig, mesh, margin: float = 0.0):
    """(inside, far_background) element masks from the configured disk."""
    c = mesh.centroids()
    r = np.hypot(c[:, 0] - cfg.inclusion_center[0],
                 c[:, 1] - cfg.inclusion_center[1])
    return r < cfg.inclusion_radius, r > cfg.inclusion_radius + margin


def _summary(cfg: RunConfig, setup, stats, truth, obs) -> str:
    inside, far = inclusion_masks(cfg, setup.mesh, margin=0.1)
    lam_inv = stats["lamc_inv"].mean
    med_in = float(np.median(lam_inv[inside])) if inside.any() else float("nan")
    med_out = float(np.median(lam_inv[~inside]))
    E_mean = np.exp(stats["lnE"].mean)
    frac_E = float(np.mean(np.abs(E_mean[far] - cfg.background_E)
                           <= 0.2 * cfg.background_E)) if far.any() else 1.0
    lines = [
        f"config_hash = {config_hash(cfg)}",
        f"seed = {cfg.seed}",
        f"lamc_inv_median_inside = {med_in:.6g}",
        f"lamc_inv_median_outside = {med_out:.6g}",
        f"lamc_inv_inside_outside_ratio = {med_in / med_out:.6g}",
        f"background_E_within_20pct = {frac_E:.4f}",
    ]
    if "u1" in truth:
        sd = 1.0 / np.sqrt(obs.tau)
        resid = np.concatenate([stats["u1"].mean - obs.values[:, 0],
                                stats["u2"].mean - obs.values[:, 1]])
        lines.append(f"obs_within_3sigma = "
                     f"{float(np.mean(np.abs(resid) <= 3 * sd)):.4f}")
    if inside.any():
        s_load = np.abs(stats["s22"].mean[inside]).mean()
        s_trans = np.abs(stats["s11"].mean[inside]).mean()
        lines.append(f"inclusion_mean_abs_s22 = {s_load:.6g}")
        lines.append(f"inclusion_mean_abs_s11 = {s_trans:.6g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# mc-study


def cmd_mc_study(cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    mesh = build_grid(cfg.inversion_n)
    bc = make_bc(mesh, fixed_edges=cfg.fixed_edges,
                 traction_edge=cfg.traction_edge, traction=cfg.traction)
    fam = generate_weight_functions(mesh, bc, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    w_idx = rng.choice(fam.size, size=10, replace=False)
    chis = rng.normal(size=(10, 3 * mesh.n_elements))

    noise = {}
    seed_counter = cfg.seed * 1000
    for n_pts in MC_STUDY_COUNTS:
        total = 0.0
        for chi in chis:
            ev = stress_field_evaluator(chi, mesh)
            for i in w_idx:
                w = fam.weight_function(int(i))
                seed_counter += 1
                ref = conservation_residual_mc(ev, w, mesh, bc,
                                               MC_STUDY_REFERENCE,
                                               seed=seed_counter)
                seed_counter += 1
                est = conservation_residual_mc(ev, w, mesh, bc, n_pts,
                                               seed=seed_counter)
                total += (est - ref) ** 2
        noise[n_pts] = total

    lines = ["# mc-study: residual noise vs integration points",
             f"# config={config_hash(cfg)} seed={cfg.seed}",
             f"# reference={MC_STUDY_REFERENCE} points",
             "n_points noise"]
    for n_pts in sorted(noise, reverse=True):
        lines.append(f"{n_pts} {noise[n_pts]:.17g}")
    table = "\n".join(lines) + "\n"
    (out / "mc_study.txt").write_text(table, encoding="utf-8")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wnvi", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="config file path")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--threads", type=int, default=_threads_default(),
                        help="BLAS thread cap (env WNVI_THREADS)")

    g = sub.add_parser("generate", help="solve the ground truth and sample "
                                        "noisy observations")
    common(g)

    i = sub.add_parser("infer", help="run variational training on a data set")
    common(i)
    i.add_argument("--data", required=True, help="directory from `generate`")
    i.add_argument("--checkpoint", default=None, help="checkpoint path")
    i.add_argument("--iters", type=int, default=None,
                   help="override max_iters")

    r = sub.add_parser("report", help="posterior statistics, fields, images")
    common(r)
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoint", required=True)

    m = sub.add_parser("mc-study", help="integration-point noise table")
    common(m)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            import dataclasses
            cfg = dataclasses.replace(cfg, seed=args.seed)
        out = Path(args.out)
        with _limit_threads(args.threads):
            if args.command == "generate":
                return cmd_generate(cfg, out)
            if args.command == "infer":
                return cmd_infer(cfg, Path(args.data), out,
                                 Path(args.checkpoint) if args.checkpoint
                                 else None, args.iters)
            if args.command == "report":
                return cmd_report(cfg, Path(args.data),
                                  Path(args.checkpoint), out)
            if args.command == "mc-study":
                return cmd_mc_study(cfg, out)
        raise AssertionError(args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # diagnostic exit for solver/IO failures
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
