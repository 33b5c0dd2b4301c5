"""Command-line entry points wiring the library into workflows.

Subcommands: train, render, eval, synth, ablate. The training loop follows
the multi-view recipe: pick the pyramid level for the iteration, sample M
distinct views, accumulate their gradients into one Adam step, and run
densification events with the camera-spread gate and cross-ray regions.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import densify as dnz
from . import loss as lossmod
from . import optim, pyramid, sceneio
from .core import (
    GaussianCloud,
    SplatError,
    TrainConfig,
    inverse_sigmoid,
    scene_extent,
    validate_cloud,
)
from .raster import forward_render


# ---------------------------------------------------------------------------
# Model initialization
# ---------------------------------------------------------------------------

def initialize_cloud(dataset: sceneio.Dataset, config: TrainConfig,
                     rng: np.random.Generator) -> GaussianCloud:
    """Random cloud inside the camera rig: positions uniform in a ball of a
    third of the scene extent around the camera centroid, scales from
    nearest-neighbor spacing, gray color, low opacity."""
    dtype = config.np_dtype()
    cams = [c for _, c in dataset.train_views()]
    centers = np.stack([c.center() for c in cams])
    centroid = centers.mean(axis=0)
    extent = scene_extent(cams)
    radius = extent / 3.0

    n = config.init_points
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0)
    positions = centroid[None, :] + direction * r * radius

    if n > 3:
        tree = cKDTree(positions)
        dist, _ = tree.query(positions, k=4)
        nn = np.clip(dist[:, 1:].mean(axis=1), 1e-7, None)
    else:
        nn = np.full(n, 0.1 * radius)
    log_scales = np.log(nn)[:, None].repeat(3, axis=1)

    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    basis = (config.sh_degree + 1) ** 2
    cloud = GaussianCloud(
        positions=positions.astype(dtype),
        rotations=quats.astype(dtype),
        log_scales=log_scales.astype(dtype),
        opacity_logits=np.full(n, float(inverse_sigmoid(config.init_opacity)),
                               dtype=dtype),
        color_coeffs=np.zeros((n, basis, 3), dtype=dtype),
    )
    return cloud


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_heldout(cloud: GaussianCloud, dataset: sceneio.Dataset,
                     sh_degree_active: int, background) -> tuple:
    """Mean PSNR/SSIM over held-out views (renders clamped to [0, 1])."""
    psnrs, ssims = [], []
    for image, camera in dataset.heldout_views():
        rendered, _ = forward_render(cloud, camera, sh_degree_active,
                                     background=background)
        rendered = np.clip(rendered, 0.0, 1.0)
        psnrs.append(lossmod.psnr(rendered, image))
        ssims.append(lossmod.ssim(rendered, image))
    return float(np.mean(psnrs)), float(np.mean(ssims))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def effective_schedule(config: TrainConfig):
    """Apply the multiview/pyramid toggles to the level schedule."""
    if config.pyramid_enabled:
        factors = tuple(config.pyramid_factors)
        views = tuple(config.views_per_iter)
    else:
        factors = (1,)
        views = (config.views_per_iter[-1],)
    if not config.multiview:
        views = tuple(1 for _ in factors)
    return factors, views


def planned_view_renders(config: TrainConfig, dataset_size: int) -> int:
    """Total forward+backward view renders the configuration will execute."""
    factors, views = effective_schedule(config)
    spans = pyramid.build_schedule(config.iterations, factors, views,
                                   config.coarse_iters, dataset_size)
    return sum((end - start) * m for _, m, start, end in spans)


def run_train(dataset: sceneio.Dataset, config: TrainConfig, out_dir,
              quiet: bool = False):
    """Train a cloud on the dataset and write RunArtifacts to out_dir.

    Returns a dict with the final cloud, metrics rows, and file paths.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()

    snapshot = config.to_dict()
    (out / "config.json").write_text(json.dumps(snapshot, indent=1))
    cfg_hash = sceneio.config_hash(snapshot)

    root_rng = np.random.default_rng(config.seed)
    rng_init, rng_sampler, rng_split = root_rng.spawn(3)

    train_views = dataset.train_views()
    cams = [c for _, c in train_views]
    extent = scene_extent(cams)

    cloud = initialize_cloud(dataset, config, rng_init)
    violation = validate_cloud(cloud)
    if violation is not None:
        raise SplatError(f"initial cloud invalid: {violation}")

    factors, views_counts = effective_schedule(config)
    levels = pyramid.build_pyramid(train_views, config.iterations, factors,
                                   views_counts, config.coarse_iters)
    sampler = optim.ViewSampler(len(train_views), rng_sampler)
    adam = optim.AdamState.create(cloud, extent, config)
    state = dnz.DensifyState.create(cloud.count, extent)

    metrics_rows = []
    event_lines = []
    log_lines = [f"schedule: {[(lv.factor, lv.views_per_iter, lv.start_iter, lv.end_iter) for lv in levels]}"]

    def emit(msg):
        log_lines.append(msg)
        if not quiet:
            print(msg)

    emit(log_lines[0])

    for it in range(config.iterations):
        level = pyramid.level_for_iteration(levels, it)
        m = min(level.views_per_iter, len(train_views))
        idxs = optim.sample_views(sampler, m)
        batch = [(level.images[i], level.cameras[i]) for i in idxs]
        sh_active = min(it // config.sh_ramp_interval, config.sh_degree)

        buffer, mean_loss, loss_maps = optim.accumulate_multiview(
            cloud, batch, config.lambda_dssim, sh_degree_active=sh_active,
            background=config.background, threads=config.threads,
            mode=config.gradient_mode)
        state.absorb(buffer)
        optim.adam_step(cloud, buffer, adam)

        densify_due = (config.densify_from <= it < config.densify_until
                       and it > 0 and it % config.densify_interval == 0)
        if densify_due:
            beta = config.densify_grad_threshold
            r_mean = float("nan")
            if config.adaptive_beta and m >= 2:
                normed = dnz.normalize_camera_translations(
                    np.stack([c.translation for _, c in batch]))
                r_vals = dnz.pairwise_distances(normed)
                r_mean = float(r_vals.mean())
                beta_hat = dnz.adaptive_threshold(
                    r_vals, beta, config.tau, config.distance_aggregate)
            else:
                beta_hat = beta

            regions = []
            if config.cross_ray and m >= 2:
                quads = []
                for (image, camera), lmap in zip(batch, loss_maps):
                    h = min(config.loss_window[0], lmap.shape[0])
                    w = min(config.loss_window[1], lmap.shape[1])
                    rect = dnz.select_loss_window(lmap, h, w)
                    quads.append(dnz.rays_from_window(camera, rect))
                regions = dnz.cross_ray_regions(
                    quads, config.ray_epsilon * extent, extent)
            state.regions = regions

            plan = dnz.densify_and_prune(
                cloud, state, beta_hat, regions, rng_split,
                percent_dense=config.percent_dense,
                split_factor=config.split_scale_factor,
                prune_opacity=config.prune_opacity,
                prune_screen_frac=config.prune_screen_frac,
                region_boost=config.region_boost)
            adam.resize(plan.keep_indices, plan.n_new)
            event_lines.append(
                f"iter={it} beta_hat={beta_hat:.3e} r_mean={r_mean:.4f} "
                f"regions={len(regions)} cloned={plan.n_cloned} "
                f"split={plan.n_split} pruned={plan.n_pruned} n={cloud.count}")

        if (config.opacity_reset_interval > 0 and it > 0
                and it % config.opacity_reset_interval == 0
                and it < config.densify_until):
            dnz.reset_opacity(cloud)
            adam.m["opacity_logits"].fill(0.0)
            adam.v["opacity_logits"].fill(0.0)

        is_last = it == config.iterations - 1
        if (config.eval_interval > 0 and (it + 1) % config.eval_interval == 0) or is_last:
            val_psnr, val_ssim = evaluate_heldout(
                cloud, dataset, sh_active, config.background)
            metrics_rows.append({
                "iter": it + 1,
                "level": level.factor,
                "views_per_iter": m,
                "n_gaussians": cloud.count,
                "train_loss": f"{mean_loss:.6f}",
                "val_psnr": f"{val_psnr:.4f}",
                "val_ssim": f"{val_ssim:.6f}",
                "wall_seconds": f"{time.perf_counter() - t_start:.2f}",
            })
            emit(f"iter {it + 1}: loss={mean_loss:.5f} n={cloud.count} "
                 f"psnr={val_psnr:.2f} ssim={val_ssim:.4f}")

        if (config.checkpoint_interval > 0
                and (it + 1) % config.checkpoint_interval == 0 and not is_last):
            sceneio.save_checkpoint(cloud, out / f"point_cloud_{it + 1}.ply",
                                    iteration=it + 1, config_hash=cfg_hash)

    final_ckpt = out / "point_cloud_final.ply"
    sceneio.save_checkpoint(cloud, final_ckpt, iteration=config.iterations,
                            config_hash=cfg_hash)
    sceneio.write_metrics(out / "metrics.csv", metrics_rows)
    (out / "densify_events.log").write_text("\n".join(event_lines) + "\n"
                                            if event_lines else "")
    (out / "train.log").write_text("\n".join(log_lines) + "\n")

    renders_dir = out / "renders"
    renders_dir.mkdir(exist_ok=True)
    for j, (image, camera) in enumerate(dataset.heldout_views()):
        rendered, _ = forward_render(cloud, camera, config.sh_degree,
                                     background=config.background)
        sceneio.save_image(renders_dir / f"heldout_{j}.png", rendered)

    return {
        "cloud": cloud,
        "metrics": metrics_rows,
        "checkpoint": final_ckpt,
        "out_dir": out,
        "final_psnr": float(metrics_rows[-1]["val_psnr"]) if metrics_rows else None,
        "final_ssim": float(metrics_rows[-1]["val_ssim"]) if metrics_rows else None,
        "view_renders": planned_view_renders(config, len(train_views)),
    }


# ---------------------------------------------------------------------------
# Ablation ladder
# ---------------------------------------------------------------------------

LADDER = [
    ("baseline", dict(multiview=False, cross_ray=False, adaptive_beta=False,
                      pyramid_enabled=False)),
    ("mvrl", dict(multiview=True, cross_ray=False, adaptive_beta=False,
                  pyramid_enabled=False)),
    ("mvrl_crd", dict(multiview=True, cross_ray=True, adaptive_beta=False,
                      pyramid_enabled=False)),
    ("mvrl_crd_mvad", dict(multiview=True, cross_ray=True, adaptive_beta=True,
                           pyramid_enabled=False)),
    ("full", dict(multiview=True, cross_ray=True, adaptive_beta=True,
                  pyramid_enabled=True)),
]


def run_ablate(dataset: sceneio.Dataset, base_config: TrainConfig, out_dir,
               budget_mode: str = "renders", quiet: bool = False):
    """Run the five-row toggle ladder with a shared seed.

    budget_mode "renders" holds the total view renders constant across rows
    (rows without the pyramid run budget / M iterations); "iterations" holds
    the iteration count constant instead.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train = len(dataset.train_indices)

    full_cfg = _ladder_config(base_config, LADDER[-1][1], n_train)
    budget = planned_view_renders(full_cfg, n_train)

    rows = []
    for name, toggles in LADDER:
        cfg = _ladder_config(base_config, toggles, n_train)
        if budget_mode == "renders":
            factors, views = effective_schedule(cfg)
            if len(factors) == 1:
                per_iter = views[0]
                cfg.iterations = max(budget // per_iter, 1)
                cfg.lr_position_max_steps = cfg.iterations
                cfg.densify_until = min(
                    cfg.densify_until, int(cfg.iterations * base_config.densify_until
                                           / max(base_config.iterations, 1)))
        renders = planned_view_renders(cfg, n_train)
        result = run_train(dataset, cfg, out / name, quiet=quiet)
        rows.append({
            "config": name,
            "seed": cfg.seed,
            "iterations": cfg.iterations,
            "view_renders": renders,
            "psnr": result["final_psnr"],
            "ssim": result["final_ssim"],
            "n_gaussians": result["cloud"].count,
        })
        if not quiet:
            print(f"[{name}] renders={renders} psnr={result['final_psnr']:.2f}")

    csv_path = out / "ablation.csv"
    with open(csv_path, "w") as fh:
        keys = ["config", "seed", "iterations", "view_renders", "psnr", "ssim",
                "n_gaussians"]
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(str(row[k]) for k in keys) + "\n")
    return {"rows": rows, "csv": csv_path, "budget": budget}


def _ladder_config(base: TrainConfig, toggles: dict, n_train: int) -> TrainConfig:
    cfg = TrainConfig.from_dict(base.to_dict())
    for key, val in toggles.items():
        setattr(cfg, key, val)
    return cfg


# ---------------------------------------------------------------------------
# argparse wiring
# ---------------------------------------------------------------------------

def _parse_int_list(text: str) -> tuple:
    return tuple(int(v) for v in text.split(","))


def _parse_window(text: str) -> tuple:
    h, w = text.lower().split("x")
    return (int(h), int(w))


def _config_from_args(args) -> TrainConfig:
    cfg = TrainConfig(
        iterations=args.iters,
        lambda_dssim=getattr(args, "lambda_"),
        pyramid_factors=args.pyramid,
        views_per_iter=args.views_per_iter_schedule,
        coarse_iters=args.coarse_iters,
        densify_grad_threshold=args.beta,
        tau=args.tau,
        loss_window=args.window,
        ray_epsilon=args.epsilon,
        sh_degree=args.sh_degree,
        seed=args.seed,
        threads=args.threads,
        deterministic=args.deterministic,
        init_points=args.init_points,
        densify_interval=args.densify_interval,
        densify_from=args.densify_from,
        densify_until=args.densify_until,
        opacity_reset_interval=args.opacity_reset_interval,
        eval_interval=args.eval_interval,
        checkpoint_interval=args.checkpoint_interval,
        gradient_mode=args.gradient_mode,
        dtype=args.dtype,
    )
    if args.lr_position_max_steps is not None:
        cfg.lr_position_max_steps = args.lr_position_max_steps
    else:
        cfg.lr_position_max_steps = args.iters
    disabled = set()
    if args.disable:
        disabled = {tok.strip() for tok in args.disable.split(",") if tok.strip()}
        unknown = disabled - {"mvrl", "crd", "mvad", "cig"}
        if unknown:
            raise ValueError(f"unknown --disable tokens: {sorted(unknown)}")
    cfg.multiview = "mvrl" not in disabled
    cfg.cross_ray = "crd" not in disabled
    cfg.adaptive_beta = "mvad" not in disabled
    cfg.pyramid_enabled = "cig" not in disabled
    cfg.validate()
    return cfg


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iters", type=int, default=30_000)
    p.add_argument("--views-per-iter-schedule", type=_parse_int_list,
                   default=(48, 24, 12, 8), metavar="48,24,12,8")
    p.add_argument("--pyramid", type=_parse_int_list, default=(8, 4, 2, 1),
                   metavar="8,4,2,1")
    p.add_argument("--coarse-iters", type=int, default=2000)
    p.add_argument("--lambda", dest="lambda_", type=float, default=0.2)
    p.add_argument("--beta", type=float, default=2e-4)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--window", type=_parse_window, default=(64, 64),
                   metavar="64x64")
    p.add_argument("--epsilon", type=float, default=0.02)
    p.add_argument("--sh-degree", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--disable", default="",
                   help="comma list from {mvrl,crd,mvad,cig}")
    p.add_argument("--init-points", type=int, default=2000)
    p.add_argument("--densify-interval", type=int, default=100)
    p.add_argument("--densify-from", type=int, default=500)
    p.add_argument("--densify-until", type=int, default=15_000)
    p.add_argument("--opacity-reset-interval", type=int, default=3000)
    p.add_argument("--eval-interval", type=int, default=1000)
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.add_argument("--gradient-mode", choices=("sum", "mean"), default="sum")
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--lr-position-max-steps", type=int, default=None)
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatopt")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a cloud on a dataset")
    _add_train_flags(p_train)

    p_render = sub.add_parser("render", help="render one view from a checkpoint")
    p_render.add_argument("checkpoint")
    p_render.add_argument("--out", required=True, help="output PNG path")
    p_render.add_argument("--data", help="dataset directory (with --view)")
    p_render.add_argument("--view", type=int, help="dataset view index")
    p_render.add_argument("--camera", help="JSON file with one camera record")
    p_render.add_argument("--sh-degree", type=int, default=None)

    p_eval = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on held-out views")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out", help="optional metrics CSV path")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=1)
    p_synth.add_argument("--kernels", type=int, default=2000)
    p_synth.add_argument("--views", type=int, default=64)
    p_synth.add_argument("--size", type=int, default=128)
    p_synth.add_argument("--heldout", type=int, default=8)

    p_ablate = sub.add_parser("ablate", help="toggle-ladder comparison")
    _add_train_flags(p_ablate)
    p_ablate.add_argument("--budget-mode", choices=("renders", "iterations"),
                          default="renders")
    return parser


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    dataset = sceneio.load_dataset(args.data)
    run_train(dataset, cfg, args.out, quiet=args.quiet)
    return 0


def _camera_from_json(path) -> "sceneio.Camera":
    from .core import Camera
    record = json.loads(Path(path).read_text())
    return Camera(
        rotation=np.asarray(record["rotation"], dtype=np.float64).reshape(3, 3),
        translation=np.asarray(record["translation"], dtype=np.float64),
        fx=record["fx"], fy=record["fy"], cx=record["cx"], cy=record["cy"],
        width=record["width"], height=record["height"],
        near=record.get("near", 0.01),
    )


def _cmd_render(args) -> int:
    ckpt = sceneio.load_checkpoint(args.checkpoint)
    if args.camera:
        camera = _camera_from_json(args.camera)
    elif args.data is not None and args.view is not None:
        dataset = sceneio.load_dataset(args.data)
        if not (0 <= args.view < dataset.size):
            raise SplatError(f"view index {args.view} out of range "
                             f"(dataset has {dataset.size})")
        camera = dataset.views[args.view][1]
    else:
        raise SplatError("render needs --camera or --data with --view")
    degree = args.sh_degree if args.sh_degree is not None else ckpt.cloud.sh_degree
    image, _ = forward_render(ckpt.cloud, camera, degree)
    sceneio.save_image(args.out, image)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = sceneio.load_checkpoint(args.checkpoint)
    dataset = sceneio.load_dataset(args.data)
    val_psnr, val_ssim = evaluate_heldout(ckpt.cloud, dataset,
                                          ckpt.cloud.sh_degree, (0.0, 0.0, 0.0))
    print(f"psnr={val_psnr:.4f} ssim={val_ssim:.6f} "
          f"heldout={len(dataset.heldout_indices)}")
    if args.out:
        sceneio.write_metrics(args.out, [{
            "iter": ckpt.iteration, "level": 1,
            "views_per_iter": 0, "n_gaussians": ckpt.cloud.count,
            "train_loss": "", "val_psnr": f"{val_psnr:.4f}",
            "val_ssim": f"{val_ssim:.6f}", "wall_seconds": "",
        }])
    return 0


def _cmd_synth(args) -> int:
    cloud, dataset = sceneio.generate_synthetic_scene(
        args.seed, args.kernels, args.views, args.size, args.heldout)
    out = Path(args.out)
    sceneio.write_dataset(dataset, out)
    sceneio.save_checkpoint(cloud, out / "ground_truth.ply")
    print(f"wrote {dataset.size} views to {out}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    dataset = sceneio.load_dataset(args.data)
    result = run_ablate(dataset, cfg, args.out, budget_mode=args.budget_mode,
                        quiet=args.quiet)
    print(f"wrote {result['csv']}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "render": _cmd_render,
        "eval": _cmd_eval,
        "synth": _cmd_synth,
        "ablate": _cmd_ablate,
    }
    try:
        return handlers[args.command](args)
    except (SplatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
