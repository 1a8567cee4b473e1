"""Command line interface: train, sample, bias, errstats, metrics, grid-gamma.

Heavy imports happen inside the command functions so the thread-count
environment override can take effect before numpy initializes its BLAS pool.
Every command writes its delimited outputs plus rendered figures and a JSON
manifest recording the config hash, package version, master seed, and wall
time.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from .envvars import ENV_OUTPUT_DIR, ENV_THREADS
from .errors import ConfigError, DataError, DiffusionLabError, NumericError


def _apply_thread_env():
    n = os.environ.get(ENV_THREADS)
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        raise ConfigError(f"{ENV_THREADS} must be a positive integer, got {n!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _write_manifest(out_dir, command, seed, t_start, outputs, config_hash=None, extras=None):
    manifest = {
        "command": command,
        "package_version": _version(),
        "config_sha256": config_hash,
        "master_seed": seed,
        "wall_time_s": round(time.perf_counter() - t_start, 3),
        "outputs": sorted(os.path.basename(str(p)) for p in outputs),
        "extras": extras or {},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def _version():
    from . import __version__

    return __version__


def _load_points(path):
    """Sample matrix from .bin / .csv / .idx by extension."""
    from .datasets import load_csv_points, load_idx
    from .tensor import load_tensors

    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".bin":
        bundle = load_tensors(path)
        if "samples" not in bundle:
            raise DataError(f"{path} has no 'samples' tensor; keys: {sorted(bundle)}")
        return bundle["samples"]
    if ext == ".csv":
        return load_csv_points(path)
    if ext == ".idx":
        return load_idx(path).samples
    raise ConfigError(f"unsupported points file extension {ext!r} (use .bin, .csv, or .idx)")


def _checkpoint_context(ckpt_dir, use_ema=False):
    """Model plus rebuilt schedule/dataset sections from a checkpoint manifest."""
    from .config import DatasetSection, ScheduleSection
    from .models import load_checkpoint

    model, manifest = load_checkpoint(ckpt_dir, use_ema=use_ema)
    extra = manifest.get("extra", {})
    schedule = None
    if "schedule" in extra:
        schedule = ScheduleSection(**extra["schedule"]).build()
    dataset_section = DatasetSection(**extra["dataset"]) if "dataset" in extra else None
    return model, schedule, dataset_section, manifest


def _resolve_out(args, configured=None):
    from .config import resolve_output_dir

    out = resolve_output_dir(configured or "runs/out", getattr(args, "output", None))
    os.makedirs(out, exist_ok=True)
    return out


# -- commands -------------------------------------------------------------------


def cmd_train(args) -> int:
    import dataclasses

    import numpy as np

    from . import reports
    from .config import file_sha256, load_config, save_config
    from .sampling import SamplerConfig, sample
    from .training import train

    t_start = time.perf_counter()
    cfg = load_config(args.config)
    out = _resolve_out(args, cfg.output_dir)
    dataset = cfg.dataset.build()
    train_part, ref_part = cfg.dataset.split(dataset)
    schedule = cfg.schedule.build()
    if cfg.model.kind != "mlp":
        raise ConfigError(f"model kind {cfg.model.kind!r} is not trainable")
    model = cfg.model.build(dataset.dim, seed=cfg.seed)
    train_cfg = dataclasses.replace(cfg.train, seed=cfg.seed)

    manifest_extra = {
        "schedule": dataclasses.asdict(cfg.schedule),
        "dataset": dataclasses.asdict(cfg.dataset),
        "image_shape": list(dataset.image_shape) if dataset.image_shape else None,
    }
    state = train(train_part, train_cfg, schedule, model=model, out_dir=out, manifest_extra=manifest_extra)

    resolved = dataclasses.replace(cfg, output_dir=out, train=train_cfg)
    save_config(resolved, os.path.join(out, "config_resolved.yaml"))

    outputs = ["train_log.csv", "config_resolved.yaml", "checkpoints"]
    if not args.no_figures:
        outputs.append(reports.fig_loss_curve(os.path.join(out, "train_log.csv"), os.path.join(out, "loss_curve.png")))
        n_fig = min(cfg.sampler.n_samples, 1024)
        view = cfg.sampler.view(schedule)
        scfg = SamplerConfig(
            schedule=view,
            kind=cfg.sampler.kind,
            eta=cfg.sampler.eta,
            variance_choice=cfg.sampler.variance_choice,
            seed=cfg.seed,
        )
        traj = sample(state.model, n_fig, scfg)
        if dataset.image_shape is not None:
            outputs.append(
                reports.fig_image_grid(traj.final, dataset.image_shape, os.path.join(out, "samples_grid.png"))
            )
        elif dataset.dim == 2:
            outputs.append(
                reports.fig_scatter(
                    traj.final, os.path.join(out, "samples_scatter.png"), ref=ref_part.samples[:1024]
                )
            )

    final_loss = float(np.mean(list(state.loss_history)[-20:])) if state.loss_history else None
    from .models import param_hash

    _write_manifest(
        out,
        "train",
        cfg.seed,
        t_start,
        outputs,
        config_hash=file_sha256(args.config),
        extras={"iterations": state.iteration, "final_loss": final_loss, "param_hash": param_hash(state.model)},
    )
    print(f"trained {state.iteration} iterations; outputs in {out}")
    return 0


def cmd_sample(args) -> int:
    from . import reports
    from .datasets import write_csv_points, write_pgm
    from .sampling import SamplerConfig, sample
    from .schedules import respace
    from .tensor import save_tensors

    t_start = time.perf_counter()
    model, schedule, dataset_section, ckpt_manifest = _checkpoint_context(args.checkpoint, use_ema=args.use_ema)
    if schedule is None:
        raise ConfigError("checkpoint manifest lacks schedule info; re-train with this package's train command")
    view = respace(schedule, args.steps) if args.steps and args.steps != len(schedule.betas) else schedule
    out = _resolve_out(args)
    scfg = SamplerConfig(
        schedule=view,
        kind=args.kind,
        eta=args.eta,
        variance_choice=args.variance,
        seed=args.seed,
    )
    traj = sample(model, args.n, scfg)

    outputs = []
    bin_path = os.path.join(out, "samples.bin")
    save_tensors(bin_path, {"samples": traj.final})
    outputs.append(bin_path)
    image_shape = ckpt_manifest.get("extra", {}).get("image_shape")
    if model.data_dim <= 8:
        csv_path = os.path.join(out, "samples.csv")
        write_csv_points(csv_path, traj.final)
        outputs.append(csv_path)
    if image_shape:
        for i in range(min(16, len(traj.final))):
            p = os.path.join(out, f"sample_{i:03d}.pgm")
            write_pgm(p, traj.final[i], tuple(image_shape))
            outputs.append(p)
        if not args.no_figures:
            outputs.append(reports.fig_image_grid(traj.final, tuple(image_shape), os.path.join(out, "samples_grid.png")))
    elif model.data_dim == 2 and not args.no_figures:
        outputs.append(reports.fig_scatter(traj.final, os.path.join(out, "samples_scatter.png")))

    _write_manifest(
        out,
        "sample",
        args.seed,
        t_start,
        outputs,
        extras={
            "checkpoint": str(args.checkpoint),
            "n": args.n,
            "kind": args.kind,
            "eta": args.eta,
            "steps_executed": traj.steps_executed,
            "view_length": len(view.steps),
        },
    )
    print(f"wrote {args.n} samples after {traj.steps_executed} reverse steps to {out}")
    return 0


def cmd_bias(args) -> int:
    import numpy as np
    from scipy import stats as sps

    from . import reports
    from .metrics import exposure_bias_deterministic, exposure_bias_stochastic
    from .rng import stream

    t_start = time.perf_counter()
    model, schedule, dataset_section, _ = _checkpoint_context(args.checkpoint, use_ema=args.use_ema)
    if schedule is None or dataset_section is None:
        raise ConfigError("checkpoint manifest lacks schedule/dataset info needed to rebuild the measurement")
    dataset = dataset_section.build()
    train_part, ref_part = dataset_section.split(dataset)
    out = _resolve_out(args)
    grid = _parse_int_list(args.t_grid)
    rng = stream(args.seed, "eval")

    if args.mode == "deterministic":
        if any(t < 1 for t in grid):
            raise ConfigError("deterministic bias grid must contain timesteps >= 1")
        table = exposure_bias_deterministic(model, train_part, args.n, schedule, rng, t_grid=grid)
    else:
        table = exposure_bias_stochastic(
            model, train_part, grid, args.n, schedule, rng, ref_samples=ref_part.samples, metric=args.metric
        )

    csv_path = os.path.join(out, "bias.csv")
    table.to_csv(csv_path)
    outputs = [csv_path]
    if not args.no_figures:
        outputs.append(
            reports.fig_line(
                table.ts, table.values, os.path.join(out, "bias_curve.png"),
                title=f"exposure bias ({table.kind})", xlabel="t", ylabel="bias",
            )
        )
    rho = float(sps.spearmanr(table.ts, table.values).statistic) if len(table.rows) > 2 else float("nan")
    _write_manifest(
        out, "bias", args.seed, t_start, outputs,
        extras={"mode": args.mode, "spearman_rho_vs_t": None if np.isnan(rho) else rho},
    )
    print(f"bias table with {len(table.rows)} rows written to {out} (spearman rho vs t: {rho:.3f})")
    return 0


def cmd_errstats(args) -> int:
    from . import reports
    from .metrics import prediction_error_stats
    from .rng import stream

    t_start = time.perf_counter()
    model, schedule, dataset_section, _ = _checkpoint_context(args.checkpoint, use_ema=args.use_ema)
    if schedule is None or dataset_section is None:
        raise ConfigError("checkpoint manifest lacks schedule/dataset info needed to rebuild the measurement")
    dataset = dataset_section.build()
    train_part, _ = dataset_section.split(dataset)
    out = _resolve_out(args)
    rng = stream(args.seed, "eval")
    stats = prediction_error_stats(
        model, train_part, schedule, rng, t_stride=args.stride, n_samples=args.n, mode=args.mode
    )
    csv_path = os.path.join(out, "errstats.csv")
    stats.to_csv(csv_path)
    outputs = [csv_path]
    if not args.no_figures:
        outputs.append(
            reports.fig_line(
                stats.ts, stats.nus, os.path.join(out, "nu_curve.png"),
                title=f"prediction error spread ({stats.mode})", xlabel="t", ylabel="nu_t",
            )
        )
    mean_nu = stats.mean_nu
    rejections = sum(1 for r in stats.rows if r.reject)
    tested = sum(1 for r in stats.rows if r.reject is not None)
    _write_manifest(
        out, "errstats", args.seed, t_start, outputs,
        extras={"mode": args.mode, "mean_nu": mean_nu, "normality_rejections": [rejections, tested]},
    )
    print(f"errstats over {len(stats.rows)} timesteps written to {out}")
    print(f"mean error spread E_t[nu_t] = {mean_nu:.4f}; suggested perturbation grid: 0 .. {mean_nu:.4f}")
    return 0


def cmd_metrics(args) -> int:
    from . import reports
    from .metrics import energy_distance, frechet_gaussian_distance, knn_precision_recall

    t_start = time.perf_counter()
    real = _load_points(args.real)
    gen = _load_points(args.generated)
    out = _resolve_out(args)
    rows = [
        ("frechet_gaussian", frechet_gaussian_distance(real, gen)),
        ("energy", energy_distance(real, gen)),
    ]
    pr = knn_precision_recall(real, gen, k=args.k)
    rows.append((f"precision_k{args.k}", pr.precision))
    rows.append((f"recall_k{args.k}", pr.recall))

    csv_path = os.path.join(out, "metrics.csv")
    with open(csv_path, "w") as f:
        f.write("metric,value\n")
        for name, value in rows:
            f.write(f"{name},{value:.8g}\n")
    outputs = [csv_path]
    if not args.no_figures:
        outputs.append(
            reports.fig_metric_bars([r[0] for r in rows], [r[1] for r in rows], os.path.join(out, "metrics.png"))
        )
    _write_manifest(out, "metrics", None, t_start, outputs, extras={"n_real": len(real), "n_generated": len(gen)})
    for name, value in rows:
        print(f"{name}: {value:.6g}")
    return 0


def cmd_grid_gamma(args) -> int:
    import dataclasses

    from . import reports
    from .config import file_sha256, load_config
    from .metrics import energy_distance
    from .sampling import SamplerConfig, sample
    from .training import train

    t_start = time.perf_counter()
    cfg = load_config(args.config)
    gammas = _parse_range(args.range)
    out = _resolve_out(args, os.path.join(cfg.output_dir, "grid_gamma"))
    dataset = cfg.dataset.build()
    train_part, ref_part = cfg.dataset.split(dataset)
    schedule = cfg.schedule.build()
    view = cfg.sampler.view(schedule)

    rows = []
    for gamma in gammas:
        train_cfg = dataclasses.replace(cfg.train, mode="ip", gamma=float(gamma), seed=cfg.seed)
        model = cfg.model.build(dataset.dim, seed=cfg.seed)
        state = train(train_part, train_cfg, schedule, model=model)
        scfg = SamplerConfig(
            schedule=view,
            kind=cfg.sampler.kind,
            eta=cfg.sampler.eta,
            variance_choice=cfg.sampler.variance_choice,
            seed=cfg.seed,
        )
        eval_model = state.ema_model() if args.use_ema else state.model
        traj = sample(eval_model, cfg.sampler.n_samples, scfg)
        value = energy_distance(traj.final, ref_part.samples)
        rows.append((float(gamma), float(value)))
        print(f"gamma={gamma:.4g}: energy distance {value:.6g}")

    csv_path = os.path.join(out, "gamma_grid.csv")
    with open(csv_path, "w") as f:
        f.write("gamma,energy\n")
        for g, v in rows:
            f.write(f"{g:.8g},{v:.8g}\n")
    outputs = [csv_path]
    if not args.no_figures:
        outputs.append(
            reports.fig_line(
                [r[0] for r in rows], [r[1] for r in rows], os.path.join(out, "gamma_curve.png"),
                title="perturbation scale sweep", xlabel="gamma", ylabel="energy distance",
            )
        )
    _write_manifest(
        out, "grid-gamma", cfg.seed, t_start, outputs,
        config_hash=file_sha256(args.config), extras={"gammas": [r[0] for r in rows]},
    )
    return 0


# -- argument plumbing ---------------------------------------------------------------


def _parse_int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


def _parse_range(text: str):
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"range must look like start:stop:step, got {text!r}")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"range parts must be numbers, got {text!r}")
    if step < 0 or stop < start:
        raise ConfigError("range needs stop >= start and step >= 0")
    if step == 0:
        if stop != start:
            raise ConfigError("zero step requires start == stop")
        return [start]
    count = int(round((stop - start) / step)) + 1
    values = [start + i * step for i in range(count)]
    return [v for v in values if v <= stop + 1e-12]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffusionlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--output", help=f"output directory (also settable via {ENV_OUTPUT_DIR})")
        sp.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    sp = sub.add_parser("train", help="train a noise predictor from a config file")
    sp.add_argument("--config", required=True)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="generate samples from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n", type=int, default=1024)
    sp.add_argument("--steps", type=int, default=None, help="respaced step count (default: full)")
    sp.add_argument("--kind", choices=("ancestral", "deterministic", "ddim"), default="ancestral")
    sp.add_argument("--eta", type=float, default=0.0)
    sp.add_argument("--variance", choices=("posterior_small", "beta_large"), default="posterior_small")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--use-ema", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("bias", help="measure exposure bias from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=("deterministic", "stochastic"), default="deterministic")
    sp.add_argument("--t-grid", default="100,300,600,1000")
    sp.add_argument("--n", type=int, default=512, help="draws (deterministic) or chains per t (stochastic)")
    sp.add_argument("--metric", choices=("energy", "frechet"), default="energy")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--use-ema", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_bias)

    sp = sub.add_parser("errstats", help="per-step prediction error statistics")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--stride", type=int, default=10)
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--mode", choices=("generation", "teacher"), default="generation")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--use-ema", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_errstats)

    sp = sub.add_parser("metrics", help="distribution metrics between two sample files")
    sp.add_argument("--real", required=True)
    sp.add_argument("--generated", required=True)
    sp.add_argument("--k", type=int, default=3)
    common(sp)
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("grid-gamma", help="sweep the perturbation scale and score samples")
    sp.add_argument("--config", required=True)
    sp.add_argument("--range", required=True, help="start:stop:step, e.g. 0:0.2:0.025")
    sp.add_argument("--use-ema", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_grid_gamma)
    return p


def main(argv=None) -> int:
    try:
        _apply_thread_env()
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (ConfigError, DataError, DiffusionLabError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
