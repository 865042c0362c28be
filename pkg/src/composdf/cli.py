"""Command-line pipeline front end.

Subcommands wire the full mapping pipeline: `synth` captures virtual
range scans of an analytic scene, `train` fits a map representation and
writes a checkpoint plus a loss trace, `mesh` extracts a triangle mesh
from a checkpoint, `eval` scores a reconstruction against a reference
mesh, and `ablate` sweeps representation variants on one shared dataset.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
malformed inputs), 4 runtime error. Every output embeds the run
configuration (checkpoint header fields, `#` comment lines in CSV files,
comment lines in mesh files) so results stay traceable to their settings.
"""

import argparse
import configparser
import hashlib
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import threadpoolctl

from .embedding import MODES, composition_madds_per_query
from .evaluation import (EvalError, compute_metrics, csv_header, csv_row,
                         format_table)
from .meshing import (MeshGrid, grid_for_tree, marching_cubes, read_mesh,
                      sample_grid, write_mesh)
from .octree import OctreeConfig, auto_origin, build_octree
from .sampler import (SCENES, DataError, ParseError, build_dataset,
                      load_scan_stream, make_scene, save_poses, save_xyz,
                      synth_scene_scans)
from .trainer import (FormatError, LossConfig, MapState, TrainSchedule,
                      load_checkpoint, save_checkpoint, save_loss_trace,
                      train_batch, train_incremental)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

ALLOWED_BITWIDTHS = (4, 6, 8)


class ConfigError(ValueError):
    """Raised for malformed or out-of-range run configuration."""


@dataclass(frozen=True)
class RunConfig:
    """Pipeline settings; defaults follow the reference training recipe."""

    height: int = 3
    leaf_voxel_size: float = 0.2
    dim: int = 8
    bitwidth: int = 8
    mode: str = "decomposition"
    n_free: int = 6
    n_surface: int = 3
    truncation_scale: float = 0.05
    iterations: int = 20000
    batch: int = 8192
    lr: float = 0.01
    lr_decay_step: int = 10000
    eikonal_weight: float = 0.1
    seed: int = 0
    cell: float = 0.10
    threshold_cm: float = 10.0

    def validate(self):
        if self.height < 1:
            raise ConfigError("octree height must be at least 1")
        if self.leaf_voxel_size <= 0:
            raise ConfigError("leaf_voxel_size must be positive")
        if self.dim < 1:
            raise ConfigError("embedding dim must be at least 1")
        if self.mode not in MODES:
            raise ConfigError(
                f"unknown mode {self.mode!r}; choose one of {', '.join(MODES)}")
        if self.mode != "continuous" and self.bitwidth not in ALLOWED_BITWIDTHS:
            raise ConfigError(f"bitwidth must be one of {ALLOWED_BITWIDTHS}")
        if self.n_free < 0 or self.n_surface < 0 or self.n_free + self.n_surface < 1:
            raise ConfigError("need at least one sample per ray")
        if self.truncation_scale <= 0:
            raise ConfigError("truncation_scale must be positive")
        if self.iterations < 1 or self.batch < 1:
            raise ConfigError("iterations and batch must be positive")
        if self.lr <= 0 or self.lr_decay_step < 0:
            raise ConfigError("lr must be positive and lr_decay_step nonnegative")
        if self.eikonal_weight < 0:
            raise ConfigError("eikonal_weight must be nonnegative")
        if self.cell <= 0:
            raise ConfigError("mesh cell must be positive")
        if self.threshold_cm <= 0:
            raise ConfigError("threshold_cm must be positive")
        return self


# section -> {key: python type}; unknown sections and keys are rejected
_SCHEMA = {
    "octree": {"height": int, "leaf_voxel_size": float},
    "embedding": {"dim": int, "bitwidth": int, "mode": str},
    "sampling": {"n_free": int, "n_surface": int, "truncation_scale": float},
    "train": {"iterations": int, "batch": int, "lr": float,
              "lr_decay_step": int, "eikonal_weight": float, "seed": int},
    "mesh": {"cell": float},
    "eval": {"threshold_cm": float},
}


def load_run_config(path=None) -> RunConfig:
    """Read a keyed text config; omitted keys keep their defaults."""
    if path is None:
        return RunConfig().validate()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            caster = _SCHEMA[section][key]
            try:
                values[key] = caster(raw)
            except ValueError:
                raise ConfigError(
                    f"[{section}] {key}: cannot parse {raw!r} as {caster.__name__}"
                ) from None
    return RunConfig(**values).validate()


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        updates["mode"] = args.mode
    if getattr(args, "bitwidth", None) is not None:
        updates["bitwidth"] = args.bitwidth
    return replace(cfg, **updates).validate() if updates else cfg


def config_echo(cfg: RunConfig) -> dict:
    return {f"cfg_{f.name}": str(getattr(cfg, f.name)) for f in fields(cfg)}


# keep runtime thread limiters alive; dropping them would restore defaults
_THREAD_LIMITS = []


def _apply_threads(args):
    n = getattr(args, "threads", None)
    if getattr(args, "reference_mode", False):
        n = 1
    if n is not None:
        if n < 1:
            raise ConfigError("--threads must be at least 1")
        _THREAD_LIMITS.append(threadpoolctl.threadpool_limits(limits=int(n)))
    return n


# ---------------------------------------------------------------------------
# data plumbing shared by commands
# ---------------------------------------------------------------------------


def _load_scans(data_dir):
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    scan_paths = sorted(data_dir.glob("scan_*.xyz"))
    if not scan_paths:
        raise DataError(f"no scan_*.xyz files in {data_dir}")
    pose_path = data_dir / "poses.txt"
    if not pose_path.is_file():
        raise DataError(f"missing pose file {pose_path}")
    return load_scan_stream(scan_paths, pose_path)


def _build_map_inputs(cfg: RunConfig, scans):
    """Octree over all scan endpoints plus the sampled training set."""
    endpoints = np.concatenate([s.endpoints for s in scans])
    origin = auto_origin(endpoints, cfg.height, cfg.leaf_voxel_size)
    oct_cfg = OctreeConfig(height=cfg.height, leaf_voxel_size=cfg.leaf_voxel_size,
                           origin=origin)
    tree = build_octree(endpoints, oct_cfg)
    points, labels, _, _ = build_dataset(scans, cfg.n_free, cfg.n_surface,
                                         cfg.truncation_scale, cfg.seed)
    return oct_cfg, tree, points, labels


def _new_state(cfg: RunConfig, tree, implementation):
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    return MapState.create(tree, cfg.mode, cfg.bitwidth, cfg.dim, rng,
                           implementation=implementation)


def _schedule(cfg: RunConfig) -> TrainSchedule:
    return TrainSchedule(iterations=cfg.iterations, batch_size=cfg.batch,
                         lr=cfg.lr, lr_after=cfg.lr * 0.1,
                         lr_decay_step=cfg.lr_decay_step)


def _loss_config(cfg: RunConfig) -> LossConfig:
    return LossConfig(s=cfg.truncation_scale, lam=cfg.eikonal_weight)


def _extract_mesh(state, cell):
    grid = grid_for_tree(state.tree, cell)
    return marching_cubes(sample_grid(state, grid))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    scene = make_scene(args.scene)
    scans, poses = synth_scene_scans(scene, args.scans, args.rays, args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (scan, pose) in enumerate(zip(scans, poses)):
        local = (scan.endpoints - pose[:3, 3]) @ pose[:3, :3]
        save_xyz(out / f"scan_{i:03d}.xyz", local)
    save_poses(out / "poses.txt", poses)
    n_points = sum(len(s.endpoints) for s in scans)
    print(f"wrote {len(scans)} scans ({n_points} points) to {out}")
    if args.gt_cell is not None:
        endpoints = np.concatenate([s.endpoints for s in scans])
        pad = 3 * args.gt_cell
        grid = MeshGrid.from_bounds(endpoints.min(axis=0) - pad,
                                    endpoints.max(axis=0) + pad, args.gt_cell)
        mesh = marching_cubes(sample_grid(scene.sdf, grid))
        write_mesh(mesh, out / "gt.ply", "ply_binary",
                   comments=[f"scene={args.scene}", f"cell={args.gt_cell}"])
        print(f"wrote reference mesh gt.ply ({mesh.n_triangles} triangles)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    scans = _load_scans(args.data)
    oct_cfg, tree, points, labels = _build_map_inputs(cfg, scans)
    echo = config_echo(cfg)
    schedule = _schedule(cfg)
    loss_cfg = _loss_config(cfg)
    if args.incremental:
        first = build_octree(scans[0].endpoints, oct_cfg)
        state = _new_state(cfg, first, args.implementation)
        per_scan = max(1, cfg.iterations // len(scans))
        echo["cfg_iterations_per_scan"] = str(per_scan)
        state, rows = train_incremental(
            state, scans, loss_cfg, schedule, cfg.seed,
            n_free=cfg.n_free, n_surface=cfg.n_surface,
            iterations_per_scan=per_scan)
    else:
        state = _new_state(cfg, tree, args.implementation)
        rows = train_batch(state, points, labels, schedule, loss_cfg, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    loss_out = Path(args.loss_out) if args.loss_out else out.with_suffix(
        out.suffix + ".loss.csv")
    save_loss_trace(loss_out, rows, echo)
    report = save_checkpoint(state, out, echo)
    print(f"trained {len(rows)} iterations on {len(points)} samples")
    print(f"checkpoint {out}: {state.tree.total_corners} corners, "
          f"{report.rep_bytes / 1024:.1f} kB representation "
          f"({report.total_bytes / 1024:.1f} kB with the spatial model)")
    return EXIT_OK


def cmd_mesh(args) -> int:
    state, echo = load_checkpoint(args.checkpoint)
    cell = args.cell if args.cell is not None else float(echo.get("cfg_cell", 0.10))
    if cell <= 0:
        raise ConfigError("--cell must be positive")
    mesh = _extract_mesh(state, cell)
    comments = [f"{k}={v}" for k, v in sorted(echo.items())]
    comments.append(f"mesh_cell={cell}")
    fmt = "obj_ascii" if str(args.out).endswith(".obj") else "ply_binary"
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_mesh(mesh, args.out, fmt, comments=comments)
    print(f"wrote {mesh.n_vertices} vertices / {mesh.n_triangles} triangles "
          f"to {args.out} (cell {cell})")
    return EXIT_OK


def cmd_eval(args) -> int:
    recon = read_mesh(args.recon)
    gt = read_mesh(args.gt)
    storage = None
    echo = {}
    if args.checkpoint:
        state, echo = load_checkpoint(args.checkpoint)
        storage = state.storage()
    report = compute_metrics(recon, gt, args.threshold, n=args.samples,
                             seed=args.seed or 0, storage=storage)
    label = Path(args.recon).stem
    print(format_table([(label, report)]))
    if args.out:
        with open(args.out, "w") as f:
            for k, v in sorted(echo.items()):
                f.write(f"# {k}={v}\n")
            f.write(f"# threshold_cm={args.threshold}\n")
            f.write(f"# n_samples={args.samples}\n")
            f.write(csv_header() + "\n")
            f.write(csv_row(report, method=label) + "\n")
        print(f"wrote report to {args.out}")
    return EXIT_OK


# ablation sweep: which (mode, bitwidth, implementation) variants run
def _ablation_variants():
    rows = [("continuous", 0, "efficient")]
    for mode in ("indexing", "decomposition_discrete_only", "decomposition"):
        for bits in ALLOWED_BITWIDTHS:
            for impl in ("basic", "efficient"):
                rows.append((mode, bits, impl))
    return rows


def cmd_ablate(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    scans = _load_scans(args.data)
    _, tree, points, labels = _build_map_inputs(cfg, scans)
    digest = hashlib.sha256()
    digest.update(points.tobytes())
    digest.update(labels.tobytes())
    for level in range(tree.height):
        digest.update(tree.voxel_keys(level).tobytes())
    data_hash = digest.hexdigest()[:16]

    gt_mesh = read_mesh(args.gt) if args.gt else None
    grid = grid_for_tree(tree, cfg.cell)
    cadence = args.cadence
    checkpoints = [it for it in range(cadence, cfg.iterations + 1, cadence)]
    if not checkpoints or checkpoints[-1] != cfg.iterations:
        checkpoints.append(cfg.iterations)
    schedule = _schedule(cfg)
    loss_cfg = _loss_config(cfg)

    def run_variant(mode, bits, impl):
        vcfg = replace(cfg, mode=mode,
                       bitwidth=bits if mode != "continuous" else cfg.bitwidth)
        state = _new_state(vcfg, tree, impl)
        hook_every = 100 if cfg.iterations >= 100 else 1
        times = {}
        f_trace = {}

        def hook(it, st):
            times[it] = time.perf_counter()
            if gt_mesh is not None and it in checkpoints:
                f_trace[it] = _variant_f_score(st)

        def _variant_f_score(st):
            recon = marching_cubes(sample_grid(st, grid))
            try:
                rep = compute_metrics(recon, gt_mesh, cfg.threshold_cm,
                                      n=eval_samples, seed=cfg.seed)
            except EvalError:
                return float("nan")
            return rep.f_score_percent

        t_start = time.perf_counter()
        train_batch(state, points, labels, schedule, loss_cfg, cfg.seed,
                    hook=hook, hook_every=hook_every)
        t_end = time.perf_counter()
        if gt_mesh is not None and cfg.iterations not in f_trace:
            f_trace[cfg.iterations] = _variant_f_score(state)

        # wall-clock window skips warmup when the run is long enough
        w0, w1 = 100, 1100
        if cfg.iterations < 1100:
            w0, w1 = 0, cfg.iterations
        t0 = times.get(w0, t_start)
        t1 = times.get(w1, t_end)
        its = (w1 - w0) / (t1 - t0) if t1 > t0 else float("nan")
        storage = state.storage()
        return {
            "it_per_sec": its, "window_start": w0, "window_end": w1,
            "madds": composition_madds_per_query(mode, bits or vcfg.bitwidth,
                                                 cfg.dim, n_levels=tree.height),
            "rep_kb": storage.rep_bytes / 1024,
            "total_kb": storage.total_bytes / 1024,
            "f_trace": f_trace,
        }

    eval_samples = args.samples
    header = ["mode", "bitwidth", "implementation", "status", "it_per_sec",
              "window_start", "window_end", "madds_per_query", "rep_kb",
              "total_kb", "data_hash"] + [f"f_{it}" for it in checkpoints]
    lines = []
    for mode, bits, impl in _ablation_variants():
        try:
            res = run_variant(mode, bits, impl)
            row = [mode, str(bits), impl, "ok",
                   f"{res['it_per_sec']:.3f}", str(res["window_start"]),
                   str(res["window_end"]), str(res["madds"]),
                   f"{res['rep_kb']:.3f}", f"{res['total_kb']:.3f}", data_hash]
            row += [f"{res['f_trace'].get(it, float('nan')):.3f}"
                    if res["f_trace"] else "" for it in checkpoints]
        except Exception as exc:  # noqa: BLE001  sweep must survive one bad variant
            row = [mode, str(bits), impl, f"failed: {type(exc).__name__}",
                   "", "", "", "", "", "", data_hash] + [""] * len(checkpoints)
            print(f"variant {mode}/B={bits}/{impl} failed: {exc}", file=sys.stderr)
        lines.append(",".join(row))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        for k, v in sorted(config_echo(cfg).items()):
            f.write(f"# {k}={v}\n")
        f.write(f"# data_hash={data_hash}\n")
        f.write(",".join(header) + "\n")
        for line in lines:
            f.write(line + "\n")
    print(f"wrote {len(lines)} variant rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="composdf",
        description="Sparse-octree SDF mapping: synthesize, train, mesh, "
                    "evaluate, ablate.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
    common.add_argument("--threads", type=int, default=None,
                        help="cap numerical library threads (default: all cores)")
    common.add_argument("--reference-mode", action="store_true",
                        help="single-threaded deterministic execution")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="capture virtual scans of an analytic scene")
    p.add_argument("--scene", default="sphere", choices=sorted(SCENES))
    p.add_argument("--scans", type=int, default=10)
    p.add_argument("--rays", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.add_argument("--gt-cell", type=float, default=None,
                   help="also extract a reference mesh at this cell size")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common],
                       help="fit a map and write checkpoint + loss trace")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-out", default=None)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--bitwidth", type=int, default=None)
    p.add_argument("--implementation", choices=("efficient", "basic"),
                   default="efficient")
    p.add_argument("--incremental", action="store_true",
                   help="train scan by scan with replay instead of one batch set")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mesh", parents=[common],
                       help="extract a triangle mesh from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cell", type=float, default=None)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", parents=[common],
                       help="score a reconstruction against a reference mesh")
    p.add_argument("--recon", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--threshold", type=float, default=10.0,
                   help="F-score distance threshold in cm")
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--checkpoint", default=None,
                   help="attach this checkpoint's storage numbers")
    p.add_argument("--out", default=None, help="also write a CSV report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="sweep representation variants on one dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gt", default=None,
                   help="reference mesh enabling the F-score trace")
    p.add_argument("--cadence", type=int, default=10000,
                   help="F-score checkpoint spacing in iterations")
    p.add_argument("--samples", type=int, default=200_000,
                   help="metric sample count per F-score checkpoint")
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--bitwidth", type=int, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, DataError, FormatError, EvalError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001  contract: nonzero exit, no traceback
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
