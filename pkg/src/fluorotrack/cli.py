"""Command-line pipeline driver.

Subcommands walk the artifact graph in order:

    phantom     synthetic 4-D breathing series + ground-truth fields
    register    rank-constrained registration of every phase to phase 0
    subspace    PCA motion subspace + explained-variance report
    gendata     labeled projection dataset over a weight grid
    train       projection-to-weights regressor
    infer       weights for one projection file
    eval-spline weight recovery along a breathing-model spline
    eval-phases per-phase deformation errors + error maps
    bench       inference throughput table

Each subcommand reads only upstream artifacts inside --out, writes only its
own stage directory, and snapshots the effective config to out/config.ini,
so any result directory is reproducible from itself.  Failures print one
machine-parsable line to stderr ("error: <Kind>: <message>") and exit 2.

Heavy imports happen after --threads is applied: BLAS pools size themselves
from the environment at import time.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

__all__ = ["main"]


def _set_thread_env(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(n)


class Workspace:
    """Artifact paths for one output directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.phantom_dir = self.root / "phantom"
        self.register_dir = self.root / "register"
        self.subspace_dir = self.root / "subspace"
        self.dataset_dir = self.root / "dataset"
        self.train_dir = self.root / "train"
        self.eval_dir = self.root / "eval"
        self.snapshot = self.root / "config.ini"
        self.series_manifest = self.phantom_dir / "series.txt"
        self.rank_history = self.register_dir / "rank_history.csv"
        self.subspace_manifest = self.subspace_dir / "subspace.txt"
        self.source_weights = self.subspace_dir / "source_weights.csv"
        self.explained_csv = self.subspace_dir / "explained_variance.csv"
        self.dataset_manifest = self.dataset_dir / "manifest.txt"
        self.model_ckpt = self.train_dir / "model.ckpt"
        self.training_log = self.train_dir / "training_log.csv"
        self.recovery_csv = self.eval_dir / "weights_true_vs_inferred.csv"
        self.per_phase_csv = self.eval_dir / "per_phase_errors.csv"
        self.throughput_csv = self.eval_dir / "throughput.csv"

    def phase_volume(self, p: int) -> Path:
        return self.phantom_dir / f"phase_{p:02d}.rvf"

    def truth_field(self, p: int) -> Path:
        return self.phantom_dir / f"truth_field_{p:02d}.rvf"

    def register_field(self, p: int) -> Path:
        return self.register_dir / f"field_{p:02d}.rvf"

    def error_map(self, p: int, ext: str) -> Path:
        return self.eval_dir / f"error_map_phase{p}.{ext}"


def _require(path, producer: str):
    from .errors import MissingArtifactError

    if not Path(path).exists():
        raise MissingArtifactError(path, producer)
    return path


def _read_series_manifest(ws: Workspace) -> int:
    _require(ws.series_manifest, "phantom")
    num_phases = None
    for line in Path(ws.series_manifest).read_text().splitlines():
        if line.startswith("num_phases="):
            num_phases = int(line.split("=", 1)[1])
    if num_phases is None or num_phases < 2:
        from .errors import ConfigError

        raise ConfigError(f"{ws.series_manifest}: missing num_phases")
    return num_phases


def _load_phase_volumes(ws: Workspace, num_phases: int):
    from .volume import read_volume

    return [read_volume(_require(ws.phase_volume(p), "phantom"))
            for p in range(num_phases)]


def _load_model(ws: Workspace):
    from .regressor import load_checkpoint

    return load_checkpoint(_require(ws.model_ckpt, "train"))


def _body_mask(reference):
    return reference.values > 0.0


def _render_preprocessed(volume, field, proj_geom, step_mm, bins):
    from .drr import render_drr, render_drr_deformed
    from .preprocess import preprocess_pipeline

    if field is None:
        img = render_drr(volume, proj_geom, step_mm)
    else:
        img = render_drr_deformed(volume, field, proj_geom, step_mm)
    return preprocess_pipeline(img, bins=bins).values


# ---------------------------------------------------------------------------
# subcommand handlers (cfg: PipelineConfig, ws: Workspace, args: Namespace)


def _cmd_phantom(cfg, ws, args) -> int:
    pcfg = cfg.phantom_config(seed=args.seed)
    if args.dry_run:
        print(f"plan: write {pcfg.num_phases} phase volumes, "
              f"{pcfg.num_phases} truth fields, {ws.series_manifest}")
        return 0
    from .phantom import generate_4d_series
    from .volume import write_field, write_volume

    volumes, fields = generate_4d_series(pcfg)
    ws.phantom_dir.mkdir(parents=True, exist_ok=True)
    for p, (vol, fld) in enumerate(zip(volumes, fields)):
        write_volume(vol, ws.phase_volume(p))
        write_field(fld, ws.truth_field(p))
    ws.series_manifest.write_text(
        "kind=phantom-series\n"
        f"num_phases={pcfg.num_phases}\n"
        f"dims={' '.join(str(d) for d in pcfg.dims)}\n"
        f"spacing={' '.join(repr(s) for s in pcfg.spacing)}\n"
    )
    print(f"phantom: wrote {pcfg.num_phases} phases to {ws.phantom_dir}")
    return 0


def _cmd_register(cfg, ws, args) -> int:
    rcfg = cfg.registration_config()
    num_phases = _read_series_manifest(ws) if not args.dry_run else None
    if args.dry_run:
        print(f"plan: read phase volumes from {ws.phantom_dir}; write "
              f"deformation fields and {ws.rank_history}")
        return 0
    from .lowrank import register_rank_constrained, write_rank_history
    from .volume import DisplacementField, write_field

    volumes = _load_phase_volumes(ws, num_phases)
    result = register_rank_constrained(volumes, 0, rcfg)
    ws.register_dir.mkdir(parents=True, exist_ok=True)
    write_field(DisplacementField.zeros(volumes[0].geometry),
                ws.register_field(0))
    for p, fld in enumerate(result.fields, start=1):
        write_field(fld, ws.register_field(p))
    write_rank_history(ws.rank_history, result.history)
    last = result.history[-1]
    sig = " ".join(f"{s:.4g}" for s in last.sigmas)
    print(f"register: {num_phases - 1} pairs, {len(result.history) - 1} "
          f"outer iterations, alpha={result.alpha:.6g}")
    print(f"register: final objective={last.total_objective:.6g} "
          f"singular_values=[{sig}]")
    return 0


def _cmd_subspace(cfg, ws, args) -> int:
    k = cfg.get("subspace", "num_components")
    if args.dry_run:
        print(f"plan: read fields from {ws.register_dir}; write "
              f"{k}-component subspace, {ws.source_weights}, "
              f"{ws.explained_csv}")
        return 0
    from .subspace import (
        fit_pca,
        project,
        save_subspace,
        write_explained_variance_csv,
        write_weights_csv,
    )
    from .volume import read_field

    num_phases = _read_series_manifest(ws)
    fields = [read_field(_require(ws.register_field(p), "register"))
              for p in range(num_phases)]
    sub = fit_pca(fields, k)
    ws.subspace_dir.mkdir(parents=True, exist_ok=True)
    save_subspace(ws.subspace_dir, sub)
    weights = [project(sub, fld) for fld in fields]
    write_weights_csv(ws.source_weights, weights)
    write_explained_variance_csv(ws.explained_csv, sub)
    fractions = sub.explained_variance()
    print(f"subspace: {sub.k} components from {sub.num_source_fields} fields")
    for i, frac in enumerate(fractions, start=1):
        print(f"subspace: explained variance with {i} components = {frac:.6f}")
    return 0


def _cmd_gendata(cfg, ws, args) -> int:
    n1 = cfg.get("dataset", "n1")
    n2 = cfg.get("dataset", "n2")
    if args.dry_run:
        print(f"plan: generate {n1 * n2} samples ({n1}x{n2} weight grid) "
              f"into {ws.dataset_dir}")
        return 0
    from .dataset import generate_dataset
    from .subspace import load_subspace, read_weights_csv, sample_weight_grid
    from .volume import read_volume

    reference = read_volume(_require(ws.phase_volume(0), "phantom"))
    sub = load_subspace(ws.subspace_dir)
    source = read_weights_csv(_require(ws.source_weights, "subspace"))
    grid = sample_weight_grid(sub, n1, n2, cfg.get("dataset", "scale1"),
                              cfg.get("dataset", "scale2"), source)
    proj_geom = cfg.projection_geometry(reference.geometry)
    manifest = generate_dataset(
        reference, sub, grid, proj_geom, ws.dataset_dir,
        step_mm=cfg.get("drr", "render_step_mm"),
        bins=cfg.get("dataset", "bins"),
        progress=True,
    )
    print(f"gendata: {manifest.count} samples at "
          f"{manifest.image_dims[0]}x{manifest.image_dims[1]} in "
          f"{ws.dataset_dir}")
    return 0


def _cmd_train(cfg, ws, args) -> int:
    tcfg = cfg.train_config(seed=args.seed)
    if args.dry_run:
        print(f"plan: train {tcfg.epochs} epochs on {ws.dataset_dir}; write "
              f"{ws.model_ckpt} and {ws.training_log}")
        return 0
    import numpy as np

    from .dataset import load_dataset
    from .regressor import build_model, train

    images, targets, manifest = load_dataset(ws.dataset_dir)
    rcfg = cfg.regressor_config(manifest.image_dims, manifest.k)
    scale = np.asarray(manifest.target_maxabs, dtype=np.float64)
    scale[scale <= 0] = 1.0  # constant target dims train in raw units
    model = build_model(rcfg, seed=tcfg.seed, target_scale=scale)
    ws.train_dir.mkdir(parents=True, exist_ok=True)
    _, log = train(model, images, targets, tcfg,
                   log_path=ws.training_log, checkpoint_path=ws.model_ckpt)
    best = min(log, key=lambda row: row.holdout_loss)
    print(f"train: {len(log)} epochs on {images.shape[0]} samples")
    print(f"train: final train_loss={log[-1].train_loss:.6f} "
          f"holdout_loss={log[-1].holdout_loss:.6f}")
    print(f"train: best holdout_loss={best.holdout_loss:.6f} "
          f"at epoch {best.epoch} (checkpointed)")
    return 0


def _cmd_infer(cfg, ws, args) -> int:
    if args.dry_run:
        print(f"plan: read {args.image} and {ws.model_ckpt}; print weights")
        return 0
    from .drr import read_projection
    from .preprocess import preprocess_pipeline
    from .regressor import infer

    model = _load_model(ws)
    img = read_projection(_require(args.image, "gendata"))
    if not args.preprocessed:
        img = preprocess_pipeline(img, bins=cfg.get("dataset", "bins"))
    weights = infer(model, img.values)
    print(",".join(repr(float(w)) for w in weights))
    return 0


def _cmd_eval_spline(cfg, ws, args) -> int:
    samples = cfg.get("eval", "spline_samples")
    if args.dry_run:
        print(f"plan: render {samples} spline-model projections; write "
              f"{ws.recovery_csv}")
        return 0
    import numpy as np

    from .evaluate import evaluate_weight_recovery, write_weight_recovery_csv
    from .phantom import BreathingSpline, sample_spline
    from .subspace import load_subspace, read_weights_csv
    from .volume import read_volume

    reference = read_volume(_require(ws.phase_volume(0), "phantom"))
    sub = load_subspace(ws.subspace_dir)
    source = read_weights_csv(_require(ws.source_weights, "subspace"))
    model = _load_model(ws)
    spline = BreathingSpline(source, closed=True, samples=samples)
    model_weights = sample_spline(spline)

    from .subspace import reconstruct

    proj_geom = cfg.projection_geometry(reference.geometry)
    step_mm = cfg.get("drr", "render_step_mm")
    bins = cfg.get("dataset", "bins")
    images = np.stack([
        _render_preprocessed(reference, reconstruct(sub, w), proj_geom,
                             step_mm, bins)
        for w in model_weights
    ])
    rows = evaluate_weight_recovery(sub, model, images, model_weights,
                                    batch_size=cfg.get("eval", "batch_size"))
    ws.eval_dir.mkdir(parents=True, exist_ok=True)
    write_weight_recovery_csv(ws.recovery_csv, rows)
    worst = max(row.vs_model_max_mm for row in rows)
    mean = float(np.mean([row.vs_model_mean_mm for row in rows]))
    print(f"eval-spline: {len(rows)} model points")
    print(f"eval-spline: mean_error={mean:.4f} mm max_error={worst:.4f} mm")
    print("eval-spline: reference result for this protocol: 1.22 mm max")
    return 0


def _cmd_eval_phases(cfg, ws, args) -> int:
    if args.dry_run:
        print(f"plan: render one projection per phase; write "
              f"{ws.per_phase_csv} and per-phase error maps")
        return 0
    import numpy as np

    from .evaluate import evaluate_phases, write_error_map, write_per_phase_csv
    from .subspace import load_subspace
    from .volume import read_field

    num_phases = _read_series_manifest(ws)
    volumes = _load_phase_volumes(ws, num_phases)
    truths = [read_field(_require(ws.truth_field(p), "phantom"))
              for p in range(num_phases)]
    sub = load_subspace(ws.subspace_dir)
    model = _load_model(ws)
    proj_geom = cfg.projection_geometry(volumes[0].geometry)
    step_mm = cfg.get("drr", "render_step_mm")
    bins = cfg.get("dataset", "bins")
    images = np.stack([
        _render_preprocessed(vol, None, proj_geom, step_mm, bins)
        for vol in volumes
    ])
    rows, reports = evaluate_phases(sub, model, images, truths,
                                    body_mask=_body_mask(volumes[0]),
                                    batch_size=cfg.get("eval", "batch_size"))
    ws.eval_dir.mkdir(parents=True, exist_ok=True)
    write_per_phase_csv(ws.per_phase_csv, rows)
    for row, report in zip(rows, reports):
        write_error_map(report, ws.error_map(row.phase, "rvf"),
                        ws.error_map(row.phase, "pgm"))
        print(f"eval-phases: phase {row.phase} avg={row.avg_mm:.4f} mm "
              f"max={row.max_mm:.4f} mm")
    print("eval-phases: reference result layout: phase 0 avg 0.136 / "
          "max 3.92 mm")
    return 0


def _cmd_bench(cfg, ws, args) -> int:
    sizes = cfg.get("eval", "bench_batch_sizes")
    if args.dry_run:
        print(f"plan: time inference at batch sizes {list(sizes)}; write "
              f"{ws.throughput_csv}")
        return 0
    from .dataset import load_dataset
    from .evaluate import throughput_table, write_throughput_csv

    model = _load_model(ws)
    images, _, _ = load_dataset(ws.dataset_dir)
    rows = throughput_table(model, images, batch_sizes=sizes)
    ws.eval_dir.mkdir(parents=True, exist_ok=True)
    write_throughput_csv(ws.throughput_csv, rows)
    for row in rows:
        print(f"bench: batch_size={row.batch_size} "
              f"images_per_second={row.images_per_second:.1f} "
              f"latency_cv={row.batch_latency_cv:.3f}")
    print("bench: reference throughput on the original system: 1113 images/s")
    return 0


_COMMANDS = {
    "phantom": (_cmd_phantom, "generate the 4-D breathing phantom series"),
    "register": (_cmd_register, "rank-constrained registration to phase 0"),
    "subspace": (_cmd_subspace, "PCA motion subspace + variance report"),
    "gendata": (_cmd_gendata, "render the labeled training dataset"),
    "train": (_cmd_train, "train the projection-to-weights regressor"),
    "infer": (_cmd_infer, "recover weights for one projection file"),
    "eval-spline": (_cmd_eval_spline, "weight recovery along a spline model"),
    "eval-phases": (_cmd_eval_phases, "per-phase deformation error tables"),
    "bench": (_cmd_bench, "inference throughput table"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fluorotrack",
        description="Low-rank respiratory motion subspaces from density "
                    "registration, with single-projection weight regression.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="INI config (defaults used when omitted)")
    common.add_argument("--out", metavar="DIR", default="out",
                        help="run directory for all artifacts (default: out)")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seeds")
    common.add_argument("--threads", type=int, default=None,
                        help="cap numeric thread pools")
    common.add_argument("--dry-run", action="store_true",
                        help="print the planned artifact graph and exit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_text)
        if name == "infer":
            sp.add_argument("image", help="projection .rvf file to invert")
            sp.add_argument("--preprocessed", action="store_true",
                            help="image already ran the conditioning chain")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: ConfigError: --threads must be >= 1",
                  file=sys.stderr)
            return 2
        _set_thread_env(args.threads)

    from .errors import FluorotrackError

    try:
        from .config import default_config, load_config, write_config

        cfg = load_config(args.config) if args.config else default_config()
        ws = Workspace(args.out)
        handler, _ = _COMMANDS[args.command]
        if not args.dry_run:
            ws.root.mkdir(parents=True, exist_ok=True)
            write_config(cfg, ws.snapshot)
        return handler(cfg, ws, args)
    except FluorotrackError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
