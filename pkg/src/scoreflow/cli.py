"""Command-line entry point: generate / train / infer / evaluate / sweep.

Progress goes to stderr; all machine-readable output goes to files under
the configured output directory. Exit codes: 0 success, 1 validation
error, 2 runtime or numerical failure. Reruns with identical config and
seed produce bitwise-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, problem_from_config
from .flow import CheckpointError
from .metrics import evaluate_testset, sweep_training_size, write_records_csv, write_summary_csv, write_sweep_csv
from .numerics import Rng, ShapeError
from .pipeline import PipelineError, infer, intermediate_trajectory, load_pipeline, save_pipeline, train_pipeline
from .summary import DatasetError, build_stage0, save_dataset


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.paths["out_dir"] = args.out
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_vector_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def cmd_generate(args) -> int:
    cfg = _effective_config(args)
    problem = problem_from_config(cfg.problem)
    out = _out_dir(cfg)
    n_train = int(cfg.training["n_train"])
    _progress(f"generating stage-0 dataset with {n_train} records")
    rng = Rng(cfg.seed)
    ds = build_stage0(problem, n_train, rng.child(0), val_fraction=cfg.training["val_fraction"])
    (out / "dataset_stage000.bin").write_bytes(save_dataset(ds))
    manifest = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "n_records": ds.n_records,
        "stage": ds.stage,
        "x_dim": problem.x_dim,
        "y_dim": problem.y_dim,
    }
    (out / "dataset_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _progress(f"wrote {out / 'dataset_stage000.bin'}")
    return 0


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    problem = problem_from_config(cfg.problem)
    out = _out_dir(cfg)
    bundle_dir = out / "bundle"
    L = int(cfg.training["stages"])
    rng = Rng(cfg.seed)
    try:
        pipeline, _ = train_pipeline(
            problem,
            int(cfg.training["n_train"]),
            L,
            cfg.flow_config(),
            cfg.train_config(),
            rng,
            progress=_progress,
        )
    except PipelineError as exc:
        # persist whatever finished before the divergence
        if exc.completed_flows:
            from .pipeline import TrainedPipeline

            partial = TrainedPipeline(
                problem=problem,
                flows=exc.completed_flows,
                seed=cfg.seed,
                config_hash=cfg.config_hash(),
                problem_config=cfg.problem,
                train_config=cfg.train_config(),
            )
            save_pipeline(partial, bundle_dir)
            _progress(f"partial bundle with {len(exc.completed_flows)} flows saved to {bundle_dir}")
        raise
    pipeline.config_hash = cfg.config_hash()
    pipeline.problem_config = cfg.problem
    save_pipeline(pipeline, bundle_dir)
    with open(out / "training_loss.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        w = csv.writer(fh)
        w.writerow(["stage", "epoch", "train_loss", "val_loss"])
        for j, history in enumerate(pipeline.stage_histories):
            for epoch, tr, va in history:
                w.writerow([j, epoch, repr(tr), repr(va)])
    _progress(f"bundle saved to {bundle_dir}")
    return 0


def _load_y(path: str, y_dim: int) -> np.ndarray:
    vals = np.loadtxt(path, delimiter=None).ravel()
    if vals.shape != (y_dim,):
        raise ShapeError(f"observation in {path} has {vals.size} entries, expected {y_dim}")
    return vals.astype(np.float64)


def cmd_infer(args) -> int:
    cfg = _effective_config(args)
    out = _out_dir(cfg)
    pipeline = load_pipeline(args.bundle)
    y = _load_y(args.y, pipeline.problem.y_dim)
    n_samples = args.n_samples
    rng = Rng(cfg.seed)
    _progress(f"inferring with {pipeline.n_stages} fiducial updates, {n_samples} samples")
    traj = intermediate_trajectory(pipeline, y, rng.child(0))
    ens = infer(pipeline, y, n_samples, rng.child(0))
    d = pipeline.problem.x_dim
    xcols = [f"x{i}" for i in range(d)]
    _write_vector_csv(out / "samples.csv", xcols, ens.samples)
    _write_vector_csv(out / "mean.csv", xcols, [ens.mean])
    _write_vector_csv(out / "std.csv", xcols, [ens.std])
    with open(out / "trajectory.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        w = csv.writer(fh)
        w.writerow(["stage", "score_norm"] + xcols)
        for i, (x, ybar) in enumerate(traj):
            w.writerow([i, repr(float(np.linalg.norm(ybar)))] + [repr(float(v)) for v in x])
    _progress(f"ensemble files written to {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _effective_config(args)
    out = _out_dir(cfg)
    pipeline = load_pipeline(args.bundle)
    problem = problem_from_config(cfg.problem)
    if (pipeline.problem.x_dim, pipeline.problem.y_dim) != (problem.x_dim, problem.y_dim):
        raise ConfigError(
            f"bundle problem dims ({pipeline.problem.x_dim}, {pipeline.problem.y_dim}) do not "
            f"match evaluation config dims ({problem.x_dim}, {problem.y_dim})"
        )
    rng = Rng(cfg.seed)
    report = evaluate_testset(
        pipeline,
        problem,
        int(cfg.eval["n_test"]),
        rng.child(0),
        n_samples=int(cfg.eval["n_samples"]),
        psnr_range=float(cfg.eval["psnr_range"]),
        progress=_progress,
    )
    write_records_csv(report, out / "metrics_records.csv", cfg.config_hash())
    write_summary_csv(report, out / "metrics_summary.csv", cfg.config_hash())
    _progress(f"metric CSVs written to {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _effective_config(args)
    out = _out_dir(cfg)
    problem = problem_from_config(cfg.problem)
    rng = Rng(cfg.seed)
    results = sweep_training_size(
        problem,
        [int(s) for s in cfg.sweep["sizes"]],
        int(cfg.training["stages"]),
        cfg.flow_config(),
        cfg.train_config(),
        rng,
        n_test=int(cfg.eval["n_test"]),
        n_samples=int(cfg.eval["n_samples"]),
        psnr_range=float(cfg.eval["psnr_range"]),
        progress=_progress,
    )
    write_sweep_csv(results, out / "sweep.csv", cfg.config_hash())
    for n_train, report in results.items():
        write_summary_csv(report, out / f"sweep_summary_n{n_train}.csv", cfg.config_hash())
    _progress(f"sweep CSVs written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scoreflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="path to YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--threads", type=int, default=None, help="worker threads (advisory)")

    p = sub.add_parser("generate", help="write the stage-0 training dataset")
    add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the multi-stage pipeline")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="posterior inference for one observation")
    add_common(p)
    p.add_argument("--bundle", required=True, help="trained pipeline bundle directory")
    p.add_argument("--y", required=True, help="text file with the observation vector")
    p.add_argument("--n-samples", type=int, default=1000)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="metric evaluation on a fresh test set")
    add_common(p)
    p.add_argument("--bundle", required=True, help="trained pipeline bundle directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="training-set-size sweep")
    add_common(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, CheckpointError, DatasetError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PipelineError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
