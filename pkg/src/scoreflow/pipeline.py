"""Multi-stage training and inference orchestration.

Training builds a stage-0 dataset, then alternates flow training and
fiducial advancement for L stages, producing L+1 flows (one per stage,
trained on that stage's residual/score pairs). Inference starts from the
problem's default fiducial, performs L posterior-mean updates using flows
0..L-1, and returns the final fiducial plus samples from flow L.

The L+1-flows / L-updates convention is fixed here and mirrored by the
bundle layout on disk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow import CouplingFlow, load_checkpoint, save_checkpoint, train_flow
from .numerics import Rng, ShapeError
from .problems import InverseProblem
from .summary import FiducialDataset, advance_stage, build_stage0

BUNDLE_FORMAT_VERSION = 1

# spawn-key namespaces
_KEY_DATA = 0
_KEY_FLOW_INIT = 1
_KEY_TRAIN = 2
_KEY_INFER_UPDATE = 3
_KEY_INFER_SAMPLE = 4


class PipelineError(RuntimeError):
    """Raised when a pipeline stage fails; carries the stage identity."""

    def __init__(self, message, stage=None, completed_flows=None):
        super().__init__(message)
        self.stage = stage
        self.completed_flows = completed_flows or []


@dataclass
class FlowConfig:
    n_blocks: int = 6
    hidden: tuple[int, ...] = (128, 128)
    s_max: float = 2.0


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    max_epochs: int = 400
    patience: int = 50
    n_s_train: int = 64
    n_s_infer: int = 256
    val_fraction: float = 0.1


@dataclass
class TrainedPipeline:
    problem: InverseProblem
    flows: list[CouplingFlow]
    seed: int
    config_hash: str = ""
    problem_config: dict = field(default_factory=dict)
    train_config: TrainConfig = field(default_factory=TrainConfig)
    stage_histories: list[list[tuple[int, float, float]]] = field(default_factory=list)

    @property
    def n_stages(self) -> int:
        """Number of fiducial updates L; there are L+1 flows."""
        return len(self.flows) - 1


@dataclass
class PosteriorEnsemble:
    """Posterior samples (absolute parameters) plus derived statistics."""

    samples: np.ndarray  # (n, x_dim)
    fiducial: np.ndarray  # (x_dim,), the final fiducial x_L
    mean: np.ndarray
    cov: np.ndarray  # unbiased (n-1) estimator
    std: np.ndarray

    @classmethod
    def from_samples(cls, samples: np.ndarray, fiducial: np.ndarray) -> "PosteriorEnsemble":
        samples = np.asarray(samples, dtype=np.float64)
        mean = samples.mean(axis=0)
        centered = samples - mean
        denom = max(samples.shape[0] - 1, 1)
        cov = centered.T @ centered / denom
        cov = 0.5 * (cov + cov.T)
        return cls(samples, np.asarray(fiducial, dtype=np.float64), mean, cov, np.sqrt(np.diag(cov)))


def train_pipeline(
    problem: InverseProblem,
    n_train: int,
    L: int,
    flow_cfg: FlowConfig,
    train_cfg: TrainConfig,
    rng: Rng,
    progress=None,
) -> tuple[TrainedPipeline, list[FiducialDataset]]:
    """Run the full training phase; returns the pipeline and per-stage datasets.

    On divergence the raised PipelineError carries all flows completed so
    far so callers can persist them.
    """
    if L < 0:
        raise ValueError("L must be >= 0")
    data_rng = rng.child(_KEY_DATA)
    ds = build_stage0(problem, n_train, data_rng, val_fraction=train_cfg.val_fraction)
    datasets = [ds]
    flows: list[CouplingFlow] = []
    histories = []
    for j in range(L + 1):
        if progress:
            progress(f"stage {j}/{L}: training flow on {ds.n_records} records")
        flow = CouplingFlow.create(
            problem.x_dim,
            problem.x_dim,
            rng.child(_KEY_FLOW_INIT, j),
            n_blocks=flow_cfg.n_blocks,
            hidden=tuple(flow_cfg.hidden),
            s_max=flow_cfg.s_max,
        )
        dx_tr, ybar_tr = ds.train_arrays()
        dx_val, ybar_val = ds.val_arrays()
        flow.fit_normalization(dx_tr, ybar_tr)
        try:
            history = train_flow(
                flow,
                dx_tr,
                ybar_tr,
                dx_val,
                ybar_val,
                rng.child(_KEY_TRAIN, j),
                lr=train_cfg.lr,
                batch_size=train_cfg.batch_size,
                max_epochs=train_cfg.max_epochs,
                patience=train_cfg.patience,
                weight_decay=train_cfg.weight_decay,
            )
        except FloatingPointError as exc:
            raise PipelineError(
                f"flow training diverged at stage {j}: {exc}", stage=j, completed_flows=flows
            ) from exc
        flows.append(flow)
        histories.append(history)
        if j < L:
            if progress:
                progress(f"stage {j}/{L}: advancing fiducials (n_s={train_cfg.n_s_train})")
            try:
                ds = advance_stage(ds, flow, problem, train_cfg.n_s_train, data_rng)
            except FloatingPointError as exc:
                raise PipelineError(
                    f"fiducial advancement diverged after stage {j}: {exc}",
                    stage=j,
                    completed_flows=flows,
                ) from exc
            datasets.append(ds)
    pipeline = TrainedPipeline(
        problem=problem,
        flows=flows,
        seed=rng.seed,
        train_config=train_cfg,
        stage_histories=histories,
    )
    return pipeline, datasets


def intermediate_trajectory(pipeline: TrainedPipeline, y, rng: Rng, n_s: int | None = None):
    """Fiducials and scores (x_i, ybar_i) for i = 0..L along the inference loop."""
    problem = pipeline.problem
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (problem.y_dim,):
        raise ShapeError(f"y must have shape ({problem.y_dim},), got {y.shape}")
    if n_s is None:
        n_s = pipeline.train_config.n_s_infer
    L = pipeline.n_stages
    x = problem.default_fiducial()
    out = []
    for i in range(L):
        ybar = problem.score(x, y)
        out.append((x, ybar))
        update = pipeline.flows[i].posterior_mean_estimate(ybar, n_s, rng.child(_KEY_INFER_UPDATE, i))
        x = x + update
        if not np.all(np.isfinite(x)):
            raise PipelineError(f"non-finite fiducial at inference iteration {i}", stage=i)
    out.append((x, problem.score(x, y)))
    return out


def infer(pipeline: TrainedPipeline, y, n_samples: int, rng: Rng, n_s: int | None = None) -> PosteriorEnsemble:
    """Full inference: L fiducial updates, then n_samples from the final flow."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    traj = intermediate_trajectory(pipeline, y, rng, n_s=n_s)
    x_final, ybar_final = traj[-1]
    deltas = pipeline.flows[-1].sample(ybar_final, n_samples, rng.child(_KEY_INFER_SAMPLE))
    return PosteriorEnsemble.from_samples(x_final + deltas, x_final)


def save_pipeline(pipeline: TrainedPipeline, out_dir) -> None:
    """Write a pipeline bundle: manifest plus one checkpoint file per stage."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "n_stages": pipeline.n_stages,
        "n_flows": len(pipeline.flows),
        "x_dim": pipeline.problem.x_dim,
        "y_dim": pipeline.problem.y_dim,
        "cond_dim": pipeline.problem.x_dim,
        "seed": pipeline.seed,
        "config_hash": pipeline.config_hash,
        "problem": pipeline.problem_config,
        "train_config": {
            "lr": pipeline.train_config.lr,
            "weight_decay": pipeline.train_config.weight_decay,
            "batch_size": pipeline.train_config.batch_size,
            "max_epochs": pipeline.train_config.max_epochs,
            "patience": pipeline.train_config.patience,
            "n_s_train": pipeline.train_config.n_s_train,
            "n_s_infer": pipeline.train_config.n_s_infer,
            "val_fraction": pipeline.train_config.val_fraction,
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for j, flow in enumerate(pipeline.flows):
        (out / f"flow_{j:03d}.ckpt").write_bytes(save_checkpoint(flow))


def load_pipeline(bundle_dir, problem: InverseProblem | None = None) -> TrainedPipeline:
    """Load a bundle; rebuilds the problem from the manifest unless one is given."""
    bundle = Path(bundle_dir)
    manifest_path = bundle / "manifest.json"
    if not manifest_path.exists():
        raise PipelineError(f"no manifest.json in bundle {bundle}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise PipelineError(
            f"unsupported bundle format {manifest.get('format_version')}, expected {BUNDLE_FORMAT_VERSION}"
        )
    if problem is None:
        from .config import problem_from_config

        problem = problem_from_config(manifest["problem"])
    if problem.x_dim != manifest["x_dim"] or problem.y_dim != manifest["y_dim"]:
        raise PipelineError(
            f"bundle dims ({manifest['x_dim']}, {manifest['y_dim']}) do not match "
            f"problem dims ({problem.x_dim}, {problem.y_dim})"
        )
    flows = []
    for j in range(manifest["n_flows"]):
        path = bundle / f"flow_{j:03d}.ckpt"
        if not path.exists():
            raise PipelineError(f"missing checkpoint {path.name} in bundle")
        flows.append(
            load_checkpoint(path.read_bytes(), expected_x_dim=problem.x_dim, expected_cond_dim=problem.x_dim)
        )
    tc = manifest.get("train_config", {})
    train_cfg = TrainConfig(**tc) if tc else TrainConfig()
    return TrainedPipeline(
        problem=problem,
        flows=flows,
        seed=manifest.get("seed", 0),
        config_hash=manifest.get("config_hash", ""),
        problem_config=manifest.get("problem", {}),
        train_config=train_cfg,
    )
