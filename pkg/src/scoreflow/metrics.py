"""Quantitative evaluation: posterior-moment errors, image metrics, sweeps.

Stages in a report are 1-indexed: stage s is the posterior approximation
produced by flow s-1 at fiducial x_{s-1}, so stage 1 is the non-iterative
baseline and stage L+1 is the final approximation. Point-estimate image
metrics use the updated fiducial x_s (the posterior-mean update), matching
how reconstruction quality is scored per refinement step; the final stage
uses the ensemble mean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .numerics import Rng, ShapeError
from .pipeline import (
    FlowConfig,
    PosteriorEnsemble,
    TrainConfig,
    TrainedPipeline,
    intermediate_trajectory,
    train_pipeline,
)
from .problems import AnalyticPosterior, InverseProblem, gaussian_kernel_2d


def rmse(estimate, truth) -> float:
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ShapeError(f"shapes disagree: {estimate.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((estimate - truth) ** 2)))


def psnr(estimate, truth, data_range: float) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the inputs are identical."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    r = rmse(estimate, truth)
    if r == 0.0:
        return float("inf")
    return 20.0 * np.log10(data_range) - 20.0 * np.log10(r)


def ssim(estimate, truth, data_range: float, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with a Gaussian window and standard stabilizers.

    Inputs must be 2-D images of identical shape, at least window wide.
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.ndim != 2 or truth.ndim != 2:
        raise ShapeError("ssim requires 2-D image inputs")
    if estimate.shape != truth.shape:
        raise ShapeError(f"shapes disagree: {estimate.shape} vs {truth.shape}")
    if min(estimate.shape) < window:
        raise ShapeError(f"image smaller than ssim window {window}: {estimate.shape}")
    kern = gaussian_kernel_2d(window, sigma)

    def filt(img):
        return convolve2d(img, kern, mode="valid")

    mu1 = filt(estimate)
    mu2 = filt(truth)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = filt(estimate * estimate) - mu1_sq
    s2 = filt(truth * truth) - mu2_sq
    s12 = filt(estimate * truth) - mu12
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu12 + c1) * (2 * s12 + c2)
    den = (mu1_sq + mu2_sq + c1) * (s1 + s2 + c2)
    return float(np.mean(num / den))


def moment_errors(ens: PosteriorEnsemble, oracle: AnalyticPosterior) -> tuple[float, float]:
    """L2 error of the ensemble mean and Frobenius error of its covariance."""
    if ens.mean.shape != oracle.mean.shape:
        raise ShapeError(f"dims disagree: {ens.mean.shape} vs {oracle.mean.shape}")
    mean_err = float(np.linalg.norm(ens.mean - oracle.mean))
    cov_err = float(np.linalg.norm(ens.cov - oracle.cov.dense(), ord="fro"))
    return mean_err, cov_err


@dataclass
class MetricRecord:
    stage: int  # 1-based; stage s is flow s-1's approximation
    obs: int
    mean_err: float  # nan when no analytic oracle
    cov_err: float
    psnr: float
    ssim: float  # nan for non-image problems
    rmse: float


@dataclass
class MetricReport:
    n_stages: int  # number of report stages = L + 1
    records: list[MetricRecord] = field(default_factory=list)
    final_std: np.ndarray | None = None  # (n_obs, x_dim) per-dim posterior std

    def stage_values(self, stage: int, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.records if r.stage == stage])

    def aggregate(self, metric: str) -> list[tuple[float, float]]:
        """Per-stage (mean, std) over observations, nan-aware."""
        out = []
        for s in range(1, self.n_stages + 1):
            vals = self.stage_values(s, metric)
            finite = vals[np.isfinite(vals)]
            if finite.size == 0:
                out.append((float("nan"), float("nan")))
            else:
                out.append((float(finite.mean()), float(finite.std())))
        return out


def evaluate_testset(
    pipeline: TrainedPipeline,
    problem: InverseProblem,
    n_test: int,
    rng: Rng,
    n_samples: int = 2000,
    psnr_range: float = 2.0,
    progress=None,
) -> MetricReport:
    """Fresh test observations through the full inference loop, scored per stage."""
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    L = pipeline.n_stages
    report = MetricReport(n_stages=L + 1)
    final_stds = np.empty((n_test, problem.x_dim))
    img_shape = problem.image_shape
    for t in range(n_test):
        obs_rng = rng.child(t)
        x_true = problem.sample_prior(obs_rng.child(0))
        y = problem.simulate(x_true, obs_rng.child(0, 1))
        traj = intermediate_trajectory(pipeline, y, obs_rng.child(1))
        oracle = problem.analytic_posterior(y) if problem.has_analytic_posterior else None
        for s in range(1, L + 2):
            x_prev, ybar_prev = traj[s - 1]
            deltas = pipeline.flows[s - 1].sample(ybar_prev, n_samples, obs_rng.child(2, s))
            ens = PosteriorEnsemble.from_samples(x_prev + deltas, x_prev)
            if s <= L:
                point = traj[s][0]
            else:
                point = ens.mean
                final_stds[t] = ens.std
            if oracle is not None:
                mean_err, cov_err = moment_errors(ens, oracle)
            else:
                mean_err, cov_err = float("nan"), float("nan")
            ssim_val = float("nan")
            if img_shape is not None:
                ssim_val = ssim(point.reshape(img_shape), x_true.reshape(img_shape), psnr_range)
            report.records.append(
                MetricRecord(
                    stage=s,
                    obs=t,
                    mean_err=mean_err,
                    cov_err=cov_err,
                    psnr=psnr(point, x_true, psnr_range),
                    ssim=ssim_val,
                    rmse=rmse(point, x_true),
                )
            )
        if progress:
            progress(f"evaluated observation {t + 1}/{n_test}")
    report.final_std = final_stds
    return report


def sweep_training_size(
    problem: InverseProblem,
    sizes: list[int],
    L: int,
    flow_cfg: FlowConfig,
    train_cfg: TrainConfig,
    rng: Rng,
    n_test: int = 50,
    n_samples: int = 2000,
    psnr_range: float = 2.0,
    progress=None,
) -> dict[int, MetricReport]:
    """Train and evaluate one pipeline per training-set size."""
    if not sizes:
        raise ValueError("sizes must be nonempty")
    out = {}
    for idx, n_train in enumerate(sizes):
        if progress:
            progress(f"sweep: training with n_train={n_train}")
        pipe, _ = train_pipeline(problem, n_train, L, flow_cfg, train_cfg, rng.child(idx, 0), progress=progress)
        out[n_train] = evaluate_testset(
            pipe, problem, n_test, rng.child(idx, 1), n_samples=n_samples,
            psnr_range=psnr_range, progress=progress,
        )
    return out


_RECORD_FIELDS = ["stage", "obs", "mean_err", "cov_err", "psnr", "ssim", "rmse"]


def write_records_csv(report: MetricReport, path, config_hash: str = "") -> None:
    """Per-record metrics; one row per (stage, observation)."""
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(_RECORD_FIELDS)
        for r in report.records:
            w.writerow([r.stage, r.obs, repr(r.mean_err), repr(r.cov_err),
                        repr(r.psnr), repr(r.ssim), repr(r.rmse)])


def write_summary_csv(report: MetricReport, path, config_hash: str = "") -> None:
    """Per-stage aggregates (mean and std over observations)."""
    metrics = ["mean_err", "cov_err", "psnr", "ssim", "rmse"]
    aggs = {m: report.aggregate(m) for m in metrics}
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["stage"] + [f"{m}_{k}" for m in metrics for k in ("mean", "std")])
        for s in range(1, report.n_stages + 1):
            row = [s]
            for m in metrics:
                mean, std = aggs[m][s - 1]
                row.extend([repr(mean), repr(std)])
            w.writerow(row)


def write_sweep_csv(results: dict[int, MetricReport], path, config_hash: str = "") -> None:
    """Sweep matrix: one row per (training size, stage) with aggregate errors."""
    metrics = ["mean_err", "cov_err", "psnr", "rmse"]
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["n_train", "stage"] + [f"{m}_mean" for m in metrics])
        for n_train in sorted(results):
            report = results[n_train]
            aggs = {m: report.aggregate(m) for m in metrics}
            for s in range(1, report.n_stages + 1):
                w.writerow([n_train, s] + [repr(aggs[m][s - 1][0]) for m in metrics])
