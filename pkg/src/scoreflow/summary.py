"""Per-stage training tuples: fiducials, residual targets, score summaries.

A `FiducialDataset` holds, for every record, the ground-truth parameters,
the observation, the current fiducial, the residual target (truth minus
fiducial), and the score of the log-likelihood at the fiducial. Stage 0 is
built from prior/noise draws; later stages are produced by updating every
fiducial with the trained flow's posterior-mean estimate and recomputing
residuals and scores.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .flow import CouplingFlow
from .numerics import Rng
from .problems import InverseProblem

DATASET_MAGIC = b"SFIDDATA"
DATASET_VERSION = 1

# spawn-key namespaces for reproducible per-record streams
_KEY_RECORD = 0
_KEY_ADVANCE = 1


class DatasetError(ValueError):
    """Raised for malformed dataset payloads or stage mismatches."""


@dataclass
class FiducialDataset:
    stage: int
    x_true: np.ndarray  # (n, x_dim)
    y: np.ndarray  # (n, y_dim)
    x_fid: np.ndarray  # (n, x_dim)
    dx: np.ndarray  # (n, x_dim), always x_true - x_fid
    ybar: np.ndarray  # (n, x_dim), score at the fiducial
    is_val: np.ndarray  # (n,) bool, validation split tag

    @property
    def n_records(self) -> int:
        return self.x_true.shape[0]

    def train_arrays(self):
        m = ~self.is_val
        return self.dx[m], self.ybar[m]

    def val_arrays(self):
        m = self.is_val
        return self.dx[m], self.ybar[m]


def build_stage0(problem: InverseProblem, n_train: int, rng: Rng, val_fraction=0.1) -> FiducialDataset:
    """Stage-0 dataset: prior draws, simulated observations, default fiducial.

    Each record uses its own child stream keyed by the record index, so
    generation order does not matter for reproducibility.
    """
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    x_dim, y_dim = problem.x_dim, problem.y_dim
    x_true = np.empty((n_train, x_dim))
    y = np.empty((n_train, y_dim))
    x0 = problem.default_fiducial()
    for i in range(n_train):
        r = rng.child(_KEY_RECORD, i)
        x_true[i] = problem.sample_prior(r)
        y[i] = problem.simulate(x_true[i], r)
    x_fid = np.tile(x0, (n_train, 1))
    dx = x_true - x_fid
    ybar = np.empty((n_train, x_dim))
    for i in range(n_train):
        ybar[i] = problem.score(x_fid[i], y[i])
    n_val = int(np.floor(val_fraction * n_train))
    is_val = np.zeros(n_train, dtype=bool)
    if n_val > 0:
        is_val[n_train - n_val :] = True
    return FiducialDataset(0, x_true, y, x_fid, dx, ybar, is_val)


def advance_stage(
    ds: FiducialDataset, flow: CouplingFlow, problem: InverseProblem, n_s: int, rng: Rng
) -> FiducialDataset:
    """One fiducial update for every record using the stage's trained flow.

    x_{i+1} = x_i + empirical mean of n_s conditional flow samples given
    the stored score; residuals and scores are then recomputed. Ground
    truth and observations are carried over untouched.
    """
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    n, x_dim = ds.x_true.shape
    next_stage = ds.stage + 1
    # per-record latent draws, batched through the inverse flow one slot at a time
    z = np.empty((n, n_s, x_dim))
    for i in range(n):
        z[i] = rng.child(_KEY_ADVANCE, next_stage, i).standard_normal((n_s, x_dim))
    update = np.zeros((n, x_dim))
    for k in range(n_s):
        xk, _ = flow.inverse(z[:, k, :], ds.ybar)
        update += xk
    update /= n_s
    bad = np.flatnonzero(~np.all(np.isfinite(update), axis=1))
    if bad.size:
        raise FloatingPointError(f"non-finite fiducial update for records {bad.tolist()}")
    x_fid = ds.x_fid + update
    dx = ds.x_true - x_fid
    ybar = np.empty((n, x_dim))
    for i in range(n):
        ybar[i] = problem.score(x_fid[i], ds.y[i])
    return FiducialDataset(next_stage, ds.x_true, ds.y, x_fid, dx, ybar, ds.is_val.copy())


def save_dataset(ds: FiducialDataset) -> bytes:
    """Versioned binary payload: header, split tags, then f64 record arrays."""
    n, x_dim = ds.x_true.shape
    y_dim = ds.y.shape[1]
    parts = [
        DATASET_MAGIC,
        struct.pack("<IIIII", DATASET_VERSION, ds.stage, n, x_dim, y_dim),
        ds.is_val.astype(np.uint8).tobytes(),
    ]
    for arr in (ds.x_true, ds.y, ds.x_fid, ds.dx, ds.ybar):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def load_dataset(data: bytes, expected_stage: int | None = None) -> FiducialDataset:
    if len(data) < len(DATASET_MAGIC) + 20:
        raise DatasetError("dataset truncated before header")
    if data[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DatasetError("bad dataset magic bytes")
    off = len(DATASET_MAGIC)
    version, stage, n, x_dim, y_dim = struct.unpack_from("<IIIII", data, off)
    off += 20
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}, expected {DATASET_VERSION}")
    if expected_stage is not None and stage != expected_stage:
        raise DatasetError(f"dataset is for stage {stage}, expected stage {expected_stage}")

    def take(count, dtype):
        nonlocal off
        size = count * np.dtype(dtype).itemsize
        if off + size > len(data):
            raise DatasetError("dataset truncated in payload")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).copy()
        off += size
        return arr

    is_val = take(n, np.uint8).astype(bool)
    x_true = take(n * x_dim, "<f8").reshape(n, x_dim)
    y = take(n * y_dim, "<f8").reshape(n, y_dim)
    x_fid = take(n * x_dim, "<f8").reshape(n, x_dim)
    dx = take(n * x_dim, "<f8").reshape(n, x_dim)
    ybar = take(n * x_dim, "<f8").reshape(n, x_dim)
    if off != len(data):
        raise DatasetError("trailing bytes after dataset payload")
    return FiducialDataset(stage, x_true, y, x_fid, dx, ybar, is_val)
