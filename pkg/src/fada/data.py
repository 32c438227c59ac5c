"""Synthetic multi-domain datasets and CSV feature files."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


class LabelAccessError(PermissionError):
    """Raised when a training path asks for labels of an unlabeled target split."""


SPLITS = ("all", "train", "eval")


@dataclass(frozen=True)
class DomainDataset:
    domain_id: str
    features: np.ndarray
    labels: np.ndarray | None = None
    split: str = "all"

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        if not np.all(np.isfinite(f)):
            raise DataError(f"{self.domain_id}: non-finite feature values")
        object.__setattr__(self, "features", f)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (f.shape[0],):
                raise DataError(f"{self.domain_id}: {lab.shape[0]} labels for {f.shape[0]} rows")
            object.__setattr__(self, "labels", lab)
        if self.split not in SPLITS:
            raise DataError(f"{self.domain_id}: unknown split {self.split!r}")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise LabelAccessError(f"{self.domain_id} ({self.split}) carries no labels")
        return self.labels

    def unlabeled(self) -> "DomainDataset":
        return replace(self, labels=None)


def rotate(points: np.ndarray, degrees: float) -> np.ndarray:
    th = np.deg2rad(degrees)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return points @ rot.T


def gen_rotated_moons(n: int, rotation_deg: float = 0.0, noise_sigma: float = 0.1, seed: int = 0,
                      domain_id: str | None = None) -> DomainDataset:
    """Two interleaved half circles (n/2 per class), rotated about the origin."""
    if n % 2:
        raise DataError(f"moons need an even sample count, got {n}")
    if noise_sigma < 0:
        raise DataError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    h = n // 2
    t0 = rng.uniform(0.0, np.pi, h)
    t1 = rng.uniform(0.0, np.pi, h)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]) + rng.normal(0.0, noise_sigma, (n, 2))
    y = np.concatenate([np.zeros(h, np.int64), np.ones(h, np.int64)])
    order = rng.permutation(n)
    x, y = rotate(x[order], rotation_deg), y[order]
    return DomainDataset(domain_id or f"moons{rotation_deg:g}", x, y)


def class_means(K: int, d: int, radius: float = 3.0) -> np.ndarray:
    """Base class centres: evenly spaced on a circle in the first two dimensions."""
    means = np.zeros((K, d))
    ang = 2 * np.pi * np.arange(K) / K
    if d == 1:
        means[:, 0] = radius * np.arange(K)
    else:
        means[:, 0] = radius * np.cos(ang)
        means[:, 1] = radius * np.sin(ang)
    return means


def gen_shifted_gaussians(n: int, K: int, mean_shift_vector, cov_scale: float = 1.0, seed: int = 0,
                          domain_id: str | None = None) -> DomainDataset:
    """K isotropic Gaussian blobs, all translated by ``mean_shift_vector``."""
    if K < 2:
        raise DataError(f"need at least two classes, got K={K}")
    shift = np.atleast_1d(np.asarray(mean_shift_vector, dtype=np.float64))
    d = shift.size
    rng = np.random.default_rng(seed)
    counts = np.full(K, n // K)
    counts[: n % K] += 1
    y = np.repeat(np.arange(K), counts)
    noise = rng.normal(0.0, np.sqrt(cov_scale), (n, d))
    x = class_means(K, d)[y] + noise + shift
    order = rng.permutation(n)
    return DomainDataset(domain_id or "gauss", x[order], y[order])


def shuffle_labels(ds: DomainDataset, seed: int) -> DomainDataset:
    """Randomly permute labels across rows (destroys the feature/label relation)."""
    lab = ds.require_labels()
    return replace(ds, labels=np.random.default_rng(seed).permutation(lab))


def train_eval_split(ds: DomainDataset, eval_fraction: float = 0.2, seed: int = 0,
                     target: bool = False) -> tuple[DomainDataset, DomainDataset]:
    """Disjoint, exhaustive split. A target's train split has its labels removed."""
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_eval = int(round(eval_fraction * n))
    ev, tr = np.sort(perm[:n_eval]), np.sort(perm[n_eval:])
    lab = ds.labels
    train = DomainDataset(ds.domain_id, ds.features[tr], None if (target or lab is None) else lab[tr], "train")
    evals = DomainDataset(ds.domain_id, ds.features[ev], None if lab is None else lab[ev], "eval")
    return train, evals


# ----------------------------------------------------------------------- CSV


def export_csv(ds: DomainDataset, path: str | Path) -> None:
    d = ds.dim
    header = [f"f{j}" for j in range(d)] + (["label"] if ds.labeled else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.features[i]]
            if ds.labeled:
                row.append(str(int(ds.labels[i])))
            w.writerow(row)


def ingest_csv(path: str | Path, domain_id: str | None = None, split: str = "all") -> DomainDataset:
    """Read ``f0,...,f{d-1}[,label]``; the header decides whether labels exist."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: cannot read: {exc.strerror}") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    labeled = bool(header) and header[-1] == "label"
    d = len(header) - int(labeled)
    if d < 1 or header[:d] != [f"f{j}" for j in range(d)]:
        raise DataError(f"{path}: line 1: header must be f0,...,f{{d-1}}[,label]")
    if len(rows) == 1:
        raise DataError(f"{path}: no data rows")
    feats = np.empty((len(rows) - 1, d))
    labels = np.empty(len(rows) - 1, dtype=np.int64) if labeled else None
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != len(header):
            raise DataError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            feats[i] = [float(v) for v in row[:d]]
            if not np.all(np.isfinite(feats[i])):
                raise ValueError("non-finite feature value")
            if labeled:
                labels[i] = int(row[d])
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None
    return DomainDataset(domain_id or path.stem, feats, labels, split)
