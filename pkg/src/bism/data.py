"""Synthetic datasets, epoch-based minibatching, and text persistence."""

import os

import numpy as np
from dataclasses import dataclass

from .errors import ConfigError, ParseError, SizeError

__all__ = ["Dataset", "checkerboard", "grbm_synthetic", "BatchIterator",
           "next_batch", "save_dataset", "load_dataset"]


@dataclass
class Dataset:
    points: np.ndarray
    name: str = ""
    seed: int | None = None
    generator: str = ""


def checkerboard(n, rng, seed=None):
    """n points from the centered 4x4 checkerboard.

    Proposals are uniform on [0,4)^2, kept when floor(x1)+floor(x2) is
    even (8 of 16 unit cells), then shifted by (-2,-2).
    """
    if n < 1:
        raise ConfigError("checkerboard: n must be at least 1")
    chunks = []
    got = 0
    while got < n:
        m = max(2 * (n - got), 1024)
        prop = rng.uniform(0.0, 4.0, (m, 2))
        keep = (np.floor(prop[:, 0]) + np.floor(prop[:, 1])) % 2 == 0
        acc = prop[keep]
        chunks.append(acc)
        got += len(acc)
    pts = np.concatenate(chunks)[:n] - 2.0
    return Dataset(pts, name="checkerboard", seed=seed, generator="checkerboard")


def grbm_synthetic(theta, n, rng, seed=None):
    """Exact draws from a GRBM: latent configuration by enumerated mass,
    then the Gaussian conditional v|h."""
    W = np.asarray(theta["W"], dtype=np.float64)
    b = np.asarray(theta["b"], dtype=np.float64)
    c = np.asarray(theta["c"], dtype=np.float64)
    sigma = float(np.exp(theta["log_sigma"]))
    d_v, d_h = W.shape
    if d_h > 10:
        raise SizeError(f"grbm_synthetic: enumeration limited to d_h <= 10, got {d_h}")
    H = ((np.arange(2 ** d_h)[:, None] >> np.arange(d_h)) & 1).astype(np.float64)
    means = b + sigma * (H @ W.T)
    logm = H @ c + ((means ** 2).sum(axis=1) - b @ b) / (2 * sigma ** 2)
    w = np.exp(logm - logm.max())
    w /= w.sum()
    idx = rng.choice(len(w), size=n, p=w)
    pts = means[idx] + sigma * rng.standard_normal((n, d_v))
    return Dataset(pts, name="grbm_synthetic", seed=seed, generator="grbm_synthetic")


class BatchIterator:
    """Epoch shuffling without replacement; short final batches dropped."""

    def __init__(self, dataset, batch_size, rng):
        pts = dataset.points if isinstance(dataset, Dataset) else np.asarray(dataset)
        if batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if batch_size > len(pts):
            raise ConfigError(
                f"batch_size {batch_size} exceeds dataset size {len(pts)}")
        self.batch_size = batch_size
        self.epoch = 0
        self._pts = pts
        self._rng = rng
        self._order = rng.permutation(len(pts))
        self._pos = 0

    def next(self):
        if self._pos + self.batch_size > len(self._pts):
            self._order = self._rng.permutation(len(self._pts))
            self._pos = 0
            self.epoch += 1
        sl = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self._pts[sl]


def next_batch(iterator):
    return iterator.next()


def save_dataset(path, dataset):
    pts = np.atleast_2d(np.asarray(dataset.points, dtype=np.float64))
    n, d = pts.shape
    with open(path, "w") as f:
        f.write(f"# dataset v1 {n} {d}\n")
        for row in pts:
            f.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def load_dataset(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError("line 1: empty file, expected '# dataset v1 <n> <d>'")
    head = lines[0].split()
    if len(head) != 5 or head[:3] != ["#", "dataset", "v1"]:
        raise ParseError("line 1: expected header '# dataset v1 <n> <d>'")
    try:
        n, d = int(head[3]), int(head[4])
    except ValueError:
        raise ParseError("line 1: n and d must be integers") from None
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != d:
            raise ParseError(f"line {i}: expected {d} values, got {len(vals)}")
        try:
            rows.append([float(x) for x in vals])
        except ValueError:
            raise ParseError(f"line {i}: non-numeric value") from None
    if len(rows) != n:
        raise ParseError(f"header declares {n} rows, file has {len(rows)}")
    name = os.path.splitext(os.path.basename(str(path)))[0]
    return Dataset(np.asarray(rows, dtype=np.float64), name=name)
