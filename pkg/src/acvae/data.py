"""Dataset ingestion and the synthetic mixture benchmark.

Covers delimited numeric text, idx-format image files (big-endian, as the
format specifies) with area-average downscaling and optional binarization,
Gaussian noise augmentation for training batches, and generation of labeled
Gaussian-mixture data together with its exact oracle.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .gmm_oracle import GmmOracle


class DataError(ValueError):
    """Malformed input file."""


@dataclass(frozen=True)
class Dataset:
    """Fully observed instances, one per row, plus standardization stats.

    `mean`/`std` record the (train-split) statistics that produced the
    current values; raw datasets carry None.
    """

    x: np.ndarray
    labels: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise DataError(f"dataset must be 2-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("dataset contains non-finite entries")
        x.flags.writeable = False
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


def standardization_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std (ddof=0); constant features get std 1."""
    mean = ds.x.mean(axis=0)
    std = ds.x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def standardize(ds: Dataset, stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Apply (or compute, when stats is None) per-feature standardization."""
    mean, std = standardization_stats(ds) if stats is None else stats
    return replace(ds, x=(ds.x - mean) / std, mean=mean, std=std)


def destandardize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return values * std + mean


def split_dataset(
    ds: Dataset, fractions: tuple[float, float, float], rng: np.random.Generator
) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffled train/valid/test split; fractions must sum to 1."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    perm = rng.permutation(ds.n)
    n_train = int(round(fractions[0] * ds.n))
    n_valid = int(round(fractions[1] * ds.n))
    parts = (
        perm[:n_train],
        perm[n_train : n_train + n_valid],
        perm[n_train + n_valid :],
    )
    return tuple(
        Dataset(
            x=ds.x[idx],
            labels=None if ds.labels is None else ds.labels[idx],
            mean=ds.mean,
            std=ds.std,
        )
        for idx in parts
    )


def load_tabular(
    path,
    delimiter: str = ",",
    standardize_data: bool = True,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> Dataset:
    """Rectangular numeric text, one instance per row.

    With `standardize_data`, statistics come from this file unless `stats`
    supplies the training split's (mean, std) to apply to a held-out split.
    """
    rows: list[list[float]] = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            cells = [c for c in line.split(delimiter)]
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataError(
                    f"{path}:{lineno}: ragged row ({len(cells)} cells, expected {width})"
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    ds = Dataset(x=np.asarray(rows, dtype=np.float64))
    if standardize_data:
        return standardize(ds, stats)
    return ds


def save_tabular(path, values: np.ndarray, delimiter: str = ",") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(values):
            fh.write(delimiter.join(repr(float(v)) for v in row) + "\n")


def augment_noise(batch: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2); sigma=0 is the identity."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return batch
    return batch + sigma * rng.standard_normal(batch.shape)


# ---------------------------------------------------------------------------
# idx image files


_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def _read_idx(path) -> np.ndarray:
    """Parse one idx file (big-endian header and payload)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated idx header")
    zero, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or dtype_code not in _IDX_DTYPES:
        raise DataError(f"{path}: bad idx magic {raw[:4].hex()}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataError(f"{path}: truncated idx dimension table")
    dims = struct.unpack(f">{ndim}i", raw[4:header_len])
    dtype = _IDX_DTYPES[dtype_code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = raw[header_len:]
    if len(payload) < expected:
        raise DataError(
            f"{path}: truncated idx payload ({len(payload)} bytes, expected {expected})"
        )
    return np.frombuffer(payload, dtype=dtype, count=int(np.prod(dims))).reshape(dims)


def area_downscale(images: np.ndarray, side: int) -> np.ndarray:
    """Exact area-average resize of (n, h, w) images to (n, side, side)."""

    def weights(n_in: int, n_out: int) -> np.ndarray:
        w = np.zeros((n_out, n_in))
        step = n_in / n_out
        for i in range(n_out):
            start, end = i * step, (i + 1) * step
            for j in range(int(np.floor(start)), int(np.ceil(end))):
                w[i, j] = max(0.0, min(end, j + 1) - max(start, j)) / step
        return w

    wr = weights(images.shape[1], side)
    wc = weights(images.shape[2], side)
    return np.einsum("oh,nhw,pw->nop", wr, images, wc)


def load_idx_images(
    path, target_side: int | None = None, binarize_threshold: float | None = None
) -> Dataset:
    """idx3 image file -> flattened rows in [0, 1], optionally binarized."""
    arr = _read_idx(path)
    if arr.ndim != 3:
        raise DataError(f"{path}: expected a 3-D image idx file, got ndim {arr.ndim}")
    images = arr.astype(np.float64)
    if arr.dtype.kind == "u" or arr.dtype.kind == "i":
        images = images / 255.0
    if target_side is not None:
        images = area_downscale(images, target_side)
    if binarize_threshold is not None:
        images = (images >= binarize_threshold).astype(np.float64)
    return Dataset(x=images.reshape(images.shape[0], -1))


def load_idx_labels(path) -> np.ndarray:
    arr = _read_idx(path)
    if arr.ndim != 1:
        raise DataError(f"{path}: expected a 1-D label idx file, got ndim {arr.ndim}")
    return arr.astype(np.int64)


# ---------------------------------------------------------------------------
# synthetic mixture benchmark


@dataclass(frozen=True)
class GmmSpec:
    """Generator settings for the synthetic labeled mixture."""

    n_components: int
    dim: int
    n_samples: int
    separation: float = 4.0
    eig_range: tuple[float, float] = (0.5, 2.0)
    weights: tuple[float, ...] | None = None


def _random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def gen_gmm(spec: GmmSpec, rng: np.random.Generator) -> tuple[Dataset, GmmOracle]:
    """Sample a labeled dataset and return it with its exact generating mixture.

    Component means are rescaled so the minimum pairwise distance equals
    `separation`; covariances get random orientations with eigenvalues drawn
    log-uniformly from `eig_range`.
    """
    k, d = spec.n_components, spec.dim
    if spec.weights is not None:
        weights = np.asarray(spec.weights, dtype=np.float64)
        weights = weights / weights.sum()
    else:
        weights = np.full(k, 1.0 / k)

    means = rng.standard_normal((k, d))
    means -= means.mean(axis=0)
    if k > 1:
        dists = [
            np.linalg.norm(means[i] - means[j])
            for i in range(k)
            for j in range(i + 1, k)
        ]
        means *= spec.separation / max(min(dists), 1e-12)

    covs = np.empty((k, d, d))
    lo, hi = spec.eig_range
    for c in range(k):
        q = _random_orthogonal(d, rng)
        eig = np.exp(rng.uniform(np.log(lo), np.log(hi), size=d))
        covs[c] = (q * eig) @ q.T

    oracle = GmmOracle(weights=weights, means=means, covs=covs)
    xs, labels = oracle.sample(spec.n_samples, rng)
    return Dataset(x=xs, labels=labels), oracle
