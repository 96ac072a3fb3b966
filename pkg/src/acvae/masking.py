"""Partial observations: bitmask representation, the zero-fill+mask network
encoding, and the mask samplers used during training and evaluation.

Masks and partial observations are immutable values; samplers take an
explicit numpy Generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ObservationMask:
    """Boolean vector; True marks a feature as observed."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def dim(self) -> int:
        return self.bits.shape[-1]

    def observed_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def unobserved_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.bits)

    def n_observed(self) -> int:
        return int(self.bits.sum())

    def with_observed(self, index: int) -> "ObservationMask":
        bits = self.bits.copy()
        bits[index] = True
        return ObservationMask(bits)


@dataclass(frozen=True)
class PartialObservation:
    """Full-length value vector plus the mask saying which entries count.

    Consumers must never read the unobserved entries; encode_partial zeroes
    them so the stored values are irrelevant downstream.
    """

    values: np.ndarray
    mask: ObservationMask

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape[-1] != self.mask.dim:
            raise ValueError(
                f"values dim {values.shape[-1]} != mask dim {self.mask.dim}"
            )
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


def encode_partial(p: PartialObservation) -> np.ndarray:
    """Canonical 2d-length network input: zero-filled values, then the bits."""
    b = p.mask.bits.astype(p.values.dtype)
    return np.concatenate([p.values * b, b], axis=-1)


def encode_partial_batch(values: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Vectorized encode_partial for (n, d) values against (n, d) bool bits."""
    b = bits.astype(values.dtype)
    return np.concatenate([values * b, b], axis=-1)


def sample_mask_bernoulli(d: int, p: float, rng: np.random.Generator) -> ObservationMask:
    """Each bit observed independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    return ObservationMask(rng.random(d) < p)


def sample_mask_uniform_fraction(
    d: int, lo: float, hi: float, rng: np.random.Generator
) -> ObservationMask:
    """Draw a fraction f ~ U[lo, hi], then exactly round(f*d) random indices."""
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"need 0 <= lo <= hi <= 1, got lo={lo}, hi={hi}")
    f = rng.uniform(lo, hi)
    count = int(round(f * d))
    bits = np.zeros(d, dtype=bool)
    if count > 0:
        bits[rng.choice(d, size=count, replace=False)] = True
    return ObservationMask(bits)


def bernoulli_mask_matrix(n: int, d: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """(n, d) boolean matrix of independent Bernoulli masks (training batches)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    return rng.random((n, d)) < p


def uniform_fraction_mask_matrix(
    n: int, d: int, lo: float, hi: float, rng: np.random.Generator
) -> np.ndarray:
    """(n, d) boolean matrix; each row an independent uniform-fraction mask."""
    return np.stack(
        [sample_mask_uniform_fraction(d, lo, hi, rng).bits for _ in range(n)]
    )


def save_masks(path, masks: np.ndarray) -> None:
    """One line per instance: d characters of '0'/'1' (evaluation manifests)."""
    masks = np.asarray(masks, dtype=bool)
    with open(path, "w", encoding="ascii") as fh:
        for row in np.atleast_2d(masks):
            fh.write("".join("1" if b else "0" for b in row) + "\n")


def load_masks(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if set(line) - {"0", "1"}:
                raise ValueError(f"{path}:{lineno}: mask lines must be '0'/'1'")
            rows.append([c == "1" for c in line])
    return np.asarray(rows, dtype=bool)
