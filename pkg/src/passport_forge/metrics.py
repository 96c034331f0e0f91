"""Scalar evaluation metrics: accuracy, bit dissimilarity, signature detection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, sign_pm1


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def accuracy(logits, labels) -> float:
    """Fraction of argmax predictions matching labels; ties go to the lowest index."""
    z = _as_array(logits)
    y = np.asarray(labels)
    if z.ndim != 2:
        raise ValueError(f"logits must be [N,K], got {z.shape}")
    if len(z) == 0:
        raise ValueError("accuracy of an empty batch is undefined")
    if y.shape != (len(z),):
        raise ValueError(f"labels shape {y.shape} does not match batch {len(z)}")
    preds = np.argmax(z, axis=1)
    return float(np.mean(preds == y, dtype=np.float64))


def bdr(gamma_forged, gamma_auth) -> float:
    """Bit dissimilarity rate: fraction of scale-factor signs that differ.

    Uses sign(0) := +1; higher means a more distinct forged signature.
    """
    a = _as_array(gamma_forged)
    b = _as_array(gamma_auth)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"bdr needs equal-length vectors, got {a.shape} vs {b.shape}")
    return float(np.mean(sign_pm1(a) != sign_pm1(b), dtype=np.float64))


def sdr(extracted_bits, signature_bits) -> float:
    """Signature detection rate: fraction of extracted bits matching the target."""
    a = _as_array(extracted_bits)
    b = _as_array(signature_bits)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"sdr needs equal-length vectors, got {a.shape} vs {b.shape}")
    return float(np.mean(a == b, dtype=np.float64))


@dataclass
class MetricsRecord:
    """One evaluation row with context tags for reports."""

    acc: float = float("nan")
    bdr: float = float("nan")
    sdr: float = float("nan")
    tags: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        row = dict(self.tags)
        row.update(acc=self.acc, bdr=self.bdr, sdr=self.sdr)
        return row
