"""Small numeric and seeding helpers used across modules."""

from __future__ import annotations

import hashlib

import numpy as np


def sigmoid(z):
    """Numerically stable logistic function, elementwise."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    if out.ndim == 0:
        return float(out)
    return out


def logistic_loss(margins):
    """Mean of log(1 + exp(-m)) evaluated without overflow.

    `margins` are y*F values; the mean over them is the empirical
    negative log-likelihood in the +1/-1 convention.
    """
    m = np.asarray(margins, dtype=float)
    return float(np.mean(np.logaddexp(0.0, -m)))


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit seed derived from a master seed and string-able tags.

    Independent of call order, unlike consuming a shared generator.
    """
    key = ":".join([str(int(master))] + [str(p) for p in parts])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1
