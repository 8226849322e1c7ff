"""Dense float64 kernels: matmul, masked softmax, layer norm, seeded RNG.

Matrices are plain 2-D, C-contiguous ``numpy`` arrays of float64; boolean
mask patterns are 2-D bool arrays where ``True`` marks an allowed (i, j)
pair.  Masking is realised by excluding entries from the softmax
normalisation, never by adding a large negative sentinel, so disallowed
entries come out exactly 0.0.

All functions are pure and deterministic: identical inputs produce
bit-identical outputs within a process, and the PRNG is pinned to a named
algorithm (PCG64) so seeded streams reproduce across platforms.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, ShapeError

__all__ = [
    "as_matrix",
    "matmul",
    "masked_softmax",
    "layer_norm",
    "seeded_rng",
    "check_mask",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array and reject non-finite values."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractViolation(f"{name} contains non-finite values")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Accumulation is delegated to numpy's float64 kernel, which is
    deterministic for identical inputs within a build.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def check_mask(allowed: np.ndarray) -> np.ndarray:
    """Validate a mask pattern: 2-D bool, diagonal allowed, no empty rows."""
    allowed = np.asarray(allowed)
    if allowed.ndim != 2 or allowed.dtype != np.bool_:
        raise ShapeError(f"mask must be a 2-D bool array, got {allowed.dtype} {allowed.shape}")
    n = min(allowed.shape)
    if not np.all(allowed[np.arange(n), np.arange(n)]):
        raise ContractViolation("mask disallows a diagonal entry")
    if not np.all(allowed.any(axis=1)):
        raise ContractViolation("mask has a fully disallowed row")
    return allowed


def masked_softmax(logits, allowed: np.ndarray) -> np.ndarray:
    """Row softmax over the allowed entries only.

    Disallowed entries are exactly 0.0 in the result; each row's allowed
    entries are exp-normalised with max-subtraction for stability.

    Raises :class:`ContractViolation` if any row has no allowed entry.
    """
    logits = as_matrix(logits, "logits")
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != logits.shape:
        raise ShapeError(f"mask shape {allowed.shape} != logits shape {logits.shape}")
    if not np.all(allowed.any(axis=1)):
        raise ContractViolation("softmax row is fully masked")
    shifted = np.where(allowed, logits, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    # exp(-inf) == 0.0 exactly, so disallowed entries never enter the sum.
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> np.ndarray:
    """Per-row normalisation to zero mean / unit variance, then affine."""
    x = as_matrix(x, "x")
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"gain/bias must have length {x.shape[1]}, got {gain.shape} and {bias.shape}"
        )
    if not eps > 0:
        raise ShapeError("eps must be positive")
    mu = x.mean(axis=1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator pinned to the PCG64 bit generator.

    Same seed, same platform-independent stream; used everywhere a seed
    appears so runs are reproducible bit-for-bit.
    """
    return np.random.Generator(np.random.PCG64(seed))
