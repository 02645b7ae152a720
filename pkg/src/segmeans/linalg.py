"""Dense float32 kernels for the toy transformer encoder.

Matrices are 2-D ``numpy.ndarray`` values of dtype ``float32`` in C (row
major) order. Model data stays in float32, matching common edge-inference
practice, but every reduction (matrix products, softmax normalisation,
layer-norm moments) accumulates in float64 before rounding back. That is
what lets the exact-equivalence checks between execution modes use tight
tolerances.

Randomness comes from the Philox counter-based generator, which produces
the same stream for the same seed on every platform numpy supports.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

DTYPE = np.float32

# tanh-approximation GELU constants
_GELU_SCALE = 0.7978845608028654  # sqrt(2 / pi)
_GELU_CUBIC = 0.044715


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator; identical seed gives an identical stream."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def seeded_matrix(rows: int, cols: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian matrix with mean 0 and standard deviation ``scale``.

    Consumes ``rows * cols`` values from ``rng``, so repeated calls with a
    shared generator stay reproducible as a sequence.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return (rng.standard_normal((rows, cols)) * scale).astype(DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, rounded back to float32."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(DTYPE)


def softmax_rows(m: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax, max-subtracted for overflow stability.

    ``bias``, when given, is added to the logits before normalisation. It
    must have ``m``'s column count and either one row (broadcast) or the
    same row count.
    """
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D input, got shape {m.shape}")
    logits = m.astype(np.float64)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.ndim == 1:
            bias = bias[None, :]
        if bias.shape[1] != m.shape[1] or bias.shape[0] not in (1, m.shape[0]):
            raise ShapeError(f"bias shape {bias.shape} does not match logits {m.shape}")
        logits = logits + bias
    logits -= logits.max(axis=1, keepdims=True)
    expd = np.exp(logits)
    return (expd / expd.sum(axis=1, keepdims=True)).astype(DTYPE)


def layer_norm(m: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-row normalisation with affine parameters.

    A constant row normalises to exactly ``beta``: its deviations are zero,
    so the epsilon-regularised denominator never divides a nonzero value.
    """
    if m.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D input, got shape {m.shape}")
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if gamma.shape[0] != m.shape[1] or beta.shape[0] != m.shape[1]:
        raise ShapeError(
            f"gamma/beta lengths {gamma.shape[0]}/{beta.shape[0]} do not match {m.shape[1]} columns"
        )
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = m.astype(np.float64)
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    normed = (x - mean) / np.sqrt(var + eps)
    return (normed * gamma + beta).astype(DTYPE)


def gelu(m: np.ndarray) -> np.ndarray:
    """Elementwise GELU, tanh approximation."""
    x = m.astype(np.float64)
    inner = _GELU_SCALE * (x + _GELU_CUBIC * x**3)
    return (0.5 * x * (1.0 + np.tanh(inner))).astype(DTYPE)


def frobenius_norm(m: np.ndarray) -> float:
    """Frobenius norm computed in float64."""
    return float(np.sqrt(np.sum(m.astype(np.float64) ** 2)))
