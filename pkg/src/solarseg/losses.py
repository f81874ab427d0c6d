"""Contrastive and focal loss kernels with exact analytic gradients.

Both losses compute internally in float64 regardless of input dtype and
hand back gradients cast to the caller's dtype, so the same code path
serves float32 training and float64 finite-difference verification.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, NumericError, ValidationError

#: rows fed to the contrastive loss must be unit-norm within this much
NORM_TOLERANCE = 1e-4

#: log arguments inside the focal loss never get closer to {0, 1} than this
_LOG_GUARD = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters; the temperature applies to pretraining only."""

    alpha: float = 0.4
    gamma: float = 2.0
    tau: float = 0.5

    def validate(self) -> "LossConfig":
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha: must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ValidationError(f"gamma: must be >= 0, got {self.gamma}")
        if self.tau <= 0.0:
            raise ValidationError(f"tau: must be > 0, got {self.tau}")
        return self


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    Each norm is floored at 1e-12, so zero vectors yield 0 rather than
    dividing by zero.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionMismatchError(f"cosine_sim: shapes {a.shape} and {b.shape} differ")
    denom = max(np.linalg.norm(a), 1e-12) * max(np.linalg.norm(b), 1e-12)
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def ntxent_loss(embeddings: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Normalized-temperature cross entropy over paired rows.

    Rows (2k, 2k+1) are the two views of item k.  For each row i with
    partner j, the per-row term is

        -log( exp(sim(z_i, z_j) / tau) / sum_{k != i} exp(sim(z_i, z_k) / tau) )

    and the loss is the mean over all 2N rows.  Rows are certified
    unit-norm (within ``NORM_TOLERANCE``), which lets similarities be
    plain dot products; the returned gradient is with respect to the
    rows as given.

    Returns ``(loss, grad)`` with ``grad`` matching the input shape and
    dtype.
    """
    if tau <= 0.0:
        raise ValidationError(f"tau: must be > 0, got {tau}")
    emb = np.asarray(embeddings)
    if emb.ndim != 2:
        raise DimensionMismatchError(f"embeddings: expected 2-d (2N, D), got shape {emb.shape}")
    n2 = emb.shape[0]
    if n2 < 2 or n2 % 2:
        raise DimensionMismatchError(f"embeddings: need an even row count >= 2, got {n2}")
    if not np.all(np.isfinite(emb)):
        raise NumericError("embeddings: non-finite values")
    z = emb.astype(np.float64)
    norms = np.sqrt((z * z).sum(axis=1))
    bad = np.abs(norms - 1.0) > NORM_TOLERANCE
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValidationError(
            f"embeddings: row {i} has norm {norms[i]:.6g}, expected 1 within {NORM_TOLERANCE}"
        )

    s = (z @ z.T) / tau
    np.fill_diagonal(s, -np.inf)
    pair = np.arange(n2) ^ 1
    m = s.max(axis=1, keepdims=True)
    exp_s = np.exp(s - m)
    row_sum = exp_s.sum(axis=1)
    lse = m[:, 0] + np.log(row_sum)
    per_row = lse - s[np.arange(n2), pair]
    loss = float(per_row.mean())
    if not np.isfinite(loss):
        raise NumericError("ntxent: loss is non-finite")

    p = exp_s / row_sum[:, None]  # row-softmax over non-diagonal entries
    pi = np.zeros_like(p)
    pi[np.arange(n2), pair] = 1.0
    grad = (p + p.T - 2.0 * pi) @ z / (n2 * tau)
    return loss, grad.astype(emb.dtype, copy=False).reshape(emb.shape)


def focal_loss(
    probs: np.ndarray, targets: np.ndarray, alpha: float = 0.4, gamma: float = 2.0
) -> tuple[float, np.ndarray]:
    """Class-balanced focal loss over per-pixel probabilities.

    With y in {0, 1} and prediction p, the per-pixel term is

        -[ alpha * (1 - p)^gamma * y * log(p)
           + (1 - alpha) * p^gamma * (1 - y) * log(1 - p) ]

    averaged over every pixel in the batch.  gamma = 0 reduces to
    alpha-weighted binary cross entropy.  Probabilities are nudged away
    from exact {0, 1} by 1e-7 before the logs; the gradient is zero
    where that guard engaged.

    Returns ``(loss, grad)`` with ``grad`` matching ``probs`` in shape
    and dtype.
    """
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha: must lie in (0, 1), got {alpha}")
    if gamma < 0.0:
        raise ValidationError(f"gamma: must be >= 0, got {gamma}")
    pr = np.asarray(probs)
    tg = np.asarray(targets)
    if pr.shape != tg.shape:
        raise DimensionMismatchError(f"probs shape {pr.shape} != targets shape {tg.shape}")
    if pr.size == 0:
        raise DimensionMismatchError("probs: empty input")
    if not np.all(np.isfinite(pr)):
        raise NumericError("probs: non-finite values")
    if np.any((pr < 0.0) | (pr > 1.0)):
        raise ValidationError("probs: values outside [0, 1]")
    tv = tg.astype(np.float64)
    if not np.all((tv == 0.0) | (tv == 1.0)):
        raise ValidationError("targets: values other than {0, 1}")

    p_raw = pr.astype(np.float64)
    p = np.clip(p_raw, _LOG_GUARD, 1.0 - _LOG_GUARD)
    pos = tv == 1.0
    log_p = np.log(p)
    log_q = np.log1p(-p)
    one_m = 1.0 - p
    term = np.where(pos, alpha * one_m**gamma * log_p, (1.0 - alpha) * p**gamma * log_q)
    n = p.size
    loss = float(-term.sum() / n)
    if not np.isfinite(loss):
        raise NumericError("focal: loss is non-finite")

    # d/dp of the per-pixel term, by branch; gamma * x^(gamma-1) is taken
    # as 0 when gamma == 0 so the BCE reduction stays finite
    if gamma == 0.0:
        d_pos = alpha / p
        d_neg = -(1.0 - alpha) / one_m
    else:
        d_pos = alpha * (-gamma * one_m ** (gamma - 1.0) * log_p + one_m**gamma / p)
        d_neg = -(1.0 - alpha) * (-gamma * p ** (gamma - 1.0) * log_q + p**gamma / one_m)
    grad = np.where(pos, -d_pos, -d_neg) / n
    grad = np.where(p_raw == p, grad, 0.0)
    return loss, grad.astype(pr.dtype, copy=False).reshape(pr.shape)
