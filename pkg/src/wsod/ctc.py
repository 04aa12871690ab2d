"""Count-supervised CTC over the binary alphabet {background 0, foreground 1}.

Background plays the role of the blank symbol, so a labelling of T frames
collapses to the number of maximal runs of ones. The probability of a count n
is the total probability of all frame labellings with exactly n runs. It is
computed by a forward pass over states (runs completed so far, last symbol),
kept in log space so that long sequences do not underflow.
"""
import logging
import math
from functools import lru_cache

import numpy as np

from .nn.layers import log_softmax
from .serialize import deserialize_point

log = logging.getLogger(__name__)

UNSATISFIABLE_LOSS = 1e9
NEG_INF = -np.inf


def max_count(t_len):
    return (t_len + 1) // 2


def collapse(path):
    """Number of maximal runs of ones in a 0/1 path."""
    p = np.asarray(path, dtype=np.int8)
    if p.size == 0:
        return 0
    if np.any((p != 0) & (p != 1)):
        raise ValueError("path entries must be 0 or 1")
    return int(p[0] == 1) + int(np.count_nonzero((p[1:] == 1) & (p[:-1] == 0)))


def runs(path):
    """Inclusive (start, end) index pairs of every run of ones."""
    p = np.concatenate([[0], np.asarray(path, dtype=np.int8), [0]])
    d = np.diff(p)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def _check_posteriors(y, tol=1e-8):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValueError(f"posteriors must be a (T, 2) matrix, got {y.shape}")
    if np.any(y < 0) or np.any(y > 1) or np.any(np.abs(y.sum(axis=1) - 1) > tol):
        raise ValueError("each posterior row must lie in [0, 1] and sum to 1")
    return y


def _forward(logy, counts):
    """Log forward variables.

    logy: (B, T, 2); counts: (B,). Returns alpha of shape (T, B, J, 2) where
    J = max(counts) + 1 and alpha[t, b, j, s] is the log probability of frames
    0..t holding j runs and ending in symbol s.
    """
    b, t_len, _ = logy.shape
    j_max = int(counts.max()) + 1
    alpha = np.full((t_len, b, j_max, 2), NEG_INF)
    # virtual start state: zero runs, last symbol background
    prev0 = np.full((b, j_max), NEG_INF)
    prev0[:, 0] = 0.0
    prev1 = np.full((b, j_max), NEG_INF)
    with np.errstate(divide="ignore", invalid="ignore"):
        for t in range(t_len):
            a0 = np.logaddexp(prev0, prev1) + logy[:, t, 0:1]
            shifted = np.full_like(prev0, NEG_INF)
            shifted[:, 1:] = prev0[:, :-1]
            a1 = np.logaddexp(prev1, shifted) + logy[:, t, 1:2]
            alpha[t, :, :, 0] = a0
            alpha[t, :, :, 1] = a1
            prev0, prev1 = a0, a1
    return alpha


def _backward(logy, counts, j_max):
    b, t_len, _ = logy.shape
    beta = np.full((t_len, b, j_max, 2), NEG_INF)
    rows = np.arange(b)
    beta[t_len - 1, rows, counts, :] = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        for t in range(t_len - 2, -1, -1):
            nxt0 = beta[t + 1, :, :, 0] + logy[:, t + 1, 0:1]
            nxt1 = beta[t + 1, :, :, 1] + logy[:, t + 1, 1:2]
            up = np.full_like(nxt1, NEG_INF)
            up[:, :-1] = nxt1[:, 1:]
            beta[t, :, :, 0] = np.logaddexp(nxt0, up)
            beta[t, :, :, 1] = np.logaddexp(nxt0, nxt1)
    return beta


def ctc_log_probability_batch(logy, counts):
    counts = np.asarray(counts, dtype=np.int64)
    alpha = _forward(logy, counts)
    rows = np.arange(logy.shape[0])
    with np.errstate(invalid="ignore"):
        return np.logaddexp(alpha[-1, rows, counts, 0], alpha[-1, rows, counts, 1])


def ctc_log_probability(y, n):
    y = _check_posteriors(y)
    if n < 0:
        raise ValueError("count must be nonnegative")
    if n > max_count(y.shape[0]):
        return NEG_INF
    with np.errstate(divide="ignore"):
        logy = np.log(y)
    return float(ctc_log_probability_batch(logy[None], [n])[0])


def ctc_probability(y, n):
    """Probability that the frame posteriors ``y`` (T, 2) emit exactly ``n`` foreground runs."""
    return math.exp(ctc_log_probability(y, n))


def ctc_loss(y, n):
    """Negative log probability of count ``n``; a large sentinel when the count is impossible."""
    lp = ctc_log_probability(y, n)
    if not np.isfinite(lp):
        log.warning("count %d has zero probability over %d frames; returning sentinel loss", n, len(y))
        return UNSATISFIABLE_LOSS
    return -lp


def ctc_loss_and_grad_batch(logits, counts):
    """Losses (B,) and gradients (B, T, 2) with respect to pre-softmax logits.

    The gradient for frame t is ``y_t - gamma_t`` where ``gamma_t`` is the
    posterior label occupancy given the count, obtained from forward and
    backward variables. Unsatisfiable rows get the sentinel loss and zero
    gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    b, t_len, _ = logits.shape
    logy = log_softmax(logits, axis=-1)
    ok = counts <= max_count(t_len)
    losses = np.full(b, UNSATISFIABLE_LOSS)
    grads = np.zeros_like(logits)
    if not ok.any():
        return losses, grads
    ly, cn = logy[ok], counts[ok]
    alpha = _forward(ly, cn)
    beta = _backward(ly, cn, alpha.shape[2])
    rows = np.arange(ly.shape[0])
    logp = np.logaddexp(alpha[-1, rows, cn, 0], alpha[-1, rows, cn, 1])
    with np.errstate(invalid="ignore", divide="ignore"):
        occ = alpha + beta  # (T, B, J, 2)
        occ_max = np.max(occ, axis=2, keepdims=True)
        occ_max = np.where(np.isfinite(occ_max), occ_max, 0.0)
        log_gamma = np.log(np.sum(np.exp(occ - occ_max), axis=2)) + occ_max[:, :, 0] - logp[None, :, None]
    gamma = np.exp(log_gamma).transpose(1, 0, 2)  # (B, T, 2)
    losses[ok] = -logp
    grads[ok] = np.exp(ly) - gamma
    return losses, grads


def ctc_gradient(logits, n):
    """Loss and (T, 2) gradient for one sequence of logits."""
    losses, grads = ctc_loss_and_grad_batch(np.asarray(logits)[None], [n])
    if losses[0] >= UNSATISFIABLE_LOSS:
        log.warning("count %d unsatisfiable over %d frames", n, len(logits))
    return float(losses[0]), grads[0]


@lru_cache(maxsize=None)
def _all_paths(t_len):
    """Every 0/1 path of length ``t_len`` (2^T, T) and its collapsed count."""
    codes = np.arange(2 ** t_len)[:, None]
    paths = (codes >> np.arange(t_len - 1, -1, -1)) & 1
    starts = paths[:, :1] + np.sum((paths[:, 1:] == 1) & (paths[:, :-1] == 0), axis=1, keepdims=True)
    return paths, starts[:, 0]


def brute_force_probability(y, n):
    """Sum of path probabilities over all 2^T labellings (exponential; for testing)."""
    y = np.asarray(y, dtype=np.float64)
    t_len = y.shape[0]
    paths, counts = _all_paths(t_len)
    chosen = paths[counts == n]
    return float(np.prod(y[np.arange(t_len), chosen], axis=1).sum())


def decode_best_path(y):
    """Framewise argmax of the posteriors; ties go to background."""
    y = _check_posteriors(y)
    return (y[:, 1] > y[:, 0]).astype(np.int8)


def critical_points(path, order, h, w, style="serpentine", rule="median", y=None):
    """One (row, col) grid point per foreground run of ``path``.

    ``rule="median"`` takes the run's middle frame (lower middle for even
    lengths); ``rule="max"`` takes the frame with the highest foreground
    posterior and needs ``y``.
    """
    path = np.asarray(path)
    if len(path) != h * w:
        raise ValueError(f"path length {len(path)} != {h}x{w}")
    points = []
    for start, end in runs(path):
        if rule == "median":
            t = (start + end) // 2
        elif rule == "max":
            if y is None:
                raise ValueError("rule='max' needs posteriors")
            t = start + int(np.argmax(np.asarray(y)[start:end + 1, 1]))
        else:
            raise ValueError(f"unknown critical point rule {rule!r}")
        points.append(deserialize_point(t, order, h, w, style))
    return points
