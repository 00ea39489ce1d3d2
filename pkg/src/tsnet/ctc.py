"""CTC loss by forward-backward over the blank-interleaved label lattice.

Blank is class 0. All recursions run in the log domain in float64.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, make_op

BLANK = 0
_NEG_INF = -np.inf


class InfeasibleError(ValueError):
    """The label cannot be emitted in the available number of frames."""


def required_frames(label: Sequence[int]) -> int:
    """Minimum frame count: one per label plus one blank between repeats."""
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def extend_label(label: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(label) + 1, dtype=np.int64)
    ext[1::2] = label
    return ext


@dataclass
class CtcLattice:
    ext: np.ndarray
    alpha: np.ndarray  # T x S, log domain, emission at t included
    beta: np.ndarray   # T x S, log domain, emission at t included
    log_likelihood: float

    def log_likelihood_backward(self) -> float:
        """Same likelihood read off the start of the backward table."""
        start = self.beta[0, : min(2, self.beta.shape[1])]
        return float(np.logaddexp.reduce(start))


def _check(log_probs: np.ndarray, label: Sequence[int]) -> None:
    t, k = log_probs.shape
    if any(not 1 <= c < k for c in label):
        raise ValueError(f"label indices must lie in [1, {k - 1}]")
    need = required_frames(label)
    if t < need:
        raise InfeasibleError(f"label needs {need} frames, got {t}")


def _lattice_batch(log_probs: np.ndarray, labels: Sequence[Sequence[int]]):
    """Vectorised alpha/beta for N sequences sharing T frames.

    Returns ext (N x S), lens (N,), alpha, beta (T x N x S), ll (N,).
    """
    n, t_len, _ = log_probs.shape
    lens = np.array([2 * len(l) + 1 for l in labels])
    s_max = int(lens.max())
    ext = np.zeros((n, s_max), dtype=np.int64)
    valid = np.zeros((n, s_max), dtype=bool)
    for i, l in enumerate(labels):
        ext[i, 1: lens[i]: 2] = l
        valid[i, : lens[i]] = True
    # skip transition s-2 -> s allowed for labels differing from the one two back
    skip = np.zeros((n, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    skip &= valid
    emit = np.take_along_axis(log_probs, ext[:, None, :], axis=2).transpose(1, 0, 2)  # T x N x S
    emit = np.where(valid[None], emit, _NEG_INF)

    alpha = np.full((t_len, n, s_max), _NEG_INF)
    alpha[0, :, 0] = emit[0, :, 0]
    if s_max > 1:
        alpha[0, :, 1] = emit[0, :, 1]
    shifted = np.full((n, s_max), _NEG_INF)
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
        shifted.fill(_NEG_INF)
        shifted[:, 2:] = prev[:, :-2]
        acc = np.where(skip, np.logaddexp(acc, shifted), acc)
        alpha[t] = acc + emit[t]

    beta = np.full((t_len, n, s_max), _NEG_INF)
    last = lens - 1
    beta[-1, np.arange(n), last] = emit[-1, np.arange(n), last]
    has_label = lens > 1
    beta[-1, np.arange(n)[has_label], last[has_label] - 1] = \
        emit[-1, np.arange(n)[has_label], last[has_label] - 1]
    # transition s -> s+2 allowed when s+2 is a skip target
    skip_from = np.zeros((n, s_max), dtype=bool)
    skip_from[:, :-2] = skip[:, 2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:, :-1] = np.logaddexp(acc[:, :-1], nxt[:, 1:])
        shifted.fill(_NEG_INF)
        shifted[:, :-2] = nxt[:, 2:]
        acc = np.where(skip_from, np.logaddexp(acc, shifted), acc)
        beta[t] = acc + emit[t]

    end = alpha[-1, np.arange(n), last]
    end2 = np.where(has_label, alpha[-1, np.arange(n), np.maximum(last - 1, 0)], _NEG_INF)
    ll = np.logaddexp(end, end2)
    return ext, lens, alpha, beta, ll, emit


def ctc_lattice(log_probs: np.ndarray, label: Sequence[int]) -> CtcLattice:
    lp = np.asarray(log_probs, dtype=np.float64)
    _check(lp, label)
    ext, lens, alpha, beta, ll, _ = _lattice_batch(lp[None], [list(label)])
    s = lens[0]
    return CtcLattice(ext[0, :s], alpha[:, 0, :s], beta[:, 0, :s], float(ll[0]))


def ctc_loss_batch(log_probs: np.ndarray, labels: Sequence[Sequence[int]]):
    """Per-sequence losses (N,) and d loss_n / d log_probs (N x T x K).

    ``log_probs`` need not be normalised; the gradient treats each entry as
    a free log-emission score.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    n, t_len, k = lp.shape
    for i, l in enumerate(labels):
        _check(lp[i], l)
    ext, lens, alpha, beta, ll, emit = _lattice_batch(lp, labels)
    if not np.all(np.isfinite(ll)):
        raise InfeasibleError("label has zero probability under the given scores")
    # occupancy of lattice state s at frame t
    live = np.isfinite(emit)
    with np.errstate(invalid="ignore"):
        post = np.exp(alpha + beta - np.where(live, emit, 0.0) - ll[None, :, None])
    post = np.where(live, post, 0.0)
    flat = ((np.arange(n)[None, :, None] * t_len + np.arange(t_len)[:, None, None]) * k
            + ext[None, :, :])
    grad = -np.bincount(flat.reshape(-1), weights=post.reshape(-1), minlength=n * t_len * k)
    return -ll, grad.reshape(n, t_len, k)


def ctc_loss(log_probs: np.ndarray, label: Sequence[int]) -> tuple[float, np.ndarray]:
    """Loss ``-log p(label)`` and its gradient for one T x K score matrix."""
    losses, grad = ctc_loss_batch(np.asarray(log_probs)[None], [list(label)])
    return float(losses[0]), grad[0]


def ctc_mean_loss(log_probs: Tensor, labels: Sequence[Sequence[int]]) -> Tensor:
    """Batch-mean CTC loss as a tape op over N x T x K log-probabilities."""
    losses, grad = ctc_loss_batch(log_probs.data, labels)
    n = len(labels)
    value = np.asarray(losses.mean(), dtype=log_probs.dtype)
    g_all = (grad / n).astype(log_probs.dtype)
    return make_op(value, (log_probs,), lambda g: (g_all * g,))


def collapse(path: Sequence[int]) -> list[int]:
    out: list[int] = []
    prev = None
    for c in path:
        if c != prev and c != BLANK:
            out.append(int(c))
        prev = c
    return out


def greedy_decode(log_probs: np.ndarray) -> list[int]:
    """Best-path decoding; argmax ties resolve to the lower class index."""
    return collapse(np.asarray(log_probs).argmax(axis=-1).tolist())


def ctc_brute_force(log_probs: np.ndarray, label: Sequence[int], guard: int = 10**6) -> float:
    """Loss by summing over every frame labelling; the verification oracle."""
    lp = np.asarray(log_probs, dtype=np.float64)
    t_len, k = lp.shape
    if k ** t_len > guard:
        raise ValueError(f"{k}^{t_len} paths exceeds guard {guard}")
    target = list(label)
    terms = []
    for path in itertools.product(range(k), repeat=t_len):
        if collapse(path) == target:
            terms.append(lp[np.arange(t_len), path].sum())
    if not terms:
        raise InfeasibleError("no path collapses to the label")
    return float(-np.logaddexp.reduce(np.array(terms)))
