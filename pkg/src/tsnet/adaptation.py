"""Few-shot style adaptation: fit one embedding vector with the network frozen."""

from __future__ import annotations

import copy
import csv
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .ctc import ctc_mean_loss, required_frames
from .data import Alphabet, Sample, mask_augment, to_network_input
from .network import Model, features, head
from .tensor import Tensor
from .training import Checkpoint, evaluate

log = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"TSEM1"


class LbfgsError(FloatingPointError):
    pass


@dataclass
class LbfgsState:
    history: int = 10
    s: list[np.ndarray] = field(default_factory=list)
    y: list[np.ndarray] = field(default_factory=list)
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 20
    curvature_eps: float = 1e-10

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        if float(s @ y) <= self.curvature_eps:
            return False
        self.s.append(s)
        self.y.append(y)
        if len(self.s) > self.history:
            del self.s[0], self.y[0]
        return True

    def direction(self, g: np.ndarray) -> np.ndarray:
        """Two-loop recursion; plain steepest descent with an empty history."""
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            rho = 1.0 / float(y @ s)
            a = rho * float(s @ q)
            q -= a * y
            alphas.append((rho, a))
        if self.s:
            q *= float(self.s[-1] @ self.y[-1]) / float(self.y[-1] @ self.y[-1])
        for (s, y), (rho, a) in zip(zip(self.s, self.y), reversed(alphas)):
            q += (a - rho * float(y @ q)) * s
        return -q


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iterations: int
    trace: list[float]
    converged: bool
    message: str


def _evaluate(f, x) -> tuple[float, np.ndarray]:
    value, grad = f(x)
    value = float(value)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise LbfgsError(f"objective returned non-finite value {value} "
                         f"(gradient finite: {bool(np.all(np.isfinite(grad)))}) at x={x!r}")
    return value, grad


def lbfgs_minimize(f: Callable, x0, max_iter: int = 100, tol: float = 1e-6, *,
                   state: LbfgsState | None = None, per_iteration: bool = False) -> LbfgsResult:
    """Minimise ``f(x) -> (value, gradient)`` by L-BFGS with Armijo backtracking.

    With ``per_iteration`` the objective is called as ``f(x, k)`` and may
    change between iterations ``k``; it is held fixed within an iteration so
    the line search and the curvature pair both see one function. ``trace``
    holds the accepted objective value of every iteration.
    """
    state = state or LbfgsState()
    x = np.array(x0, dtype=np.float64).reshape(-1)

    def objective(k):
        return (lambda v: f(v, k)) if per_iteration else f

    fx, g = _evaluate(objective(0), x)
    trace: list[float] = []
    message = "max_iter reached"
    converged = False
    k = 0
    for k in range(max_iter):
        fk = objective(k)
        if per_iteration and k > 0:
            fx, g = _evaluate(fk, x)
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            converged, message = True, "gradient norm below tolerance"
            break
        d = state.direction(g)
        slope = float(g @ d)
        if slope >= 0:  # lost descent; restart from steepest descent
            state.s.clear()
            state.y.clear()
            d = -g
            slope = -gnorm * gnorm
        step = min(1.0, 1.0 / float(np.abs(g).sum())) if not state.s else 1.0
        for _ in range(state.max_backtracks + 1):
            x_new = x + step * d
            f_new, g_new = _evaluate(fk, x_new)
            if f_new <= fx + state.c1 * step * slope:
                break
            step *= state.shrink
        else:
            message = "line search failed"
            break
        state.push(x_new - x, g_new - g)
        x, fx, g = x_new, f_new, g_new
        trace.append(fx)
    else:
        k = max_iter
        if float(np.linalg.norm(g)) < tol:
            converged, message = True, "gradient norm below tolerance"
    return LbfgsResult(x, fx, float(np.linalg.norm(g)), k, trace, converged, message)


# ---------------------------------------------------------------------------
# embedding adaptation


@dataclass
class AdaptResult:
    embedding: np.ndarray
    initial_loss: float
    trace: list[float]
    iterations: int
    message: str
    rejected: list[int]


def _frozen_head(model: Model):
    """Float64 copies of everything after the feature extractor."""
    params = {k: Tensor(v.data.astype(np.float64)) for k, v in model.params.items()
              if k.startswith(("classifier.", "head."))}
    table = copy.copy(model.table)
    for name in ("embeddings", "w_gamma", "w_beta", "b_gamma", "b_beta"):
        setattr(table, name, Tensor(getattr(model.table, name).data.astype(np.float64)))
    return params, table


def adapt_embedding(checkpoint: Checkpoint | Model, exemplars: Sequence[tuple[np.ndarray, Sequence[int]]],
                    seed: int = 0, *, max_iter: int = 100, tol: float = 1e-6, augment: bool = True,
                    mask_rate: float | None = None, char_width: int = 12,
                    init: np.ndarray | None = None) -> AdaptResult:
    """Fit one style embedding to exemplar lines, starting from the mean embedding.

    ``exemplars`` are ``(image, transcription)`` pairs with transcriptions
    as alphabet indices. Every network and style-table parameter stays
    untouched; lines too narrow for their label are rejected and listed.
    """
    model = checkpoint.to_model() if isinstance(checkpoint, Checkpoint) else checkpoint
    if model.config.head_mode != "tsb":
        raise ValueError("adaptation needs a TSB checkpoint")
    if mask_rate is None:
        train_cfg = checkpoint.train_config if isinstance(checkpoint, Checkpoint) else None
        mask_rate = (train_cfg or {}).get("mask_rate", 0.5)
    cfg = model.config
    rejected = [j for j, (im, lab) in enumerate(exemplars)
                if required_frames(lab) > im.shape[1] // cfg.width_factor]
    lines = [(im, [int(c) + 1 for c in lab]) for j, (im, lab) in enumerate(exemplars)
             if j not in set(rejected)]
    if rejected:
        log.warning("rejected %d infeasible exemplar lines: %s", len(rejected), rejected)
    if not lines:
        raise ValueError("no feasible exemplar lines")
    groups: dict[int, list[int]] = {}
    for j, (im, _) in enumerate(lines):
        groups.setdefault(im.shape[1], []).append(j)
    head_params, table = _frozen_head(model)
    n = len(lines)

    def batch_features(k: int):
        out = []
        for width in sorted(groups):
            idx = groups[width]
            images = []
            for j in idx:
                im = lines[j][0]
                if augment:
                    sub = int(np.random.default_rng([seed, k, j]).integers(2**63))
                    im = mask_augment(im, char_width, mask_rate, sub)
                images.append(im)
            feats = features(model.params, Tensor(to_network_input(images)), cfg).data
            out.append((Tensor(feats.astype(np.float64)), [lines[j][1] for j in idx]))
        return out

    cache: dict[int, list] = {}

    def objective(e: np.ndarray, k: int):
        if k not in cache:
            cache.clear()
            cache[k] = batch_features(k)
        emb = Tensor(e.reshape(1, -1), requires_grad=True)
        total = None
        for feats, labels in cache[k]:
            logits = head(head_params, table, feats, cfg, embeddings=emb)
            part = T.scale(ctc_mean_loss(T.log_softmax(logits, axis=-1), labels), len(labels) / n)
            total = part if total is None else T.add(total, part)
        T.backward(total)
        return float(total.data), emb.grad.reshape(-1)

    x0 = model.table.mean_embedding().astype(np.float64) if init is None \
        else np.asarray(init, dtype=np.float64)
    initial = objective(x0, 0)[0]
    res = lbfgs_minimize(objective, x0, max_iter, tol, per_iteration=True)
    return AdaptResult(res.x.astype(np.float32), initial, res.trace, res.iterations, res.message,
                       rejected)


# ---------------------------------------------------------------------------
# sweep over exemplar counts


@dataclass
class SweepResult:
    rows: list[tuple[int, int, float]]  # count, repeat, cer

    def summary(self) -> list[tuple[int, float, float, float]]:
        """(count, mean, std, min) CER per exemplar count."""
        out = []
        for count in sorted({r[0] for r in self.rows}):
            vals = np.array([r[2] for r in self.rows if r[0] == count])
            out.append((count, float(vals.mean()), float(vals.std()), float(vals.min())))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["count", "repeat", "cer"])
            w.writerows((c, r, repr(v)) for c, r, v in self.rows)


def adaptation_sweep(checkpoint: Checkpoint, pool: Sequence[Sample], held_out: Sequence[Sample],
                     alphabet: Alphabet, counts: Sequence[int] = (1, 4, 12, 20, 50, 100),
                     repeats: int = 50, seed: int = 0, *, max_iter: int = 100, char_width: int = 12,
                     threads: int = 1) -> SweepResult:
    """Adapt on seeded random exemplar subsets and score each on ``held_out``."""
    if max(counts) > len(pool):
        raise ValueError(f"pool of {len(pool)} lines cannot supply {max(counts)} exemplars")
    model = checkpoint.to_model()
    cells = [(c, r) for c in counts for r in range(repeats)]

    def run(cell):
        count, rep = cell
        pick = np.random.default_rng([seed, count, rep]).choice(len(pool), count, replace=False)
        ex = [(pool[i].image, pool[i].transcription) for i in sorted(pick)]
        res = adapt_embedding(checkpoint, ex, seed=seed * 1_000_003 + count * 1009 + rep,
                              max_iter=max_iter, char_width=char_width)
        cer = evaluate(model, held_out, alphabet, "fixed", embedding=res.embedding).cer
        log.info("sweep count %d repeat %d: CER %.4f (%s)", count, rep, cer, res.message)
        return (count, rep, cer)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(run, cells))
    else:
        rows = [run(c) for c in cells]
    return SweepResult(rows)


# ---------------------------------------------------------------------------
# embedding files


def save_embedding(path, embedding: np.ndarray) -> None:
    e = np.asarray(embedding, dtype="<f4").reshape(-1)
    Path(path).write_bytes(EMBEDDING_MAGIC + struct.pack("<I", e.size) + e.tobytes())


def load_embedding(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:5] != EMBEDDING_MAGIC:
        raise ValueError(f"{path}: not a TSEM1 embedding file")
    (d,) = struct.unpack_from("<I", raw, 5)
    if len(raw) != 9 + 4 * d:
        raise ValueError(f"{path}: truncated embedding file")
    return np.frombuffer(raw, dtype="<f4", offset=9, count=d).astype(np.float32)
