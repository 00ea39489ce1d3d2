"""Transcription style block: embedding-conditioned adaptive instance norm.

Each transcription style identifier (TSI) owns one row of an embedding
matrix. Two affine maps turn an embedding into per-channel scales and
offsets, which re-style instance-normalised recurrent features.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor, make_op


class UnknownTsiError(KeyError):
    pass


class StyleTable:
    """Embeddings E (rows per TSI) plus the gamma/beta affine maps.

    Fresh rows are drawn N(0, 1) from the table's own seeded stream so that
    registration order fully determines the table.
    """

    def __init__(self, channels: int, dim: int = 32, *, eps: float = 1e-5,
                 init_k: float = 0.15, seed: int = 0, dtype=np.float32):
        if channels < 1 or dim < 1:
            raise ValueError("channels and embedding dim must be positive")
        self.channels = channels
        self.dim = dim
        self.eps = eps
        self.init_k = init_k
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.tsi_rows: dict[int, int] = {}
        self.embeddings = Tensor(np.zeros((0, dim), dtype=self.dtype), name="tsb.embeddings")
        self.w_gamma = Tensor(self.rng.uniform(-init_k, init_k, (channels, dim)).astype(self.dtype),
                              name="tsb.w_gamma")
        self.w_beta = Tensor(self.rng.uniform(-init_k, init_k, (channels, dim)).astype(self.dtype),
                             name="tsb.w_beta")
        self.b_gamma = Tensor(np.ones(channels, dtype=self.dtype), name="tsb.b_gamma")
        self.b_beta = Tensor(np.zeros(channels, dtype=self.dtype), name="tsb.b_beta")

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.embeddings, self.w_gamma, self.w_beta,
                                    self.b_gamma, self.b_beta)}

    def register_tsi(self, tsi: int) -> int:
        tsi = int(tsi)
        if tsi in self.tsi_rows:
            raise ValueError(f"TSI {tsi} already registered")
        row = self.rng.standard_normal(self.dim).astype(self.dtype)
        self.embeddings.data = np.concatenate([self.embeddings.data, row[None]], axis=0)
        self.tsi_rows[tsi] = len(self.tsi_rows)
        return self.tsi_rows[tsi]

    def rows_for(self, tsis: Sequence[int]) -> list[int]:
        try:
            return [self.tsi_rows[int(t)] for t in tsis]
        except KeyError as exc:
            raise UnknownTsiError(f"unregistered TSI {exc.args[0]}") from None

    def embedding(self, tsi: int) -> np.ndarray:
        return self.embeddings.data[self.rows_for([tsi])[0]].copy()

    def mean_embedding(self) -> np.ndarray:
        if not self.tsi_rows:
            raise ValueError("no TSI registered")
        return self.embeddings.data.mean(axis=0)

    def gamma_beta(self, embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Plain-array scales/offsets for a batch of embedding rows."""
        e = np.atleast_2d(embeddings)
        return (e @ self.w_gamma.data.T + self.b_gamma.data,
                e @ self.w_beta.data.T + self.b_beta.data)


def style_affine(table: StyleTable, e: Tensor) -> tuple[Tensor, Tensor]:
    """gamma = W_gamma e + b_gamma, beta = W_beta e + b_beta for rows of ``e`` (N x d)."""
    if e.ndim == 1:
        e = T.reshape(e, (1, -1))
    if e.shape[1] != table.dim:
        raise DimensionError(f"embedding length {e.shape[1]} != {table.dim}")
    gamma = T.add(T.matmul(e, T.transpose(table.w_gamma, (1, 0))), table.b_gamma)
    beta = T.add(T.matmul(e, T.transpose(table.w_beta, (1, 0))), table.b_beta)
    return gamma, beta


def adain(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation over time, then scale and shift.

    ``x`` is N x T x C; ``gamma``/``beta`` are N x C. The denominator is
    ``std + eps`` with the population std.
    """
    if x.ndim != 3 or gamma.shape != (x.shape[0], x.shape[2]) or beta.shape != gamma.shape:
        raise DimensionError(f"adain of {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    t_len = xd.shape[1]
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    sigma = np.sqrt((xc * xc).mean(axis=1, keepdims=True))
    denom = sigma + eps
    xhat = xc / denom
    g3 = gamma.data[:, None, :]
    y = g3 * xhat + beta.data[:, None, :]

    def bw(g):
        gg = (g * xhat).sum(axis=1)
        gb = g.sum(axis=1)
        dxhat = g * g3
        # d sigma / d x = xc / (T sigma); zero where the channel is constant
        safe = np.where(sigma > 0, sigma, 1.0)
        dsig = -(dxhat * xc).sum(axis=1, keepdims=True) / (denom * denom)
        dx = (dxhat - dxhat.mean(axis=1, keepdims=True)) / denom \
            + dsig * np.where(sigma > 0, xc / (t_len * safe), 0.0)
        return dx, gg, gb

    return make_op(y, (x, gamma, beta), bw)


def tsb_forward(table: StyleTable, x: Tensor, tsi: Sequence[int] | None = None,
                embeddings: Tensor | None = None) -> Tensor:
    """Re-style N x T x C features by TSI lookup or by explicit embedding rows."""
    if x.ndim != 3 or x.shape[2] != table.channels:
        raise DimensionError(f"TSB expects N x T x {table.channels}, got {x.shape}")
    if embeddings is None:
        if tsi is None:
            raise ValueError("tsb_forward needs TSI or embeddings")
        if len(tsi) != x.shape[0]:
            raise DimensionError("one TSI per sample required")
        e = T.take_rows(table.embeddings, table.rows_for(tsi))
    else:
        e = embeddings if embeddings.ndim == 2 else T.reshape(embeddings, (1, -1))
        if e.shape[0] == 1 and x.shape[0] > 1:
            e = T.take_rows(e, [0] * x.shape[0])
    gamma, beta = style_affine(table, e)
    return adain(x, gamma, beta, table.eps)
