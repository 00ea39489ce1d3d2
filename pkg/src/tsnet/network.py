"""Recognizer backbone: conv blocks with FRN, multi-scale BLSTM, style head.

Layout conventions: images are N x 1 x H x W, recurrent sequences are
N x T x D. Parameters live in a flat ``name -> Tensor`` dict whose key set
depends only on :class:`NetworkConfig`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor, make_op
from .tsb import StyleTable, tsb_forward


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    num_classes: int
    conv_channels: list[int] = field(default_factory=lambda: [8, 16])
    convs_per_block: int = 2
    # (pool_h, pool_w) after each conv block; None = first two reduce H and W, later H only
    pool_schedule: list[list[int]] | None = None
    rnn_hidden: int = 64
    rnn_scales: int = 3
    head_mode: str = "tsb"
    embedding_dim: int = 32
    frn_eps: float = 1e-6
    input_height: int = 32
    kernel_size: int = 3
    adain_eps: float = 1e-5
    init_k: float = 0.15

    def __post_init__(self):
        if self.rnn_scales not in (1, 2, 3):
            raise ConfigError("rnn_scales must be 1, 2 or 3")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if self.head_mode not in ("tsb", "frn_baseline"):
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")
        if not self.conv_channels:
            raise ConfigError("at least one conv block required")
        if self.pool_schedule is None:
            self.pool_schedule = [[2, 2] if i < 2 else [2, 1] for i in range(len(self.conv_channels))]
        self.pool_schedule = [list(map(int, p)) for p in self.pool_schedule]
        if len(self.pool_schedule) != len(self.conv_channels):
            raise ConfigError("pool_schedule needs one entry per conv block")
        if self.collapsed_height() < 1:
            raise ConfigError(f"input height {self.input_height} too small for the pool schedule")

    @property
    def width_factor(self) -> int:
        return int(np.prod([p[1] for p in self.pool_schedule]))

    @property
    def time_multiple(self) -> int:
        """Input widths must be multiples of this for every scale to line up."""
        return self.width_factor * 2 ** (self.rnn_scales - 1)

    @property
    def feature_channels(self) -> int:
        return 2 * self.rnn_hidden

    def collapsed_height(self) -> int:
        h = self.input_height
        for ph, _ in self.pool_schedule:
            h //= ph
        return h

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# fused ops


def frn(x: Tensor, gamma: Tensor, beta: Tensor, tau: Tensor, eps: float,
        channel_axis: int = 1) -> Tensor:
    """Filter response normalisation with thresholded linear unit.

    ``y = max(gamma * x / sqrt(mean(x^2) + eps) + beta, tau)`` where the mean
    runs over every non-batch, non-channel axis.
    """
    channel_axis %= x.ndim
    axes = tuple(i for i in range(1, x.ndim) if i != channel_axis)
    if not axes:
        raise DimensionError("FRN needs at least one spatial axis")
    view = [1] * x.ndim
    view[channel_axis] = -1
    g, b, t = gamma.data.reshape(view), beta.data.reshape(view), tau.data.reshape(view)
    xd = x.data
    nu2 = (xd * xd).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(nu2 + eps)
    xhat = xd * inv
    pre = g * xhat + b
    keep = pre >= t
    y = np.where(keep, pre, t)
    count = int(np.prod([xd.shape[a] for a in axes]))
    param_axes = tuple(i for i in range(x.ndim) if i != channel_axis)

    def bw(gy):
        gpre = gy * keep
        gtau = (gy * ~keep).sum(axis=param_axes)
        ggamma = (gpre * xhat).sum(axis=param_axes)
        gbeta = gpre.sum(axis=param_axes)
        dxhat = gpre * g
        dx = inv * (dxhat - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True) / count)
        return dx, ggamma, gbeta, gtau

    return make_op(y.astype(xd.dtype, copy=False), (x, gamma, beta, tau), bw)


def _sig(v):
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


def blstm(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """Bidirectional LSTM layer over N x T x D; returns N x T x 2H.

    ``wx`` (2 x D x 4H), ``wh`` (2 x H x 4H), ``b`` (2 x 4H) hold the forward
    and backward direction. Gate order: input, forget, cell, output.
    Initial hidden and cell states are zero.
    """
    n, t_len, d = x.shape
    if wx.ndim != 3 or wx.shape[:2] != (2, d) or wh.shape[0] != 2 or b.shape != (2, wx.shape[2]):
        raise DimensionError(f"blstm weights {wx.shape}/{wh.shape}/{b.shape} for input {x.shape}")
    hid = wh.shape[1]
    dt = x.dtype
    # direction 1 reads the sequence reversed
    xs = np.stack([x.data, x.data[:, ::-1]])                       # 2 x N x T x D
    pre = np.matmul(xs.reshape(2, n * t_len, d), wx.data).reshape(2, n, t_len, 4 * hid)
    pre += b.data[:, None, None, :]
    hs = np.zeros((2, n, t_len + 1, hid), dtype=dt)                # hs[:, :, t+1] = h_t
    cs = np.zeros((2, n, t_len + 1, hid), dtype=dt)
    gates = np.empty((2, n, t_len, 4 * hid), dtype=dt)
    tanh_c = np.empty((2, n, t_len, hid), dtype=dt)
    whd = wh.data
    for t in range(t_len):
        z = pre[:, :, t] + np.matmul(hs[:, :, t], whd)
        a = gates[:, :, t]
        a[..., : 2 * hid] = _sig(z[..., : 2 * hid])
        a[..., 2 * hid: 3 * hid] = np.tanh(z[..., 2 * hid: 3 * hid])
        a[..., 3 * hid:] = _sig(z[..., 3 * hid:])
        c = a[..., hid: 2 * hid] * cs[:, :, t] + a[..., :hid] * a[..., 2 * hid: 3 * hid]
        cs[:, :, t + 1] = c
        tc = np.tanh(c)
        tanh_c[:, :, t] = tc
        hs[:, :, t + 1] = a[..., 3 * hid:] * tc
    out = np.concatenate([hs[0, :, 1:], hs[1, :, 1:][:, ::-1]], axis=-1)

    def bw(g):
        gh_seq = np.stack([g[..., :hid], g[..., hid:][:, ::-1]])   # 2 x N x T x H
        dz = np.empty_like(gates)
        dh = np.zeros((2, n, hid), dtype=dt)
        dc = np.zeros((2, n, hid), dtype=dt)
        whT = np.swapaxes(whd, 1, 2)
        for t in range(t_len - 1, -1, -1):
            a = gates[:, :, t]
            ig, fg, cg, og = a[..., :hid], a[..., hid: 2 * hid], a[..., 2 * hid: 3 * hid], a[..., 3 * hid:]
            tc = tanh_c[:, :, t]
            dh = dh + gh_seq[:, :, t]
            dc = dc + dh * og * (1.0 - tc * tc)
            dzt = dz[:, :, t]
            dzt[..., :hid] = dc * cg * ig * (1.0 - ig)
            dzt[..., hid: 2 * hid] = dc * cs[:, :, t] * fg * (1.0 - fg)
            dzt[..., 2 * hid: 3 * hid] = dc * ig * (1.0 - cg * cg)
            dzt[..., 3 * hid:] = dh * tc * og * (1.0 - og)
            dc = dc * fg
            dh = np.matmul(dzt, whT)
        dz2 = dz.reshape(2, n * t_len, 4 * hid)
        gwh = np.matmul(np.swapaxes(hs[:, :, :-1].reshape(2, n * t_len, hid), 1, 2), dz2)
        gwx = np.matmul(np.swapaxes(xs.reshape(2, n * t_len, d), 1, 2), dz2)
        gb = dz2.sum(axis=1)
        dxs = np.matmul(dz2, np.swapaxes(wx.data, 1, 2)).reshape(2, n, t_len, d)
        gx = dxs[0] + dxs[1][:, ::-1]
        return gx, gwx, gwh, gb

    return make_op(out, (x, wx, wh, b), bw)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; a pure function of the config."""
    shapes: dict[str, tuple[int, ...]] = {}
    k = config.kernel_size
    c_in = 1
    for bi, c_out in enumerate(config.conv_channels):
        for ci in range(config.convs_per_block):
            pre = f"conv.{bi}.{ci}"
            shapes[f"{pre}.weight"] = (c_out, c_in, k, k)
            for p in ("gamma", "beta", "tau"):
                shapes[f"{pre}.frn.{p}"] = (c_out,)
            c_in = c_out
    feat = config.conv_channels[-1]
    shapes["conv.final.weight"] = (feat, c_in, config.collapsed_height(), k)
    for p in ("gamma", "beta", "tau"):
        shapes[f"conv.final.frn.{p}"] = (feat,)
    hid = config.rnn_hidden
    for br in range(config.rnn_scales):
        d_in = feat
        for layer in range(2):
            pre = f"rnn.branch{br}.layer{layer}"
            shapes[f"{pre}.wx"] = (2, d_in, 4 * hid)
            shapes[f"{pre}.wh"] = (2, hid, 4 * hid)
            shapes[f"{pre}.b"] = (2, 4 * hid)
            d_in = 2 * hid
    shapes["rnn.final.wx"] = (2, 2 * hid, 4 * hid)
    shapes["rnn.final.wh"] = (2, hid, 4 * hid)
    shapes["rnn.final.b"] = (2, 4 * hid)
    if config.head_mode == "frn_baseline":
        for p in ("gamma", "beta", "tau"):
            shapes[f"head.frn.{p}"] = (2 * hid,)
    shapes["classifier.weight"] = (2 * hid, config.num_classes)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def init_params(config: NetworkConfig, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    hid = config.rnn_hidden
    for name, shape in param_shapes(config).items():
        if name.endswith(".frn.gamma"):
            arr = np.ones(shape)
        elif name.endswith((".frn.beta", ".frn.tau", "classifier.bias")):
            arr = np.zeros(shape)
        elif name.endswith(".weight") and name.startswith("conv"):
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        elif name.endswith((".wx", ".wh")):
            bound = 1.0 / np.sqrt(hid)
            arr = rng.uniform(-bound, bound, shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
            arr[:, hid: 2 * hid] = 1.0  # forget gate bias
        elif name == "classifier.weight":
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, shape)
        else:  # pragma: no cover - every name above is handled
            raise AssertionError(name)
        params[name] = Tensor(arr.astype(dtype), name=name)
    return params


# ---------------------------------------------------------------------------
# forward stages


def _frn_params(params, prefix):
    return params[f"{prefix}.gamma"], params[f"{prefix}.beta"], params[f"{prefix}.tau"]


def conv_stage(params: dict[str, Tensor], x: Tensor, config: NetworkConfig) -> Tensor:
    """Conv blocks + height-collapsing conv; returns N x C x 1 x W'."""
    if x.ndim != 4 or x.shape[2] != config.input_height:
        raise ConfigError(f"expected N x 1 x {config.input_height} x W input, got {x.shape}")
    pad = config.kernel_size // 2
    for bi in range(len(config.conv_channels)):
        for ci in range(config.convs_per_block):
            pre = f"conv.{bi}.{ci}"
            x = T.conv2d(x, params[f"{pre}.weight"], 1, pad)
            x = frn(x, *_frn_params(params, f"{pre}.frn"), config.frn_eps)
        ph, pw = config.pool_schedule[bi]
        x = T.maxpool2d(x, ph, pw)
    x = T.conv2d(x, params["conv.final.weight"], 1, (0, pad))
    return frn(x, *_frn_params(params, "conv.final.frn"), config.frn_eps)


def _pool_time(x: Tensor, factor: int) -> Tensor:
    n, t_len, d = x.shape
    img = T.reshape(T.transpose(x, (0, 2, 1)), (n, d, 1, t_len))
    pooled = T.maxpool2d(img, 1, factor)
    return T.transpose(T.reshape(pooled, (n, d, t_len // factor)), (0, 2, 1))


def _layer(params, prefix, x):
    return blstm(x, params[f"{prefix}.wx"], params[f"{prefix}.wh"], params[f"{prefix}.b"])


def multiscale_rnn(params: dict[str, Tensor], x: Tensor, config: NetworkConfig) -> Tensor:
    """Branches at full, half and quarter time resolution, summed, then one BLSTM."""
    t_len = x.shape[1]
    factor_max = 2 ** (config.rnn_scales - 1)
    if t_len % factor_max:
        raise ConfigError(f"sequence length {t_len} not divisible by {factor_max}")
    total = None
    for br in range(config.rnn_scales):
        factor = 2 ** br
        h = _pool_time(x, factor) if factor > 1 else x
        for layer in range(2):
            h = _layer(params, f"rnn.branch{br}.layer{layer}", h)
        if factor > 1:
            h = T.upsample_nearest_w(h, factor, axis=1)
        total = h if total is None else T.add(total, h)
    return _layer(params, "rnn.final", total)


def features(params: dict[str, Tensor], images: Tensor, config: NetworkConfig) -> Tensor:
    """Style-independent N x T x 2H features (everything before the head)."""
    conv = conv_stage(params, images, config)
    n, c, _, w = conv.shape
    seq = T.transpose(T.reshape(conv, (n, c, w)), (0, 2, 1))
    return multiscale_rnn(params, seq, config)


def head(params: dict[str, Tensor], table: StyleTable | None, feats: Tensor,
         config: NetworkConfig, tsi: Sequence[int] | None = None,
         embeddings: Tensor | None = None) -> Tensor:
    """Style head (TSB or FRN) and linear classifier; returns N x T x K logits."""
    if config.head_mode == "tsb":
        styled = tsb_forward(table, feats, tsi=tsi, embeddings=embeddings)
    else:
        styled = frn(feats, *_frn_params(params, "head.frn"), config.frn_eps, channel_axis=2)
    n, t_len, c = styled.shape
    flat = T.reshape(styled, (n * t_len, c))
    logits = T.add(T.matmul(flat, params["classifier.weight"]), params["classifier.bias"])
    return T.reshape(logits, (n, t_len, config.num_classes))


@dataclass
class Model:
    """Network parameters, style table and config travelling together."""

    config: NetworkConfig
    params: dict[str, Tensor]
    table: StyleTable | None

    @classmethod
    def create(cls, config: NetworkConfig, tsis: Sequence[int], seed: int,
               dtype=np.float32) -> "Model":
        rng = np.random.default_rng([seed, 1])
        params = init_params(config, rng, dtype)
        table = None
        if config.head_mode == "tsb":
            table = StyleTable(config.feature_channels, config.embedding_dim,
                               eps=config.adain_eps, init_k=config.init_k,
                               seed=int(np.random.default_rng([seed, 2]).integers(2**63)),
                               dtype=dtype)
            for t in sorted(set(int(v) for v in tsis)):
                table.register_tsi(t)
        return cls(config, params, table)

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        if self.table is not None:
            out.update(self.table.parameters())
        return out

    def forward(self, images, tsi: Sequence[int] | None = None,
                embeddings: Tensor | None = None) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        return head(self.params, self.table, features(self.params, x, self.config),
                    self.config, tsi=tsi, embeddings=embeddings)

    def log_probs(self, images, tsi=None, embeddings=None) -> Tensor:
        return T.log_softmax(self.forward(images, tsi, embeddings), axis=-1)

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag
            t.grad = None
