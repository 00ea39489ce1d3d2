"""Joint training with Adam, CER evaluation and the binary checkpoint format."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .ctc import InfeasibleError, ctc_mean_loss, greedy_decode, required_frames
from .data import Alphabet, Dataset, Sample, mask_augment, to_network_input
from .network import Model, NetworkConfig
from .tensor import NonFiniteError, Tensor
from .tsb import StyleTable

log = logging.getLogger(__name__)

MAGIC = b"TSNF1"
FORMAT_VERSION = 1
_F32 = 1


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    iterations: int = 20000
    seed: int = 0
    augment: bool = True
    mask_rate: float = 0.5
    mask_sites: int = 1
    clip_norm: float = 5.0
    eval_every: int = 1000
    eval_train_limit: int = 200

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> None:
    """In-place Adam update with bias correction.

    Raises NonFiniteGradient (leaving params and state untouched) if any
    gradient has NaN/Inf.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = config.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + config.adam_eps)
        p.data = (p.data - step).astype(p.data.dtype, copy=False)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for k in grads:
            grads[k] = (grads[k] * factor).astype(grads[k].dtype)
    return total


# ---------------------------------------------------------------------------
# string metrics


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Unit-cost Levenshtein distance."""
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, 1):
            cur[j] = min(prev[j - 1] + (ca != cb), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def align(a: Sequence, b: Sequence) -> list[tuple[str, object, object]]:
    """One optimal edit script from ``a`` to ``b``.

    Entries are ``(op, a_item, b_item)`` with op in match/sub/del/ins. When
    several scripts are optimal the backtrace prefers substitution (or
    match), then deletion, then insertion.
    """
    n, m = len(a), len(b)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (a[i - 1] != b[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    ops = []
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (a[i - 1] != b[j - 1]):
            ops.append(("match" if a[i - 1] == b[j - 1] else "sub", a[i - 1], b[j - 1]))
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            ops.append(("del", a[i - 1], None))
            i -= 1
        else:
            ops.append(("ins", None, b[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def cer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("CER undefined for empty references")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / total


# ---------------------------------------------------------------------------
# decoding and evaluation


def decode_batches(model: Model, samples: Sequence[Sample], tsis: Sequence[int] | None = None,
                   embedding: np.ndarray | None = None, batch_size: int = 64) -> list[list[int]]:
    """Greedy transcriptions (alphabet indices) for every sample.

    Samples are batched only with others of identical width, so a line's
    output never depends on what it was batched with.
    """
    tsis = [s.tsi for s in samples] if tsis is None else list(tsis)
    groups: dict[int, list[int]] = {}
    for k, s in enumerate(samples):
        groups.setdefault(s.image.shape[1], []).append(k)
    out: list[list[int] | None] = [None] * len(samples)
    emb = None if embedding is None else Tensor(np.asarray(embedding, dtype=np.float32).reshape(1, -1))
    for width in sorted(groups):
        idx = groups[width]
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            x = to_network_input([samples[k].image for k in chunk])
            kw = {"embeddings": emb} if emb is not None else {"tsi": [tsis[k] for k in chunk]}
            lp = model.log_probs(x, **kw).data
            for row, k in enumerate(chunk):
                out[k] = [c - 1 for c in greedy_decode(lp[row])]
    return out  # type: ignore[return-value]


def derangement(items: Sequence[int], seed: int) -> dict[int, int]:
    """Seeded permutation of ``items`` with no fixed point (identity if < 2 items)."""
    items = sorted(set(items))
    if len(items) < 2:
        return {t: t for t in items}
    rng = np.random.default_rng([seed, 0xDE7A])
    while True:
        perm = rng.permutation(len(items))
        if not np.any(perm == np.arange(len(items))):
            return {items[i]: items[p] for i, p in enumerate(perm)}


@dataclass
class EvalResult:
    cer: float
    rows: list[tuple[int, int, int, str, str, int]]  # index, tsi, used tsi, ref, hyp, distance

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "tsi", "used_tsi", "reference", "hypothesis", "distance"])
            w.writerows(self.rows)


def evaluate(model: Model, samples: Sequence[Sample], alphabet: Alphabet, tsi_mode: str = "given",
             *, seed: int = 0, mapping: dict[int, int] | None = None,
             embedding: np.ndarray | None = None) -> EvalResult:
    """CER of greedy decoding under the given, shuffled or one fixed style.

    ``shuffled`` maps every TSI through a seeded derangement (or through
    ``mapping`` when supplied); ``fixed`` decodes all lines with ``embedding``.
    """
    if model.table is not None and tsi_mode != "fixed":
        model.table.rows_for([s.tsi for s in samples])
    if tsi_mode == "given":
        used = [s.tsi for s in samples]
    elif tsi_mode == "shuffled":
        mapping = mapping or derangement([s.tsi for s in samples], seed)
        used = [mapping[s.tsi] for s in samples]
    elif tsi_mode == "fixed":
        if embedding is None:
            raise ValueError("fixed mode needs an embedding")
        used = [-1] * len(samples)
    else:
        raise ValueError(f"unknown tsi_mode {tsi_mode!r}")
    hyps = decode_batches(model, samples, None if tsi_mode == "fixed" else used,
                          embedding if tsi_mode == "fixed" else None)
    rows, dist_total, ref_total = [], 0, 0
    for k, (s, u, h) in enumerate(zip(samples, used, hyps)):
        dist = edit_distance(s.transcription, h)
        dist_total += dist
        ref_total += len(s.transcription)
        rows.append((k, s.tsi, u, alphabet.decode(s.transcription), alphabet.decode(h), dist))
    return EvalResult(dist_total / ref_total if ref_total else 0.0, rows)


# ---------------------------------------------------------------------------
# checkpoint


@dataclass
class Checkpoint:
    config: NetworkConfig
    alphabet: str
    params: dict[str, np.ndarray]
    tsi_rows: dict[int, int]
    table_meta: dict | None
    optimizer: AdamState | None = None
    rng_state: dict = field(default_factory=dict)
    train_config: dict | None = None

    @classmethod
    def from_model(cls, model: Model, alphabet: Alphabet, optimizer: AdamState | None = None,
                   rng_state: dict | None = None, train_config: TrainConfig | None = None) -> "Checkpoint":
        params = {k: v.data.astype(np.float32).copy() for k, v in model.parameters().items()}
        table = model.table
        table_meta = None
        if table is not None:
            table_meta = {"eps": table.eps, "init_k": table.init_k,
                          "rng": table.rng.bit_generator.state}
        opt = None
        if optimizer is not None:
            opt = AdamState(optimizer.step, {k: v.copy() for k, v in optimizer.m.items()},
                            {k: v.copy() for k, v in optimizer.v.items()})
        return cls(model.config, alphabet.chars, params,
                   dict(table.tsi_rows) if table is not None else {}, table_meta, opt,
                   dict(rng_state or {}), train_config.to_dict() if train_config else None)

    def to_model(self) -> Model:
        cfg = self.config
        names = set(self.params)
        net = {k: Tensor(v.copy(), name=k) for k, v in self.params.items() if not k.startswith("tsb.")}
        table = None
        if cfg.head_mode == "tsb":
            table = StyleTable(cfg.feature_channels, cfg.embedding_dim,
                               eps=self.table_meta["eps"], init_k=self.table_meta["init_k"])
            for t in table.parameters().values():
                if t.name not in names:
                    raise ValueError(f"checkpoint lacks {t.name}")
                t.data = self.params[t.name].copy()
            table.tsi_rows = dict(self.tsi_rows)
            table.rng.bit_generator.state = self.table_meta["rng"]
        return Model(cfg, net, table)

    def header(self) -> dict:
        return {
            "network": self.config.to_dict(),
            "alphabet": self.alphabet,
            "tsi_rows": sorted([int(k), int(v)] for k, v in self.tsi_rows.items()),
            "style_table": self.table_meta,
            "optimizer": None if self.optimizer is None else {"step": self.optimizer.step},
            "rng": self.rng_state,
            "train": self.train_config,
        }

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", FORMAT_VERSION))
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf.write(struct.pack("<I", len(head)))
        buf.write(head)
        blobs = sorted(self.params.items())
        if self.optimizer is not None:
            blobs += sorted((f"adam.m.{k}", v) for k, v in self.optimizer.m.items())
            blobs += sorted((f"adam.v.{k}", v) for k, v in self.optimizer.v.items())
        buf.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<BI", _F32, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:5] != MAGIC:
            raise ValueError("not a TSNF1 checkpoint")
        pos = 5
        (version,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        head = json.loads(raw[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        blobs: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, ndim = struct.unpack_from("<BI", raw, pos)
            pos += 5
            if tag != _F32:
                raise ValueError(f"unknown dtype tag {tag} for {name}")
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            blobs[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape) \
                .astype(np.float32)
            pos += 4 * size
        params = {k: v for k, v in blobs.items() if not k.startswith("adam.")}
        opt = None
        if head["optimizer"] is not None:
            opt = AdamState(head["optimizer"]["step"],
                            {k[7:]: v for k, v in blobs.items() if k.startswith("adam.m.")},
                            {k[7:]: v for k, v in blobs.items() if k.startswith("adam.v.")})
        return cls(NetworkConfig.from_dict(head["network"]), head["alphabet"], params,
                   {int(k): int(v) for k, v in head["tsi_rows"]}, head["style_table"], opt,
                   head["rng"], head["train"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training loop


@lru_cache(maxsize=8)
def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0xBA7C]).permutation(n)


def batch_indices(iteration: int, batch_size: int, n: int, seed: int) -> list[int]:
    """Positions ``[it*B, (it+1)*B)`` of an endless stream of seeded epoch shuffles."""
    out: list[int] = []
    pos = iteration * batch_size
    while len(out) < batch_size:
        epoch, off = divmod(pos, n)
        take = min(batch_size - len(out), n - off)
        out.extend(_epoch_order(seed, epoch, n)[off:off + take].tolist())
        pos += take
    return out


def feasible(sample: Sample, config: NetworkConfig) -> bool:
    return required_frames(sample.transcription) <= sample.image.shape[1] // config.width_factor


@dataclass
class TrainResult:
    model: Model
    checkpoint: Checkpoint
    log: list[tuple]
    skipped_samples: int
    skipped_steps: int


LOG_HEADER = ("iter", "loss", "train_cer", "test_cer")


def write_metric_log(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for it, loss, tr, te in rows:
            w.writerow([it, repr(float(loss)), "" if tr is None else repr(tr), "" if te is None else repr(te)])


def train(dataset: Dataset, net_config: NetworkConfig, config: TrainConfig, *,
          resume: Checkpoint | None = None, stop_at: int | None = None,
          log_path=None, on_log: Callable[[tuple], None] | None = None) -> TrainResult:
    """Train network and style table jointly; deterministic given ``config.seed``.

    ``stop_at`` ends the run early (the checkpoint then records where to
    resume). Training samples whose label cannot fit the output frames are
    dropped and counted.
    """
    alphabet = dataset.alphabet
    if net_config.num_classes != alphabet.num_classes:
        raise ValueError(f"network has {net_config.num_classes} classes, alphabet needs "
                         f"{alphabet.num_classes}")
    pool = [s for s in dataset.subset(dataset.train) if feasible(s, net_config)]
    skipped_samples = len(dataset.train) - len(pool)
    if skipped_samples:
        log.warning("skipping %d infeasible training samples", skipped_samples)
    if not pool:
        raise InfeasibleError("no feasible training samples")
    test = dataset.subset(dataset.test)
    train_eval = pool[: config.eval_train_limit]

    if resume is not None:
        if resume.alphabet != alphabet.chars:
            raise ValueError("checkpoint alphabet differs from dataset alphabet")
        model = resume.to_model()
        state = resume.optimizer or AdamState()
        start = int(resume.rng_state.get("iteration", 0))
    else:
        model = Model.create(net_config, dataset.tsis, config.seed)
        state = AdamState()
        start = 0
    params = model.parameters()
    advance = dataset.char_width
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    rows: list[tuple] = []
    skipped_steps = 0
    for it in range(start, end):
        model.set_trainable(True)
        batch = [pool[k] for k in batch_indices(it, config.batch_size, len(pool), config.seed)]
        images = [s.image for s in batch]
        if config.augment:
            rng = np.random.default_rng([config.seed, it, 1])
            images = [mask_augment(im, advance, config.mask_rate, int(rng.integers(2**63)),
                                   config.mask_sites) for im in images]
        x = to_network_input(images)
        labels = [alphabet.to_classes(s.transcription) for s in batch]
        try:
            loss = ctc_mean_loss(model.log_probs(x, tsi=[s.tsi for s in batch]), labels)
            T.backward(loss)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for k, p in params.items()}
            clip_by_global_norm(grads, config.clip_norm)
            adam_step(params, grads, state, config)
            loss_value = float(loss.data)
        except (NonFiniteGradient, NonFiniteError) as exc:
            log.warning("iteration %d: step aborted (%s)", it, exc)
            skipped_steps += 1
            loss_value = float("nan")
        train_cer = test_cer = None
        if (it + 1) % config.eval_every == 0 or it + 1 == config.iterations:
            model.set_trainable(False)
            train_cer = evaluate(model, train_eval, alphabet).cer
            test_cer = evaluate(model, test, alphabet).cer if test else None
            log.info("iter %d loss %.4f train CER %.4f test CER %s", it, loss_value, train_cer,
                     "n/a" if test_cer is None else f"{test_cer:.4f}")
        row = (it, loss_value, train_cer, test_cer)
        rows.append(row)
        if on_log is not None:
            on_log(row)
    model.set_trainable(False)
    ckpt = Checkpoint.from_model(model, alphabet, state, {"seed": config.seed, "iteration": end},
                                 config)
    if log_path is not None:
        write_metric_log(log_path, rows)
    return TrainResult(model, ckpt, rows, skipped_samples, skipped_steps)

