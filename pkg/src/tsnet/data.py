"""Synthetic transcription-style dataset: rendering, styles, masking, I/O.

A transcription style here is a permutation of the alphabet that keeps the
space character fixed. Every line is rendered from its visual text, and its
transcription is the style applied to that text.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .font import GLYPH_COLS, GLYPH_ROWS, glyph

DEFAULT_ALPHABET = "abcdefghijkl "


class Alphabet:
    """Ordered character set. Model class ``i + 1`` is character ``i``; 0 is blank."""

    def __init__(self, chars: str):
        if len(set(chars)) != len(chars):
            raise ValueError("alphabet characters must be unique")
        if " " not in chars:
            raise ValueError("alphabet must contain the space character")
        self.chars = chars
        self._index = {c: i for i, c in enumerate(chars)}

    def __len__(self) -> int:
        return len(self.chars)

    def __eq__(self, other) -> bool:
        return isinstance(other, Alphabet) and other.chars == self.chars

    def __repr__(self) -> str:
        return f"Alphabet({self.chars!r})"

    @property
    def space(self) -> int:
        return self._index[" "]

    @property
    def num_classes(self) -> int:
        return len(self.chars) + 1

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in alphabet") from None

    def decode(self, indices: Sequence[int]) -> str:
        return "".join(self.chars[i] for i in indices)

    def to_classes(self, indices: Sequence[int]) -> list[int]:
        return [i + 1 for i in indices]

    def from_classes(self, classes: Sequence[int]) -> list[int]:
        return [c - 1 for c in classes]


@dataclass(frozen=True)
class StylePermutation:
    """``mapping[i]`` is the output index for visual character ``i``."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise ValueError("style mapping must be a bijection")

    @classmethod
    def identity(cls, n: int) -> "StylePermutation":
        return cls(tuple(range(n)))

    @classmethod
    def from_chars(cls, alphabet: Alphabet, outputs: str) -> "StylePermutation":
        """Style given as the output character for each alphabet character."""
        return cls(tuple(alphabet.encode(outputs)))

    def apply(self, indices: Sequence[int]) -> list[int]:
        return [self.mapping[i] for i in indices]

    def inverse(self) -> "StylePermutation":
        inv = [0] * len(self.mapping)
        for i, j in enumerate(self.mapping):
            inv[j] = i
        return StylePermutation(tuple(inv))

    def as_chars(self, alphabet: Alphabet) -> str:
        return alphabet.decode(self.mapping)


def make_styles(alphabet: Alphabet, n_styles: int, seed: int) -> list[StylePermutation]:
    """Identity plus ``n_styles - 1`` distinct derangements of the non-space characters."""
    if n_styles < 1:
        raise ValueError("n_styles must be >= 1")
    movable = [i for i in range(len(alphabet)) if i != alphabet.space]
    m = len(movable)
    # number of derangements of m items
    derangements = 1 if m == 0 else 0
    if m >= 1:
        d_prev, d = 1, 0
        for k in range(2, m + 1):
            d_prev, d = d, (k - 1) * (d + d_prev)
        derangements = d
    if n_styles - 1 > derangements:
        raise ValueError(f"alphabet allows only {derangements} derangement styles, "
                         f"{n_styles - 1} requested")
    rng = np.random.default_rng([seed, 0x5717])
    styles = [StylePermutation.identity(len(alphabet))]
    seen = {styles[0].mapping}
    while len(styles) < n_styles:
        perm = rng.permutation(m)
        if np.any(perm == np.arange(m)):
            continue
        mapping = list(range(len(alphabet)))
        for src, dst in zip(movable, perm):
            mapping[src] = movable[dst]
        style = StylePermutation(tuple(mapping))
        if style.mapping not in seen:
            seen.add(style.mapping)
            styles.append(style)
    return styles


# ---------------------------------------------------------------------------
# rendering


@dataclass
class RenderParams:
    height: int = 32
    scale: int = 2
    spacing: int = 2
    margin: int = 4
    jitter: int = 1
    noise_max: float = 0.1
    contrast: bool = True
    width_multiple: int = 16

    @property
    def advance(self) -> int:
        return GLYPH_COLS * self.scale + self.spacing

    def width_for(self, n_chars: int) -> int:
        raw = 2 * self.margin + n_chars * self.advance
        return int(math.ceil(raw / self.width_multiple) * self.width_multiple)


def quantize(img: np.ndarray) -> np.ndarray:
    levels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.float32)
    return levels / np.float32(255.0)


def render_line(text: str, params: RenderParams | None = None, seed=0) -> np.ndarray:
    """Dark text on a light background, values in [0, 1] on a 1/255 grid."""
    params = params or RenderParams()
    if not text:
        raise ValueError("cannot render empty text")
    glyphs = [glyph(c) for c in text]
    gh, gw = GLYPH_ROWS * params.scale, GLYPH_COLS * params.scale
    if gh > params.height:
        raise ValueError("glyphs taller than the line height")
    rng = np.random.default_rng(seed)
    width = params.width_for(len(text))
    ink = np.zeros((params.height, width), dtype=bool)
    top = (params.height - gh) // 2
    for i, g in enumerate(glyphs):
        dx = int(rng.integers(-params.jitter, params.jitter + 1)) if params.jitter else 0
        x0 = params.margin + i * params.advance + dx
        block = np.kron(g, np.ones((params.scale, params.scale), dtype=bool))
        ink[top:top + gh, x0:x0 + gw] |= block
    if params.contrast:
        bg, fg = rng.uniform(0.85, 1.0), rng.uniform(0.0, 0.3)
    else:
        bg, fg = 1.0, 0.0
    img = np.where(ink, fg, bg)
    if params.noise_max > 0:
        img = img + rng.normal(0.0, rng.uniform(0.0, params.noise_max), img.shape)
    return quantize(img)


def mask_augment(image: np.ndarray, char_width: int, rate: float, seed=0, sites: int = 1,
                 max_fraction: float = 0.25) -> np.ndarray:
    """Overwrite random column spans (0.5 to 2 characters wide) with uniform noise.

    Each of ``sites`` candidate spans is masked with probability ``rate``;
    the union of masked columns never exceeds ``max_fraction`` of the width.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    out = image.copy()
    h, w = image.shape
    cap = int(max_fraction * w)
    masked = np.zeros(w, dtype=bool)
    for _ in range(sites):
        if rng.random() >= rate:
            continue
        span = int(round(rng.uniform(0.5, 2.0) * char_width))
        span = min(span, cap - int(masked.sum()), w)
        if span <= 0:
            break
        start = int(rng.integers(0, w - span + 1))
        out[:, start:start + span] = quantize(rng.random((h, span)))
        masked[start:start + span] = True
    return out


def to_network_input(images: Sequence[np.ndarray], width: int | None = None) -> np.ndarray:
    """Stack images as N x 1 x H x W ink intensities (1 - pixel), right-padded with 0."""
    h = images[0].shape[0]
    w = width or max(im.shape[1] for im in images)
    batch = np.zeros((len(images), 1, h, w), dtype=np.float32)
    for i, im in enumerate(images):
        batch[i, 0, :, : im.shape[1]] = 1.0 - im
    return batch


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Sample:
    image: np.ndarray
    base_text: list[int]
    transcription: list[int]
    tsi: int
    index: int = 0

    @property
    def path(self) -> str:
        return f"lines/{self.tsi}/{self.index}.pgm"


@dataclass
class DatasetConfig:
    alphabet: str = DEFAULT_ALPHABET
    n_styles: int = 3
    tsi_per_style: int = 3
    lines_per_tsi: int = 300
    min_chars: int = 6
    max_chars: int = 14
    min_word: int = 2
    max_word: int = 8
    test_fraction: float = 0.1
    seed: int = 0
    render: RenderParams = field(default_factory=RenderParams)

    def __post_init__(self):
        if isinstance(self.render, dict):
            self.render = RenderParams(**self.render)
        if min(self.n_styles, self.tsi_per_style, self.lines_per_tsi) < 1:
            raise ValueError("dataset counts must be positive")
        if not 1 <= self.min_chars <= self.max_chars:
            raise ValueError("invalid line length range")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    alphabet: Alphabet
    styles: list[StylePermutation]
    tsi_to_style: dict[int, int]
    samples: list[Sample]
    train: list[int]
    test: list[int]
    seed: int
    height: int
    char_width: int = RenderParams().advance

    def subset(self, indices: Sequence[int]) -> list[Sample]:
        return [self.samples[i] for i in indices]

    @property
    def tsis(self) -> list[int]:
        return sorted(self.tsi_to_style)


def random_text(alphabet: Alphabet, rng: np.random.Generator, min_chars: int, max_chars: int,
                min_word: int = 2, max_word: int = 8) -> list[int]:
    """Uniform characters in words of ``min_word``..``max_word`` letters."""
    letters = [i for i in range(len(alphabet)) if i != alphabet.space]
    target = int(rng.integers(min_chars, max_chars + 1))
    out: list[int] = []
    while len(out) < target:
        if out:
            out.append(alphabet.space)
        out.extend(int(c) for c in rng.choice(letters, int(rng.integers(min_word, max_word + 1))))
    out = out[:target]
    while out and out[-1] == alphabet.space:
        out.pop()
    return out


def make_line(alphabet: Alphabet, style: StylePermutation, config: DatasetConfig,
              tsi: int, index: int, seed: int) -> Sample:
    rng = np.random.default_rng([seed, tsi, index])
    base = random_text(alphabet, rng, config.min_chars, config.max_chars,
                       config.min_word, config.max_word)
    image = render_line(alphabet.decode(base), config.render, rng.integers(2**63))
    return Sample(image, base, style.apply(base), tsi, index)


def generate_lines(alphabet: Alphabet, style: StylePermutation, config: DatasetConfig, tsi: int,
                   count: int, seed: int, threads: int = 1) -> list[Sample]:
    jobs = range(count)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda i: make_line(alphabet, style, config, tsi, i, seed), jobs))
    return [make_line(alphabet, style, config, tsi, i, seed) for i in jobs]


def build_dataset(config: DatasetConfig, threads: int = 1) -> Dataset:
    """TSI ``t`` uses style ``t mod n_styles``; test lines are split per TSI."""
    alphabet = Alphabet(config.alphabet)
    styles = make_styles(alphabet, config.n_styles, config.seed)
    n_tsi = config.n_styles * config.tsi_per_style
    tsi_to_style = {t: t % config.n_styles for t in range(n_tsi)}
    jobs = [(t, i) for t in range(n_tsi) for i in range(config.lines_per_tsi)]

    def make(job):
        t, i = job
        return make_line(alphabet, styles[tsi_to_style[t]], config, t, i, config.seed)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            samples = list(pool.map(make, jobs))
    else:
        samples = [make(j) for j in jobs]
    train, test = split_indices(samples, config.test_fraction, config.seed)
    return Dataset(alphabet, styles, tsi_to_style, samples, train, test, config.seed,
                   config.render.height, config.render.advance)


def split_indices(samples: Sequence[Sample], test_fraction: float, seed: int):
    by_tsi: dict[int, list[int]] = {}
    for k, s in enumerate(samples):
        by_tsi.setdefault(s.tsi, []).append(k)
    train, test = [], []
    for t in sorted(by_tsi):
        rows = by_tsi[t]
        n_test = int(round(test_fraction * len(rows)))
        chosen = set(np.random.default_rng([seed, t, 0x7E57]).permutation(len(rows))[:n_test].tolist())
        for j, k in enumerate(rows):
            (test if j in chosen else train).append(k)
    return train, test


# ---------------------------------------------------------------------------
# on-disk format


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PGM supported")
    w, h = int(tokens[1]), int(tokens[2])
    pix = np.frombuffer(raw[pos + 1: pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return pix.astype(np.float32) / np.float32(255.0)


def _write_tsv(path: Path, alphabet: Alphabet, samples: Sequence[Sample]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for s in samples:
            fh.write(f"{s.path}\t{s.tsi}\t{alphabet.decode(s.transcription)}\n")


def read_manifest(path: str | os.PathLike) -> list[tuple[str, int, str]]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            img, tsi, text = line.split("\t", 2)
            rows.append((img, int(tsi), text))
    return rows


def write_dataset(dataset: Dataset, out: str | os.PathLike, config: DatasetConfig | None = None) -> None:
    out = Path(out)
    for s in dataset.samples:
        (out / "lines" / str(s.tsi)).mkdir(parents=True, exist_ok=True)
        write_pgm(out / s.path, s.image)
    _write_tsv(out / "manifest.tsv", dataset.alphabet, dataset.samples)
    _write_tsv(out / "train.tsv", dataset.alphabet, dataset.subset(dataset.train))
    _write_tsv(out / "test.tsv", dataset.alphabet, dataset.subset(dataset.test))
    meta = {
        "alphabet": dataset.alphabet.chars,
        "styles": [s.as_chars(dataset.alphabet) for s in dataset.styles],
        "tsi_to_style": {str(k): v for k, v in sorted(dataset.tsi_to_style.items())},
        "seed": dataset.seed,
        "height": dataset.height,
        "char_width": dataset.char_width,
    }
    if config is not None:
        meta["config"] = config.to_dict()
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_dataset(root: str | os.PathLike) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    alphabet = Alphabet(meta["alphabet"])
    styles = [StylePermutation.from_chars(alphabet, s) for s in meta["styles"]]
    tsi_to_style = {int(k): int(v) for k, v in meta["tsi_to_style"].items()}
    inverse = [s.inverse() for s in styles]
    rows = read_manifest(root / "manifest.tsv")
    samples, by_path = [], {}
    for k, (img, tsi, text) in enumerate(rows):
        if tsi not in tsi_to_style:
            raise ValueError(f"manifest TSI {tsi} missing from meta.json")
        trans = alphabet.encode(text)
        index = int(Path(img).stem)
        samples.append(Sample(read_pgm(root / img), inverse[tsi_to_style[tsi]].apply(trans),
                              trans, tsi, index))
        by_path[img] = k
    train = [by_path[r[0]] for r in read_manifest(root / "train.tsv")] \
        if (root / "train.tsv").exists() else list(range(len(samples)))
    test = [by_path[r[0]] for r in read_manifest(root / "test.tsv")] \
        if (root / "test.tsv").exists() else []
    return Dataset(alphabet, styles, tsi_to_style, samples, train, test,
                   int(meta.get("seed", 0)), int(meta.get("height", 32)),
                   int(meta.get("char_width", RenderParams().advance)))


def load_lines(manifest: str | os.PathLike, alphabet: Alphabet) -> list[Sample]:
    """Samples from any manifest-format TSV; image paths are relative to its folder."""
    base = Path(manifest).parent
    out = []
    for k, (img, tsi, text) in enumerate(read_manifest(manifest)):
        trans = alphabet.encode(text)
        out.append(Sample(read_pgm(base / img), [], trans, tsi, k))
    return out


def write_lines(out: str | os.PathLike, alphabet: Alphabet, samples: Sequence[Sample],
                name: str = "manifest.tsv") -> Path:
    out = Path(out)
    for s in samples:
        (out / "lines" / str(s.tsi)).mkdir(parents=True, exist_ok=True)
        write_pgm(out / s.path, s.image)
    _write_tsv(out / name, alphabet, samples)
    return out / name


def write_csv(path: str | os.PathLike, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
