"""Style diagnostics: substitution tables, (gamma, beta) PCA, distance correlation, MDS."""

from __future__ import annotations

import csv
import html
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Alphabet, Sample
from .network import Model
from .training import align, decode_batches, edit_distance
from .tsb import StyleTable

DELETION = "∅"


def decode_under_tsis(model: Model, samples: Sequence[Sample], tsis: Sequence[int]) -> dict[int, list[list[int]]]:
    """Transcribe every line once per TSI (alphabet indices)."""
    return {t: decode_batches(model, samples, [t] * len(samples)) for t in tsis}


# ---------------------------------------------------------------------------
# substitution statistics


@dataclass
class SubstitutionTable:
    """Counts of ``x`` (in one output) aligned to ``y`` (another output).

    ``y`` is None for a deletion. ``occurrences[x]`` counts every aligned
    occurrence of ``x``, substituted or not.
    """

    alphabet: Alphabet
    counts: dict[tuple[int, int | None], int] = field(default_factory=dict)
    occurrences: dict[int, int] = field(default_factory=dict)

    def add(self, x: int, y: int | None) -> None:
        self.occurrences[x] = self.occurrences.get(x, 0) + 1
        if y != x:
            self.counts[(x, y)] = self.counts.get((x, y), 0) + 1

    def substituted(self, x: int) -> int:
        return sum(c for (a, _), c in self.counts.items() if a == x)

    def ratio(self, x: int) -> float:
        """R: percentage of occurrences of ``x`` that were substituted or deleted."""
        occ = self.occurrences.get(x, 0)
        return 100.0 * self.substituted(x) / occ if occ else 0.0

    def ranked(self, x: int, top: int | None = None) -> list[tuple[int | None, float]]:
        """Substitutes of ``x`` with relative frequency (% of its substitution events)."""
        total = self.substituted(x)
        if not total:
            return []
        items = [(y, 100.0 * c / total) for (a, y), c in self.counts.items() if a == x]
        items.sort(key=lambda it: (-it[1], -1 if it[0] is None else it[0]))
        return items[:top] if top else items

    def characters(self) -> list[int]:
        return sorted(x for x in self.occurrences if self.substituted(x))

    def symbol(self, y: int | None) -> str:
        return DELETION if y is None else self.alphabet.chars[y]

    def rows(self, top: int = 3) -> list[list]:
        out = []
        for x in sorted(self.characters(), key=lambda c: (-self.ratio(c), c)):
            row = [self.alphabet.chars[x], round(self.ratio(x), 4)]
            ranked = self.ranked(x, top)
            for k in range(top):
                row += [self.symbol(ranked[k][0]), round(ranked[k][1], 4)] if k < len(ranked) else ["", ""]
            out.append(row)
        return out

    def write_csv(self, path, top: int = 3) -> None:
        header = ["character", "R_percent"]
        for k in range(1, top + 1):
            header += [f"top{k}", f"top{k}_percent"]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# deletions are counted as substitution by {DELETION}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(self.rows(top))


def substitution_table(outputs: dict[int, list[list[int]]], alphabet: Alphabet,
                       tsis: Sequence[int] | None = None, symmetric: bool = True) -> SubstitutionTable:
    """Align the outputs of every TSI pair line by line and tally substitutions.

    With ``symmetric`` each alignment is counted from both sides, so the
    count of x->y equals that of y->x. Otherwise only characters of the
    earlier TSI of each pair (in ``tsis`` order) are counted.
    """
    tsis = list(outputs) if tsis is None else list(tsis)
    table = SubstitutionTable(alphabet)
    for ti, tj in itertools.combinations(tsis, 2):
        for a, b in zip(outputs[ti], outputs[tj]):
            for op, x, y in align(a, b):
                if op in ("match", "sub"):
                    table.add(x, y)
                    if symmetric:
                        table.add(y, x)
                elif op == "del":
                    table.add(x, None)
                elif symmetric:
                    table.add(y, None)
    return table


def substitution_stats(model: Model, samples: Sequence[Sample], tsis: Sequence[int], alphabet: Alphabet,
                       symmetric: bool = True) -> SubstitutionTable:
    return substitution_table(decode_under_tsis(model, samples, tsis), alphabet, tsis, symmetric)


# ---------------------------------------------------------------------------
# projections


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so that its largest-magnitude entry is positive."""
    out = vectors.copy()
    for k in range(out.shape[1]):
        i = int(np.argmax(np.abs(out[:, k])))
        if out[i, k] < 0:
            out[:, k] *= -1
    return out


@dataclass
class Projection:
    labels: list[int]
    points: np.ndarray  # N x 2
    explained: np.ndarray  # fraction of variance (PCA) or eigenvalue share (MDS) per axis
    degenerate: list[int]  # axes without support
    mean: np.ndarray | None = None
    components: np.ndarray | None = None  # k x D, rows are principal directions

    def write_csv(self, path, groups: dict[int, int] | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tsi", "style", "x", "y"])
            for t, (x, y) in zip(self.labels, self.points):
                w.writerow([t, "" if groups is None else groups.get(t, ""), repr(float(x)), repr(float(y))])


def pca(data: np.ndarray, n_components: int | None = None):
    """Eigen-decomposition of the covariance of row vectors.

    Returns (mean, components k x D, eigenvalues k) with sign-fixed
    components sorted by decreasing variance.
    """
    x = np.asarray(data, dtype=np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(len(x), 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    k = x.shape[1] if n_components is None else n_components
    return mean, _fix_signs(vecs[:, :k]).T, vals[:k]


def style_vectors(table: StyleTable, tsis: Sequence[int] | None = None) -> tuple[list[int], np.ndarray]:
    tsis = sorted(table.tsi_rows) if tsis is None else list(tsis)
    gamma, beta = table.gamma_beta(np.stack([table.embedding(t) for t in tsis]).astype(np.float64))
    return tsis, np.concatenate([gamma, beta], axis=1)


def gamma_beta_pca(table: StyleTable, tsis: Sequence[int] | None = None, rel_tol: float = 1e-12) -> Projection:
    """2-D PCA of the concatenated AdaIN scales and offsets of each TSI."""
    tsis, vecs = style_vectors(table, tsis)
    if len(tsis) < 3:
        raise ValueError("PCA projection needs at least 3 TSI")
    mean, comps, vals = pca(vecs, 2)
    total = float(((vecs - mean) ** 2).sum()) / len(vecs)
    degenerate = [k for k in range(2) if total == 0 or vals[k] <= rel_tol * total]
    points = (vecs - mean) @ comps.T
    for k in degenerate:
        points[:, k] = 0.0
    explained = vals / total if total > 0 else np.zeros(2)
    return Projection(tsis, points, explained, degenerate, mean, comps)


def mds_projection(distances: np.ndarray, labels: Sequence[int] | None = None, atol: float = 1e-9) -> Projection:
    """Classical metric MDS: double-centre the squared distances, keep the top 2 axes."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("distance matrix must be square")
    if not np.allclose(d, d.T, atol=atol, rtol=0):
        raise ValueError("distance matrix is not symmetric")
    if np.any(d < -atol) or np.any(np.abs(np.diag(d)) > atol):
        raise ValueError("distances must be non-negative with a zero diagonal")
    n = len(d)
    j = np.eye(n) - 1.0 / n
    b = -0.5 * j @ (d * d) @ j
    vals, vecs = np.linalg.eigh((b + b.T) / 2)
    order = np.argsort(vals)[::-1][:2]
    vals, vecs = vals[order], _fix_signs(vecs[:, order])
    if len(vals) < 2:
        vals, vecs = np.pad(vals, (0, 2 - len(vals))), np.pad(vecs, ((0, 0), (0, 2 - vecs.shape[1])))
    pos = np.clip(vals, 0.0, None)
    scale = float(np.abs(np.linalg.eigvalsh(b)).max()) if n else 0.0
    degenerate = [k for k in range(2) if pos[k] <= 1e-12 * max(scale, 1e-300)]
    points = vecs * np.sqrt(pos)
    points[:, degenerate] = 0.0
    total = float(np.clip(np.linalg.eigvalsh(b), 0, None).sum())
    explained = pos / total if total > 0 else np.zeros(2)
    return Projection(list(range(n)) if labels is None else list(labels), points, explained, degenerate)


def nearest_centroid_accuracy(points: np.ndarray, groups: Sequence[int]) -> tuple[int, int]:
    """(correct, total) when every point is assigned to the closest group centroid."""
    pts = np.asarray(points, dtype=np.float64)
    groups = np.asarray(groups)
    names = sorted(set(groups.tolist()))
    cents = np.stack([pts[groups == g].mean(axis=0) for g in names])
    dist = np.linalg.norm(pts[:, None, :] - cents[None], axis=2)
    pred = np.array(names)[dist.argmin(axis=1)]
    return int((pred == groups).sum()), len(groups)


def mutual_nearest_same_group(points: np.ndarray, groups: Sequence[int]) -> bool:
    """True when every point's nearest neighbour shares its group."""
    pts = np.asarray(points, dtype=np.float64)
    dist = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    np.fill_diagonal(dist, np.inf)
    groups = np.asarray(groups)
    return bool(np.all(groups[dist.argmin(axis=1)] == groups))


# ---------------------------------------------------------------------------
# embedding vs output distances


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation; NaN when either side has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    den = math.sqrt(float(xc @ xc) * float(yc @ yc))
    return float(xc @ yc) / den if den > 0 else float("nan")


def output_distance_matrix(outputs: dict[int, list[list[int]]], tsis: Sequence[int]) -> np.ndarray:
    """Mean edit distance between the outputs of every TSI pair over the line set."""
    n = len(tsis)
    d = np.zeros((n, n))
    for i, j in itertools.combinations(range(n), 2):
        a, b = outputs[tsis[i]], outputs[tsis[j]]
        d[i, j] = d[j, i] = np.mean([edit_distance(p, q) for p, q in zip(a, b)]) if a else 0.0
    return d


def embedding_distance_matrix(table: StyleTable, tsis: Sequence[int]) -> np.ndarray:
    e = np.stack([table.embedding(t) for t in tsis]).astype(np.float64)
    return np.linalg.norm(e[:, None] - e[None], axis=2)


@dataclass
class Correlation:
    r: float
    pairs: list[tuple[int, int, float, float]]  # tsi_i, tsi_j, embedding distance, output distance
    degenerate: bool
    reason: str

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# pearson_r={self.r!r} degenerate={self.degenerate} {self.reason}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tsi_i", "tsi_j", "embedding_distance", "output_distance"])
            w.writerows((i, j, repr(x), repr(y)) for i, j, x, y in self.pairs)


def correlate(emb: np.ndarray, out: np.ndarray, tsis: Sequence[int]) -> Correlation:
    idx = list(itertools.combinations(range(len(tsis)), 2))
    pairs = [(tsis[i], tsis[j], float(emb[i, j]), float(out[i, j])) for i, j in idx]
    xs = [p[2] for p in pairs]
    ys = [p[3] for p in pairs]
    r = pearson(xs, ys) if pairs else float("nan")
    reason = ""
    if len(tsis) < 3:
        reason = "fewer than 3 TSI: correlation is trivial"
    elif math.isnan(r):
        reason = "zero variance in " + ("embedding" if np.ptp(xs) == 0 else "output") + " distances"
    return Correlation(r, pairs, bool(reason), reason)


def distance_correlation(model: Model, samples: Sequence[Sample], tsis: Sequence[int] | None = None,
                         outputs: dict[int, list[list[int]]] | None = None) -> Correlation:
    """Pearson r between embedding distance and mean output edit distance over TSI pairs."""
    tsis = sorted(model.table.tsi_rows) if tsis is None else list(tsis)
    outputs = outputs or decode_under_tsis(model, samples, tsis)
    return correlate(embedding_distance_matrix(model.table, tsis),
                     output_distance_matrix(outputs, tsis), tsis)


# ---------------------------------------------------------------------------
# SVG scatter plots

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2")


def scatter_svg(projection: Projection, groups: dict[int, int] | None = None, title: str = "",
                size: int = 420, pad: int = 40) -> str:
    """Standalone SVG scatter plot; points coloured by group, labelled by TSI."""
    pts = projection.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = pad + (pts - lo) / span * (size - 2 * pad)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>',
             f'<text x="{size / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" '
             f'font-size="14">{html.escape(title)}</text>']
    for t, (x, y) in zip(projection.labels, xy):
        g = 0 if groups is None else groups.get(t, 0)
        colour = _PALETTE[g % len(_PALETTE)]
        cy = size - y
        parts.append(f'<circle cx="{x:.2f}" cy="{cy:.2f}" r="6" fill="{colour}">'
                     f'<title>TSI {t} style {g}</title></circle>')
        parts.append(f'<text x="{x + 8:.2f}" y="{cy + 4:.2f}" font-family="sans-serif" '
                     f'font-size="11">{t}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
