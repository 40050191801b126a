"""Principal component analysis with a cyclic Jacobi eigensolver."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ORIGINS = ("real", "synthetic")
DEGENERATE_STD = 1e-12


class JacobiNotConverged(RuntimeError):
    pass


@dataclass
class FeatureMatrix:
    values: np.ndarray
    ids: list[str] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)
    origins: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"feature values must be 2-D, got shape {self.values.shape}")
        n = len(self.values)
        if not self.ids:
            self.ids = [f"row{i}" for i in range(n)]
        if not self.labels:
            self.labels = [""] * n
        if not self.origins:
            self.origins = ["real"] * n
        for name in ("ids", "labels", "origins"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries for {n} rows")
        bad = set(self.origins) - set(ORIGINS)
        if bad:
            raise ValueError(f"unknown origin(s) {sorted(bad)}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @classmethod
    def concat(cls, parts: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        return cls(np.concatenate([p.values for p in parts]),
                   [i for p in parts for i in p.ids],
                   [lab for p in parts for lab in p.labels],
                   [o for p in parts for o in p.origins])

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "label", "origin", *(f"f{j}" for j in range(self.d))])
            for i in range(self.n):
                w.writerow([self.ids[i], self.labels[i], self.origins[i], *(repr(float(v)) for v in self.values[i])])

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "FeatureMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[:3] != ["id", "label", "origin"]:
            raise ValueError(f"{path}: expected id,label,origin header")
        values = np.array([[float(v) for v in r[3:]] for r in body]).reshape(len(body), len(header) - 3)
        return cls(values, [r[0] for r in body], [r[1] for r in body], [r[2] for r in body])


@dataclass(frozen=True)
class StandardizationParams:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def degenerate(self) -> np.ndarray:
        return self.sigma < DEGENERATE_STD


@dataclass(frozen=True)
class EigenPairs:
    values: np.ndarray    # descending
    vectors: np.ndarray   # column i pairs with values[i]
    sweeps: int = 0


def _as_values(x) -> np.ndarray:
    arr = x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected an n x d matrix, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ValueError(f"need at least 2 rows, got {arr.shape[0]}")
    return arr


def standardize(x) -> tuple[np.ndarray, StandardizationParams]:
    """Column z-scores with the sample (n-1) standard deviation.

    Columns whose deviation is below 1e-12 come back as zeros and are
    flagged in ``params.degenerate``.
    """
    a = _as_values(x)
    mu = a.mean(axis=0)
    sigma = a.std(axis=0, ddof=1)
    safe = np.where(sigma < DEGENERATE_STD, 1.0, sigma)
    z = (a - mu) / safe
    z[:, sigma < DEGENERATE_STD] = 0.0
    return z, StandardizationParams(mu, sigma)


def covariance(z) -> np.ndarray:
    a = _as_values(z)
    centered = a - a.mean(axis=0)
    c = centered.T @ centered / (len(a) - 1)
    return (c + c.T) / 2


def _off_diagonal_max(a: np.ndarray) -> float:
    if len(a) < 2:
        return 0.0
    return float(np.max(np.abs(a - np.diag(np.diag(a)))))


def eigen_decompose(c, tol: float = 1e-12, max_sweeps: int = 100) -> EigenPairs:
    """Symmetric eigendecomposition by cyclic Jacobi rotations.

    Stops once the largest off-diagonal magnitude drops below
    ``tol * max(1, ||C||_F)``. Each eigenvector is signed so that its
    largest-magnitude entry is positive.
    """
    a = np.array(c, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, atol=1e-9, rtol=0):
        raise ValueError("matrix is not symmetric within 1e-9")
    a = (a + a.T) / 2
    n = len(a)
    v = np.eye(n)
    threshold = tol * max(1.0, float(np.linalg.norm(a)))
    sweeps = 0
    while _off_diagonal_max(a) >= threshold:
        if sweeps == max_sweeps:
            raise JacobiNotConverged(f"off-diagonal {_off_diagonal_max(a):.3e} after {sweeps} sweeps")
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                cs = 1.0 / np.sqrt(1.0 + t * t)
                sn = t * cs
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = cs * col_p - sn * col_q
                a[:, q] = sn * col_p + cs * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = cs * row_p - sn * row_q
                a[q, :] = sn * row_p + cs * row_q
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = cs * vp - sn * vq
                v[:, q] = sn * vp + cs * vq
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    values, v = values[order], v[:, order]
    for i in range(n):
        j = int(np.argmax(np.abs(v[:, i])))
        if v[j, i] < 0:
            v[:, i] = -v[:, i]
    return EigenPairs(values, v, sweeps)


def project(z, pairs: EigenPairs, k: int = 2) -> np.ndarray:
    a = np.asarray(z, dtype=np.float64)
    d = pairs.vectors.shape[0]
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}], got {k}")
    if a.shape[1] != d:
        raise ValueError(f"data has {a.shape[1]} columns, eigenvectors {d}")
    return a @ pairs.vectors[:, :k]


def fit_pca(x, k: int = 2) -> tuple[np.ndarray, EigenPairs, StandardizationParams]:
    z, params = standardize(x)
    pairs = eigen_decompose(covariance(z))
    return project(z, pairs, k), pairs, params


def group_centroids(scores: np.ndarray, labels: Sequence[str], origins: Sequence[str]) -> dict[tuple[str, str], np.ndarray]:
    out = {}
    for key in sorted(set(zip(labels, origins))):
        mask = np.array([(lab, o) == key for lab, o in zip(labels, origins)])
        out[key] = scores[mask].mean(axis=0)
    return out


# ---------------------------------------------------------------------- output

PALETTE = {("COVID-CXR", "real"): "#1f4e9c", ("COVID-CXR", "synthetic"): "#d62728",
           ("Normal-CXR", "real"): "#ff7f0e", ("Normal-CXR", "synthetic"): "#2ca02c"}
EXTRA_COLORS = ("#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _svg(scores: np.ndarray, labels, origins) -> str:
    w, h, pad, legend_w = 520, 400, 40, 150
    x, y = scores[:, 0], scores[:, 1]

    def scale(v, lo, hi, a, b):
        return a + (b - a) * (0.5 if hi == lo else (v - lo) / (hi - lo))

    groups = sorted(set(zip(labels, origins)))
    colors = {}
    extra = iter(EXTRA_COLORS * (len(groups) // len(EXTRA_COLORS) + 1))
    for g in groups:
        colors[g] = PALETTE.get(g) or next(extra)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w + legend_w}" height="{h}" '
           f'viewBox="0 0 {w + legend_w} {h}">',
           f'<rect width="{w + legend_w}" height="{h}" fill="white"/>',
           f'<rect x="{pad}" y="{pad}" width="{w - 2 * pad}" height="{h - 2 * pad}" fill="none" stroke="#444"/>',
           f'<text x="{w / 2:.0f}" y="{h - 10}" font-size="12" text-anchor="middle">PC1</text>',
           f'<text x="12" y="{h / 2:.0f}" font-size="12" transform="rotate(-90 12 {h / 2:.0f})" '
           f'text-anchor="middle">PC2</text>']
    for xi, yi, lab, o in zip(x, y, labels, origins):
        px = scale(xi, x.min(), x.max(), pad + 5, w - pad - 5)
        py = scale(yi, y.min(), y.max(), h - pad - 5, pad + 5)
        out.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="{colors[(lab, o)]}" fill-opacity="0.7"/>')
    for i, g in enumerate(groups):
        ly = pad + 18 * i
        out.append(f'<circle cx="{w + 8}" cy="{ly}" r="4" fill="{colors[g]}"/>')
        out.append(f'<text x="{w + 18}" y="{ly + 4}" font-size="11">{g[0]} ({g[1]})</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_scatter(scores: np.ndarray, meta: FeatureMatrix, csv_path: str | os.PathLike,
                 svg_path: str | os.PathLike | None = None) -> None:
    """Write score rows (id, label, origin, pc1, pc2, ...) and optionally an SVG plot."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or len(scores) != meta.n:
        raise ValueError(f"scores shape {scores.shape} does not match {meta.n} metadata rows")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "origin", *(f"pc{j + 1}" for j in range(scores.shape[1]))])
        for i in range(meta.n):
            w.writerow([meta.ids[i], meta.labels[i], meta.origins[i], *(repr(float(s)) for s in scores[i])])
    if svg_path is not None:
        if scores.shape[1] != 2:
            raise ValueError("SVG scatter needs exactly two components")
        Path(svg_path).write_text(_svg(scores, meta.labels, meta.origins))
