"""Dissimilarity metrics for baseline charts.

Without time synchronization the impulse responses of different antennas
carry arbitrary cyclic shifts, so each CIR is first aligned such that its
power-weighted mean delay sits at tap zero.  The CIR-amplitude (CIRA)
dissimilarity then compares the stacked per-antenna amplitude profiles of
two datapoints by cosine similarity, optionally fused with a
timestamp-based bound (no two datapoints can be further apart than the
maximum speed allows), and finally lifted to geodesic dissimilarities
along a k-nearest-neighbor graph.

Geodesic distances are served from single-source shortest-path runs that
are computed on demand and cached, so training loops that only touch a
subset of pairs never pay for the full L x L matrix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .dataset import CsiDataset, Datapoint

DSM_MAGIC = b"DSM1"
_KINDS = ("cira", "fused", "geodesic")


@dataclass
class DissimilarityMatrix:
    """Dense symmetric pairwise dissimilarities with zero diagonal.

    ``values`` may contain inf off-diagonal (unknown / non-neighbor) before
    the geodesic step fills them in.
    """

    values: np.ndarray
    kind: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("values must be square")
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}")
        if np.any(np.diagonal(v) != 0):
            raise ValueError("diagonal must be zero")
        finite = np.isfinite(v)
        if np.any(v[finite] < 0):
            raise ValueError("dissimilarities must be nonnegative")
        if not np.array_equal(v == np.inf, v.T == np.inf) or \
                not np.allclose(np.where(finite, v, 0.0),
                                np.where(finite.T, v.T, 0.0), atol=1e-12, rtol=0):
            raise ValueError("values must be symmetric")
        self.values = v

    def __len__(self) -> int:
        return len(self.values)

    def query(self, i: int, j: int) -> float:
        return float(self.values[i, j])

    def pair_values(self, pairs: np.ndarray) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.intp)
        return self.values[pairs[:, 0], pairs[:, 1]]


# ---------------------------------------------------------------------------
# CIR amplitude metric
# ---------------------------------------------------------------------------


def align_mean_delay(cir: np.ndarray) -> np.ndarray:
    """Cyclically shift a CIR so its power-weighted mean delay is tap zero.

    The mean delay is computed on the profile re-centered around the
    strongest tap, which makes the shift well defined for cyclic data.
    """
    cir = np.asarray(cir)
    p = np.abs(cir) ** 2
    total = p.sum()
    if total == 0:
        raise ValueError("cannot align an all-zero CIR")
    n = len(cir)
    peak = int(np.argmax(p))
    rel = ((np.arange(n) - peak + n // 2) % n) - n // 2
    mean_rel = float((p * rel).sum() / total)
    shift = peak + int(np.floor(mean_rel + 0.5))
    return np.roll(cir, -shift)


def aligned_amplitudes(point: Datapoint) -> np.ndarray:
    """Stacked per-antenna amplitude profile of mean-delay-aligned CIRs."""
    cirs = np.fft.ifft(np.asarray(point.csi), axis=-1)
    return np.concatenate([np.abs(align_mean_delay(row)) for row in cirs])


def cira_dissimilarity(p1: Datapoint, p2: Datapoint) -> float:
    """sqrt(1 - cosine similarity) of the two aligned amplitude profiles.

    Zero for identical CSI, invariant to per-antenna phase and amplitude
    scale, 1 for profiles with disjoint support.
    """
    a1, a2 = aligned_amplitudes(p1), aligned_amplitudes(p2)
    n1, n2 = np.linalg.norm(a1), np.linalg.norm(a2)
    if n1 == 0 or n2 == 0:
        raise ValueError("zero amplitude vector")
    cos = float(np.dot(a1, a2) / (n1 * n2))
    return float(np.sqrt(max(0.0, 1.0 - cos)))


def cira_matrix(dataset: CsiDataset) -> DissimilarityMatrix:
    """Full pairwise CIRA dissimilarities of a dataset."""
    amps = np.stack([aligned_amplitudes(p) for p in dataset.points])
    norms = np.linalg.norm(amps, axis=1)
    if np.any(norms == 0):
        raise ValueError("dataset contains a zero amplitude vector")
    unit = amps / norms[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    values = np.sqrt(np.maximum(0.0, 1.0 - cos))
    np.fill_diagonal(values, 0.0)
    values = 0.5 * (values + values.T)
    return DissimilarityMatrix(values=values, kind="cira")


def fuse_with_timestamps(dmatrix: DissimilarityMatrix, timestamps: np.ndarray,
                         v_max: float) -> DissimilarityMatrix:
    """Fuse a dissimilarity with the distance bound implied by timestamps.

    ``fused(i, j) = min(scale * d(i, j), v_max * |t_i - t_j|)`` where the
    scale calibrates the metric to meters using the median ratio over
    temporally adjacent datapoints (the only pairs whose spatial distance
    is approximately known without ground truth).
    """
    if v_max <= 0:
        raise ValueError("v_max must be positive")
    t = np.asarray(timestamps, dtype=np.float64)
    v = dmatrix.values
    if len(t) != len(v):
        raise ValueError("timestamps do not match the matrix")
    gaps = np.diff(t)
    adjacent = np.array([v[i, i + 1] for i in range(len(t) - 1)])
    ok = adjacent > 0
    if not np.any(ok):
        raise ValueError("no usable short-gap pairs for scale calibration")
    scale = float(np.median(v_max * gaps[ok] / adjacent[ok]))
    bound = v_max * np.abs(t[:, None] - t[None, :])
    fused = np.minimum(scale * v, bound)
    np.fill_diagonal(fused, 0.0)
    return DissimilarityMatrix(values=fused, kind="fused")


# ---------------------------------------------------------------------------
# Geodesic dissimilarities
# ---------------------------------------------------------------------------


@dataclass
class GeodesicMatrix:
    """Shortest-path dissimilarities over a symmetric k-NN graph.

    Rows are computed by single-source Dijkstra on first use and cached;
    unreachable pairs report inf.  ``to_matrix`` materializes everything
    (meant for small instances and tests).
    """

    graph: "coo_matrix"
    kind: str = "geodesic"
    _rows: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.graph.shape[0]

    def _ensure_rows(self, sources: np.ndarray) -> None:
        missing = sorted(set(int(s) for s in sources) - self._rows.keys())
        if missing:
            dist = dijkstra(self.graph, directed=False, indices=missing)
            for s, row in zip(missing, np.atleast_2d(dist)):
                self._rows[s] = row

    def query(self, i: int, j: int) -> float:
        self._ensure_rows(np.array([i]))
        return float(self._rows[i][j])

    def pair_values(self, pairs: np.ndarray) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.intp)
        self._ensure_rows(pairs[:, 0])
        return np.array([self._rows[int(i)][j] for i, j in pairs])

    def to_matrix(self) -> DissimilarityMatrix:
        self._ensure_rows(np.arange(len(self)))
        values = np.stack([self._rows[i] for i in range(len(self))])
        values = np.minimum(values, values.T)
        np.fill_diagonal(values, 0.0)
        return DissimilarityMatrix(values=values, kind="geodesic")


def geodesic(dmatrix: DissimilarityMatrix, k: int) -> GeodesicMatrix:
    """Symmetrized k-nearest-neighbor graph ready for shortest-path queries."""
    if k < 2:
        raise ValueError("k must be >= 2")
    v = dmatrix.values
    l = len(v)
    k = min(k, l - 1)
    candidates = np.where(np.isfinite(v), v, np.inf).copy()
    np.fill_diagonal(candidates, np.inf)
    nbr = np.argpartition(candidates, k - 1, axis=1)[:, :k]
    rows = np.repeat(np.arange(l), k)
    cols = nbr.ravel()
    keep = np.isfinite(candidates[rows, cols])
    rows, cols = rows[keep], cols[keep]
    # explicit zeros would read as "no edge" to csgraph, keep them tiny instead
    data = np.maximum(v[rows, cols], 1e-300)

    rows2 = np.concatenate([rows, cols])
    cols2 = np.concatenate([cols, rows])
    data2 = np.concatenate([data, data])
    lin = rows2 * l + cols2
    order = np.lexsort((data2, lin))
    first = np.ones(len(order), dtype=bool)
    first[1:] = lin[order][1:] != lin[order][:-1]
    sel = order[first]
    graph = coo_matrix((data2[sel], (rows2[sel], cols2[sel])), shape=(l, l)).tocsr()
    return GeodesicMatrix(graph=graph)


# ---------------------------------------------------------------------------
# Matrix dump
# ---------------------------------------------------------------------------


def write_matrix(dmatrix: DissimilarityMatrix, sink) -> None:
    """Binary dump: 16-byte header (magic, kind, L) then L*L float32."""
    sink.write(DSM_MAGIC)
    sink.write(struct.pack("<IQ", _KINDS.index(dmatrix.kind), len(dmatrix)))
    sink.write(np.ascontiguousarray(dmatrix.values, dtype="<f4").tobytes())


def read_matrix(source) -> DissimilarityMatrix:
    head = source.read(16)
    if len(head) < 16 or head[:4] != DSM_MAGIC:
        raise ValueError("not a dissimilarity matrix dump")
    kind_idx, l = struct.unpack("<IQ", head[4:])
    if kind_idx >= len(_KINDS):
        raise ValueError(f"unknown matrix kind {kind_idx}")
    raw = source.read(4 * l * l)
    if len(raw) < 4 * l * l:
        raise ValueError("truncated matrix dump")
    values = np.frombuffer(raw, "<f4").reshape(l, l).astype(np.float64)
    return DissimilarityMatrix(values=values, kind=_KINDS[kind_idx])
