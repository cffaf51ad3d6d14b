"""Chart evaluation: affine alignment, error metrics and chart quality.

Localization errors are Euclidean distances between estimates and ground
truth; the summary statistics are their mean (MAE), root mean square
(DRMS), median (CEP) and 95th percentile (R95), percentiles with linear
interpolation.  Chart quality uses the rank-based continuity (CT) and
trustworthiness (TW) scores plus Kruskal's stress (KS) with an optimal
scale factor, so both are invariant to uniform scaling of the chart.

The optimal affine transform is the least-squares minimizer of
``sum ||A x_hat + b - x||^2`` over all datapoints, solved in closed form on
homogeneous coordinates.  Baseline charts are evaluated after applying it;
the point of the phase-based chart is that it does not need one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist


@dataclass(frozen=True)
class AffineTransform:
    """x -> matrix @ x + offset on 2-D points."""

    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        o = np.asarray(self.offset, dtype=np.float64)
        if m.shape != (2, 2) or o.shape != (2,):
            raise ValueError("matrix must be 2x2 and offset a 2-vector")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(o))):
            raise ValueError("transform must be finite")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "offset", o)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.matrix.T + self.offset

    @staticmethod
    def identity() -> "AffineTransform":
        return AffineTransform(matrix=np.eye(2), offset=np.zeros(2))


@dataclass(frozen=True)
class EvalReport:
    """Localization and chart-quality metrics of one evaluation run."""

    mae: float
    drms: float
    cep: float
    r95: float
    ct: float
    tw: float
    ks: float
    transform: AffineTransform | None
    ecdf: np.ndarray

    def __post_init__(self):
        if self.cep > self.r95 + 1e-12:
            raise ValueError("cep must not exceed r95")
        if self.mae > self.drms * (1 + 1e-12) + 1e-15:
            raise ValueError("mae must not exceed drms")


def fit_affine(estimates: np.ndarray, truths: np.ndarray) -> AffineTransform:
    """Least-squares affine map from chart coordinates to global coordinates.

    Closed form via the normal equations on homogeneous coordinates;
    requires at least three non-collinear estimates.
    """
    x = np.asarray(estimates, dtype=np.float64)
    y = np.asarray(truths, dtype=np.float64)[:, :2]
    if x.ndim != 2 or x.shape[1] != 2 or x.shape != y.shape:
        raise ValueError("estimates and truths must both have shape (L, 2)")
    if len(x) < 3:
        raise ValueError("need at least three points")
    g = np.column_stack([x, np.ones(len(x))])
    if np.linalg.matrix_rank(g) < 3:
        raise ValueError("estimates are collinear or degenerate, affine fit is rank-deficient")
    m = np.linalg.solve(g.T @ g, g.T @ y)
    return AffineTransform(matrix=m[:2].T, offset=m[2])


def _percentile_linear(sorted_vals: np.ndarray, q: float) -> float:
    n = len(sorted_vals)
    pos = q / 100.0 * (n - 1)
    lo = int(np.floor(pos))
    if lo >= n - 1:
        return float(sorted_vals[-1])
    frac = pos - lo
    return float(sorted_vals[lo] + (sorted_vals[lo + 1] - sorted_vals[lo]) * frac)


def error_metrics(estimates: np.ndarray, truths: np.ndarray
                  ) -> tuple[float, float, float, float, np.ndarray]:
    """(mae, drms, cep, r95, sorted error list) of a set of estimates."""
    x = np.asarray(estimates, dtype=np.float64)
    y = np.asarray(truths, dtype=np.float64)[:, :2]
    if x.shape != y.shape or len(x) < 1:
        raise ValueError("estimates and truths must have equal nonzero length")
    e = np.sort(np.linalg.norm(x - y, axis=1))
    mae = float(np.mean(e))
    drms = float(np.sqrt(np.mean(e ** 2)))
    return mae, drms, _percentile_linear(e, 50.0), _percentile_linear(e, 95.0), e


def default_neighborhood(l: int) -> int:
    return max(1, int(round(0.05 * l)))


def _neighbors_and_ranks(d: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k-nearest-neighbor lists and 1-based rank matrix of a distance matrix."""
    l = len(d)
    work = d.copy()
    np.fill_diagonal(work, -1.0)  # self always sorts first
    order = np.argsort(work, axis=1, kind="stable")
    ranks = np.empty((l, l), dtype=np.int64)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(l), (l, l)), axis=1)
    return order[:, 1:k + 1], ranks


def chart_quality(estimates: np.ndarray, truths: np.ndarray, k: int
                  ) -> tuple[float, float, float]:
    """(continuity, trustworthiness, Kruskal stress) of a chart.

    TW penalizes chart neighbors that are not truth neighbors by their
    truth-space rank excess; CT is the same with the two spaces swapped.
    KS is minimized over a nonnegative scale factor in closed form.
    """
    x = np.asarray(estimates, dtype=np.float64)
    y = np.asarray(truths, dtype=np.float64)[:, :2]
    l = len(x)
    if x.shape != y.shape:
        raise ValueError("estimates and truths must have equal shape")
    if not 1 <= k < l:
        raise ValueError("need 1 <= k < number of points")
    denom = l * k * (2 * l - 3 * k - 1)
    if denom <= 0:
        raise ValueError("neighborhood k too large for this point count")

    d_chart = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
    d_truth = np.linalg.norm(y[:, None, :] - y[None, :, :], axis=2)

    def penalty(d_a: np.ndarray, d_b: np.ndarray) -> float:
        # neighbors in space A that are not neighbors in space B, ranked in B
        nn_a, _ = _neighbors_and_ranks(d_a, k)
        nn_b, ranks_b = _neighbors_and_ranks(d_b, k)
        in_b = np.zeros((l, l), dtype=bool)
        np.put_along_axis(in_b, nn_b, True, axis=1)
        rows = np.repeat(np.arange(l), k)
        cols = nn_a.ravel()
        outside = ~in_b[rows, cols]
        return float(np.sum(ranks_b[rows, cols][outside] - k))

    tw = 1.0 - 2.0 / denom * penalty(d_chart, d_truth)
    ct = 1.0 - 2.0 / denom * penalty(d_truth, d_chart)

    dhat = pdist(x)
    d = pdist(y)
    d_sq = float(np.dot(d, d))
    if d_sq == 0:
        raise ValueError("ground-truth positions are all identical")
    dhat_sq = float(np.dot(dhat, dhat))
    s = max(0.0, float(np.dot(d, dhat)) / dhat_sq) if dhat_sq > 0 else 0.0
    resid = s * dhat - d
    ks = float(np.sqrt(np.dot(resid, resid) / d_sq))
    return ct, tw, ks


def evaluate_chart(estimates: np.ndarray, truths: np.ndarray,
                   use_affine: bool = False, k: int | None = None) -> EvalReport:
    """Full report for a set of estimates, optionally affine-aligned first."""
    x = np.asarray(estimates, dtype=np.float64)
    y = np.asarray(truths, dtype=np.float64)[:, :2]
    transform = None
    if use_affine:
        transform = fit_affine(x, y)
        x = transform.apply(x)
    if k is None:
        k = default_neighborhood(len(x))
    mae, drms, cep, r95, ecdf = error_metrics(x, y)
    ct, tw, ks = chart_quality(x, y, k)
    return EvalReport(mae=mae, drms=drms, cep=cep, r95=r95, ct=ct, tw=tw,
                      ks=ks, transform=transform, ecdf=ecdf)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------


def position_color(position: np.ndarray, bounds: np.ndarray) -> str:
    """Hex color from a 2-D ground-truth position gradient.

    Pure function of the position given fixed bounds ((x_min, y_min),
    (x_max, y_max)); nearby points get similar colors so a well-formed
    chart reproduces the gradient.
    """
    span = np.maximum(bounds[1] - bounds[0], 1e-12)
    u = np.clip((np.asarray(position)[:2] - bounds[0]) / span, 0.0, 1.0)
    r, g = u
    b = 1.0 - 0.5 * (r + g)
    return "#{:02x}{:02x}{:02x}".format(*(int(round(255 * c)) for c in (r, g, b)))


def export_chart(estimates: np.ndarray, truths: np.ndarray, sink,
                 svg_sink=None) -> None:
    """CSV of estimates vs. truths with a truth-gradient color per point."""
    x = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    y = np.atleast_2d(np.asarray(truths, dtype=np.float64))[:, :2]
    if x.shape != y.shape:
        raise ValueError("estimates and truths must have equal shape")
    bounds = np.stack([y.min(axis=0), y.max(axis=0)])
    sink.write("est_x1,est_x2,true_x1,true_x2,color\n")
    colors = []
    for xi, yi in zip(x, y):
        c = position_color(yi, bounds)
        colors.append(c)
        sink.write(f"{xi[0]!r},{xi[1]!r},{yi[0]!r},{yi[1]!r},{c}\n")
    if svg_sink is not None:
        _write_scatter_svg(svg_sink, x, colors)


def _write_scatter_svg(sink, points: np.ndarray, colors: list[str],
                       size: int = 640) -> None:
    lo = points.min(axis=0)
    span = np.maximum(points.max(axis=0) - lo, 1e-12)
    pad = 0.05 * size
    scale = (size - 2 * pad) / span.max()
    sink.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
               f'height="{size}" viewBox="0 0 {size} {size}">\n')
    sink.write(f'<rect width="{size}" height="{size}" fill="white"/>\n')
    for p, c in zip(points, colors):
        cx = pad + (p[0] - lo[0]) * scale
        cy = size - pad - (p[1] - lo[1]) * scale
        sink.write(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2" fill="{c}"/>\n')
    sink.write("</svg>\n")


def write_report(report: EvalReport, sink) -> None:
    """Flat key-value serialization of a report (deterministic)."""
    for name in ("mae", "drms", "cep", "r95", "ct", "tw", "ks"):
        sink.write(f"{name} = {getattr(report, name)!r}\n")
    if report.transform is not None:
        a, b = report.transform.matrix, report.transform.offset
        for i in range(2):
            for j in range(2):
                sink.write(f"affine_a{i + 1}{j + 1} = {a[i, j]!r}\n")
        sink.write(f"affine_b1 = {b[0]!r}\naffine_b2 = {b[1]!r}\n")


def write_ecdf(report: EvalReport, sink) -> None:
    """Two-column CSV of the empirical error distribution."""
    n = len(report.ecdf)
    sink.write("error,cumulative_probability\n")
    for i, e in enumerate(report.ecdf):
        sink.write(f"{float(e)!r},{(i + 1) / n!r}\n")
