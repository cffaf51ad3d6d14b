"""Per-antenna cumulative phase tracking from frequency-offset measurements.

The measured instantaneous offsets are integrated over the timestamps
(trapezoidal rule) to obtain unwrapped phases ``phi[l, b]`` starting at 0,
then optionally refined against the phases actually present in the CSI:
at every datapoint the wrapped mismatch between the predicted phase and a
CSI-derived phase anchor is added to the running track.  Corrections are
reliable only while the true phase moves by less than half a turn between
samples; larger corrections are applied but flagged in the diagnostics.

Differential phases between two antennas are free of the common carrier
frequency offset and are the observable every downstream loss consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._threads import map_chunks
from .dataset import CsiDataset


@dataclass(frozen=True)
class PhaseTrack:
    """Unwrapped cumulative phases and uncertainty integrals per antenna.

    ``phases`` and ``uncertainty_cumsum`` have shape (L, num_bs);
    ``uncertainty_cumsum`` holds the running integral of the instantaneous
    phase-uncertainty rate (see :mod:`dopplerchart.doppler_loss`) and is
    zero-filled until an uncertainty model attaches it.
    """

    phases: np.ndarray
    uncertainty_cumsum: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        phases = np.asarray(self.phases, dtype=np.float64)
        ucs = np.asarray(self.uncertainty_cumsum, dtype=np.float64)
        t = np.asarray(self.timestamps, dtype=np.float64)
        if phases.ndim != 2 or phases.shape != ucs.shape or len(t) != len(phases):
            raise ValueError("phases, uncertainty_cumsum and timestamps disagree in shape")
        if not np.all(np.isfinite(phases)):
            raise ValueError("phases must be finite")
        if np.any(np.diff(ucs, axis=0) < -1e-12):
            raise ValueError("uncertainty_cumsum must be nondecreasing per antenna")
        object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "uncertainty_cumsum", ucs)
        object.__setattr__(self, "timestamps", t)

    @property
    def num_bs(self) -> int:
        return self.phases.shape[1]

    def __len__(self) -> int:
        return len(self.phases)


@dataclass
class RefineDiagnostics:
    """Bookkeeping from CSI-based refinement.

    ``flagged`` lists (datapoint, antenna) steps whose correction reached
    the trust threshold; ``warned`` is set when their fraction exceeds
    ``warn_fraction`` (tracking quality is then doubtful but not fatal).
    """

    threshold: float
    warn_fraction: float
    n_steps: int = 0
    flagged: list[tuple[int, int]] = field(default_factory=list)

    @property
    def flagged_fraction(self) -> float:
        return len(self.flagged) / self.n_steps if self.n_steps else 0.0

    @property
    def warned(self) -> bool:
        return self.flagged_fraction > self.warn_fraction


def wrap_to_pi(angle):
    """Wrap an angle (radians) to the half-open interval (-pi, pi]."""
    a = np.mod(angle, 2.0 * np.pi)
    a = np.where(a > np.pi, a - 2.0 * np.pi, a)
    return float(a) if np.ndim(angle) == 0 else a


def integrate_offsets(dataset: CsiDataset) -> PhaseTrack:
    """Coarse phase track: trapezoidal integration of the measured offsets.

    ``phi[0] = 0`` and
    ``phi[l] = phi[l-1] + 2*pi * (f[l-1] + f[l])/2 * (t[l] - t[l-1])``.
    """
    t = dataset.timestamps
    if np.any(np.diff(t) <= 0):
        raise ValueError("timestamps must strictly increase")
    f = dataset.freq_offset_array()
    incr = np.pi * (f[:-1] + f[1:]) * np.diff(t)[:, None]
    phases = np.vstack([np.zeros((1, f.shape[1])), np.cumsum(incr, axis=0)])
    return PhaseTrack(phases=phases, uncertainty_cumsum=np.zeros_like(phases),
                      timestamps=t)


# ---------------------------------------------------------------------------
# CSI phase anchor
# ---------------------------------------------------------------------------


def _fractional_peak_phase(rows: np.ndarray) -> np.ndarray:
    """Phase of each row's strongest impulse-response tap, at fractional delay.

    Evaluates ``z(nu) = (1/N) sum_k row[k] exp(+2j*pi*(k - N/2)*nu/N)`` on a
    small grid around the strongest integer tap and refines the peak with
    two parabolic interpolation passes, so the returned phase is free of the
    half-tap leakage bias of a plain argmax.
    """
    rows = np.atleast_2d(rows)
    m, n = rows.shape
    signed = np.arange(n) - n // 2

    coarse = np.fft.ifft(np.fft.ifftshift(rows, axes=-1), axis=-1)
    n0 = np.argmax(np.abs(coarse), axis=-1)
    nu0 = ((n0 + n // 2) % n) - n // 2

    def z_at(nu):
        ph = np.exp(2j * np.pi * signed[None, :] * nu[:, None] / n)
        return np.einsum("ij,ij->i", rows, ph) / n

    def parabolic(nu_c, h):
        grid = nu_c[:, None] + np.array([-h, 0.0, h])[None, :]
        mag = np.abs(np.stack([z_at(grid[:, j]) for j in range(3)], axis=1))
        ya, yb, yc = mag[:, 0], mag[:, 1], mag[:, 2]
        denom = ya - 2.0 * yb + yc
        step = np.where(np.abs(denom) > 1e-300,
                        0.5 * h * (ya - yc) / np.where(denom == 0, 1.0, denom), 0.0)
        return nu_c + np.clip(step, -h, h)

    # true peak lies within half a tap of the argmax: coarse grid over that
    # range first, then two parabolic passes around the best grid point
    offsets = np.linspace(-0.5, 0.5, 5)
    grid = nu0[:, None] + offsets[None, :]
    mags = np.abs(np.stack([z_at(grid[:, j]) for j in range(len(offsets))], axis=1))
    nu = grid[np.arange(m), np.argmax(mags, axis=1)]
    nu = parabolic(nu, 0.25)
    nu = parabolic(nu, 0.05)
    return wrap_to_pi(np.angle(z_at(nu)))


def extract_csi_phase(csi_row: np.ndarray) -> float:
    """Phase anchor of one CSI row (radians in (-pi, pi]).

    The row is transformed to the time domain (inverse DFT with 1/N
    normalization, center subcarrier at DC) and the phase of the strongest
    tap, refined to fractional delay, is returned.
    """
    row = np.asarray(csi_row)
    if row.ndim != 1:
        raise ValueError("expected a single CSI row")
    if not np.any(row != 0):
        raise ValueError("cannot extract a phase from an all-zero row")
    return float(_fractional_peak_phase(row[None, :])[0])


def csi_phase_anchors(dataset: CsiDataset, chunk: int = 4096) -> np.ndarray:
    """Phase anchors for every (datapoint, antenna) row, shape (L, num_bs).

    Rows are independent; they are processed in parallel chunks honoring
    the CHART_THREADS knob, with bitwise-identical results for any count.
    """
    csi = dataset.csi_array()
    l, b, n = csi.shape
    rows = csi.reshape(l * b, n)
    if np.any(~np.any(rows != 0, axis=1)):
        raise ValueError("dataset contains an all-zero CSI row")
    out = map_chunks(lambda a, z: _fractional_peak_phase(rows[a:z]), l * b, chunk=chunk)
    return out.reshape(l, b)


def refine_with_csi(coarse: PhaseTrack, dataset: CsiDataset,
                    threshold: float = np.pi / 2,
                    warn_fraction: float = 0.05) -> tuple[PhaseTrack, RefineDiagnostics]:
    """Correct integrated phases against the phases measured in the CSI.

    Walks the track in time; at each datapoint the wrapped difference
    between the CSI anchor and the predicted phase is added to this and all
    subsequent phases of the antenna.  The first datapoint absorbs the
    (arbitrary) initial phase and is never flagged; later corrections whose
    magnitude reaches ``threshold`` are applied but recorded in the
    diagnostics, since they may hide a full-turn slip.
    """
    if len(coarse) != len(dataset) or coarse.num_bs != dataset.config.num_bs:
        raise ValueError("phase track does not match the dataset")
    anchors = csi_phase_anchors(dataset)
    phases = coarse.phases
    l, b = phases.shape
    diag = RefineDiagnostics(threshold=threshold, warn_fraction=warn_fraction,
                             n_steps=(l - 1) * b)
    correction = np.zeros(b)
    refined = np.empty_like(phases)
    for i in range(l):
        delta = wrap_to_pi(anchors[i] - (phases[i] + correction))
        if i > 0:
            for j in np.nonzero(np.abs(delta) >= threshold)[0]:
                diag.flagged.append((i, int(j)))
        correction = correction + delta
        refined[i] = phases[i] + correction
    track = replace(coarse, phases=refined)
    return track, diag


def differential_phase(track: PhaseTrack, b1: int, b2: int, l1: int, l2: int) -> float:
    """Change of the antenna phase difference over a datapoint interval.

    ``(phi[l2, b2] - phi[l2, b1]) - (phi[l1, b2] - phi[l1, b1])`` - the
    CFO-free observable.  Exactly antisymmetric under swapping b1 and b2.
    """
    if not 0 <= l1 <= l2 < len(track):
        raise IndexError("need 0 <= l1 <= l2 < len(track)")
    p = track.phases
    return float((p[l2, b2] - p[l2, b1]) - (p[l1, b2] - p[l1, b1]))


def write_phase_csv(track: PhaseTrack, sink) -> None:
    """Debug export: one line per datapoint with t, phi_1..phi_B, U_1..U_B."""
    b = track.num_bs
    cols = ["t"] + [f"phi_{i + 1}" for i in range(b)] + [f"U_{i + 1}" for i in range(b)]
    sink.write(",".join(cols) + "\n")
    for i in range(len(track)):
        vals = [track.timestamps[i], *track.phases[i], *track.uncertainty_cumsum[i]]
        sink.write(",".join(repr(float(v)) for v in vals) + "\n")
