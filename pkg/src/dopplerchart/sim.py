"""Synthetic OFDM channel simulator with known ground truth.

Generates DPCC datasets for a single moving transmitter observed by a few
distributed single-antenna receivers: random-waypoint trajectory inside an
L-shaped area, free-space channel with optional single-bounce scatterers,
a carrier-frequency-offset (CFO) random walk shared by all antennas, and
per-antenna instantaneous frequency-offset measurements.

Sign conventions (used consistently across the package):

* Reported frequency offsets follow the distance-rate convention,
  ``f_b = f_cfo + (1/wavelength) * d/dt dist_b(t)``, so that integrating the
  measured offsets of two antennas and differencing them yields exactly
  ``(2*pi/wavelength)`` times the differential-distance change.
* CSI rows carry the matching geometric phase ``+2*pi*(f_c + f_k)*d/c``
  plus the integrated CFO phase, so phases predicted from the offsets and
  phases measured in the CSI agree.

The CFO is modeled as piecewise-linear between samples; its integrated
phase is therefore exactly the trapezoidal cumulative sum of the sampled
offsets, which keeps the simulator usable as a closed-form oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from ._config import as_vectors, read_kv_file
from .dataset import SPEED_OF_LIGHT, CsiDataset, Datapoint, SystemConfig

_WAYPOINT_ATTEMPTS = 1000


@dataclass(frozen=True)
class SimScenario:
    """Everything needed to synthesize one dataset.

    ``area`` is the union of two axis-aligned rectangles, each given as
    (x0, y0, x1, y1) in meters.  ``scatterers`` is an (S, 4) array of
    single-bounce reflectors, columns (x, y, z, gain) with gain in [0, 1].
    ``snr_db`` may be ``math.inf`` for a noiseless channel.
    """

    config: SystemConfig
    area: np.ndarray
    speed: float = 0.25
    sample_rate: float = 100.0
    duration: float = 60.0
    cfo_initial: float = 20e3
    cfo_drift_std: float = 0.1
    snr_db: float = 20.0
    scatterers: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    seed: int = 1

    def __post_init__(self):
        area = np.asarray(self.area, dtype=np.float64).reshape(2, 4)
        if np.any(area[:, 2] <= area[:, 0]) or np.any(area[:, 3] <= area[:, 1]):
            raise ValueError("area rectangles must satisfy x0 < x1 and y0 < y1")
        object.__setattr__(self, "area", area)
        sc = np.asarray(self.scatterers, dtype=np.float64).reshape(-1, 4)
        if sc.size and (np.any(sc[:, 3] < 0) or np.any(sc[:, 3] > 1)):
            raise ValueError("scatterer gains must lie in [0, 1]")
        object.__setattr__(self, "scatterers", sc)
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if self.sample_rate <= 0 or self.duration <= 0:
            raise ValueError("sample_rate and duration must be positive")
        lam = self.config.wavelength
        if not self.speed / self.sample_rate < lam / 8:
            raise ValueError(
                "sampling invariant violated: speed/sample_rate must stay below "
                f"wavelength/8 = {lam / 8:.4g} m (got {self.speed / self.sample_rate:.4g} m)")

    @property
    def num_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


@dataclass(frozen=True)
class Trajectory:
    """Sampled transmitter path: timestamps (n,), positions/velocities (n, 3)."""

    timestamps: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamps)


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def _point_in_area(area: np.ndarray, p: np.ndarray, eps: float = 1e-9) -> bool:
    return bool(np.any((p[0] >= area[:, 0] - eps) & (p[0] <= area[:, 2] + eps)
                       & (p[1] >= area[:, 1] - eps) & (p[1] <= area[:, 3] + eps)))


def _segment_rect_interval(p, q, rect, eps=1e-12):
    """Parameter range [t0, t1] of p + t*(q - p) inside an axis-aligned rect."""
    t0, t1 = 0.0, 1.0
    for axis in range(2):
        lo, hi = rect[axis], rect[axis + 2]
        dp = q[axis] - p[axis]
        if abs(dp) < eps:
            if not (lo - 1e-9 <= p[axis] <= hi + 1e-9):
                return None
        else:
            ta = (lo - p[axis]) / dp
            tb = (hi - p[axis]) / dp
            t0 = max(t0, min(ta, tb))
            t1 = min(t1, max(ta, tb))
    return (t0, t1) if t0 <= t1 + eps else None


def _segment_in_area(area: np.ndarray, p: np.ndarray, q: np.ndarray) -> bool:
    """True iff the whole segment lies inside the union of the two rectangles."""
    intervals = []
    for rect in area:
        iv = _segment_rect_interval(p, q, rect)
        if iv is not None:
            intervals.append(iv)
    if not intervals:
        return False
    intervals.sort()
    cover = 0.0
    for a, b in intervals:
        if a > cover + 1e-9:
            return False
        cover = max(cover, b)
    return cover >= 1.0 - 1e-9


def _sample_area_point(area: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    widths = area[:, 2] - area[:, 0]
    heights = area[:, 3] - area[:, 1]
    w = widths * heights
    r = area[rng.choice(2, p=w / w.sum())]
    return np.array([rng.uniform(r[0], r[2]), rng.uniform(r[1], r[3])])


# ---------------------------------------------------------------------------
# Trajectory and CFO processes
# ---------------------------------------------------------------------------


def _rng_streams(seed: int) -> tuple[np.random.Generator, ...]:
    # Independent streams so e.g. changing cfo_initial never perturbs the path.
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


def generate_trajectory(scenario: SimScenario) -> Trajectory:
    """Random-waypoint path through the area, sampled at the datapoint rate.

    Piecewise-linear segments between uniformly drawn waypoints; each
    segment's speed is drawn uniform in [0.8, 1.2] times the target speed.
    Waypoints whose connecting segment would leave the (non-convex) area are
    resampled, with a hard failure after 1000 rejections.
    """
    rng, _, _ = _rng_streams(scenario.seed)
    n = scenario.num_samples
    t = np.arange(n) / scenario.sample_rate
    t_end = t[-1] if n else 0.0

    starts, vels, seg_t0 = [], [], [0.0]
    p = _sample_area_point(scenario.area, rng)
    while seg_t0[-1] <= t_end:
        for attempt in range(_WAYPOINT_ATTEMPTS):
            q = _sample_area_point(scenario.area, rng)
            if np.linalg.norm(q - p) > 1e-6 and _segment_in_area(scenario.area, p, q):
                break
        else:
            raise RuntimeError("could not find a reachable waypoint after "
                               f"{_WAYPOINT_ATTEMPTS} attempts")
        speed = scenario.speed * rng.uniform(0.8, 1.2)
        hop = np.linalg.norm(q - p)
        starts.append(p.copy())
        vels.append((q - p) / hop * speed)
        seg_t0.append(seg_t0[-1] + hop / speed)
        p = q

    seg_t0 = np.asarray(seg_t0)
    starts = np.asarray(starts)
    vels = np.asarray(vels)
    idx = np.clip(np.searchsorted(seg_t0, t, side="right") - 1, 0, len(starts) - 1)
    xy = starts[idx] + vels[idx] * (t - seg_t0[idx])[:, None]

    h = scenario.config.ue_height
    positions = np.column_stack([xy, np.full(n, h)])
    velocities = np.column_stack([vels[idx], np.zeros(n)])
    return Trajectory(timestamps=t, positions=positions, velocities=velocities)


def cfo_process(scenario: SimScenario, timestamps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sampled CFO random walk and its integrated phase.

    Returns ``(f_cfo, phi_cfo)`` where ``f_cfo[k]`` is the instantaneous
    offset in Hz at ``timestamps[k]`` (initial value plus Brownian drift of
    intensity ``cfo_drift_std`` Hz per sqrt-second) and ``phi_cfo`` is its
    trapezoidal phase integral in radians, starting at 0.
    """
    _, rng, _ = _rng_streams(scenario.seed)
    t = np.asarray(timestamps, dtype=np.float64)
    dt = np.diff(t)
    steps = rng.standard_normal(len(dt)) * scenario.cfo_drift_std * np.sqrt(dt)
    f_cfo = scenario.cfo_initial + np.concatenate([[0.0], np.cumsum(steps)])
    phi_cfo = 2.0 * np.pi * cumulative_trapezoid(f_cfo, t, initial=0.0)
    return f_cfo, phi_cfo


# ---------------------------------------------------------------------------
# Channel synthesis
# ---------------------------------------------------------------------------


def subcarrier_frequencies(config: SystemConfig) -> np.ndarray:
    """Baseband frequency of each subcarrier on the centered OFDM grid."""
    n = config.num_subcarriers
    return (np.arange(n) - n // 2) * config.bandwidth / n


def synthesize_csi(scenario: SimScenario, trajectory: Trajectory) -> CsiDataset:
    """Turn a trajectory into a full dataset of CSI and offset measurements.

    Per sample l and antenna b the line-of-sight ray contributes
    ``(1/d_b) * exp(+2j*pi*(f_c + f_k)*d_b/c)``; each scatterer adds a ray
    with the bounced path length and its fixed gain; the whole row is then
    rotated by the integrated CFO phase and circular Gaussian noise is added
    at ``snr_db`` relative to the clean row power.  Offset measurements are
    ``f_cfo + dist_rate / wavelength`` (see module docstring for signs).
    """
    cfg = scenario.config
    z = cfg.bs_positions
    t = trajectory.timestamps
    pos = trajectory.positions
    vel = trajectory.velocities
    n = len(t)

    diff = pos[:, None, :] - z[None, :, :]
    d = np.linalg.norm(diff, axis=2)
    if np.min(d) < 1e-9:
        l, b = np.unravel_index(np.argmin(d), d.shape)
        raise ValueError(f"transmitter coincides with antenna {b} at sample {l}")
    dist_rate = np.einsum("lbk,lk->lb", diff, vel) / d

    f_cfo, phi_cfo = cfo_process(scenario, t)
    f_dop = dist_rate / cfg.wavelength
    freq_offsets = f_cfo[:, None] + f_dop

    freqs = cfg.carrier_frequency + subcarrier_frequencies(cfg)
    h = np.exp(2j * np.pi / SPEED_OF_LIGHT * freqs[None, None, :] * d[:, :, None])
    h /= d[:, :, None]
    for sx, sy, sz, gain in scenario.scatterers:
        s = np.array([sx, sy, sz])
        d_sc = (np.linalg.norm(pos - s, axis=1)[:, None]
                + np.linalg.norm(z - s, axis=1)[None, :])
        h += (gain / d_sc)[:, :, None] * np.exp(
            2j * np.pi / SPEED_OF_LIGHT * freqs[None, None, :] * d_sc[:, :, None])
    h *= np.exp(1j * phi_cfo)[:, None, None]

    if math.isfinite(scenario.snr_db):
        _, _, rng = _rng_streams(scenario.seed)
        row_power = np.mean(np.abs(h) ** 2, axis=2)
        sigma = np.sqrt(row_power * 10.0 ** (-scenario.snr_db / 10.0) / 2.0)
        noise = rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)
        h += sigma[:, :, None] * noise

    points = [Datapoint(csi=h[l], position=pos[l], timestamp=float(t[l]),
                        freq_offsets=freq_offsets[l]) for l in range(n)]
    return CsiDataset(config=cfg, points=points)


def simulate_dataset(scenario: SimScenario) -> CsiDataset:
    """Convenience wrapper: trajectory generation plus channel synthesis."""
    return synthesize_csi(scenario, generate_trajectory(scenario))


def rms_delay_spread(cir_power: np.ndarray, tap_spacing: float) -> np.ndarray | float:
    """Power-weighted standard deviation of tap delays.

    ``cir_power`` holds nonnegative per-tap powers along the last axis;
    a profile with zero total power is rejected.
    """
    p = np.asarray(cir_power, dtype=np.float64)
    total = p.sum(axis=-1)
    if np.any(total <= 0):
        raise ValueError("delay spread of an all-zero power profile is undefined")
    tau = np.arange(p.shape[-1]) * tap_spacing
    mean = (p * tau).sum(axis=-1) / total
    var = (p * (tau - mean[..., None]) ** 2).sum(axis=-1) / total
    out = np.sqrt(var)
    return float(out) if np.isscalar(total) or out.ndim == 0 else out


def default_scenario(duration: float = 60.0, snr_db: float = 20.0,
                     seed: int = 1, scatterers: np.ndarray | None = None) -> SimScenario:
    """Desk-scale reference scenario: four corner antennas on a 14 m box.

    64 subcarriers over 50 MHz at a 1.272 GHz carrier, 100 datapoints per
    second, an L-shaped walkable area and two mild scatterers.  Runs in
    seconds and exercises every downstream module.
    """
    config = SystemConfig(
        carrier_frequency=1.272e9,
        bandwidth=50e6,
        num_subcarriers=64,
        bs_positions=np.array([[0.0, 0.0, 4.0], [14.0, 0.0, 4.0],
                               [0.0, 14.0, 4.0], [14.0, 14.0, 4.0]]),
        ue_height=1.0,
    )
    if scatterers is None:
        scatterers = np.array([[10.0, 2.0, 2.0, 0.35], [2.0, 11.0, 2.5, 0.3]])
    return SimScenario(
        config=config,
        area=np.array([[0.0, 0.0, 14.0, 6.0], [0.0, 0.0, 6.0, 14.0]]),
        speed=0.25,
        sample_rate=100.0,
        duration=duration,
        cfo_initial=20e3,
        cfo_drift_std=0.1,
        snr_db=snr_db,
        scatterers=scatterers,
        seed=seed,
    )


_SCENARIO_KEYS = ("carrier_frequency", "bandwidth", "num_subcarriers",
                  "bs_positions", "ue_height", "area_rect1", "area_rect2",
                  "speed", "sample_rate", "duration", "cfo_initial",
                  "cfo_drift_std", "snr_db", "scatterers", "seed")


def scenario_from_kv(kv: dict[str, str]) -> SimScenario:
    """Build a scenario from key-value pairs, defaults from :func:`default_scenario`.

    Unknown keys are rejected.  ``snr_db`` accepts ``inf`` for a noiseless
    channel; ``scatterers = none`` clears the default reflectors.
    """
    unknown = sorted(set(kv) - set(_SCENARIO_KEYS))
    if unknown:
        raise ValueError(f"unknown scenario key(s): {', '.join(unknown)}")
    base = default_scenario()
    cfg = base.config

    def flt(key, default):
        return float(kv[key]) if key in kv else default

    bs_positions = (as_vectors(kv["bs_positions"], 3) if "bs_positions" in kv
                    else cfg.bs_positions)
    config = SystemConfig(
        carrier_frequency=flt("carrier_frequency", cfg.carrier_frequency),
        bandwidth=flt("bandwidth", cfg.bandwidth),
        num_subcarriers=int(kv.get("num_subcarriers", cfg.num_subcarriers)),
        bs_positions=bs_positions,
        ue_height=flt("ue_height", cfg.ue_height),
    )
    area = base.area.copy()
    if "area_rect1" in kv:
        area[0] = as_vectors(kv["area_rect1"], 4)[0]
    if "area_rect2" in kv:
        area[1] = as_vectors(kv["area_rect2"], 4)[0]
    if "scatterers" in kv:
        raw = kv["scatterers"].strip().lower()
        scatterers = (np.zeros((0, 4)) if raw in ("", "none")
                      else as_vectors(kv["scatterers"], 4))
    else:
        scatterers = base.scatterers
    return SimScenario(
        config=config,
        area=area,
        speed=flt("speed", base.speed),
        sample_rate=flt("sample_rate", base.sample_rate),
        duration=flt("duration", base.duration),
        cfo_initial=flt("cfo_initial", base.cfo_initial),
        cfo_drift_std=flt("cfo_drift_std", base.cfo_drift_std),
        snr_db=flt("snr_db", base.snr_db),
        scatterers=scatterers,
        seed=int(kv.get("seed", base.seed)),
    )


def load_scenario(path, overrides: dict[str, str] | None = None) -> SimScenario:
    """Scenario from a key-value file plus optional override pairs."""
    kv = read_kv_file(path) if path is not None else {}
    if overrides:
        kv.update(overrides)
    return scenario_from_kv(kv)
