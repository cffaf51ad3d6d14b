"""Pairwise log-likelihood loss on differential phases, with uncertainty weights.

For a pair of datapoints (l1, l2) and every ordered antenna pair (b1, b2)
the residual between the measured differential phase and the differential
distance predicted from two candidate positions,

    (delta_phi[b1, b2] - (2*pi/wavelength) * delta_d[b1, b2]) / sigma[b1, b2],

is squared and summed.  The weight ``sigma`` grows with the time gap of the
pair by integrating per-antenna instantaneous uncertainty rates derived
from the channel's delay spread (line-of-sight-like channels are trusted,
dispersive ones are not), plus a floor ``beta`` that keeps it positive.

The loss depends on absolute coordinates, not just the distance between
the two estimates, which is what lets a network trained on it place
datapoints directly in the global frame.  Gradients with respect to both
position estimates are analytic.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .dataset import CsiDataset, SystemConfig
from .phase import PhaseTrack
from .sim import rms_delay_spread

_SINGULAR_DISTANCE = 1e-9


@dataclass(frozen=True)
class UncertaintyModel:
    """Instantaneous uncertainty rates u[l, b] (rad/s) and their integrals.

    ``cumulative[l, b]`` is the trapezoidal integral of ``u[:, b]`` over the
    timestamps, so any interval integral is one subtraction; ``beta`` is the
    minimum standard deviation assigned to a zero-gap pair.
    """

    beta: float
    gain: float
    u_min: float
    u_max: float
    u: np.ndarray
    cumulative: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive (it guards the division)")
        if not 0 < self.u_min <= self.u_max:
            raise ValueError("need 0 < u_min <= u_max")
        if np.any(self.u < self.u_min - 1e-12) or np.any(self.u > self.u_max + 1e-12):
            raise ValueError("u entries must lie within [u_min, u_max]")
        if np.any(np.diff(self.cumulative, axis=0) < -1e-12):
            raise ValueError("cumulative uncertainty must be nondecreasing")


@dataclass(frozen=True)
class PairSample:
    """Precomputed observables of one datapoint pair: all antenna pairs at once.

    ``delta_phi`` is antisymmetric with zero diagonal; ``sigma`` is symmetric
    with entries >= beta.  Building the sample once makes loss evaluation a
    pure array computation.
    """

    l1: int
    l2: int
    delta_phi: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if not self.l1 < self.l2:
            raise ValueError("need l1 < l2")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma entries must be positive")


def instantaneous_uncertainty(cir_power: np.ndarray, tap_spacing: float,
                              gain: float = 1.0, u_min: float = 0.01,
                              u_max: float = 10.0) -> np.ndarray | float:
    """Uncertainty rate from the delay spread of a CIR power profile.

    ``clip(gain * rms_delay_spread / tap_spacing, u_min, u_max)`` - large
    for dispersive (non-line-of-sight) channels, small for clean ones.  An
    all-zero profile is maximally distrusted and maps to ``u_max``.
    """
    p = np.asarray(cir_power, dtype=np.float64)
    total = p.sum(axis=-1)
    scalar = np.ndim(total) == 0
    total = np.atleast_1d(total)
    flat = p.reshape(len(total.ravel()), -1) if not scalar else p.reshape(1, -1)
    u = np.full(flat.shape[0], u_max)
    ok = total.ravel() > 0
    if np.any(ok):
        spread = rms_delay_spread(flat[ok], tap_spacing)
        u[ok] = np.clip(gain * np.atleast_1d(spread) / tap_spacing, u_min, u_max)
    if scalar:
        return float(u[0])
    return u.reshape(np.asarray(cir_power).shape[:-1])


def peak_window_power(csi: np.ndarray, window: int) -> np.ndarray:
    """Per-row CIR power in a cyclic window centered on the strongest tap.

    Windowing suppresses the spectral-leakage tails and the noise floor
    that would otherwise dominate the delay spread of a clean channel.
    """
    csi = np.asarray(csi)
    n = csi.shape[-1]
    if not 1 <= window <= n:
        raise ValueError("window must lie in [1, num_subcarriers]")
    power = np.abs(np.fft.ifft(csi, axis=-1)) ** 2
    peak = np.argmax(power, axis=-1)
    offsets = np.arange(window) - window // 2
    idx = (peak[..., None] + offsets) % n
    return np.take_along_axis(power, idx, axis=-1)


def uncertainty_from_dataset(dataset: CsiDataset, beta: float = 0.5,
                             gain: float = 1.0, u_min: float = 0.01,
                             u_max: float = 10.0, window: int = 9) -> UncertaintyModel:
    """Build the per-datapoint uncertainty model from the recorded CSI."""
    pw = peak_window_power(dataset.csi_array(), window=window)
    u = instantaneous_uncertainty(pw, dataset.config.tap_spacing,
                                  gain=gain, u_min=u_min, u_max=u_max)
    t = dataset.timestamps
    cumulative = cumulative_trapezoid(u, t, axis=0, initial=0.0)
    return UncertaintyModel(beta=beta, gain=gain, u_min=u_min, u_max=u_max,
                            u=u, cumulative=cumulative, timestamps=t)


def attach_uncertainty(track: PhaseTrack, model: UncertaintyModel) -> PhaseTrack:
    """Return the track with the model's cumulative integrals filled in."""
    from dataclasses import replace
    return replace(track, uncertainty_cumsum=model.cumulative)


def sigma(model: UncertaintyModel, b1: int, b2: int, l1: int, l2: int) -> float:
    """Standard deviation assigned to delta_phi[b1, b2] over (l1, l2).

    ``beta + (U[l2, b1] + U[l2, b2]) - (U[l1, b1] + U[l1, b2])`` - an O(1)
    lookup thanks to the precomputed cumulative integrals; equals ``beta``
    exactly for a zero-gap pair.
    """
    if not l1 <= l2:
        raise ValueError("need l1 <= l2")
    ucs = model.cumulative
    # difference-first grouping keeps sigma == beta exact for zero-gap pairs
    return float(model.beta + ((ucs[l2, b1] - ucs[l1, b1]) + (ucs[l2, b2] - ucs[l1, b2])))


def build_pair_samples(track: PhaseTrack, model: UncertaintyModel,
                       pairs: np.ndarray, beta: float | None = None
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized delta_phi and sigma for many (l1, l2) pairs.

    Returns arrays of shape (n_pairs, B, B).  ``beta`` overrides the model's
    floor (the floor may be scheduled over training epochs).
    """
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    if np.any(pairs[:, 0] >= pairs[:, 1]):
        raise ValueError("pairs must satisfy l1 < l2")
    if beta is None:
        beta = model.beta
    psi = track.phases[pairs[:, 1]] - track.phases[pairs[:, 0]]
    delta_phi = psi[:, None, :] - psi[:, :, None]
    a = model.cumulative[pairs[:, 1]] - model.cumulative[pairs[:, 0]]
    sig = beta + a[:, None, :] + a[:, :, None]
    return delta_phi, sig


def pair_sample(track: PhaseTrack, model: UncertaintyModel, l1: int, l2: int,
                beta: float | None = None) -> PairSample:
    dphi, sig = build_pair_samples(track, model, np.array([[l1, l2]]), beta=beta)
    return PairSample(l1=l1, l2=l2, delta_phi=dphi[0], sigma=sig[0])


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------


def delta_distance(x1: np.ndarray, x2: np.ndarray, config: SystemConfig,
                   b1: int, b2: int) -> float:
    """Differential-distance change between two 2-D position estimates.

    ``(d_b2(x2) - d_b1(x2)) - (d_b2(x1) - d_b1(x1))`` with distances taken
    in 3-D by lifting the estimates to the known transmitter height.
    """
    z = config.bs_positions
    p1 = np.array([x1[0], x1[1], config.ue_height])
    p2 = np.array([x2[0], x2[1], config.ue_height])
    d1 = np.linalg.norm(p1 - z, axis=1)
    d2 = np.linalg.norm(p2 - z, axis=1)
    return float((d2[b2] - d2[b1]) - (d1[b2] - d1[b1]))


def pair_loss_terms(x1: np.ndarray, x2: np.ndarray, delta_phi: np.ndarray,
                    sig: np.ndarray, bs_positions: np.ndarray,
                    wavelength: float, ue_height: float
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Batched loss and analytic gradients.

    ``x1, x2`` have shape (n, 2); ``delta_phi, sig`` shape (n, B, B).
    Returns per-pair losses (n,), gradients w.r.t. x1 and x2 (n, 2) and the
    number of distance terms whose gradient was clamped because an estimate
    coincided with an antenna's ground position.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    z = np.asarray(bs_positions, dtype=np.float64)
    kappa = 2.0 * np.pi / wavelength

    def distances(x):
        planar = x[:, None, :] - z[None, :, :2]
        dz = ue_height - z[None, :, 2]
        d = np.sqrt(np.sum(planar ** 2, axis=2) + dz ** 2)
        return d, planar

    d1, planar1 = distances(x1)
    d2, planar2 = distances(x2)
    dd = (d2[:, None, :] - d2[:, :, None]) - (d1[:, None, :] - d1[:, :, None])

    r = (delta_phi - kappa * dd) / sig
    loss = np.sum(r ** 2, axis=(1, 2))

    # d(loss)/d(dd[b1, b2]) = -2*kappa*r/sig; dd gains +1 from d2[b2], -1 from d2[b1]
    w = 2.0 * kappa * r / sig
    g_d2 = w.sum(axis=2) - w.sum(axis=1)
    g_d1 = -g_d2

    clamped = 0
    grads = []
    for d, planar, g_d in ((d1, planar1, g_d1), (d2, planar2, g_d2)):
        singular = d < _SINGULAR_DISTANCE
        clamped += int(np.count_nonzero(singular))
        safe_d = np.where(singular, 1.0, d)
        unit = planar / safe_d[:, :, None]
        unit[singular] = 0.0
        grads.append(np.einsum("nb,nbk->nk", g_d, unit))
    return loss, grads[0], grads[1], clamped


def pair_loss(x1: np.ndarray, x2: np.ndarray, pair: PairSample,
              config: SystemConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss of one pair at two 2-D estimates, with gradients w.r.t. both.

    A gradient term whose estimate sits exactly on an antenna's ground
    position is clamped to zero (the distance is not differentiable there);
    a warning reports how many terms were affected.
    """
    if np.any(pair.sigma <= 0):
        raise ValueError("sigma entries must be positive")
    loss, g1, g2, clamped = pair_loss_terms(
        np.asarray(x1)[None, :], np.asarray(x2)[None, :],
        pair.delta_phi[None, ...], pair.sigma[None, ...],
        config.bs_positions, config.wavelength, config.ue_height)
    if clamped:
        warnings.warn(f"clamped {clamped} singular distance gradient term(s)",
                      RuntimeWarning, stacklevel=2)
    return float(loss[0]), g1[0], g2[0]
