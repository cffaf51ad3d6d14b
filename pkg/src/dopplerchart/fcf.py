"""Forward charting function: CSI matrix -> 2-D position estimate.

The input layer turns each antenna's CSI row into time-domain features: the
row is transformed to its impulse response (inverse DFT, 1/N normalization),
a window of taps is cut cyclically around the strongest tap, and each tap
contributes its real part, imaginary part and log10 amplitude (floored).
Strongest-tap centering makes the features invariant to the coarse timing
randomization of the feature path.

The network itself is a plain dense net, ReLU hidden layers of sizes
1024/512/256/128/64 and a linear 2-unit output, implemented directly in
numpy with exact reverse-mode gradients so that training is deterministic
and the whole pipeline is finite-difference checkable.  Forward/backward
operate on batches; in a Siamese setup both branches share the weights and
their parameter gradients are summed.

Model files use the FCF1 binary format (little-endian): magic "FCF1",
version u16, layer count u16, layer widths u32 each, feature window u32,
log floor f64, desync flag u8 + seed i64 + max shift u32, output head
scale/offset f64 x 3, standardization flag u8 + per-feature mean/std f64,
then per layer the weight matrix (row-major, f64) followed by the bias
vector (f64).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .dataset import CsiDataset, desynchronize_dataset

FCF_MAGIC = b"FCF1"
FCF_VERSION = 1

HIDDEN_WIDTHS = (1024, 512, 256, 128, 64)
OUTPUT_DIM = 2


class ModelFormatError(ValueError):
    """Raised when a model file does not parse as valid FCF1."""


@dataclass(frozen=True)
class FeatureSpec:
    """How CSI turns into network inputs: window size and log-amplitude floor."""

    taps_per_bs: int = 32
    log_floor: float = 1e-6
    window_centering: str = "strongest-tap"

    def __post_init__(self):
        if self.taps_per_bs < 1:
            raise ValueError("taps_per_bs must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.window_centering != "strongest-tap":
            raise ValueError("only strongest-tap centering is supported")

    def feature_length(self, num_bs: int) -> int:
        return num_bs * self.taps_per_bs * 3


def extract_features(csi: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    """Feature vector of one CSI matrix, length num_bs * taps_per_bs * 3.

    Layout: antennas in order, within each antenna the window taps in
    order, per tap (re, im, log10 max(|tap|, log_floor)).  An all-zero row
    yields (0, 0, log10(log_floor)) for every tap.
    """
    return extract_feature_batch(np.asarray(csi)[None, ...], spec)[0]


def extract_feature_batch(csi: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    """Vectorized :func:`extract_features` over a leading datapoint axis."""
    csi = np.asarray(csi)
    l, b, n = csi.shape
    t = spec.taps_per_bs
    if t > n:
        raise ValueError(f"taps_per_bs={t} exceeds num_subcarriers={n}")
    cir = np.fft.ifft(csi, axis=-1)
    peak = np.argmax(np.abs(cir), axis=-1)
    offsets = np.arange(t) - t // 2
    idx = (peak[..., None] + offsets) % n
    taps = np.take_along_axis(cir, idx, axis=-1)
    feats = np.empty((l, b, t, 3))
    feats[..., 0] = taps.real
    feats[..., 1] = taps.imag
    feats[..., 2] = np.log10(np.maximum(np.abs(taps), spec.log_floor))
    return feats.reshape(l, b * t * 3)


def features_for_dataset(dataset: CsiDataset, spec: FeatureSpec) -> np.ndarray:
    return extract_feature_batch(dataset.csi_array(), spec)


# ---------------------------------------------------------------------------
# Dense network
# ---------------------------------------------------------------------------


@dataclass
class FcfModel:
    """Dense-network parameters plus everything needed to reproduce inputs.

    ``weights[i]`` has shape (fan_in, fan_out); hidden layers use ReLU, the
    output layer is linear.  ``feature_mean``/``feature_std`` standardize
    inputs (training-set statistics); ``desync_seed``/``desync_max_shift``
    record the feature-path randomization the model was trained with so
    that evaluation can reproduce the exact same feature vectors.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    desync_seed: int | None = None
    desync_max_shift: int = 0
    # affine output head: estimates = raw_output * scale + offset, so that
    # O(1) parameter motion spans the deployment area
    output_scale: float = 1.0
    output_offset: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must pair up")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: inconsistent shapes")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: fan-in does not match previous fan-out")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def initialize_model(input_dim: int, seed: int,
                     hidden: tuple[int, ...] = HIDDEN_WIDTHS,
                     feature_spec: FeatureSpec | None = None,
                     output_bias: np.ndarray | None = None) -> FcfModel:
    """Fan-in-scaled uniform initialization with zero (or given) biases."""
    rng = np.random.default_rng(seed)
    widths = [input_dim, *hidden, OUTPUT_DIM]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if output_bias is not None:
        biases[-1] = np.asarray(output_bias, dtype=np.float64).copy()
    spec = feature_spec if feature_spec is not None else FeatureSpec()
    return FcfModel(weights=weights, biases=biases, feature_spec=spec)


def _standardize(model: FcfModel, x: np.ndarray) -> np.ndarray:
    if model.feature_mean is None:
        return x
    return (x - model.feature_mean) / model.feature_std


def forward(model: FcfModel, features: np.ndarray
            ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batch forward pass; returns estimates (n, 2) and the activation cache."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != model.input_dim:
        raise ValueError(f"feature length {x.shape[1]} != model input {model.input_dim}")
    a = _standardize(model, x)
    cache = [a]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        a = a @ w + b
        if i < last:
            a = np.maximum(a, 0.0)
        cache.append(a)
    return a * model.output_scale + model.output_offset, cache


def predict(model: FcfModel, features: np.ndarray) -> np.ndarray:
    """Position estimates for a feature batch (no cache kept)."""
    out, _ = forward(model, features)
    return out


def estimate_positions(model: FcfModel, dataset: CsiDataset) -> np.ndarray:
    """Apply the charting function to a whole dataset, shape (L, 2).

    Reproduces the feature path the model was trained with: if the model
    records a desynchronization seed, the same randomization is applied so
    the feature vectors match the training ones bit for bit.
    """
    data = dataset
    if model.desync_seed is not None:
        data = desynchronize_dataset(dataset, seed=model.desync_seed,
                                     max_shift=model.desync_max_shift)
    feats = features_for_dataset(data, model.feature_spec)
    if feats.shape[1] != model.input_dim:
        raise ValueError(f"dataset features have length {feats.shape[1]} but the "
                         f"model expects {model.input_dim} "
                         "(antenna count or window size mismatch)")
    return predict(model, feats)


def backward(model: FcfModel, cache: list[np.ndarray],
             upstream: np.ndarray) -> list[np.ndarray]:
    """Exact reverse-mode parameter gradients for one branch.

    ``cache`` comes from :func:`forward`; ``upstream`` is d(loss)/d(output),
    shape (n, 2).  Returns gradients in :meth:`FcfModel.parameters` order.
    Call once per Siamese branch and sum - the branches share weights.
    """
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64)) * model.output_scale
    grads: list[np.ndarray] = [None] * (2 * len(model.weights))
    for i in range(len(model.weights) - 1, -1, -1):
        a_in = cache[i]
        grads[2 * i] = a_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = g @ model.weights[i].T
            g = g * (cache[i] > 0.0)
    return grads


def siamese_gradients(model: FcfModel, cache1: list[np.ndarray],
                      cache2: list[np.ndarray], upstream1: np.ndarray,
                      upstream2: np.ndarray) -> list[np.ndarray]:
    """Summed parameter gradients of the two weight-sharing branches."""
    g1 = backward(model, cache1, upstream1)
    g2 = backward(model, cache2, upstream2)
    return [a + b for a, b in zip(g1, g2)]


# ---------------------------------------------------------------------------
# FCF1 serialization
# ---------------------------------------------------------------------------


def save_model(model: FcfModel, sink) -> None:
    """Write the FCF1 binary representation (bit-exact round trip)."""
    widths = model.widths
    sink.write(FCF_MAGIC)
    sink.write(struct.pack("<HH", FCF_VERSION, len(model.weights)))
    sink.write(struct.pack(f"<{len(widths)}I", *widths))
    sink.write(struct.pack("<Id", model.feature_spec.taps_per_bs,
                           model.feature_spec.log_floor))
    has_desync = model.desync_seed is not None
    sink.write(struct.pack("<BqI", int(has_desync),
                           model.desync_seed if has_desync else 0,
                           model.desync_max_shift))
    sink.write(struct.pack("<ddd", model.output_scale,
                           model.output_offset[0], model.output_offset[1]))
    has_std = model.feature_mean is not None
    sink.write(struct.pack("<B", int(has_std)))
    if has_std:
        sink.write(np.ascontiguousarray(model.feature_mean, dtype="<f8").tobytes())
        sink.write(np.ascontiguousarray(model.feature_std, dtype="<f8").tobytes())
    for w, b in zip(model.weights, model.biases):
        sink.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        sink.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def save_model_file(model: FcfModel, path) -> None:
    with open(path, "wb") as fh:
        save_model(model, fh)


def _read_exact(source, nbytes: int, what: str) -> bytes:
    raw = source.read(nbytes)
    if len(raw) < nbytes:
        raise ModelFormatError(f"truncated model file while reading {what}")
    return raw


def load_model(source) -> FcfModel:
    if _read_exact(source, 4, "magic") != FCF_MAGIC:
        raise ModelFormatError(f"bad magic, expected {FCF_MAGIC!r}")
    version, n_layers = struct.unpack("<HH", _read_exact(source, 4, "header"))
    if version != FCF_VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    if n_layers < 1:
        raise ModelFormatError("model needs at least one layer")
    widths = struct.unpack(f"<{n_layers + 1}I",
                           _read_exact(source, 4 * (n_layers + 1), "layer widths"))
    taps, log_floor = struct.unpack("<Id", _read_exact(source, 12, "feature spec"))
    has_desync, seed, max_shift = struct.unpack("<BqI", _read_exact(source, 13, "desync"))
    scale, off0, off1 = struct.unpack("<ddd", _read_exact(source, 24, "output head"))
    has_std, = struct.unpack("<B", _read_exact(source, 1, "standardization flag"))
    mean = std = None
    d = widths[0]
    if has_std:
        mean = np.frombuffer(_read_exact(source, 8 * d, "feature mean"), "<f8").copy()
        std = np.frombuffer(_read_exact(source, 8 * d, "feature std"), "<f8").copy()
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        raw = _read_exact(source, 8 * fan_in * fan_out, f"layer {i} weights")
        weights.append(np.frombuffer(raw, "<f8").reshape(fan_in, fan_out).copy())
        raw = _read_exact(source, 8 * fan_out, f"layer {i} bias")
        biases.append(np.frombuffer(raw, "<f8").copy())
    try:
        return FcfModel(weights=weights, biases=biases,
                        feature_spec=FeatureSpec(taps_per_bs=taps, log_floor=log_floor),
                        feature_mean=mean, feature_std=std,
                        desync_seed=seed if has_desync else None,
                        desync_max_shift=max_shift,
                        output_scale=scale, output_offset=np.array([off0, off1]))
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc


def load_model_file(path) -> FcfModel:
    with open(path, "rb") as fh:
        return load_model(fh)
