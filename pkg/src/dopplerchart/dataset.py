"""Dataset model and binary container for multi-antenna CSI recordings.

A recording is a sequence of datapoints, each holding the complex channel
matrix ``csi`` (one row per base-station antenna, one column per OFDM
subcarrier), the ground-truth transmitter position (evaluation only), a
timestamp and the per-antenna instantaneous frequency-offset measurements.

On disk, recordings use the DPCC container (little-endian):

    magic "DPCC" (4 bytes), version u16 = 1, B u16, N_sub u32, L u64,
    carrier_frequency f64 [Hz], bandwidth f64 [Hz], ue_height f64 [m];
    then B x 3 f64 base-station positions [m];
    then L records, each:
        t f64, x f64 x 3, f f64 x B,
        H f32 x (B * N_sub * 2), row-major by antenna then subcarrier,
        (re, im) interleaved.

Ground-truth positions are carried in every record but are meant for
evaluation only; training code must not read them (the trainer zeroes them
on entry).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

DPCC_MAGIC = b"DPCC"
DPCC_VERSION = 1

_HEADER = struct.Struct("<4sHHIQddd")


class DpccFormatError(ValueError):
    """Raised when a byte stream does not parse as a valid DPCC container."""


class DpccIoError(IOError):
    """Raised when the underlying sink/source fails, annotated with the byte offset."""


@dataclass(frozen=True)
class SystemConfig:
    """Global constants of a deployment: OFDM grid and antenna geometry.

    ``bs_positions`` has shape (num_bs, 3) in meters; ``ue_height`` is the
    known, constant transmitter height used to lift 2-D position estimates
    into 3-D when computing distances.
    """

    carrier_frequency: float
    bandwidth: float
    num_subcarriers: int
    bs_positions: np.ndarray
    ue_height: float

    def __post_init__(self):
        pos = np.asarray(self.bs_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError("bs_positions must have shape (num_bs, 3)")
        object.__setattr__(self, "bs_positions", pos)
        if self.num_bs < 2:
            raise ValueError("at least two antennas are required (differential phases)")
        if self.carrier_frequency <= 0:
            raise ValueError("carrier_frequency must be positive")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        n = self.num_subcarriers
        if n < 8 or (n & (n - 1)) != 0:
            raise ValueError("num_subcarriers must be a power of two >= 8")
        for i in range(len(pos)):
            for j in range(i + 1, len(pos)):
                if np.array_equal(pos[i], pos[j]):
                    raise ValueError(f"bs_positions {i} and {j} coincide")

    @property
    def num_bs(self) -> int:
        return int(np.asarray(self.bs_positions).shape[0])

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def tap_spacing(self) -> float:
        """Delay resolution of the impulse response, seconds per tap."""
        return 1.0 / self.bandwidth


@dataclass(frozen=True)
class Datapoint:
    """One CSI snapshot: channel matrix, ground truth, timestamp, offsets."""

    csi: np.ndarray
    position: np.ndarray
    timestamp: float
    freq_offsets: np.ndarray

    def __post_init__(self):
        csi = np.asarray(self.csi)
        if not np.iscomplexobj(csi) or csi.ndim != 2:
            raise ValueError("csi must be a complex (num_bs, num_subcarriers) matrix")
        if not np.all(np.isfinite(csi)):
            raise ValueError("csi contains non-finite entries")
        pos = np.asarray(self.position, dtype=np.float64)
        if pos.shape != (3,):
            raise ValueError("position must be a 3-vector")
        f = np.asarray(self.freq_offsets, dtype=np.float64)
        if f.shape != (csi.shape[0],):
            raise ValueError("freq_offsets must have one entry per antenna")
        object.__setattr__(self, "csi", csi)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "freq_offsets", f)


@dataclass
class CsiDataset:
    """A time-ordered recording plus its system constants."""

    config: SystemConfig
    points: list[Datapoint] = field(default_factory=list)

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValueError("a dataset needs at least two datapoints")
        b, n = self.config.num_bs, self.config.num_subcarriers
        for i, p in enumerate(self.points):
            if p.csi.shape != (b, n):
                raise ValueError(f"record {i}: csi shape {p.csi.shape} != ({b}, {n})")
        t = self.timestamps
        bad = np.nonzero(np.diff(t) <= 0)[0]
        if bad.size:
            raise ValueError(f"timestamps must strictly increase (record {bad[0] + 1})")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([p.timestamp for p in self.points], dtype=np.float64)

    def csi_array(self) -> np.ndarray:
        """All CSI matrices stacked to shape (L, num_bs, num_subcarriers)."""
        return np.stack([p.csi for p in self.points])

    def freq_offset_array(self) -> np.ndarray:
        return np.stack([p.freq_offsets for p in self.points])

    def position_array(self) -> np.ndarray:
        return np.stack([p.position for p in self.points])


# ---------------------------------------------------------------------------
# DPCC serialization
# ---------------------------------------------------------------------------


def write_dataset(dataset: CsiDataset, sink) -> None:
    """Serialize ``dataset`` to the DPCC binary format.

    Deterministic and byte-exact: writing the same dataset twice yields
    identical bytes. CSI is stored as interleaved (re, im) float32; all
    metadata is float64.
    """
    cfg = dataset.config
    b, n, l = cfg.num_bs, cfg.num_subcarriers, len(dataset)
    offset = 0

    def put(data: bytes):
        nonlocal offset
        try:
            sink.write(data)
        except OSError as exc:
            raise DpccIoError(f"write failed at byte offset {offset}: {exc}") from exc
        offset += len(data)

    put(_HEADER.pack(DPCC_MAGIC, DPCC_VERSION, b, n, l,
                     cfg.carrier_frequency, cfg.bandwidth, cfg.ue_height))
    put(np.ascontiguousarray(cfg.bs_positions, dtype="<f8").tobytes())
    for p in dataset.points:
        put(struct.pack("<d", p.timestamp))
        put(np.ascontiguousarray(p.position, dtype="<f8").tobytes())
        put(np.ascontiguousarray(p.freq_offsets, dtype="<f8").tobytes())
        h = np.ascontiguousarray(p.csi, dtype="<c8")  # complex64 == interleaved f32
        put(h.tobytes())


def write_dataset_file(dataset: CsiDataset, path) -> None:
    with open(path, "wb") as fh:
        write_dataset(dataset, fh)


def read_dataset(source) -> CsiDataset:
    """Parse a DPCC byte source back into a :class:`CsiDataset`.

    Validates the magic, version and record lengths; a truncated or
    malformed stream raises :class:`DpccFormatError` naming the first
    offending record.
    """
    head = source.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise DpccFormatError("truncated header")
    magic, version, b, n, l, fc, bw, ue_h = _HEADER.unpack(head)
    if magic != DPCC_MAGIC:
        raise DpccFormatError(f"bad magic {magic!r}, expected {DPCC_MAGIC!r}")
    if version != DPCC_VERSION:
        raise DpccFormatError(f"unsupported version {version}")

    pos_bytes = source.read(b * 3 * 8)
    if len(pos_bytes) < b * 3 * 8:
        raise DpccFormatError("truncated base-station position table")
    bs_positions = np.frombuffer(pos_bytes, dtype="<f8").reshape(b, 3).copy()
    try:
        config = SystemConfig(carrier_frequency=fc, bandwidth=bw,
                              num_subcarriers=n, bs_positions=bs_positions,
                              ue_height=ue_h)
    except ValueError as exc:
        raise DpccFormatError(f"invalid header fields: {exc}") from exc

    record_size = 8 + 3 * 8 + b * 8 + b * n * 2 * 4
    points = []
    prev_t = None
    for i in range(l):
        raw = source.read(record_size)
        if len(raw) < record_size:
            raise DpccFormatError(f"truncated record {i}")
        t = struct.unpack_from("<d", raw, 0)[0]
        x = np.frombuffer(raw, dtype="<f8", count=3, offset=8).copy()
        f = np.frombuffer(raw, dtype="<f8", count=b, offset=32).copy()
        h = np.frombuffer(raw, dtype="<c8", count=b * n, offset=32 + b * 8)
        if prev_t is not None and t <= prev_t:
            raise DpccFormatError(f"non-monotone timestamp at record {i}")
        prev_t = t
        try:
            points.append(Datapoint(csi=h.reshape(b, n).copy(), position=x,
                                    timestamp=t, freq_offsets=f))
        except ValueError as exc:
            raise DpccFormatError(f"invalid record {i}: {exc}") from exc
    if len(points) < 2:
        raise DpccFormatError("dataset must contain at least two records")
    return CsiDataset(config=config, points=points)


def read_dataset_file(path) -> CsiDataset:
    with open(path, "rb") as fh:
        return read_dataset(fh)


# ---------------------------------------------------------------------------
# Splitting and feature-path desynchronization
# ---------------------------------------------------------------------------


def split_train_test(dataset: CsiDataset, fraction: float, seed: int,
                     block_len: int | None = None) -> tuple[CsiDataset, CsiDataset]:
    """Deterministic alternating-block split preserving temporal order.

    Consecutive blocks of ``block_len`` datapoints are dealt alternately to
    the two parts (the seed decides which part takes the first block).  Part
    sizes are exact: ``len(train) = floor(fraction * L + 0.5)``, i.e. ties
    round toward the training part.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    l = len(dataset)
    n_train = int(np.floor(fraction * l + 0.5))
    n_train = min(max(n_train, 1), l - 1)
    if block_len is None:
        block_len = max(1, l // 20)
    rng = np.random.default_rng(seed)
    train_turn = bool(rng.integers(0, 2))

    train_idx: list[int] = []
    test_idx: list[int] = []
    i = 0
    while i < l:
        block = list(range(i, min(i + block_len, l)))
        room = (n_train - len(train_idx)) if train_turn else (l - n_train - len(test_idx))
        k = min(len(block), room)
        if train_turn:
            train_idx += block[:k]
            test_idx += block[k:]
        else:
            test_idx += block[:k]
            train_idx += block[k:]
        i += len(block)
        train_turn = not train_turn

    make = lambda idx: CsiDataset(config=dataset.config,
                                  points=[dataset.points[j] for j in idx])
    return make(train_idx), make(test_idx)


def apply_feature_desync(point: Datapoint, phases: np.ndarray,
                         shifts: np.ndarray) -> Datapoint:
    """Rotate each antenna row by a fixed phase and cyclically shift its CIR.

    With all-zero ``phases`` and ``shifts`` this is the identity.  The shift
    is applied as a frequency-domain ramp, i.e. tap ``n`` of the impulse
    response moves to ``(n + shift) mod N``.
    """
    csi = np.asarray(point.csi)
    b, n = csi.shape
    phases = np.asarray(phases, dtype=np.float64).reshape(b, 1)
    shifts = np.asarray(shifts, dtype=np.int64).reshape(b, 1)
    k = np.arange(n)
    ramp = np.exp(-2j * np.pi * k[None, :] * shifts / n)
    out = csi * np.exp(1j * phases) * ramp
    return replace(point, csi=out.astype(csi.dtype, copy=False))


def desynchronize_features(point: Datapoint, seed: int, max_shift: int) -> Datapoint:
    """Randomize initial phase and coarse timing of one datapoint's CSI.

    Emulates antennas without phase/time synchronization: each row gets an
    independent uniform phase in [0, 2*pi) and an independent cyclic CIR
    shift uniform on [-max_shift, max_shift].  Meant for the feature path to
    the neural network only; phase tracking must consume the original CSI.
    """
    n = point.csi.shape[1]
    if not max_shift < n / 4:
        raise ValueError("max_shift must be below num_subcarriers / 4")
    rng = np.random.default_rng(seed)
    b = point.csi.shape[0]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=b)
    shifts = rng.integers(-max_shift, max_shift + 1, size=b)
    return apply_feature_desync(point, phases, shifts)


def desynchronize_dataset(dataset: CsiDataset, seed: int, max_shift: int) -> CsiDataset:
    """Apply :func:`desynchronize_features` with per-point draws to a whole dataset."""
    n = dataset.config.num_subcarriers
    if not max_shift < n / 4:
        raise ValueError("max_shift must be below num_subcarriers / 4")
    rng = np.random.default_rng(seed)
    b, l = dataset.config.num_bs, len(dataset)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(l, b))
    shifts = rng.integers(-max_shift, max_shift + 1, size=(l, b))
    points = [apply_feature_desync(p, phases[i], shifts[i])
              for i, p in enumerate(dataset.points)]
    return CsiDataset(config=dataset.config, points=points)
