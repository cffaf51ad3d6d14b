"""Siamese training loops for the charting network.

Two loss families share the same schedule and machinery: the pairwise
log-likelihood on differential phases (the self-supervised objective that
pins absolute coordinates) and dissimilarity-metric regression (the
baseline family, which only constrains relative geometry).

Training is strictly self-supervised: ground-truth positions are zeroed on
entry before anything touches the data, so no code path can leak them into
the features or the loss.  Every random draw (weight init, feature-path
desynchronization, pair sampling) derives from the schedule seed, and BLAS
pools are pinned to one thread during the numeric loops, so two runs with
the same seed produce bit-identical parameters regardless of the machine's
thread count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import CsiDataset, desynchronize_dataset
from .doppler_loss import UncertaintyModel, build_pair_samples, pair_loss_terms
from .fcf import (FcfModel, FeatureSpec, features_for_dataset, forward,
                  initialize_model, siamese_gradients)
from .phase import PhaseTrack


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stays non-finite after repeated step-size halving."""


@dataclass(frozen=True)
class TrainSchedule:
    """Epoch plan: pair budget, batch sizes, learning rates and seeds.

    Batch sizes must be nondecreasing and learning rates nonincreasing over
    the epochs; ``beta_per_epoch`` optionally overrides the uncertainty
    floor per epoch.  ``desync_max_shift=None`` defaults to a quarter of
    the usable range (num_subcarriers // 8) at training time.
    """

    epochs: int = 6
    pairs_per_epoch: int = 30000
    batch_sizes: tuple[int, ...] = (32, 64, 128, 256, 512, 1024)
    learning_rates: tuple[float, ...] = (1e-2, 5e-3, 2e-3, 1e-3, 5e-4, 2e-4)
    beta_per_epoch: tuple[float, ...] | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    desync: bool = True
    desync_max_shift: int | None = None
    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)
    eps_d: float = 1e-2

    def __post_init__(self):
        if self.epochs < 1 or self.pairs_per_epoch < 1:
            raise ValueError("epochs and pairs_per_epoch must be positive")
        for name in ("batch_sizes", "learning_rates"):
            if len(getattr(self, name)) != self.epochs:
                raise ValueError(f"{name} must list one value per epoch")
        if self.beta_per_epoch is not None and len(self.beta_per_epoch) != self.epochs:
            raise ValueError("beta_per_epoch must list one value per epoch")
        if any(b2 < b1 for b1, b2 in zip(self.batch_sizes, self.batch_sizes[1:])):
            raise ValueError("batch_sizes must be nondecreasing")
        if any(l2 > l1 for l1, l2 in zip(self.learning_rates, self.learning_rates[1:])):
            raise ValueError("learning_rates must be nonincreasing")
        if any(b < 1 for b in self.batch_sizes) or any(lr <= 0 for lr in self.learning_rates):
            raise ValueError("batch sizes must be >= 1 and learning rates positive")


@dataclass
class TrainingReport:
    """Per-epoch mean loss and wall time of one training run."""

    loss_kind: str
    epoch_losses: list[float] = field(default_factory=list)
    wall_seconds: list[float] = field(default_factory=list)


def write_training_report(report: TrainingReport, sink) -> None:
    """Plain-text loss table.

    Wall times are intentionally not serialized (output artifacts must be
    byte-identical across runs); they are available on the report object.
    """
    sink.write(f"loss = {report.loss_kind}\n")
    sink.write("epoch  mean_loss\n")
    for i, loss in enumerate(report.epoch_losses):
        sink.write(f"{i + 1:5d}  {loss!r}\n")


def sample_pairs(l: int, count: int, seed: int) -> np.ndarray:
    """Uniform i.i.d. datapoint pairs (l1 < l2), no self-pairs, shape (count, 2)."""
    if l < 2:
        raise ValueError("need at least two datapoints to form pairs")
    rng = np.random.default_rng(seed)
    a = rng.integers(0, l, size=count)
    b = rng.integers(0, l, size=count)
    while True:
        clash = a == b
        if not np.any(clash):
            break
        b[clash] = rng.integers(0, l, size=int(clash.sum()))
    return np.column_stack([np.minimum(a, b), np.maximum(a, b)])


def strip_positions(dataset: CsiDataset) -> CsiDataset:
    """Copy of the dataset with all ground-truth positions zeroed."""
    points = [replace(p, position=np.zeros(3)) for p in dataset.points]
    return CsiDataset(config=dataset.config, points=points)


class _Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, params: list[np.ndarray], beta1: float, beta2: float, eps: float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return self.t, [m.copy() for m in self.m], [v.copy() for v in self.v]

    def restore(self, state):
        self.t, m, v = state[0], [x.copy() for x in state[1]], [x.copy() for x in state[2]]
        self.m, self.v = m, v


def _derive_seeds(seed: int, epochs: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(3 + epochs).astype(np.int64)


def _prepare_features(dataset: CsiDataset, schedule: TrainSchedule,
                      desync_seed: int) -> tuple[np.ndarray, int | None, int]:
    clean = strip_positions(dataset)
    max_shift = schedule.desync_max_shift
    if max_shift is None:
        max_shift = dataset.config.num_subcarriers // 8
    if schedule.desync:
        clean = desynchronize_dataset(clean, seed=desync_seed, max_shift=max_shift)
        return (features_for_dataset(clean, schedule.feature_spec),
                desync_seed, max_shift)
    return features_for_dataset(clean, schedule.feature_spec), None, 0


def _init_model(feats: np.ndarray, dataset: CsiDataset, schedule: TrainSchedule,
                init_seed: int, desync_seed: int | None, max_shift: int,
                init_model: FcfModel | None) -> FcfModel:
    if init_model is None:
        init_model = initialize_model(feats.shape[1], seed=init_seed,
                                      feature_spec=schedule.feature_spec)
        # anchor the output head to the deployment: raw network outputs are
        # O(1), the head maps them to meters around the antenna centroid
        z = dataset.config.bs_positions[:, :2]
        extent = max(float(np.linalg.norm(a - b)) for a in z for b in z)
        init_model.output_scale = max(extent / 4.0, 1.0)
        init_model.output_offset = z.mean(axis=0)
    init_model.feature_mean = feats.mean(axis=0)
    init_model.feature_std = np.maximum(feats.std(axis=0), 1e-8)
    init_model.desync_seed = desync_seed
    init_model.desync_max_shift = max_shift
    return init_model


def _run_epochs(model: FcfModel, feats: np.ndarray, schedule: TrainSchedule,
                batch_eval, report: TrainingReport) -> None:
    """Shared optimization loop; ``batch_eval(epoch, pairs, y1, y2)`` returns
    per-pair losses and gradients w.r.t. the two position estimates."""
    params = model.parameters()
    adam = _Adam(params, schedule.adam_beta1, schedule.adam_beta2, schedule.adam_eps)
    halvings = 0
    with threadpool_limits(limits=1):
        for epoch in range(schedule.epochs):
            t0 = time.perf_counter()
            lr = schedule.learning_rates[epoch]
            bs = schedule.batch_sizes[epoch]
            pairs = batch_eval.epoch_pairs(epoch)
            loss_sum = 0.0
            last_good = None
            start = 0
            while start < len(pairs):
                idx = np.arange(start, min(start + bs, len(pairs)))
                batch = pairs[idx]
                x1, c1 = forward(model, feats[batch[:, 0]])
                x2, c2 = forward(model, feats[batch[:, 1]])
                losses, g1, g2 = batch_eval.loss(epoch, idx, x1, x2)
                if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(g1))
                        and np.all(np.isfinite(g2))):
                    halvings += 1
                    if halvings > 5:
                        raise TrainingDivergedError(
                            "loss stayed non-finite after 5 learning-rate halvings")
                    lr *= 0.5
                    if last_good is not None:
                        for p, saved in zip(params, last_good[0]):
                            p[...] = saved
                        adam.restore(last_good[1])
                        start = last_good[2]
                    continue
                grads = siamese_gradients(model, c1, c2,
                                          g1 / len(batch), g2 / len(batch))
                last_good = ([p.copy() for p in params], adam.state(), start)
                adam.step(params, grads, lr)
                loss_sum += float(losses.sum())
                start += bs
            report.epoch_losses.append(loss_sum / len(pairs))
            report.wall_seconds.append(time.perf_counter() - t0)


class _DopplerBatches:
    def __init__(self, track, uncertainty, schedule, pair_seeds, l, config):
        self.track, self.uncertainty = track, uncertainty
        self.schedule, self.pair_seeds, self.l = schedule, pair_seeds, l
        self.config = config
        self._dphi = self._sigma = None
        self._pairs = None

    def epoch_pairs(self, epoch):
        self._pairs = sample_pairs(self.l, self.schedule.pairs_per_epoch,
                                   int(self.pair_seeds[epoch]))
        beta = (self.schedule.beta_per_epoch[epoch]
                if self.schedule.beta_per_epoch is not None else None)
        self._dphi, self._sigma = build_pair_samples(
            self.track, self.uncertainty, self._pairs, beta=beta)
        return self._pairs

    def loss(self, epoch, idx, x1, x2):
        loss, g1, g2, _ = pair_loss_terms(x1, x2, self._dphi[idx], self._sigma[idx],
                                          self.config.bs_positions,
                                          self.config.wavelength,
                                          self.config.ue_height)
        return loss, g1, g2


def train_doppler(dataset: CsiDataset, track: PhaseTrack,
                  uncertainty: UncertaintyModel, schedule: TrainSchedule,
                  init_model: FcfModel | None = None
                  ) -> tuple[FcfModel, TrainingReport]:
    """Train the charting network on the differential-phase log-likelihood.

    ``track`` and ``uncertainty`` must come from the same dataset.  Returns
    the trained model and a report with the per-epoch mean loss.
    """
    if dataset.config.num_bs < 2:
        raise ValueError("the phase loss needs at least two antennas "
                         "(a single antenna carries no CFO-free information)")
    if len(track) != len(dataset) or len(uncertainty.u) != len(dataset):
        raise ValueError("track/uncertainty do not match the dataset")
    seeds = _derive_seeds(schedule.seed, schedule.epochs)
    feats, desync_seed, max_shift = _prepare_features(dataset, schedule, int(seeds[1]))
    model = _init_model(feats, dataset, schedule, int(seeds[0]), desync_seed,
                        max_shift, init_model)
    report = TrainingReport(loss_kind="doppler")
    batches = _DopplerBatches(track, uncertainty, schedule, seeds[3:],
                              len(dataset), dataset.config)
    _run_epochs(model, feats, schedule, batches, report)
    return model, report


def dissimilarity_loss_terms(x1: np.ndarray, x2: np.ndarray, d: np.ndarray,
                             eps_d: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Siamese dissimilarity objective: (||x1 - x2|| - d)^2 / (d + eps_d)."""
    diff = np.atleast_2d(x1) - np.atleast_2d(x2)
    dist = np.linalg.norm(diff, axis=1)
    denom = d + eps_d
    loss = (dist - d) ** 2 / denom
    safe = np.where(dist > 1e-12, dist, 1.0)
    unit = diff / safe[:, None]
    unit[dist <= 1e-12] = 0.0
    g1 = (2.0 * (dist - d) / denom)[:, None] * unit
    return loss, g1, -g1


class _DissimilarityBatches:
    def __init__(self, dmatrix, schedule, pair_seeds, l):
        self.dmatrix, self.schedule = dmatrix, schedule
        self.pair_seeds, self.l = pair_seeds, l

    def epoch_pairs(self, epoch):
        seed = int(self.pair_seeds[epoch])
        pairs = sample_pairs(self.l, self.schedule.pairs_per_epoch, seed)
        d = np.asarray(self.dmatrix.pair_values(pairs), dtype=np.float64)
        rng = np.random.default_rng(seed + 1)
        for _ in range(1000):
            bad = ~np.isfinite(d)
            if not np.any(bad):
                break
            fresh = sample_pairs(self.l, int(bad.sum()), int(rng.integers(2 ** 31)))
            pairs[bad] = fresh
            d[bad] = self.dmatrix.pair_values(fresh)
        else:
            raise ValueError("could not sample pairs with finite dissimilarity "
                             "(graph too disconnected)")
        self._d = d
        return pairs

    def loss(self, epoch, idx, x1, x2):
        return dissimilarity_loss_terms(x1, x2, self._d[idx], self.schedule.eps_d)


def train_dissimilarity(dataset: CsiDataset, dmatrix, schedule: TrainSchedule,
                        init_model: FcfModel | None = None
                        ) -> tuple[FcfModel, TrainingReport]:
    """Train a baseline chart against a dissimilarity matrix.

    ``dmatrix`` is anything with ``pair_values`` (dense matrix or lazy
    geodesic); sampled pairs with infinite dissimilarity are resampled.
    """
    seeds = _derive_seeds(schedule.seed, schedule.epochs)
    feats, desync_seed, max_shift = _prepare_features(dataset, schedule, int(seeds[1]))
    model = _init_model(feats, dataset, schedule, int(seeds[0]), desync_seed,
                        max_shift, init_model)
    report = TrainingReport(loss_kind="dissimilarity")
    batches = _DissimilarityBatches(dmatrix, schedule, seeds[3:], len(dataset))
    _run_epochs(model, feats, schedule, batches, report)
    return model, report
