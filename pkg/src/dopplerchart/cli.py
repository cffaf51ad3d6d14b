"""Command-line pipeline: simulate -> train -> evaluate -> chart.

Subcommands:

* ``simulate``   synthesize a dataset from a scenario file, write DPCC
* ``train``      phase tracking + uncertainty + Siamese training, write model
* ``evaluate``   apply a model, fit the optional affine transform, write report
* ``chart``      dump estimates vs. ground truth as colorized CSV (+SVG)
* ``phase-dump`` debug CSV of tracked phases and uncertainty integrals

Configuration comes from plain-text key-value files plus repeatable
``--set key=value`` overrides; unknown keys are rejected.  Every subcommand
is deterministic under a fixed seed: artifacts are byte-identical across
runs and across thread counts (the ``CHART_THREADS`` variable only controls
how many workers share the row-parallel stages).

Exit codes: 0 success, 2 usage/validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field

from threadpoolctl import threadpool_limits

from . import baselines, evaluation, fcf, phase, sim, trainer
from ._config import as_bool, as_float_list, as_int_list, read_kv_file
from .dataset import DpccFormatError, read_dataset_file, write_dataset_file
from .doppler_loss import attach_uncertainty, uncertainty_from_dataset
from .fcf import FeatureSpec, ModelFormatError

LOSSES = ("doppler", "cira", "fused")
TRANSFORMS = ("none", "affine")


@dataclass
class RunConfig:
    """Parsed invocation: subcommand, paths, loss/transform choices, overrides."""

    subcommand: str
    dataset: str | None = None
    model: str | None = None
    output: str | None = None
    report: str | None = None
    ecdf: str | None = None
    svg: str | None = None
    scenario: str | None = None
    schedule: str | None = None
    loss: str = "doppler"
    transform: str = "none"
    seed: int | None = None
    chart_k: int | None = None
    overrides: dict[str, str] = field(default_factory=dict)


def _require_file(path: str | None, what: str) -> str:
    if path is None:
        raise ValueError(f"missing {what} path")
    if not os.path.isfile(path):
        raise ValueError(f"{what} file not found: {path}")
    return path


def _require_sink(path: str | None, what: str) -> str:
    if path is None:
        raise ValueError(f"missing {what} path")
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise ValueError(f"output directory for {what} does not exist: {parent}")
    return path


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in pairs:
        if "=" not in raw:
            raise ValueError(f"--set expects key=value, got {raw!r}")
        key, value = raw.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# Train-side configuration
# ---------------------------------------------------------------------------

_SCHEDULE_KEYS = ("epochs", "pairs_per_epoch", "batch_sizes", "learning_rates",
                  "beta_per_epoch", "seed", "desync", "desync_max_shift",
                  "taps_per_bs", "log_floor", "eps_d")
_UNCERTAINTY_KEYS = ("beta", "gain", "u_min", "u_max", "window")
_BASELINE_KEYS = ("knn_k", "v_max")


def _train_settings(config: RunConfig) -> tuple[trainer.TrainSchedule, dict, dict]:
    kv = read_kv_file(config.schedule) if config.schedule else {}
    kv.update(config.overrides)
    unknown = sorted(set(kv) - set(_SCHEDULE_KEYS) - set(_UNCERTAINTY_KEYS)
                     - set(_BASELINE_KEYS))
    if unknown:
        raise ValueError(f"unknown training key(s): {', '.join(unknown)}")

    sched_kwargs: dict = {}
    if "epochs" in kv:
        sched_kwargs["epochs"] = int(kv["epochs"])
    if "pairs_per_epoch" in kv:
        sched_kwargs["pairs_per_epoch"] = int(kv["pairs_per_epoch"])
    if "batch_sizes" in kv:
        sched_kwargs["batch_sizes"] = as_int_list(kv["batch_sizes"])
    if "learning_rates" in kv:
        sched_kwargs["learning_rates"] = as_float_list(kv["learning_rates"])
    if "beta_per_epoch" in kv:
        sched_kwargs["beta_per_epoch"] = as_float_list(kv["beta_per_epoch"])
    if "desync" in kv:
        sched_kwargs["desync"] = as_bool(kv["desync"])
    if "desync_max_shift" in kv:
        sched_kwargs["desync_max_shift"] = int(kv["desync_max_shift"])
    if "eps_d" in kv:
        sched_kwargs["eps_d"] = float(kv["eps_d"])
    spec_kwargs: dict = {}
    if "taps_per_bs" in kv:
        spec_kwargs["taps_per_bs"] = int(kv["taps_per_bs"])
    if "log_floor" in kv:
        spec_kwargs["log_floor"] = float(kv["log_floor"])
    if spec_kwargs:
        sched_kwargs["feature_spec"] = FeatureSpec(**spec_kwargs)
    sched_kwargs["seed"] = config.seed if config.seed is not None else int(kv.get("seed", 0))

    epochs = sched_kwargs.get("epochs", 6)
    if "batch_sizes" not in sched_kwargs and epochs != 6:
        sched_kwargs["batch_sizes"] = tuple(
            trainer.TrainSchedule.batch_sizes[min(i, 5)] for i in range(epochs))
    if "learning_rates" not in sched_kwargs and epochs != 6:
        sched_kwargs["learning_rates"] = tuple(
            trainer.TrainSchedule.learning_rates[min(i, 5)] for i in range(epochs))

    uncertainty_kwargs = {k: (int(kv[k]) if k == "window" else float(kv[k]))
                          for k in _UNCERTAINTY_KEYS if k in kv}
    baseline_kwargs = {"knn_k": int(kv.get("knn_k", 20)),
                       "v_max": float(kv.get("v_max", 0.5))}
    return trainer.TrainSchedule(**sched_kwargs), uncertainty_kwargs, baseline_kwargs


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(config: RunConfig) -> int:
    if config.scenario is not None:
        _require_file(config.scenario, "scenario")
    out_path = _require_sink(config.output, "dataset output")
    overrides = dict(config.overrides)
    if config.seed is not None:
        overrides["seed"] = str(config.seed)
    scenario = sim.load_scenario(config.scenario, overrides)
    dataset = sim.simulate_dataset(scenario)
    write_dataset_file(dataset, out_path)
    cfg = scenario.config
    print(f"wrote {out_path}: L={len(dataset)} B={cfg.num_bs} "
          f"N_sub={cfg.num_subcarriers} duration={scenario.duration}s")
    return 0


def cmd_train(config: RunConfig) -> int:
    data_path = _require_file(config.dataset, "dataset")
    model_path = _require_sink(config.model, "model output")
    if config.report is not None:
        _require_sink(config.report, "training report")
    if config.loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}")
    schedule, unc_kwargs, base_kwargs = _train_settings(config)
    dataset = read_dataset_file(data_path)

    if config.loss == "doppler":
        if dataset.config.num_bs < 2:
            raise ValueError("the doppler loss needs at least two antennas")
        track = phase.integrate_offsets(dataset)
        track, diag = phase.refine_with_csi(track, dataset)
        if diag.warned:
            print(f"warning: {len(diag.flagged)} of {diag.n_steps} refinement "
                  "steps exceeded the trust threshold", file=sys.stderr)
        uncertainty = uncertainty_from_dataset(dataset, **unc_kwargs)
        model, report = trainer.train_doppler(dataset, track, uncertainty, schedule)
    else:
        dmatrix = baselines.cira_matrix(dataset)
        if config.loss == "fused":
            dmatrix = baselines.fuse_with_timestamps(dmatrix, dataset.timestamps,
                                                     v_max=base_kwargs["v_max"])
        geo = baselines.geodesic(dmatrix, k=base_kwargs["knn_k"])
        model, report = trainer.train_dissimilarity(dataset, geo, schedule)

    fcf.save_model_file(model, model_path)
    if config.report is not None:
        with open(config.report, "w", encoding="utf-8") as fh:
            trainer.write_training_report(report, fh)
    for i, (loss, wall) in enumerate(zip(report.epoch_losses, report.wall_seconds)):
        print(f"epoch {i + 1}: mean loss {loss:.6g} ({wall:.1f} s)")
    print(f"wrote {model_path}")
    return 0


def _estimates_and_truths(config: RunConfig):
    data_path = _require_file(config.dataset, "dataset")
    dataset = read_dataset_file(data_path)
    truths = dataset.position_array()[:, :2]
    if config.model == "oracle":
        # documented testing stub: maps every datapoint to its ground truth
        return truths.copy(), truths, dataset
    model = fcf.load_model_file(_require_file(config.model, "model"))
    return fcf.estimate_positions(model, dataset), truths, dataset


def cmd_evaluate(config: RunConfig) -> int:
    if config.transform not in TRANSFORMS:
        raise ValueError(f"transform must be one of {TRANSFORMS}")
    report_path = _require_sink(config.report, "evaluation report")
    if config.ecdf is not None:
        _require_sink(config.ecdf, "ecdf output")
    estimates, truths, _ = _estimates_and_truths(config)
    report = evaluation.evaluate_chart(estimates, truths,
                                       use_affine=(config.transform == "affine"),
                                       k=config.chart_k)
    with open(report_path, "w", encoding="utf-8") as fh:
        evaluation.write_report(report, fh)
    if config.ecdf is not None:
        with open(config.ecdf, "w", encoding="utf-8") as fh:
            evaluation.write_ecdf(report, fh)
    print(f"mae={report.mae:.4f} drms={report.drms:.4f} cep={report.cep:.4f} "
          f"r95={report.r95:.4f} ct={report.ct:.4f} tw={report.tw:.4f} "
          f"ks={report.ks:.4f}")
    return 0


def cmd_chart(config: RunConfig) -> int:
    out_path = _require_sink(config.output, "chart output")
    if config.svg is not None:
        _require_sink(config.svg, "svg output")
    estimates, truths, _ = _estimates_and_truths(config)
    with open(out_path, "w", encoding="utf-8") as fh:
        if config.svg is not None:
            with open(config.svg, "w", encoding="utf-8") as svg:
                evaluation.export_chart(estimates, truths, fh, svg_sink=svg)
        else:
            evaluation.export_chart(estimates, truths, fh)
    print(f"wrote {out_path}")
    return 0


def cmd_phase_dump(config: RunConfig) -> int:
    data_path = _require_file(config.dataset, "dataset")
    out_path = _require_sink(config.output, "phase dump")
    unknown = sorted(set(config.overrides) - set(_UNCERTAINTY_KEYS))
    if unknown:
        raise ValueError(f"unknown uncertainty key(s): {', '.join(unknown)}")
    unc_kwargs = {k: (int(v) if k == "window" else float(v))
                  for k, v in config.overrides.items()}
    dataset = read_dataset_file(data_path)
    track = phase.integrate_offsets(dataset)
    track, _ = phase.refine_with_csi(track, dataset)
    track = attach_uncertainty(track, uncertainty_from_dataset(dataset, **unc_kwargs))
    with open(out_path, "w", encoding="utf-8") as fh:
        phase.write_phase_csv(track, fh)
    print(f"wrote {out_path}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dopplerchart",
        description="Channel charting from Doppler-induced differential phases")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate", help="synthesize a dataset")
    p.add_argument("--scenario", help="key-value scenario file (defaults apply)")
    p.add_argument("--output", required=True, help="DPCC output path")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")

    p = sub.add_parser("train", help="train a charting model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True, help="FCF1 model output path")
    p.add_argument("--loss", choices=LOSSES, default="doppler")
    p.add_argument("--report", help="training report output path")
    p.add_argument("--schedule", help="key-value schedule file")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")

    p = sub.add_parser("evaluate", help="evaluate a model against ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True,
                   help="FCF1 model path, or 'oracle' for the ground-truth stub")
    p.add_argument("--transform", choices=TRANSFORMS, default="none")
    p.add_argument("--report", required=True)
    p.add_argument("--ecdf")
    p.add_argument("--chart-k", type=int, dest="chart_k")

    p = sub.add_parser("chart", help="export estimates vs. truth as CSV/SVG")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--svg")

    p = sub.add_parser("phase-dump", help="CSV of tracked phases per antenna")
    p.add_argument("--dataset", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")

    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "chart": cmd_chart,
    "phase-dump": cmd_phase_dump,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    kwargs = {k: v for k, v in vars(ns).items() if v is not None}
    overrides = kwargs.pop("overrides", [])
    try:
        config = RunConfig(**kwargs, overrides=_parse_overrides(overrides))
        # single-threaded BLAS keeps reductions bit-reproducible; CHART_THREADS
        # still fans out the row-parallel stages
        with threadpool_limits(limits=1):
            return _COMMANDS[config.subcommand](config)
    except (ValueError, DpccFormatError, ModelFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except trainer.TrainingDivergedError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
