"""Command line entry points.

Five subcommands cover the repository's workflows:

    theory    linear-regression experiments with closed-form cross-checks
    gen-data  scripted-expert demonstrations plus play records
    train     one- or two-phase policy training per method
    eval      success rates on fresh seen/unseen scenes, with plots
    serve     teleoperation web service for human demonstrations

Every knob can come from a JSON config file (--config), with explicit
flags taking precedence.  Outputs land under --out, defaulting to
directories beneath the data root (CIVIL_DATA_ROOT or ./civil_data).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .. import learn, model, pipeline, theory, world
from .config import (
    RunConfig,
    data_root,
    default_dataset_dir,
    default_run_dir,
)


class UsageError(ValueError):
    """Bad invocation: wrong flags, impossible config, missing inputs."""


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=1, sort_keys=True)
        handle.write("\n")


# --------------------------------------------------------------------------
# theory


def _entropy_record(config: RunConfig) -> dict:
    dims = list(config.feature_dims)
    num_samples, noise_std, feature_std = 400, 0.5, 1.0
    closed = [theory.estimator_entropy(d, num_samples, noise_std, feature_std) for d in dims]
    mc = [
        theory.estimator_entropy_mc(
            d, num_samples, noise_std, feature_std, trials=2048, seed=config.seed + d
        )
        for d in dims
    ]
    slope_fit = float(np.polyfit(dims, mc, 1)[0]) if len(dims) > 1 else float("nan")
    slope_closed = (
        (closed[-1] - closed[0]) / (dims[-1] - dims[0]) if len(dims) > 1 else float("nan")
    )
    d0 = dims[0]
    doubling_drop = theory.estimator_entropy(
        d0, num_samples, noise_std, feature_std
    ) - theory.estimator_entropy(d0, 2 * num_samples, noise_std, feature_std)
    return {
        "experiment": "entropy_scaling",
        "spec": {
            "feature_dims": dims,
            "num_samples": num_samples,
            "noise_std": noise_std,
            "feature_std": feature_std,
        },
        "metrics": {
            "closed_form": closed,
            "monte_carlo": mc,
            "mc_slope": slope_fit,
            "closed_form_slope": slope_closed,
            "sample_doubling_drop": doubling_drop,
            "expected_doubling_drop": d0 / 2.0 * float(np.log(2.0)),
        },
    }


def _covariance_records(config: RunConfig) -> List[dict]:
    records = []
    for d in (2, 8):
        for n in (200, 1000):
            spec = theory.RegressionSpec(
                state_dim=1,
                obs_dim=max(d - 1, 0),
                feature_dim=d,
                num_samples=n,
                noise_std=0.5,
                feature_std=1.0,
                seed=config.seed + 10 * d + n,
            )
            empirical, analytic = theory.estimator_covariance_mc(spec, config.mc_trials)
            rel = float(
                np.linalg.norm(empirical - analytic) / np.linalg.norm(analytic)
            )
            records.append(
                {
                    "experiment": "estimator_covariance",
                    "spec": {
                        "feature_dim": d,
                        "num_samples": n,
                        "noise_std": spec.noise_std,
                        "trials": config.mc_trials,
                    },
                    "metrics": {"relative_frobenius_error": rel},
                }
            )
    return records


def _confusion_record(config: RunConfig) -> dict:
    spec = theory.RegressionSpec(
        state_dim=1,
        obs_dim=1,
        feature_dim=2,
        num_samples=128,
        noise_std=0.0,
        correlation="duplicated",
        true_weights=np.array([[1.0], [0.0]]),
        seed=config.seed,
    )
    report = theory.confusion_experiment(spec, relevant_columns=(0,))
    probe = float((np.array([1.0, 0.0]) @ report.learned_weights).item())
    metrics = report.summary()
    metrics["learned_weights"] = report.learned_weights.ravel().tolist()
    metrics["probe_prediction_at_unit_state"] = probe
    metrics["probe_absolute_error"] = abs(probe - 1.0)
    return {
        "experiment": "confusion_duplicated",
        "spec": {
            "correlation": "duplicated",
            "num_samples": spec.num_samples,
            "noise_std": 0.0,
            "true_weights": [1.0, 0.0],
        },
        "metrics": metrics,
    }


def _plot_entropy(record: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dims = record["spec"]["feature_dims"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(dims, record["metrics"]["closed_form"], "-", label="closed form")
    ax.plot(dims, record["metrics"]["monte_carlo"], "o", ms=4, label="monte carlo")
    ax.set_xlabel("feature dimension")
    ax.set_ylabel("estimator entropy (nats)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_covariance(config: RunConfig, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    spec = theory.RegressionSpec(
        state_dim=1, obs_dim=3, feature_dim=4, num_samples=400, noise_std=0.5,
        seed=config.seed,
    )
    empirical, analytic = theory.estimator_covariance_mc(spec, config.mc_trials)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, mat, title in zip(
        axes, (empirical, analytic, np.abs(empirical - analytic)),
        ("empirical", "analytic", "|difference|"),
    ):
        im = ax.imshow(mat, cmap="viridis")
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cli_theory(config: RunConfig) -> Path:
    """Run the regression experiments; write a report and two plots."""
    out = Path(config.out) if config.out else default_run_dir(config, "theory")
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    entropy = _entropy_record(config)
    records = [entropy, *_covariance_records(config), _confusion_record(config)]
    _write_json(
        out / "theory_report.json",
        {"seed": config.seed, "records": records},
    )
    _plot_entropy(entropy, out / "entropy_vs_d.png")
    _plot_covariance(config, out / "covariance_heatmaps.png")
    config.save(out / "run_config.json")
    print(f"theory: {len(records)} experiments in {time.time() - started:.1f}s -> {out}")
    return out


# --------------------------------------------------------------------------
# data


def _build_dataset(config: RunConfig) -> pipeline.Dataset:
    return pipeline.build_dataset(
        config.task,
        n_demos=config.n_demos,
        n_play=config.n_play,
        seed=config.seed,
        noise_std=config.noise_std,
        dropout_prob=config.dropout_prob,
        validation_fraction=config.validation_fraction,
        play_observations=config.play_observations,
        action_noise=config.action_noise,
    )


def cli_gen_data(config: RunConfig) -> Path:
    """Generate and save a scripted dataset; same config gives same bytes."""
    out = Path(config.out) if config.out else default_dataset_dir(config)
    started = time.time()
    dataset = _build_dataset(config)
    pipeline.save_dataset(dataset, out)
    config.save(out / "run_config.json")
    frames = sum(ep.length for ep in dataset.episodes)
    print(
        f"gen-data: {len(dataset.episodes)} episodes ({frames} frames), "
        f"{len(dataset.play)} play records in {time.time() - started:.1f}s -> {out}"
    )
    return out


def _load_or_build_dataset(config: RunConfig) -> pipeline.Dataset:
    if config.data:
        return pipeline.load_dataset(config.data)
    return _build_dataset(config)


# --------------------------------------------------------------------------
# train


def _plot_losses(reports: List[learn.TrainReport], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(reports), figsize=(5 * len(reports), 3.5), squeeze=False)
    for ax, report in zip(axes[0], reports):
        epochs = [h["epoch"] for h in report.history]
        ax.plot(epochs, [h["total"] for h in report.history], label="train total")
        vals = [h.get("val_action_error") for h in report.history]
        if all(v is not None for v in vals):
            ax.plot(epochs, vals, label="val action error")
        ax.axvline(report.selected_epoch, color="gray", lw=0.8, ls=":")
        ax.set_title(f"{report.method} phase {report.phase}", fontsize=9)
        ax.set_xlabel("epoch")
        ax.set_yscale("log")
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cli_train(config: RunConfig) -> Path:
    """Train the configured method; save checkpoints, report, loss plots.

    Two-phase methods leave a phase-1 checkpoint beside the final one;
    --resume picks it up and reruns only the causal phase, which reproduces
    the remaining loss curve because phase 2 is seeded independently.
    """
    out = Path(config.out) if config.out else default_run_dir(config, "train")
    out.mkdir(parents=True, exist_ok=True)
    train_config = config.train_config()
    phase1_path = out / "phase1.pt"

    reports: List[learn.TrainReport]
    if config.resume:
        if config.method not in learn.PHASE2_METHODS:
            raise UsageError(f"method {config.method!r} trains in one phase; nothing to resume")
        if not phase1_path.exists():
            raise UsageError(f"no phase-1 checkpoint at {phase1_path}")
        bundle, extra = model.load_checkpoint(phase1_path)
        if extra.get("task") != config.task or extra.get("method") != config.method:
            raise UsageError(
                f"checkpoint was trained as {extra.get('method')} on {extra.get('task')}, "
                f"config says {config.method} on {config.task}"
            )
        dataset = _load_or_build_dataset(config)
        data = learn.TrainingData(dataset, config.validation_fraction)
        report1 = learn.TrainReport(**extra["report"])
        bundle, report2 = learn.train_phase2(data, bundle, train_config)
        reports = [report1, report2]
    else:
        dataset = _load_or_build_dataset(config)
        if dataset.task != config.task:
            raise UsageError(f"dataset at {config.data} holds task {dataset.task!r}")
        data = learn.TrainingData(dataset, config.validation_fraction)
        if config.method == "bc":
            bundle, report = learn.train_bc(data, train_config)
            reports = [report]
        else:
            bundle, report1 = learn.train_phase1(data, train_config)
            if config.method in learn.PHASE2_METHODS:
                model.save_checkpoint(
                    bundle,
                    phase1_path,
                    {
                        "task": config.task,
                        "method": config.method,
                        "report": report1.to_dict(),
                    },
                )
                bundle, report2 = learn.train_phase2(data, bundle, train_config)
                reports = [report1, report2]
            else:
                reports = [report1]

    extra = {
        "task": config.task,
        "method": config.method,
        "n_demos": config.n_demos,
        "reports": [r.to_dict() for r in reports],
        "run_config": config.to_dict(),
    }
    model.save_checkpoint(bundle, out / "model.pt", extra)
    _write_json(out / "train_report.json", [r.to_dict() for r in reports])
    _plot_losses(reports, out / "loss_curves.png")
    config.save(out / "run_config.json")
    best = min(h.get("val_action_error", h["total"]) for h in reports[-1].history)
    print(
        f"train: {config.method} on {config.task}, "
        f"{'+'.join(str(r.epochs_run) for r in reports)} epochs, "
        f"final-phase best {best:.4f} -> {out / 'model.pt'}"
    )
    return out


# --------------------------------------------------------------------------
# eval


def _plot_rates(report: learn.EvalReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(3.5, 3.2))
    ax.bar(
        ["seen", "unseen"],
        [report.success_rate_seen, report.success_rate_unseen],
        color=["#4878a8", "#c44e52"],
        width=0.55,
    )
    ax.set_ylim(0, 1)
    ax.set_ylabel("success rate")
    ax.set_title(f"{report.method} on {report.task}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _aggregate_eval_reports(out_root: Path) -> None:
    """Success-vs-demos table and curve across every saved eval report."""
    rows = []
    for path in sorted(out_root.glob("*/eval_report.json")):
        with open(path) as handle:
            rows.append(json.load(handle))
    rows = [r for r in rows if r.get("n_demos")]
    if not rows:
        return
    report_dir = data_root() / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    with open(report_dir / "success_table.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["task", "method", "n_demos", "seen", "unseen"])
        for r in rows:
            writer.writerow(
                [r["task"], r["method"], r["n_demos"],
                 f"{r['success_rate_seen']:.3f}", f"{r['success_rate_unseen']:.3f}"]
            )

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    methods = sorted({(r["task"], r["method"]) for r in rows})
    for task, method in methods:
        pts = sorted(
            (r["n_demos"], r["success_rate_unseen"])
            for r in rows
            if r["task"] == task and r["method"] == method
        )
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", ms=4,
                label=f"{method} ({task})")
    ax.set_xlabel("demonstrations")
    ax.set_ylabel("unseen success rate")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(report_dir / "success_vs_demos.png", dpi=120)
    plt.close(fig)


def cli_eval(config: RunConfig) -> learn.EvalReport:
    """Evaluate a saved checkpoint on fresh decorrelated scenes."""
    out = Path(config.out) if config.out else default_run_dir(config, "train")
    model_path = Path(config.model) if config.model else out / "model.pt"
    if not model_path.exists():
        raise UsageError(f"no checkpoint at {model_path}; train first or pass --model")
    bundle, extra = model.load_checkpoint(model_path)
    method = extra.get("method", config.method)
    task = extra.get("task", config.task)
    report = learn.evaluate(
        bundle,
        task,
        method=method,
        n_seen=config.n_seen,
        n_unseen=config.n_unseen,
        seed=config.eval_seed,
        horizon=config.horizon,
        n_demos=extra.get("n_demos", config.n_demos),
    )
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval_report.json", report.to_dict())
    _plot_rates(report, out / "success_rates.png")
    _aggregate_eval_reports(out.parent)
    print(
        f"eval: {method} on {task}: seen {report.success_rate_seen:.2f}, "
        f"unseen {report.success_rate_unseen:.2f} over {report.n_rollouts} rollouts"
    )
    return report


# --------------------------------------------------------------------------
# serve


def serve(config: RunConfig) -> None:
    import uvicorn

    from .service import create_app

    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")


# --------------------------------------------------------------------------
# parser and dispatch


def _parse_dims(text: str):
    parts = [p for p in text.replace(" ", "").split(",") if p]
    return tuple(int(p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="civil",
        description="Causal visual imitation learning lab: theory, data, training, "
        "evaluation, and a teleoperation service.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", type=Path, default=None, metavar="FILE",
                        help="JSON file of RunConfig fields; flags override it")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")

    th = sub.add_parser("theory", help="regression experiments and plots")
    common(th)
    th.add_argument("--dims", type=_parse_dims, default=None, dest="feature_dims",
                    metavar="D1,D2,...", help="feature dimensions for the entropy sweep")
    th.add_argument("--trials", type=int, default=None, dest="mc_trials")

    gd = sub.add_parser("gen-data", help="record scripted demonstrations and play")
    common(gd)
    gd.add_argument("--task", default=None, choices=world.TASK_NAMES)
    gd.add_argument("--n-demos", type=int, default=None)
    gd.add_argument("--n-play", type=int, default=None)
    gd.add_argument("--noise-std", type=float, default=None)
    gd.add_argument("--dropout-prob", type=float, default=None)
    gd.add_argument("--action-noise", type=float, default=None)
    gd.add_argument("--play-observations", type=int, default=None)

    tr = sub.add_parser("train", help="train one method on one task")
    common(tr)
    tr.add_argument("--task", default=None, choices=world.TASK_NAMES)
    tr.add_argument("--method", default=None, choices=learn.METHODS)
    tr.add_argument("--n-demos", type=int, default=None)
    tr.add_argument("--n-play", type=int, default=None)
    tr.add_argument("--data", default=None, help="dataset directory (else generated)")
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--causal-epochs", type=int, default=None)
    tr.add_argument("--learning-rate", type=float, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--resume", action="store_const", const=True, default=None,
                    help="continue a two-phase run from its phase-1 checkpoint")

    ev = sub.add_parser("eval", help="roll out a trained checkpoint")
    common(ev)
    ev.add_argument("--task", default=None, choices=world.TASK_NAMES)
    ev.add_argument("--method", default=None, choices=learn.METHODS)
    ev.add_argument("--model", default=None, help="checkpoint path (default <out>/model.pt)")
    ev.add_argument("--n-seen", type=int, default=None)
    ev.add_argument("--n-unseen", type=int, default=None)
    ev.add_argument("--eval-seed", type=int, default=None)
    ev.add_argument("--horizon", type=int, default=None)

    sv = sub.add_parser("serve", help="run the teleoperation service")
    common(sv)
    sv.add_argument("--task", default=None, choices=world.TASK_NAMES)
    sv.add_argument("--host", default=None)
    sv.add_argument("--port", type=int, default=None)
    sv.add_argument("--budget-seconds", type=float, default=None)
    sv.add_argument("--ui-dir", default=None, dest="ui_dir",
                    help="directory of built UI files to serve at /")

    return parser


COMMANDS = {
    "theory": cli_theory,
    "gen-data": cli_gen_data,
    "train": cli_train,
    "eval": cli_eval,
    "serve": serve,
}


def load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        k: v
        for k, v in vars(args).items()
        if k not in ("command", "config") and v is not None
    }
    if args.config is not None:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig.from_sources(overrides)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args)
        COMMANDS[args.command](config)
    except (UsageError, ValueError, pipeline.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
