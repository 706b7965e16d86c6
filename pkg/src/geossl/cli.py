"""Experiment runner: ``train``, ``eval``, ``sweep``, ``report`` and ``datasets fetch``.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 training divergence.
Runs live under ``--runs-dir`` (default ``./runs``), one directory per run id,
each with a ``manifest.json`` listing every artifact it owns.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import data as data_mod
from .config import ConfigError, ExperimentConfig, build_config, config_from_dict, load_config
from .evaluation import EvalReport, aggregate_trials, evaluate_checkpoint
from .objectives import DivergenceError
from .training import CheckpointSeries, run_training

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_DIVERGENCE = 0, 1, 2, 3
MISSING = "—"

log = logging.getLogger("geossl")


class CliError(click.ClickException):
    def __init__(self, message, code=EXIT_RUNTIME):
        super().__init__(message)
        self.exit_code = code


def code_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:8]


def variant_label(cfg: ExperimentConfig) -> str:
    """Row label in the paper's table style, e.g. ``SimCLR + A``."""
    name = {"simclr": "SimCLR", "byol": "BYOL"}[cfg.method]
    short = {"affine": "A", "homography": "H"}
    if cfg.module == "none":
        return name
    label = f"{name} + {short.get(cfg.module, cfg.module)}"
    if cfg.loss_variant != "regression":
        label += f" ({cfg.loss_variant})"
    return label


# --- manifests ---

def write_manifest(run_dir: Path, manifest: dict) -> None:
    tmp = run_dir / ".manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(run_dir / "manifest.json")


def read_manifest(run_dir: Path) -> dict:
    return json.loads((run_dir / "manifest.json").read_text())


def new_run_dir(runs_dir: Path, cfg: ExperimentConfig, run_id: str | None = None) -> tuple[str, Path]:
    base = run_id or f"{cfg.method}-{cfg.module}-{cfg.loss_variant}-s{cfg.seed}-{config_hash(cfg)}"
    candidate, i = base, 1
    while (runs_dir / candidate).exists():
        if run_id is not None:
            raise CliError(f"run id {run_id!r} already exists", EXIT_VALIDATION)
        i += 1
        candidate = f"{base}-{i}"
    path = runs_dir / candidate
    path.mkdir(parents=True)
    return candidate, path


def load_data_for(cfg: ExperimentConfig, data_root: str | None, name: str | None = None):
    root = cfg.data.root or data_root
    return data_mod.load_dataset(
        name or cfg.data.name,
        root,
        download=cfg.data.download,
        n_train=cfg.data.n_train,
        n_test=cfg.data.n_test,
        seed=cfg.data.seed,
    )


def do_train(cfg: ExperimentConfig, runs_dir: Path, data_root=None, run_id=None, resume_dir=None) -> dict:
    """Train one run and persist its manifest; returns the final manifest."""
    if resume_dir is not None:
        run_dir = Path(resume_dir)
        manifest = read_manifest(run_dir)
        cfg = config_from_dict(manifest["config"])
        run_id = manifest["run_id"]
    else:
        run_id, run_dir = new_run_dir(runs_dir, cfg, run_id)
        manifest = {
            "run_id": run_id,
            "config": cfg.to_dict(),
            "label": variant_label(cfg),
            "code_hash": code_hash(),
            "status": "running",
            "artifacts": {"metrics": "metrics.jsonl", "checkpoints": [], "reports": []},
        }
    manifest["status"] = "running"
    write_manifest(run_dir, manifest)
    try:
        dataset = load_data_for(cfg, data_root)
        series = run_training(cfg, dataset, run_dir, resume=resume_dir is not None)
    except DivergenceError as exc:
        manifest.update(status="failed", error=str(exc), diagnostics=exc.diagnostics)
        write_manifest(run_dir, manifest)
        raise
    except Exception as exc:
        manifest.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        if (run_dir / "checkpoints.json").exists():
            manifest["artifacts"]["checkpoints"] = [e.path.name for e in CheckpointSeries.from_dir(run_dir)]
        write_manifest(run_dir, manifest)
        raise
    manifest["artifacts"]["checkpoints"] = [e.path.name for e in series]
    manifest["status"] = "completed"
    manifest.pop("error", None)
    write_manifest(run_dir, manifest)
    return manifest


def resolve_run(runs_dir: Path, ref: str) -> Path:
    path = Path(ref)
    if path.is_dir() and (path / "manifest.json").exists():
        return path
    if (runs_dir / ref / "manifest.json").exists():
        return runs_dir / ref
    raise CliError(f"no run or checkpoint found for {ref!r}")


def do_eval(run_dir: Path, data_root=None, dataset_name=None, all_checkpoints=False, epoch=None,
            seed=0) -> dict:
    """Linear-evaluate checkpoints of a run; writes reports and returns ``{epoch: report}``."""
    manifest = read_manifest(run_dir)
    cfg = config_from_dict(manifest["config"])
    dataset = load_data_for(cfg, data_root, dataset_name)
    series = CheckpointSeries.from_dir(run_dir)
    if all_checkpoints:
        entries = list(series)
    elif epoch is not None:
        entries = [e for e in series if e.epoch == epoch]
        if not entries:
            raise CliError(f"run {manifest['run_id']} has no checkpoint at epoch {epoch}")
    else:
        entries = [series.entries[-1]]
    out_dir = run_dir / "eval" / dataset.name
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = {}
    for entry in entries:
        if not entry.path.exists():
            raise CliError(f"missing checkpoint {entry.path}")
        report = evaluate_checkpoint(entry.path, dataset, cfg.eval, seed)
        stem = f"epoch{entry.epoch:04d}"
        (out_dir / f"{stem}.json").write_text(report.to_text())
        (out_dir / f"{stem}_confusion.csv").write_text(report.confusion_csv(dataset.class_names))
        for name in (f"{stem}.json", f"{stem}_confusion.csv"):
            rel = str(Path("eval") / dataset.name / name)
            if rel not in manifest["artifacts"]["reports"]:
                manifest["artifacts"]["reports"].append(rel)
        reports[entry.epoch] = report
    if all_checkpoints:
        curve = [{"epoch": e, "accuracy": r.accuracy} for e, r in sorted(reports.items())]
        (out_dir / "curve.json").write_text(json.dumps(curve, indent=2))
        rel = str(Path("eval") / dataset.name / "curve.json")
        if rel not in manifest["artifacts"]["reports"]:
            manifest["artifacts"]["reports"].append(rel)
    write_manifest(run_dir, manifest)
    return reports


# --- sweep tables ---

def _fmt(x, digits=2):
    return MISSING if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.{digits}f}"


def sweep_table(cells: list[dict], axis: str, confidence: float = 0.99):
    """Aggregate cell results into rows ``(value, n, mean, half_width, best)``; accuracies in percent."""
    values = []
    for cell in cells:
        if cell["value"] not in values:
            values.append(cell["value"])
    rows = []
    for value in values:
        accs = [c["accuracy"] * 100.0 for c in cells if c["value"] == value and c["status"] == "completed"]
        failed = sum(1 for c in cells if c["value"] == value and c["status"] != "completed")
        if accs:
            mean, half = aggregate_trials(accs, confidence)
        else:
            mean, half = float("nan"), float("nan")
        rows.append({"value": value, "n": len(accs), "failed": failed, "mean": mean, "half_width": half})
    finite = [r["mean"] for r in rows if not math.isnan(r["mean"])]
    best = max(finite) if finite else None
    for r in rows:
        r["best"] = best is not None and r["mean"] == best
    return rows


def render_table(rows, axis, confidence=0.99) -> str:
    ci = "± " + format(confidence * 100, "g") + "% CI"
    head = f"{axis:<24} {'n':>3} {'accuracy %':>12} {ci + ' (pts)':>16} {ci + ' (frac)':>16}"
    lines = [head, "-" * len(head)]
    for r in rows:
        mark = " *" if r["best"] else ""
        extra = f"  ({r['failed']} failed)" if r["failed"] else ""
        frac = _fmt(r["half_width"] / 100.0, 4)
        lines.append(f"{str(r['value']):<24} {r['n']:>3} {_fmt(r['mean']):>12} {_fmt(r['half_width']):>16} "
                     f"{frac:>16}{mark}{extra}")
    lines.append("* best mean")
    return "\n".join(lines) + "\n"


def rows_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["value", "n", "failed", "mean_acc", "ci_half_width", "ci_half_width_frac", "best"])
    for r in rows:
        writer.writerow([r["value"], r["n"], r["failed"], _fmt(r["mean"], 4), _fmt(r["half_width"], 4),
                         _fmt(r["half_width"] / 100.0, 6), int(r["best"])])
    return buf.getvalue()


def _sweep_cell(args):
    cfg_dict, runs_dir, data_root, value, seed, epoch = args
    logging.basicConfig(level=logging.WARNING)
    cfg = config_from_dict(cfg_dict)
    cell = {"value": value, "seed": seed}
    try:
        manifest = do_train(cfg, Path(runs_dir), data_root)
        run_dir = Path(runs_dir) / manifest["run_id"]
        reports = do_eval(run_dir, data_root, epoch=epoch)
        cell.update(status="completed", run_id=manifest["run_id"],
                    accuracy=next(iter(reports.values())).accuracy)
    except Exception as exc:  # a failed cell is recorded and the sweep continues
        cell.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return cell


def do_sweep(base_file, axis, values, seeds, overrides=(), runs_dir=Path("runs"), data_root=None,
             name=None, jobs=1, epoch=None, confidence=0.99):
    """Run the ``values x seeds`` grid and write ``cells.json``, ``table.txt``, ``table.csv``."""
    base_values = {}
    if base_file is not None:
        import yaml

        base_values = yaml.safe_load(Path(base_file).read_text()) or {}
    probe = build_config(base_values, list(overrides))
    if axis not in _config_keys(probe.to_dict()):
        raise ConfigError(f"sweep axis {axis!r} is not a config key")
    sweep_name = name or f"sweep-{axis}"
    sweep_dir = Path(runs_dir) / sweep_name
    sweep_dir.mkdir(parents=True, exist_ok=True)
    jobs_args = []
    for value in values:
        for seed in seeds:
            cfg = build_config(base_values, [*overrides, f"{axis}={value}", f"seed={seed}"])
            jobs_args.append((cfg.to_dict(), str(sweep_dir), data_root, value, seed, epoch))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_sweep_cell, jobs_args))
    else:
        cells = [_sweep_cell(a) for a in jobs_args]
    (sweep_dir / "cells.json").write_text(json.dumps({"axis": axis, "confidence": confidence, "cells": cells},
                                                     indent=2, sort_keys=True))
    return write_sweep_tables(sweep_dir)


def write_sweep_tables(sweep_dir: Path):
    """Rebuild the sweep tables from ``cells.json`` alone."""
    stored = json.loads((sweep_dir / "cells.json").read_text())
    rows = sweep_table(stored["cells"], stored["axis"], stored["confidence"])
    (sweep_dir / "table.txt").write_text(render_table(rows, stored["axis"], stored["confidence"]))
    (sweep_dir / "table.csv").write_text(rows_csv(rows))
    return rows


def _config_keys(tree, prefix=""):
    keys = set()
    for k, v in tree.items():
        keys.add(prefix + k)
        if isinstance(v, dict):
            keys |= _config_keys(v, prefix + k + ".")
    return keys


# --- reports ---

def _curve_for(run_dir: Path, data_root=None) -> list[dict]:
    manifest = read_manifest(run_dir)
    cfg = config_from_dict(manifest["config"])
    ds_name = cfg.data.name
    path = run_dir / "eval" / ds_name / "curve.json"
    if not path.exists():
        do_eval(run_dir, data_root, all_checkpoints=True)
    return json.loads(path.read_text())


def collect_curves(run_dirs, data_root=None) -> dict:
    """Group learning curves by variant label: ``{label: {epoch: [acc, ...]}}``."""
    groups: dict[str, dict] = {}
    signatures = set()
    for run_dir in run_dirs:
        manifest = read_manifest(run_dir)
        if manifest["status"] != "completed":
            raise CliError(f"run {manifest['run_id']} is not completed")
        cfg = manifest["config"]
        signatures.add((cfg["data"]["name"], cfg["epochs"], cfg["preset"]))
        label = manifest.get("label") or variant_label(config_from_dict(cfg))
        for point in _curve_for(Path(run_dir), data_root):
            groups.setdefault(label, {}).setdefault(point["epoch"], []).append(point["accuracy"])
    if len(signatures) > 1:
        warnings.warn(f"comparing runs with different dataset/epochs/preset: {sorted(signatures)}")
    return groups


def curves_csv(groups) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "epoch", "mean_acc", "std", "n_seeds"])
    for label, per_epoch in groups.items():
        for epoch, accs in sorted(per_epoch.items()):
            writer.writerow([label, epoch, f"{np.mean(accs):.4f}", f"{np.std(accs):.4f}", len(accs)])
    return buf.getvalue()


def curves_table(groups) -> str:
    epochs = sorted({e for per in groups.values() for e in per})
    width = max([len(k) for k in groups] + [8])
    head = f"{'method':<{width}} " + " ".join(f"{'ep ' + str(e):>14}" for e in epochs)
    lines = [head, "-" * len(head)]
    finals = {label: np.mean(per[max(per)]) for label, per in groups.items()}
    best = max(finals.values())
    for label, per in groups.items():
        cells = []
        for e in epochs:
            accs = per.get(e)
            if not accs:
                cells.append(f"{MISSING:>14}")
            elif len(accs) == 1:
                # a single seed has no spread to report
                cells.append(f"{100 * accs[0]:6.2f} ± {MISSING:>5}")
            else:
                cells.append(f"{100 * np.mean(accs):6.2f} ± {100 * np.std(accs):5.2f}")
        mark = " *" if finals[label] == best else ""
        lines.append(f"{label:<{width}} " + " ".join(f"{c:>14}" for c in cells) + mark)
    return "\n".join(lines) + "\n"


def curves_plot(groups, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, per in groups.items():
        epochs = sorted(per)
        mean = np.array([np.mean(per[e]) for e in epochs]) * 100
        std = np.array([np.std(per[e]) for e in epochs]) * 100
        ax.plot(epochs, mean, marker="o", label=label)
        ax.fill_between(epochs, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel("epoch")
    ax.set_ylabel("linear eval accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# --- click commands ---

@click.group()
@click.option("--runs-dir", type=click.Path(file_okay=False, path_type=Path), default=Path("runs"),
              show_default=True)
@click.option("--data-root", envvar=data_mod.DATA_ROOT_ENV, default=None,
              help=f"dataset root (also ${data_mod.DATA_ROOT_ENV})")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def cli(ctx, runs_dir, data_root, verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    ctx.obj = {"runs_dir": runs_dir, "data_root": data_root}


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="dotted config override")
@click.option("--run-id", default=None)
@click.option("--resume", "resume_ref", default=None, help="resume an interrupted run by id or path")
@click.pass_obj
def train(obj, config_path, overrides, run_id, resume_ref):
    """Self-supervised training for one config."""
    if resume_ref is not None:
        manifest = do_train(None, obj["runs_dir"], obj["data_root"],
                            resume_dir=resolve_run(obj["runs_dir"], resume_ref))
    else:
        cfg = load_config(config_path, list(overrides))
        manifest = do_train(cfg, obj["runs_dir"], obj["data_root"], run_id)
    click.echo(json.dumps({"run_id": manifest["run_id"], "status": manifest["status"]}))


@cli.command(name="eval")
@click.argument("ref")
@click.option("--dataset", "dataset_name", default=None, help="evaluate on another dataset, e.g. svhn-6v9")
@click.option("--all-checkpoints", is_flag=True, help="evaluate every checkpoint (learning curve)")
@click.option("--epoch", type=int, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_obj
def eval_cmd(obj, ref, dataset_name, all_checkpoints, epoch, seed):
    """Linear evaluation of a run (by id or directory) or a single checkpoint file."""
    path = Path(ref)
    if path.is_file():
        from .training import load_checkpoint

        _, payload = load_checkpoint(path)
        cfg = config_from_dict(payload["config"])
        dataset = load_data_for(cfg, obj["data_root"], dataset_name)
        report = evaluate_checkpoint(path, dataset, cfg.eval, seed)
        click.echo(report.to_text())
        return
    reports = do_eval(resolve_run(obj["runs_dir"], ref), obj["data_root"], dataset_name, all_checkpoints,
                      epoch, seed)
    for e, r in sorted(reports.items()):
        click.echo(f"epoch {e:4d}  accuracy {100 * r.accuracy:6.2f}%  n_test {r.n_test}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--axis", required=True, help="dotted config key to vary")
@click.option("--values", required=True, help="comma-separated values")
@click.option("--seeds", default="0", show_default=True, help="comma-separated seeds")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--name", default=None, help="sweep directory name under --runs-dir")
@click.option("--epoch", type=int, default=None, help="checkpoint epoch to evaluate (default: final)")
@click.option("--confidence", type=float, default=0.99, show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.pass_obj
def sweep(obj, config_path, axis, values, seeds, overrides, name, epoch, confidence, jobs):
    """Train and evaluate the cross product of axis values and seeds."""
    import yaml

    vals = [yaml.safe_load(v) for v in values.split(",")]
    seed_list = [int(s) for s in seeds.split(",")]
    do_sweep(config_path, axis, vals, seed_list, list(overrides), obj["runs_dir"], obj["data_root"],
             name, jobs, epoch, confidence)
    sweep_dir = obj["runs_dir"] / (name or f"sweep-{axis}")
    click.echo((sweep_dir / "table.txt").read_text(), nl=False)


@cli.command()
@click.argument("refs", nargs=-1, required=True)
@click.option("--format", "fmt", type=click.Choice(["text-table", "csv", "plot"]), default="text-table",
              show_default=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_obj
def report(obj, refs, fmt, out):
    """Learning-curve tables and plots across runs; never retrains."""
    run_dirs = [resolve_run(obj["runs_dir"], r) for r in refs]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        groups = collect_curves(run_dirs, obj["data_root"])
    for w in caught:
        click.echo(f"warning: {w.message}", err=True)
    out = out or obj["runs_dir"] / "reports"
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = out / "curves.csv"
        path.write_text(curves_csv(groups))
    elif fmt == "plot":
        path = curves_plot(groups, out / "curves.png")
    else:
        path = out / "curves.txt"
        path.write_text(curves_table(groups))
        click.echo(path.read_text(), nl=False)
    click.echo(str(path))


@cli.group()
def datasets():
    """Dataset management."""


@datasets.command()
@click.argument("name")
@click.pass_obj
def fetch(obj, name):
    """Download and verify benchmark archives."""
    for path in data_mod.fetch_dataset(name, obj["data_root"]):
        click.echo(str(path))


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="geossl", standalone_mode=False)
    except click.exceptions.Abort:
        return EXIT_RUNTIME
    except click.ClickException as exc:
        exc.show()
        return EXIT_VALIDATION if isinstance(exc, click.UsageError) else exc.exit_code
    except ConfigError as exc:
        click.echo(f"validation error: {exc}", err=True)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        click.echo(f"training diverged: {exc} {exc.diagnostics}", err=True)
        return EXIT_DIVERGENCE
    except Exception as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
