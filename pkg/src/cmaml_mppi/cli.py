"""Command-line entry point: ``cmaml-mppi <subcommand> [options]``.

Subcommands run the pipeline stages in order: ``pretrain`` and ``finetune``
produce the shared checkpoint, ``record-log`` drives the fixed model to make
the inference logs, ``infer-exp`` and ``control-exp`` run the comparisons,
``readapt-exp`` runs the A-B-A re-adaptation check and ``report`` rebuilds
tables and figures from saved results.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nn, report
from .config import ExperimentConfig, load_config, to_dict
from .dynamics import Model
from .experiments import ReadaptConfig, costmap_for, record_log, run_control, run_inference, run_readaptation
from .pretrain import (
    collect_data, decimate, finetune_on_track, make_windows, terminal_position_errors, train_offline, evaluate,
)
from .sim import cement_map
from .trajlog import read_csv, write_csv

log = logging.getLogger("cmaml_mppi")


def _paths(cfg: ExperimentConfig):
    out = cfg.output_dir
    return {
        "pretrained": out / "pretrained.npz",
        "finetuned": out / "finetuned.npz",
        "logs": out / "logs",
    }


def _load_model(path: Path, stage: str) -> Model:
    if not path.exists():
        raise SystemExit(f"missing checkpoint {path}; run `cmaml-mppi {stage}` first")
    theta, norm, _ = nn.load_checkpoint(path)
    return Model(theta, norm)


def pretrain_model(cfg: ExperimentConfig):
    """Collect cement data, train, validate. Returns ``(model, info)``."""
    pc = cfg.pretrain
    rng = np.random.default_rng(pc.seed)
    data = collect_data(cfg.sim, cement_map(cfg.surfaces.mu_cement), pc.duration, rng, pc.excitation)
    segments = [decimate(s, cfg.mppi.dt) for s in data]
    windows = make_windows(segments, pc.train.horizon, pc.train.stride)
    held = windows[::pc.holdout_every]
    train = [w for i, w in enumerate(windows) if i % pc.holdout_every]
    model, history = train_offline(train, pc.train, rng)
    err = terminal_position_errors(model, held)
    info = {
        "n_train_windows": len(train),
        "n_holdout_windows": len(held),
        "loss_history": history,
        "holdout_loss": evaluate(model, held),
        "holdout_terminal_error_mean": float(err.mean()),
        "holdout_terminal_error_max": float(err.max()),
    }
    return model, info


def finetune_model(cfg: ExperimentConfig, model: Model) -> Model:
    """Closed-loop cement laps with gradient-descent adaptation from the pretrained weights."""
    return finetune_on_track(model, cfg.sim, costmap_for(cfg), cfg.track, cfg.mppi, cfg.pretrain.finetune_laps,
                             cfg.pretrain.finetune_seed, replace(cfg.adapt, mode="gd"),
                             cement_map(cfg.surfaces.mu_cement))


def cmd_pretrain(cfg, args):
    paths = _paths(cfg)
    t0 = time.perf_counter()
    model, info = pretrain_model(cfg)
    paths["pretrained"].parent.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(paths["pretrained"], model.theta, model.norm, {"stage": "pretrained"})
    report.write_json(cfg.output_dir / "pretrain.json", info)
    print(f"pretrained: loss {info['loss_history'][0]:.4g} -> {info['loss_history'][-1]:.4g}, "
          f"held-out 2 s terminal error mean {info['holdout_terminal_error_mean']:.3f} m "
          f"({time.perf_counter() - t0:.0f} s)")


def cmd_finetune(cfg, args):
    paths = _paths(cfg)
    model = _load_model(paths["pretrained"], "pretrain")
    tuned = finetune_model(cfg, model)
    nn.save_checkpoint(paths["finetuned"], tuned.theta, tuned.norm, {"stage": "finetuned"})
    print(f"fine-tuned over {cfg.pretrain.finetune_laps} cement laps -> {paths['finetuned']}")


def cmd_record_log(cfg, args):
    paths = _paths(cfg)
    model = _load_model(paths["finetuned"], "finetune")
    paths["logs"].mkdir(parents=True, exist_ok=True)
    for seed in cfg.experiment.inference_seeds:
        run = record_log(cfg, model, seed)
        write_csv(run.trajectory, paths["logs"] / f"drive_seed{seed}.csv")
        print(f"seed {seed}: {len(run.trajectory)} samples, {len(run.laps)} laps")


def cmd_infer_exp(cfg, args):
    paths = _paths(cfg)
    model = _load_model(paths["finetuned"], "finetune")
    logs = {}
    for seed in cfg.experiment.inference_seeds:
        p = paths["logs"] / f"drive_seed{seed}.csv"
        if not p.exists():
            raise SystemExit(f"missing drive log {p}; run `cmaml-mppi record-log` first")
        logs[seed] = read_csv(p)
    summary, replays = run_inference(cfg, model, logs)
    for seed, res in replays.items():
        report.write_replays(cfg.output_dir, seed, res)
    report.write_json(cfg.output_dir / "inference" / "summary.json", summary)
    report.render_report(cfg.output_dir, cfg.track)
    _print_table(*report.inference_table(summary), "cumulative mean N_c-step loss")


def cmd_control_exp(cfg, args):
    paths = _paths(cfg)
    model = _load_model(paths["finetuned"], "finetune")
    summary = run_control(cfg, model, on_run=lambda m, s, run: report.write_control_run(cfg.output_dir, m, s, run))
    report.write_json(cfg.output_dir / "control" / "summary.json", summary)
    report.render_report(cfg.output_dir, cfg.track)
    _print_table(*report.control_table(summary), "mean control error, laps "
                 f"{cfg.experiment.first_scored_lap}-{cfg.experiment.laps}")


def cmd_readapt_exp(cfg, args):
    model = _load_model(_paths(cfg)["finetuned"], "finetune")
    out = run_readaptation(cfg, model, cfg.experiment.seeds, ReadaptConfig())
    report.write_json(cfg.output_dir / "readapt" / "summary.json", out)
    print(f"updates to threshold on the second A visit: gd {out['gd_mean_second_visit_updates']:.1f}, "
          f"cmaml {out['cmaml_mean_second_visit_updates']:.1f}; mean held-out loss over the first "
          f"{ReadaptConfig().early_updates} updates: gd {out['gd_mean_second_visit_early_loss']:.4g}, "
          f"cmaml {out['cmaml_mean_second_visit_early_loss']:.4g}")


def cmd_report(cfg, args):
    for p in report.render_report(cfg.output_dir, cfg.track):
        print(p)


def _print_table(header, rows, title):
    print(title)
    print("  ".join(f"{h:>12s}" for h in header))
    for row in rows:
        print("  ".join(f"{v:>12.5g}" if isinstance(v, float) else f"{str(v):>12s}" for v in row))


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "record-log": cmd_record_log,
    "infer-exp": cmd_infer_exp,
    "control-exp": cmd_control_exp,
    "readapt-exp": cmd_readapt_exp,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cmaml-mppi", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("-c", "--config", action="append", default=[], metavar="YAML",
                    help="config overlay; may be repeated, later files win")
    ap.add_argument("-s", "--seeds", help="comma-separated seeds (control and re-adaptation runs)")
    ap.add_argument("--inference-seeds", help="comma-separated seeds for record-log / infer-exp")
    ap.add_argument("-o", "--output-dir", help="output directory (default from config)")
    ap.add_argument("-m", "--modes", help="comma-separated subset of fixed,gd,cmaml")
    ap.add_argument("--print-config", action="store_true", help="print the merged config and exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    exp = {}
    if args.seeds:
        exp["seeds"] = list(_ints(args.seeds))
    if args.inference_seeds:
        exp["inference_seeds"] = list(_ints(args.inference_seeds))
    if args.output_dir:
        exp["output_dir"] = args.output_dir
    if args.modes:
        exp["modes"] = [m.strip() for m in args.modes.split(",")]
    try:
        cfg = load_config(args.config, {"experiment": exp} if exp else None)
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.print_config:
        import yaml
        print(yaml.safe_dump(to_dict(cfg), sort_keys=False))
        return 0
    COMMANDS[args.command](cfg, args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
