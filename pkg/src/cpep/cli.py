"""Command-line pipeline driver.

Every subcommand reads an optional key=value config file (UTF-8, ``#``
comments), applies CLI overrides on top, writes artifacts into a fresh
output directory, and echoes the effective configuration into
``config.lock`` there, so a run is reproducible from its output directory
alone.

Exit codes: 0 success, 1 usage/configuration, 2 missing or malformed
input artifacts (I/O), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

import dataclasses

from . import pipeline
from .align import ABLATION_MODES, AlignmentModel
from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    CorpusImportUnavailable,
    Dataset,
    DatasetError,
    SplitSpec,
    SynthConfig,
    import_emg2pose_stub,
    load_dataset,
    write_dataset,
)
from .evaluate import build_pose_index, zero_shot_predict
from .mae import build_encoder, build_poset_encoder
from .pipeline import PipelineConfig

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

# name -> default; types are inferred from the defaults
CONFIG_DEFAULTS = {
    "seed": 0,
    # synthetic corpus
    "n_users": 20,
    "n_gestures": 8,
    "windows_per_user_per_gesture": 4,
    "emg_channels": 16,
    "joints": 20,
    "sample_rate": 2000.0,
    "window_s": 2.0,
    "emg_noise": 0.7,
    "pose_noise": 0.05,
    "interference_amp": 1.0,
    "mixing_seed": 1234,
    # splits
    "in_dist_gestures": 4,
    "unseen_gestures": 4,
    "tune_users": 2,
    "probe_unseen_users": 3,
    "eval_users": 5,
    # architecture
    "s_emg": 50,
    "s_pose": 200,
    "r": 0.5,
    "d": 256,
    "enc_layers": 4,
    "dec_layers": 2,
    "heads": 4,
    # optimization
    "lr": 5e-4,
    "wd": 1e-5,
    "batch": 128,
    "mae_epochs": 20,
    "align_epochs": 20,
    "poset_epochs": 12,
    "schedule_period_epochs": 10,
    "schedule_period_mult": 2,
    "lr_min": 1e-6,
    "channel_rotate": 1,
    "tau_init": 0.02,
    "head": "affine",
    "mode": "cpep",
    # evaluation
    "probe_lr": 1e-2,
    "probe_epochs": 100,
    "k": 10,
    # ablation grids (comma-separated lists)
    "ablate_s_emg": "50",
    "ablate_r": "0.25,0.5,0.75",
    "ablate_modes": "cpep,cpep-randinit,cpep-frozen,cpep-avgpool",
}


def _coerce(key, raw):
    if key not in CONFIG_DEFAULTS:
        raise UsageError(f"unknown config key {key!r}")
    default = CONFIG_DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return raw in ("1", "true", "True")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None


def parse_config_file(path):
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def effective_config(args):
    """defaults <- config file <- repeated --set overrides."""
    config = dict(CONFIG_DEFAULTS)
    if getattr(args, "config", None):
        config.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        config[key.strip()] = _coerce(key.strip(), raw.strip())
    return config


def write_lock(config, out_dir):
    lines = [f"{k}={config[k]!r}" if isinstance(config[k], str) else f"{k}={config[k]}"
             for k in sorted(config)]
    (Path(out_dir) / "config.lock").write_text("\n".join(lines) + "\n",
                                               encoding="utf-8")


def pipeline_config(config):
    return PipelineConfig(
        synth=SynthConfig(
            n_users=config["n_users"], n_gestures=config["n_gestures"],
            windows_per_user_per_gesture=config["windows_per_user_per_gesture"],
            emg_channels=config["emg_channels"], joints=config["joints"],
            sample_rate=config["sample_rate"], window_s=config["window_s"],
            pose_noise=config["pose_noise"], emg_noise=config["emg_noise"],
            interference_amp=config["interference_amp"],
            mixing_seed=config["mixing_seed"]),
        split=SplitSpec(
            in_dist_gestures=config["in_dist_gestures"],
            unseen_gestures=config["unseen_gestures"],
            tune_users=config["tune_users"],
            probe_unseen_users=config["probe_unseen_users"],
            eval_users=config["eval_users"], seed=config["seed"]),
        emg_patch_len=config["s_emg"], pose_patch_len=config["s_pose"],
        embed_dim=config["d"], encoder_layers=config["enc_layers"],
        decoder_layers=config["dec_layers"], heads=config["heads"],
        mask_ratio=config["r"], mae_epochs=config["mae_epochs"],
        align_epochs=config["align_epochs"], poset_epochs=config["poset_epochs"],
        batch_size=config["batch"], lr=config["lr"], weight_decay=config["wd"],
        schedule_period_epochs=config["schedule_period_epochs"],
        schedule_period_mult=config["schedule_period_mult"],
        lr_min=config["lr_min"], temperature_init=config["tau_init"],
        projection_head=config["head"],
        channel_rotate=bool(config["channel_rotate"]),
        probe_lr=config["probe_lr"], probe_epochs=config["probe_epochs"],
        k=config["k"], seed=config["seed"])


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_processed(path):
    ds = load_dataset(path)
    if ds.emg is None or ds.pose is None:
        raise DatasetError(f"dataset at {path} is missing a modality")
    return ds


# ---------------------------------------------------------------------------
# model artifact helpers
# ---------------------------------------------------------------------------

def _save_encoder(encoder, path):
    save_checkpoint(encoder.state_arrays(), path)


def _load_encoder_for(kind, ckpt_path, config, ds):
    arrays = load_checkpoint(ckpt_path)
    cfg = pipeline_config(config)
    if kind == "emg-mae":
        enc = build_encoder(ds.emg.shape[1], config["s_emg"], seed=0,
                            **cfg.arch_kwargs())
    elif kind == "pose-mae":
        enc = build_encoder(ds.pose.shape[1], config["s_pose"], seed=0,
                            **cfg.arch_kwargs())
    elif kind == "poset":
        enc = build_poset_encoder(ds.emg.shape[1], ds.pose.shape[1],
                                  config["s_emg"], seed=0, **cfg.arch_kwargs())
    else:
        raise UsageError(f"unknown encoder kind {kind!r}")
    enc.load_state(arrays)
    return enc


def _load_alignment(ckpt_path, config, ds, mode=None):
    arrays = load_checkpoint(ckpt_path)
    cfg = pipeline_config(config)
    align_cfg = cfg.align_config(mode or config["mode"])
    emg = build_encoder(ds.emg.shape[1], config["s_emg"], seed=0,
                        **cfg.arch_kwargs())
    pose = build_encoder(ds.pose.shape[1], config["s_pose"], seed=0,
                         **cfg.arch_kwargs())
    model = AlignmentModel(emg, pose, align_cfg)
    model.load_state(arrays)
    return model


RESULT_COLUMNS = ("protocol", "gesture_set", "method", "macro_accuracy",
                  "per_class_recall", "seed")
LOSS_COLUMNS = ("epoch", "split", "loss", "lr", "seed")
ALIGN_COLUMNS = ("epoch", "loss", "tau", "retrieval_at_1")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    config = effective_config(args)
    out = _out_dir(args)
    raw = pipeline.run_synth(pipeline_config(config))
    write_dataset(raw, out / "raw")
    write_lock(config, out)
    print(f"wrote {len(raw.manifest)} paired recordings to {out / 'raw'}")
    return 0


def cmd_preprocess(args):
    config = effective_config(args)
    out = _out_dir(args)
    raw = _load_processed(args.data)
    ds = pipeline.run_preprocess(raw, pipeline_config(config))
    write_dataset(ds, out / "windows")
    write_lock(config, out)
    print(f"wrote {len(ds.manifest)} windows to {out / 'windows'}")
    return 0


def cmd_pretrain(args):
    config = effective_config(args)
    out = _out_dir(args)
    ds = _load_processed(args.data)
    cfg = pipeline_config(config)
    model, history = pipeline.run_pretrain(ds, args.modality, cfg)
    name = f"{args.modality}-mae"
    _save_encoder(model, out / f"{name}.cpepw")
    write_csv(out / "loss.csv", history, LOSS_COLUMNS)
    write_lock(config, out)
    print(f"{name}: final train loss "
          f"{[h['loss'] for h in history if h['split'] == 'tr'][-1]:.5f}")
    return 0


def cmd_poset(args):
    config = effective_config(args)
    out = _out_dir(args)
    ds = _load_processed(args.data)
    model, history = pipeline.run_poset(ds, pipeline_config(config))
    _save_encoder(model, out / "poset.cpepw")
    write_csv(out / "loss.csv", history, LOSS_COLUMNS)
    write_lock(config, out)
    print(f"poset: final train loss {history[-1]['loss']:.5f}")
    return 0


def cmd_align(args):
    config = effective_config(args)
    if args.mode:
        config["mode"] = args.mode
    if config["mode"] not in ABLATION_MODES:
        raise UsageError(f"unknown alignment mode {config['mode']!r}")
    out = _out_dir(args)
    ds = _load_processed(args.data)
    cfg = pipeline_config(config)
    mode = config["mode"]
    emg_mae = None
    if ABLATION_MODES[mode].get("emg_init", "mae") == "mae":
        if not args.emg:
            raise UsageError(f"mode {mode} needs --emg EMG-MAE checkpoint")
        emg_mae = _load_encoder_for("emg-mae", args.emg, config, ds)
    if ABLATION_MODES[mode].get("pose_init", "mae") == "mae":
        if not args.pose:
            raise UsageError(f"mode {mode} needs --pose pose-MAE checkpoint")
        pose_mae = _load_encoder_for("pose-mae", args.pose, config, ds)
    else:
        pose_mae = None
    model, history, report = pipeline.run_align(ds, emg_mae, pose_mae, cfg,
                                                mode=mode)
    save_checkpoint(model.state_arrays(), out / "align.cpepw")
    write_csv(out / "align_log.csv", history, ALIGN_COLUMNS)
    (out / "report.txt").write_text(
        "".join(f"{k}={v}\n" for k, v in sorted(report.items())), encoding="utf-8")
    write_lock(config, out)
    status = "converged" if report["converged"] else "DID NOT CONVERGE"
    print(f"{mode}: {status}, final in-batch retrieval@1 "
          f"{report['final_retrieval_at_1']:.3f}")
    return 0


def cmd_probe(args):
    config = effective_config(args)
    out = _out_dir(args)
    ds = _load_processed(args.data)
    cfg = pipeline_config(config)
    if args.encoder == "cpep":
        model = _load_alignment(args.ckpt, config, ds)
        embed = pipeline.aligned_embed_fn(model)
        rows = pipeline.evaluate_linear_probes(args.name or "cpep", embed, ds, cfg)
    elif args.encoder == "pose-mae":
        enc = _load_encoder_for("pose-mae", args.ckpt, config, ds)
        rows = pipeline.evaluate_linear_probes(args.name or "pose-mae",
                                               pipeline.encoder_embed_fn(enc),
                                               ds, cfg, modality="pose")
    else:
        enc = _load_encoder_for(args.encoder, args.ckpt, config, ds)
        rows = pipeline.evaluate_linear_probes(args.name or args.encoder,
                                               pipeline.encoder_embed_fn(enc),
                                               ds, cfg)
    write_csv(out / "results.csv", rows, RESULT_COLUMNS)
    write_lock(config, out)
    for r in rows:
        print(f"LP {r['gesture_set']}: {r['macro_accuracy']:.3f}")
    return 0


def cmd_zeroshot(args):
    config = effective_config(args)
    out = _out_dir(args)
    ds = _load_processed(args.data)
    cfg = pipeline_config(config)
    model = _load_alignment(args.ckpt, config, ds)
    embed = pipeline.aligned_embed_fn(model)
    rows = pipeline.evaluate_zero_shot(args.name or config["mode"], embed, ds,
                                       model.pose_encoder, cfg,
                                       embedding=model.config.embedding)
    write_csv(out / "results.csv", rows, RESULT_COLUMNS)
    write_lock(config, out)
    for r in rows:
        print(f"ZS {r['gesture_set']}: {r['macro_accuracy']:.3f}")
    return 0


def cmd_ablate(args):
    config = effective_config(args)
    out = _out_dir(args)
    ds = _load_processed(args.data)
    cfg = pipeline_config(config)
    if args.grid == "modes":
        modes = [m.strip() for m in config["ablate_modes"].split(",") if m.strip()]
        results = pipeline.run_experiment(ds, cfg, methods=modes)
        write_csv(out / "results.csv", results["results"], RESULT_COLUMNS)
        for mode, report in results["reports"].items():
            if not report["converged"]:
                (out / f"nonconvergence-{mode}.txt").write_text(
                    "".join(f"{k}={v}\n" for k, v in sorted(report.items())),
                    encoding="utf-8")
    elif args.grid == "patch-mask":
        rows = []
        s_values = [int(v) for v in str(config["ablate_s_emg"]).split(",")]
        r_values = [float(v) for v in str(config["ablate_r"]).split(",")]
        pose_mae, _ = pipeline.run_pretrain(ds, "pose", cfg)
        for s_emg in s_values:
            for r in r_values:
                emg_mae, hist = pipeline.run_pretrain(ds, "emg", cfg,
                                                      patch_len=s_emg, mask_ratio=r)
                grid_cfg = dataclasses.replace(cfg, emg_patch_len=s_emg, mask_ratio=r)
                model, _, report = pipeline.run_align(ds, emg_mae, pose_mae,
                                                      grid_cfg, mode="cpep")
                zs = pipeline.evaluate_zero_shot(
                    f"cpep-s{s_emg}-r{r}", pipeline.aligned_embed_fn(model), ds,
                    model.pose_encoder, grid_cfg)
                for row in zs:
                    rows.append({"s_emg": s_emg, "r": r,
                                 "gesture_set": row["gesture_set"],
                                 "zs_macro_accuracy": row["macro_accuracy"],
                                 "final_mae_loss": [h["loss"] for h in hist
                                                    if h["split"] == "tr"][-1],
                                 "seed": config["seed"]})
        write_csv(out / "grid.csv", rows,
                  ("s_emg", "r", "gesture_set", "zs_macro_accuracy",
                   "final_mae_loss", "seed"))
    else:
        raise UsageError(f"unknown ablation grid {args.grid!r}")
    write_lock(config, out)
    print(f"ablation grid {args.grid} written to {out}")
    return 0


def cmd_report(args):
    config = effective_config(args)
    out = _out_dir(args)
    rows = []
    for root in args.inputs:
        for path in sorted(Path(root).rglob("results.csv")):
            with open(path, newline="", encoding="utf-8") as f:
                for record in csv.DictReader(f):
                    record["macro_accuracy"] = float(record["macro_accuracy"])
                    record["seed"] = int(record["seed"])
                    rows.append(record)
    if not rows:
        raise DatasetError(f"no results.csv found under {args.inputs}")
    write_csv(out / "all_results.csv", rows, RESULT_COLUMNS)
    table = pipeline.results_table(rows)
    columns = ("method", "LP in-dist", "ZS in-dist", "LP unseen", "ZS unseen")
    with open(out / "table.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for entry in table:
            writer.writerow([entry["method"]] +
                            ["" if entry[c] is None else repr(entry[c])
                             for c in columns[1:]])
    write_lock(config, out)
    print(f"aggregated {len(rows)} result rows into {out / 'table.csv'}")
    return 0


def cmd_import_corpus(args):
    import_emg2pose_stub(args.path)
    return 0  # unreachable: the stub always raises


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="cpep", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--out", required=True, help="output directory")
        return p

    add("synth", cmd_synth, help="generate the synthetic paired corpus")

    p = add("preprocess", cmd_preprocess, help="filter and window recordings")
    p.add_argument("--data", required=True, help="raw dataset directory")

    p = add("pretrain", cmd_pretrain, help="masked-autoencoder pre-training")
    p.add_argument("--data", required=True, help="processed dataset directory")
    p.add_argument("--modality", required=True, choices=("emg", "pose"))

    p = add("poset", cmd_poset, help="supervised EMG->pose baseline")
    p.add_argument("--data", required=True)

    p = add("align", cmd_align, help="contrastive pose-EMG alignment")
    p.add_argument("--data", required=True)
    p.add_argument("--emg", help="EMG-MAE checkpoint (.cpepw)")
    p.add_argument("--pose", help="pose-MAE checkpoint (.cpepw)")
    p.add_argument("--mode", choices=sorted(ABLATION_MODES))

    p = add("probe", cmd_probe, help="linear-probe evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True,
                   choices=("cpep", "emg-mae", "poset", "pose-mae"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--name", help="method name for the results rows")

    p = add("zeroshot", cmd_zeroshot, help="zero-shot retrieval evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="alignment checkpoint")
    p.add_argument("--name")

    p = add("ablate", cmd_ablate, help="run an ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True, choices=("modes", "patch-mask"))

    p = add("report", cmd_report, help="aggregate results CSVs into tables")
    p.add_argument("--inputs", nargs="+", required=True,
                   help="directories to scan for results.csv files")

    p = sub.add_parser("import-corpus",
                       help="extension point for the external corpus (always fails)")
    p.set_defaults(fn=cmd_import_corpus)
    p.add_argument("path")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CorpusImportUnavailable as e:
        print(f"not implemented: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
