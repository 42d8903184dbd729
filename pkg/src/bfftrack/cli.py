"""Command-line front end: `bfftrack <command>` orchestrates the pipeline.

Commands: ``env-build`` (fingerprint dataset), ``traj-gen`` (trajectory
CSVs), ``train`` (model checkpoint + loss history), ``eval`` (metrics
report + raw error dump), ``report`` (SVG charts). One flat key=value
config file drives everything; ``--set key=value`` overrides file values,
dedicated flags override both. Every command writes a JSON run manifest
whose digest covers the parameters that affect outputs (never timestamps),
so identical digests imply identical artifacts.

Exit codes: 0 success, 1 usage error, 2 data/version error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .channel import (
    Environment,
    SounderConfig,
    default_environment,
    uniform_codebook,
)
from .checkpoint import CheckpointError
from .config import ConfigError, kv_digest, parse_kv_text, load_kv_file
from .dataset import BffDataset, DataFormatError, build_dataset
from .harness import (
    MetricsReport,
    PersistenceModel,
    TrainConfig,
    build_model,
    evaluate,
    train,
)
from .ioutil import atomic_write_text
from .optim import TrainingError
from .recurrent import RecurrentModel
from .report import write_report_plots
from .tensor import DomainError
from .trajectory import (
    GenerationError,
    generate_trajectories,
    load_trajectories,
    make_sequences,
    mean_speed,
    profile_by_kind,
    save_trajectories,
    split_groups,
)
from .transformer import TransformerModel

DATASET_FILE = "fingerprints.bff"
REPORT_FILE = "report.csv"
RAW_ERRORS_FILE = "raw_errors.csv"

DEFAULTS = {
    "seed": 0,
    # environment / grid
    "env.extent_x": 128.0,
    "env.extent_y": 128.0,
    "env.grid_nx": 101,
    "env.grid_ny": 101,
    "env.tx_x": 0.0,
    "env.tx_y": 0.0,
    "env.carrier_freq": 28e9,
    "env.obstacles": "default",  # default | none
    # channel sounder
    "sounder.bandwidth_b": 100e6,
    "sounder.sample_interval_ts": 1e-8,
    "sounder.max_excess_delay_t": 6.4e-7,
    "sounder.n_samples_ns": 64,
    "sounder.sounding_amplitude_s": math.sqrt(1000.0),
    "sounder.max_rx_power_cap_dbm": 30.0,
    "sounder.threshold_eta_dbm": -100.0,
    "sounder.floor_dbm": -200.0,
    "sounder.shadow_sigma_db": 6.0,
    "codebook.m": 8,
    # trajectories
    "traj.profile": "both",  # pedestrian | vehicle | both
    "traj.count": 200,
    "traj.length": 12,
    "traj.n_groups": 20,
    # training / evaluation
    "train.model": "transformer",  # transformer | lstm | rnn
    "train.profile": "pedestrian",
    "train.t_obs": 7,
    "train.input_mode": "fingerprint",  # fingerprint | position
    "train.epochs_max": 100,
    "train.batch_size": 64,
    "train.learning_rate": 1e-3,
    "train.dropout": 0.01,
    "train.patience": 10,
    # model sizes (hidden_dim 0 means the per-kind default)
    "model.d_model": 64,
    "model.n_heads": 4,
    "model.d_ff": 256,
    "model.n_enc_layers": 2,
    "model.n_dec_layers": 2,
    "model.hidden_dim": 0,
    "model.n_layers": 1,
    "model.pos_scale": 64.0,
    "model.pe_denominator": "d_model",
}


class UsageError(Exception):
    """Bad flags or unknown/ill-typed configuration keys."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="bfftrack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"bfftrack {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=None,
                        help="key=value configuration file")
    common.add_argument("--seed", type=int, default=None, help="master seed override")
    common.add_argument("--out", metavar="DIR", default=".", help="artifact directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    env_p = sub.add_parser("env-build", parents=[common],
                           help="synthesize the fingerprint dataset")
    env_p.add_argument("--grid", type=int, default=None,
                       help="grid nodes per axis (sets env.grid_nx and env.grid_ny)")
    traj_p = sub.add_parser("traj-gen", parents=[common], help="generate trajectory CSVs")
    traj_p.add_argument("--profile", choices=("pedestrian", "vehicle", "both"), default=None)
    traj_p.add_argument("--count", type=int, default=None, help="trajectories per profile")
    sub.add_parser("train", parents=[common], help="train one model, write a checkpoint")
    sub.add_parser("eval", parents=[common], help="score a checkpoint, update the report")
    sub.add_parser("report", parents=[common], help="render SVG charts from the report")
    return parser


def effective_config(args):
    """DEFAULTS <- config file <- --set overrides <- dedicated flags."""
    cfg = dict(DEFAULTS)

    def merge(updates, source):
        unknown = sorted(set(updates) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown configuration keys from {source}: {', '.join(unknown)}")
        for key, value in updates.items():
            default = DEFAULTS[key]
            if isinstance(default, float) and isinstance(value, int):
                value = float(value)
            if type(value) is not type(default):
                raise UsageError(
                    f"{key}: expected {type(default).__name__}, got {value!r}"
                )
            cfg[key] = value

    if args.config is not None:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        merge(load_kv_file(args.config), args.config)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.update(parse_kv_text(item))
    if overrides:
        merge(overrides, "--set")
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    if getattr(args, "grid", None) is not None:
        cfg["env.grid_nx"] = cfg["env.grid_ny"] = int(args.grid)
    if getattr(args, "profile", None) is not None:
        cfg["traj.profile"] = args.profile
    if getattr(args, "count", None) is not None:
        cfg["traj.count"] = int(args.count)
    return cfg


def _environment(cfg):
    kind = cfg["env.obstacles"]
    if kind == "default":
        obstacles = default_environment().obstacles
    elif kind == "none":
        obstacles = []
    else:
        raise UsageError(f"env.obstacles must be 'default' or 'none', got {kind!r}")
    return Environment(
        extent_x=cfg["env.extent_x"],
        extent_y=cfg["env.extent_y"],
        grid_nx=cfg["env.grid_nx"],
        grid_ny=cfg["env.grid_ny"],
        tx_position=(cfg["env.tx_x"], cfg["env.tx_y"]),
        obstacles=obstacles,
        carrier_freq=cfg["env.carrier_freq"],
        rng_seed=cfg["seed"],
    )


def _sounder(cfg):
    return SounderConfig(
        bandwidth_b=cfg["sounder.bandwidth_b"],
        sample_interval_ts=cfg["sounder.sample_interval_ts"],
        max_excess_delay_t=cfg["sounder.max_excess_delay_t"],
        n_samples_ns=cfg["sounder.n_samples_ns"],
        sounding_amplitude_s=cfg["sounder.sounding_amplitude_s"],
        max_rx_power_cap_dbm=cfg["sounder.max_rx_power_cap_dbm"],
        threshold_eta_dbm=cfg["sounder.threshold_eta_dbm"],
        floor_dbm=cfg["sounder.floor_dbm"],
    )


def _utc_now():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def write_manifest(out_dir, command, cfg, artifacts, started_utc):
    """JSON run manifest; its digest covers config, seed, command, version
    and artifact names, never timestamps."""
    digest_fields = {f"config.{k}": v for k, v in cfg.items()}
    digest_fields["command"] = command
    digest_fields["version"] = __version__
    digest_fields["artifacts"] = ";".join(sorted(os.path.basename(str(a)) for a in artifacts))
    digest = kv_digest(digest_fields)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "config": {k: cfg[k] for k in sorted(cfg)},
        "digest": digest,
        "artifacts": sorted(os.path.basename(str(a)) for a in artifacts),
        "started_utc": started_utc,
        "finished_utc": _utc_now(),
    }
    path = os.path.join(out_dir, f"manifest_{command.replace('-', '_')}.json")
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return digest


def cmd_env_build(cfg, out_dir):
    started = _utc_now()
    env = _environment(cfg)
    sounder = _sounder(cfg)
    codebook = uniform_codebook(cfg["codebook.m"])
    path = os.path.join(out_dir, DATASET_FILE)
    n = build_dataset(env, sounder, codebook, path, master_seed=cfg["seed"],
                      shadow_sigma_db=cfg["sounder.shadow_sigma_db"])
    digest = write_manifest(out_dir, "env-build", cfg, [path], started)
    print(f"wrote {n} fingerprint records ({env.grid_nx}x{env.grid_ny} grid, "
          f"{cfg['codebook.m']} beams) to {path}")
    print(f"run digest {digest}")
    return 0


def _traj_path(out_dir, kind):
    return os.path.join(out_dir, f"trajectories_{kind}.csv")


def cmd_traj_gen(cfg, out_dir):
    started = _utc_now()
    kinds = ("pedestrian", "vehicle") if cfg["traj.profile"] == "both" else (cfg["traj.profile"],)
    env = _environment(cfg)
    artifacts = []
    for i, kind in enumerate(kinds):
        profile = profile_by_kind(kind)
        master = int(np.random.SeedSequence((cfg["seed"], 500 + i)).generate_state(1)[0])
        trajectories = generate_trajectories(
            env, profile, cfg["traj.count"], cfg["traj.length"], master,
            n_groups=cfg["traj.n_groups"],
        )
        path = _traj_path(out_dir, kind)
        save_trajectories(path, trajectories)
        artifacts.append(path)
        print(f"{kind}: {len(trajectories)} trajectories of length {cfg['traj.length']}, "
              f"mean speed {mean_speed(trajectories):.3f} m/s -> {path}")
    digest = write_manifest(out_dir, "traj-gen", cfg, artifacts, started)
    print(f"run digest {digest}")
    return 0


def _load_split_samples(cfg, out_dir):
    """Rebuild the exact train/val/test sequence sets for train and eval."""
    profile = cfg["train.profile"]
    if profile not in ("pedestrian", "vehicle"):
        raise UsageError(f"train.profile must be pedestrian or vehicle, got {profile!r}")
    path = _traj_path(out_dir, profile)
    if not os.path.exists(path):
        raise FileNotFoundError(f"trajectory file not found: {path} (run traj-gen first)")
    trajectories = load_trajectories(path)
    mode = cfg["train.input_mode"]
    if mode not in ("position", "fingerprint"):
        raise UsageError(f"train.input_mode must be position or fingerprint, got {mode!r}")
    dataset = None
    if mode == "fingerprint":
        ds_path = os.path.join(out_dir, DATASET_FILE)
        if not os.path.exists(ds_path):
            raise FileNotFoundError(f"dataset not found: {ds_path} (run env-build first)")
        dataset = BffDataset(ds_path)
    t_obs = cfg["train.t_obs"]
    train_traj, val_traj, test_traj = split_groups(trajectories)
    train_seq, _ = make_sequences(train_traj, t_obs, mode=mode, dataset=dataset)
    val_seq, _ = make_sequences(val_traj, t_obs, mode=mode, dataset=dataset)
    test_seq, _ = make_sequences(test_traj, t_obs, mode=mode, dataset=dataset)
    input_dim = 2 if mode == "position" else dataset.feature_dim
    return train_seq, val_seq, test_seq, mode, input_dim


def _model_overrides(cfg, kind):
    if kind == "transformer":
        return {
            "d_model": cfg["model.d_model"],
            "n_heads": cfg["model.n_heads"],
            "d_ff": cfg["model.d_ff"],
            "n_enc_layers": cfg["model.n_enc_layers"],
            "n_dec_layers": cfg["model.n_dec_layers"],
            "pos_scale": cfg["model.pos_scale"],
            "pe_denominator": cfg["model.pe_denominator"],
        }
    over = {"n_layers": cfg["model.n_layers"], "pos_scale": cfg["model.pos_scale"]}
    if cfg["model.hidden_dim"] > 0:
        over["hidden_dim"] = cfg["model.hidden_dim"]
    return over


def _fresh_model(cfg, input_mode, input_dim):
    kind = cfg["train.model"]
    if kind not in ("transformer", "lstm", "rnn"):
        raise UsageError(f"train.model must be transformer, lstm or rnn, got {kind!r}")
    return build_model(
        kind,
        cfg["train.t_obs"],
        input_mode=input_mode,
        input_dim=input_dim,
        seed=cfg["seed"],
        dropout=cfg["train.dropout"],
        overrides=_model_overrides(cfg, kind),
    )


def _checkpoint_path(out_dir, cfg):
    # one active checkpoint per profile: a kind/config mismatch at eval time
    # is caught by the checkpoint's config digest, not by the file name
    return os.path.join(out_dir, f"model_{cfg['train.profile']}.ckpt")


def _train_config(cfg):
    return TrainConfig(
        epochs_max=cfg["train.epochs_max"],
        batch_size=cfg["train.batch_size"],
        learning_rate=cfg["train.learning_rate"],
        dropout=cfg["train.dropout"],
        patience=cfg["train.patience"],
        master_seed=cfg["seed"],
    )


def cmd_train(cfg, out_dir):
    started = _utc_now()
    train_seq, val_seq, test_seq, mode, input_dim = _load_split_samples(cfg, out_dir)
    model = _fresh_model(cfg, mode, input_dim)
    result = train(model, train_seq, val_seq, _train_config(cfg))
    ckpt = _checkpoint_path(out_dir, cfg)
    model.save(ckpt)
    history = os.path.join(
        out_dir, f"train_history_{cfg['train.model']}_{cfg['train.profile']}.csv"
    )
    lines = ["epoch,train_loss,val_error_m"]
    for epoch, loss in enumerate(result.train_losses):
        val = result.val_errors[epoch] if epoch < len(result.val_errors) else float("nan")
        lines.append(f"{epoch},{loss!r},{val!r}")
    atomic_write_text(history, "\n".join(lines) + "\n")
    digest = write_manifest(out_dir, "train", cfg, [ckpt, history], started)
    print(f"trained {cfg['train.model']} on {cfg['train.profile']} "
          f"({len(train_seq)} train / {len(val_seq)} val sequences, t_obs={cfg['train.t_obs']})")
    print(f"epochs run {len(result.train_losses)}, best epoch {result.best_epoch}, "
          f"best val error {min(result.val_errors):.4f} m -> {ckpt}")
    print(f"run digest {digest}")
    return 0


def cmd_eval(cfg, out_dir):
    started = _utc_now()
    train_seq, val_seq, test_seq, mode, input_dim = _load_split_samples(cfg, out_dir)
    ckpt = _checkpoint_path(out_dir, cfg)
    if not os.path.exists(ckpt):
        raise FileNotFoundError(f"checkpoint not found: {ckpt} (run train first)")
    fresh = _fresh_model(cfg, mode, input_dim)
    model = type(fresh).load(ckpt, fresh.config)
    forbidden = {s.group_id for s in train_seq} | {s.group_id for s in val_seq}
    profile, t_obs = cfg["train.profile"], cfg["train.t_obs"]
    rows = []
    for name, predictor in ((cfg["train.model"], model), ("persistence", PersistenceModel())):
        row, errors = evaluate(
            predictor, test_seq, forbidden_group_ids=forbidden,
            model_name=name, profile=profile, t_obs=t_obs,
        )
        rows.append((row, errors))

    report_path = os.path.join(out_dir, REPORT_FILE)
    raw_path = os.path.join(out_dir, RAW_ERRORS_FILE)
    report = MetricsReport.from_csv(report_path) if os.path.exists(report_path) else MetricsReport()
    if os.path.exists(raw_path):
        report.raw_errors.update(MetricsReport.raw_from_csv(raw_path))
    for row, errors in rows:
        report.rows = [r for r in report.rows if r.key() != row.key()]
        report.add(row, errors)
    report.rows.sort(key=lambda r: (r.profile, r.model, r.t_obs))
    report.to_csv(report_path)
    report.raw_to_csv(raw_path)
    digest = write_manifest(out_dir, "eval", cfg, [report_path, raw_path], started)
    for row, _ in rows:
        print(f"{row.model} {row.profile} t_obs={row.t_obs}: "
              f"avg {row.avg_error_m:.4f} m, p95 {row.p95_error_m:.4f} m "
              f"({row.n_eval} samples)")
    print(f"run digest {digest}")
    return 0


def cmd_report(cfg, out_dir):
    started = _utc_now()
    report_path = os.path.join(out_dir, REPORT_FILE)
    if not os.path.exists(report_path):
        raise FileNotFoundError(f"report not found: {report_path} (run eval first)")
    report = MetricsReport.from_csv(report_path)
    paths = write_report_plots(report, out_dir)
    digest = write_manifest(out_dir, "report", cfg, paths, started)
    for path in paths:
        print(f"wrote {path}")
    print(f"run digest {digest}")
    return 0


COMMANDS = {
    "env-build": cmd_env_build,
    "traj-gen": cmd_traj_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = effective_config(args)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, DataFormatError) as exc:
        print(f"data/version error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, DomainError, GenerationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
