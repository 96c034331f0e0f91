"""Command-line experiment driver.

Every training/attack run writes its resolved config, metrics JSON, history
CSV, and final checkpoint into a seed-named directory under ``--out-dir``,
so reports can be rebuilt from run directories alone. The default data
directory comes from ``$PASSPORT_FORGE_DATA``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .attack import AttackConfig, plain_attack, run_attack, sign_flip_sweep
from .checkpoint import Checkpoint
from .config import ConfigError, ExperimentConfig, resolve_config
from .models import ModelSpec, build_model, parse_passport_sites
from .passports import (EmbedHyper, load_passports, random_passport,
                        random_signature, save_passports)
from .reports import REPORT_RECIPES, RunDir, write_csv
from .seeding import SeedStreams
from .training import evaluate_accuracy, train_baseline, train_protected, verify
from .watermark import WeightWatermarkKey, cerb_attack_watermark, make_key, uchida_embed

DATA_DIR_ENV = "PASSPORT_FORGE_DATA"


def _data_dir(config: ExperimentConfig) -> str:
    return config.data_dir or os.environ.get(DATA_DIR_ENV, "data")


def _dataset_spec(config: ExperimentConfig, with_passports: bool = True) -> ModelSpec:
    in_channels = 1 if config.dataset == "mnist" else 3
    image_hw = (28, 28) if config.dataset == "mnist" else (32, 32)
    sites = parse_passport_sites(config.passport_sites, config.arch) if with_passports else ()
    return ModelSpec(architecture=config.arch, num_classes=config.num_classes,
                     in_channels=in_channels, image_hw=image_hw, passport_sites=sites)


def _load_data(config: ExperimentConfig):
    return data_mod.load_dataset(config.dataset, _data_dir(config))


def _embed_hyper(config: ExperimentConfig) -> EmbedHyper:
    return EmbedHyper(alpha=config.alpha, margin=config.margin, lr=config.lr,
                      momentum=config.momentum, weight_decay=config.weight_decay,
                      epochs=config.epochs, batch_size=config.batch_size)


def _attack_config(config: ExperimentConfig, seed: int) -> AttackConfig:
    return AttackConfig(
        block=config.attack_block, activation=config.attack_activation,
        mlp_depth=config.attack_depth, epochs=config.attack_epochs,
        lr=config.attack_lr, momentum=config.momentum,
        batch_size=config.attack_batch_size, seed=seed,
        data_fraction=config.attack_fraction, epsilon=config.epsilon,
        delta_bdr=config.delta_bdr,
        num_blocks=None if config.num_blocks < 0 else config.num_blocks,
    )


def _fresh_passports(spec: ModelSpec, config: ExperimentConfig, seed: int):
    model = build_model(spec, seed)
    shapes = model.passport_shapes()
    streams = SeedStreams(seed)
    passports = {
        i: random_passport(shapes[i], streams.stream(f"passport-{i}"))
        for i in spec.passport_sites
    }
    signatures = {
        i: random_signature(model.site_channels(i), streams.stream(f"signature-{i}"))
        for i in spec.passport_sites
    }
    return passports, signatures


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_synth_data(args, config: ExperimentConfig) -> int:
    out = args.dir or _data_dir(config)
    data_mod.make_synthetic_dataset(config.dataset, out, args.train, args.test,
                                    seed=config.seed)
    print(f"wrote synthetic {config.dataset} data ({args.train} train / "
          f"{args.test} test) to {out}")
    return 0


def _cmd_train_baseline(args, config: ExperimentConfig) -> int:
    train, test = _load_data(config)
    spec = _dataset_spec(config, with_passports=False)
    run = RunDir(config.out_dir, f"baseline-{config.arch}-seed{config.seed}", config)
    checkpoint, history = train_baseline(spec, train, _embed_hyper(config),
                                         seed=config.seed, eval_data=test)
    checkpoint.save(run.checkpoint_path())
    run.write_history(history)
    acc = history[-1].get("test_acc") if history else None
    run.write_metrics({"acc": acc, "arch": config.arch, "epochs": config.epochs,
                       "seed": config.seed, "kind": "baseline"})
    print(f"baseline acc={acc} -> {run.path}")
    return 0


def _cmd_train_protected(args, config: ExperimentConfig) -> int:
    train, test = _load_data(config)
    spec = _dataset_spec(config)
    if not spec.passport_sites:
        raise ConfigError("train-protected requires passport_sites")
    passports, signatures = _fresh_passports(spec, config, config.seed)
    name = f"protected-{config.arch}-{config.passport_sites}-seed{config.seed}"
    run = RunDir(config.out_dir, name, config)
    checkpoint, history = train_protected(spec, passports, signatures, train,
                                          _embed_hyper(config), seed=config.seed,
                                          eval_data=test)
    checkpoint.save(run.checkpoint_path())
    save_passports(run.path / "passports.pspp", passports, signatures,
                   spec.spec_hash(), seed=config.seed)
    run.write_history(history)
    result = verify(checkpoint, spec, passports, signatures, test,
                    acc_threshold=config.verify_acc_threshold)
    run.write_metrics({"acc": result["acc"], "sign_match": result["sign_match"],
                       "pass": result["pass"], "arch": config.arch,
                       "sites": list(spec.passport_sites), "seed": config.seed,
                       "kind": "protected"})
    print(f"protected acc={result['acc']:.4f} sign_match={result['sign_match']:.4f} "
          f"-> {run.path}")
    return 0


def _cmd_verify(args, config: ExperimentConfig) -> int:
    _, test = _load_data(config)
    spec = _dataset_spec(config)
    checkpoint = Checkpoint.load(args.checkpoint)
    passports, signatures, _ = load_passports(args.passports)
    result = verify(checkpoint, spec, passports, signatures, test,
                    acc_threshold=config.verify_acc_threshold)
    print(f"pass={str(result['pass']).lower()} acc={result['acc']:.4f} "
          f"sign_match={result['sign_match']:.4f}")
    return 0


def _cmd_attack(args, config: ExperimentConfig) -> int:
    train, test = _load_data(config)
    spec = _dataset_spec(config)
    checkpoint = Checkpoint.load(args.checkpoint)
    signatures = None
    authorized_acc = None
    if args.passports:
        passports, signatures, _ = load_passports(args.passports)
        authorized_acc = verify(checkpoint, spec, passports, signatures, test)["acc"]
    seeds = config.seeds or (config.seed,)
    sweep_rows = []
    for seed in seeds:
        attack_set = data_mod.subset(train, config.attack_fraction, seed=seed)
        cfg = _attack_config(config, seed)
        runner = plain_attack if cfg.block == "plain" else run_attack
        outcome = runner(checkpoint, spec, attack_set, cfg, eval_data=test,
                         reference_signatures=signatures, authorized_acc=authorized_acc)
        name = f"attack-{config.attack_block}-f{config.attack_fraction:.3f}-seed{seed}"
        run = RunDir(config.out_dir, name, replace(config, seed=seed))
        outcome.checkpoint.save(run.checkpoint_path())
        run.write_history(outcome.history)
        metrics = {
            "arch": config.arch, "block": config.attack_block,
            "fraction": config.attack_fraction, "datasize": len(attack_set),
            "seed": seed, "kind": "attack", "authorized_acc": authorized_acc,
        }
        metrics.update({k: v for k, v in outcome.final.items() if k != "bdr_per_site"})
        if "bdr_per_site" in outcome.final:
            metrics["bdr_per_site"] = {str(k): v for k, v in
                                       outcome.final["bdr_per_site"].items()}
        run.write_metrics(metrics)
        for row in outcome.history:
            bdr_cols = [v for k, v in row.items() if k.startswith("bdr_site")]
            sweep_rows.append({
                "run": name, "seed": seed, "epoch": row["epoch"],
                "acc": row.get("test_acc", ""),
                "bdr": float(np.mean(bdr_cols)) if bdr_cols else "",
                "config_hash": run.config.hash(),
            })
        print(f"attack seed={seed} acc={outcome.final.get('acc')} "
              f"bdr={outcome.final.get('bdr_mean')} -> {run.path}")
    sweep_csv = Path(config.out_dir) / (
        f"attack-{config.attack_block}-f{config.attack_fraction:.3f}.csv"
    )
    write_csv(sweep_csv, ["run", "seed", "epoch", "acc", "bdr", "config_hash"], sweep_rows)
    print(f"sweep CSV -> {sweep_csv}")
    return 0


def _cmd_sweep_signs(args, config: ExperimentConfig) -> int:
    train, test = _load_data(config)
    spec = _dataset_spec(config)
    checkpoint = Checkpoint.load(args.checkpoint)
    passports, _, _ = load_passports(args.passports)
    flips = list(config.flip_counts)
    if not flips:
        raise ConfigError("sweep-signs requires flip_counts (e.g. --flips 0,4,16)")
    results = sign_flip_sweep(checkpoint, spec, passports, train, flips,
                              seed=config.seed, epochs=config.sweep_epochs,
                              lr=config.sweep_lr, eval_data=test)
    run = RunDir(config.out_dir, f"sweep-signs-seed{config.seed}", config)
    rows = [{**r, "config_hash": config.hash()} for r in results]
    write_csv(run.path / "sweep.csv", ["flips", "acc", "coincidence", "config_hash"], rows)
    run.write_metrics({"kind": "sweep-signs", "seed": config.seed, "rows": results})
    for r in results:
        print(f"flips={r['flips']} acc={r['acc']:.4f} coincidence={r['coincidence']:.4f}")
    return 0


def _cmd_wm_embed(args, config: ExperimentConfig) -> int:
    train, test = _load_data(config)
    spec = _dataset_spec(config, with_passports=False)
    key = make_key(spec, config.wm_layer, config.wm_bits, seed=config.seed)
    run = RunDir(config.out_dir, f"wm-embed-{config.arch}-seed{config.seed}", config)
    checkpoint, history = uchida_embed(spec, train, key, config.wm_lambda,
                                       _embed_hyper(config), seed=config.seed,
                                       eval_data=test)
    checkpoint.save(run.checkpoint_path())
    key.save(run.path / "key.wmky")
    run.write_history(history)
    final = history[-1] if history else {}
    run.write_metrics({"acc": final.get("test_acc"), "sdr": final.get("sdr"),
                       "kind": "wm-embed", "seed": config.seed,
                       "layer": config.wm_layer, "bits": config.wm_bits})
    print(f"wm-embed acc={final.get('test_acc')} sdr={final.get('sdr')} -> {run.path}")
    return 0


def _cmd_wm_attack(args, config: ExperimentConfig) -> int:
    train, test = _load_data(config)
    spec = _dataset_spec(config, with_passports=False)
    checkpoint = Checkpoint.load(args.checkpoint)
    original = WeightWatermarkKey.load(args.key) if args.key else None
    layer = original.layer if original is not None else config.wm_layer
    new_key = make_key(spec, layer, config.wm_bits, seed=config.seed + 7919)
    attack_set = data_mod.subset(train, config.attack_fraction, seed=config.seed)
    cfg = _attack_config(config, config.seed)
    attacked, report = cerb_attack_watermark(
        checkpoint, spec, attack_set, new_key, cfg,
        lambda_wm=config.wm_attack_lambda, eval_data=test, original_key=original,
    )
    run = RunDir(config.out_dir, f"wm-attack-{config.arch}-seed{config.seed}", config)
    attacked.save(run.checkpoint_path())
    new_key.save(run.path / "forged-key.wmky")
    run.write_history(report.pop("history"))
    run.write_metrics({**report, "kind": "wm-attack", "seed": config.seed})
    print(f"wm-attack acc={report.get('acc')} sdr_new={report.get('sdr_new')} "
          f"bdr_vs_original={report.get('bdr_extracted_vs_original')} -> {run.path}")
    return 0


def _cmd_eval(args, config: ExperimentConfig) -> int:
    _, test = _load_data(config)
    checkpoint = Checkpoint.load(args.checkpoint)
    if args.passports:
        spec = _dataset_spec(config)
        passports, _, _ = load_passports(args.passports)
    else:
        spec = _dataset_spec(config, with_passports=False)
        passports = None
    model = build_model(spec, seed=checkpoint.seed)
    model.load_state(checkpoint)
    acc = evaluate_accuracy(model, test, passports)
    print(f"acc={acc:.4f}")
    return 0


def _cmd_report(args, config: ExperimentConfig) -> int:
    if args.table not in REPORT_RECIPES:
        raise ConfigError(f"unknown table '{args.table}'; choose from "
                          f"{sorted(REPORT_RECIPES)}")
    builder, header = REPORT_RECIPES[args.table]
    rows = builder(args.runs or config.out_dir)
    out_path = args.out or (Path(config.out_dir) / f"report-{args.table}.csv")
    rows = [{**row, "config_hash": config.hash()} for row in rows]
    write_csv(out_path, header + ["config_hash"], rows)
    print(f"report ({len(rows)} rows) -> {out_path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

_OVERRIDE_FLAGS = {
    "--dataset": "dataset",
    "--data-dir": "data_dir",
    "--out-dir": "out_dir",
    "--arch": "arch",
    "--passport-sites": "passport_sites",
    "--seed": "seed",
    "--seeds": "seeds",
    "--alpha": "alpha",
    "--margin": "margin",
    "--lr": "lr",
    "--epochs": "epochs",
    "--batch-size": "batch_size",
    "--block": "attack_block",
    "--activation": "attack_activation",
    "--depth": "attack_depth",
    "--fraction": "attack_fraction",
    "--attack-epochs": "attack_epochs",
    "--attack-lr": "attack_lr",
    "--num-blocks": "num_blocks",
    "--threshold": "verify_acc_threshold",
    "--flips": "flip_counts",
    "--sweep-epochs": "sweep_epochs",
    "--sweep-lr": "sweep_lr",
    "--wm-bits": "wm_bits",
    "--wm-layer": "wm_layer",
    "--wm-lambda": "wm_lambda",
    "--wm-attack-lambda": "wm_attack_lambda",
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    for flag, key in _OVERRIDE_FLAGS.items():
        parser.add_argument(flag, dest=f"cfg_{key}", metavar="V", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="passport-forge",
        description="Passport-layer protection and substitution-attack workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    commands = {
        "synth-data": (_cmd_synth_data, "generate synthetic data in the real binary formats"),
        "train-baseline": (_cmd_train_baseline, "train an unprotected reference model"),
        "train-protected": (_cmd_train_protected, "embed passports and signatures"),
        "verify": (_cmd_verify, "ownership verification of a checkpoint"),
        "attack": (_cmd_attack, "substitution attack on passport sites"),
        "sweep-signs": (_cmd_sweep_signs, "retrain from sign-flipped scale factors"),
        "wm-embed": (_cmd_wm_embed, "embed a weight-projection watermark"),
        "wm-attack": (_cmd_wm_attack, "forge a fresh watermark signature"),
        "eval": (_cmd_eval, "test accuracy of a checkpoint"),
        "report": (_cmd_report, "aggregate run directories into table CSVs"),
    }
    for name, (func, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.set_defaults(func=func)
        if name == "synth-data":
            p.add_argument("--dir", help="target directory (defaults to the data dir)")
            p.add_argument("--train", type=int, default=2000)
            p.add_argument("--test", type=int, default=800)
        if name in ("verify", "attack", "sweep-signs", "wm-attack", "eval"):
            p.add_argument("--checkpoint", required=name != "verify", default=None)
        if name == "verify":
            p.add_argument("--run", help="run directory holding model.ckpt + passports.pspp")
        if name in ("verify", "attack", "sweep-signs", "eval"):
            p.add_argument("--passports", default=None)
        if name == "wm-attack":
            p.add_argument("--key", default=None, help="original key (reporting only)")
        if name == "report":
            p.add_argument("--table", required=True)
            p.add_argument("--runs", default=None)
            p.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {
        key: getattr(args, f"cfg_{key}")
        for key in _OVERRIDE_FLAGS.values()
        if getattr(args, f"cfg_{key}", None) is not None
    }
    try:
        config = resolve_config(args.config, overrides)
        if args.command == "verify" and args.run:
            run_dir = Path(args.run)
            args.checkpoint = args.checkpoint or run_dir / "model.ckpt"
            args.passports = args.passports or run_dir / "passports.pspp"
        if args.command == "verify" and (not args.checkpoint or not args.passports):
            parser.error("verify needs --run or both --checkpoint and --passports")
        return args.func(args, config)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
