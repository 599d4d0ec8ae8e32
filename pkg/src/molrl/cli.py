"""Command-line entry points.

Subcommands: prepare, pretrain, finetune, sample, evaluate, calibrate,
ablate. Each command derives its randomness from the root seed through a
named stream, writes outputs under a command subdirectory of out_dir, and
echoes the resolved configuration next to them, so (config, seed) fully
determines every output byte.
"""

from __future__ import annotations

import os

if os.environ.get("MOLRL_THREADS"):
    # thread-count env var is the only environment knob; must land before numpy
    os.environ.setdefault("OMP_NUM_THREADS", os.environ["MOLRL_THREADS"])
    os.environ.setdefault("OPENBLAS_NUM_THREADS", os.environ["MOLRL_THREADS"])
    os.environ.setdefault("MKL_NUM_THREADS", os.environ["MOLRL_THREADS"])

import argparse
import csv
import json
import sys

import numpy as np

from . import denoiser as dn
from . import diffusion as df
from . import metrics as mx
from . import ppo
from . import reward as rw
from . import uncertainty as uq
from .config import RunConfig, load_config, stream_rng
from .errors import ConfigError, MolrlError
from .molgraph import (MolecularConfig, canonical_hash, infer_bonds, load_xyz_dataset,
                       parse_xyz, read_manifest, species_split_indices, write_manifest,
                       write_xyz)
from .schedule import build_schedule


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _write_resolved(config: RunConfig, subdir):
    with open(os.path.join(subdir, "resolved_config.json"), "w", encoding="utf-8") as fh:
        fh.write(config.to_json())


def _write_csv(path, fieldnames, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return int(value)
    return value


def _objective_specs(config: RunConfig):
    return [uq.ObjectiveSpec(o["name"], o["direction"], o["cutoff"])
            for o in config["objectives"]]


def _build_oracle(config: RunConfig, vocab):
    oc = config.section("oracle")
    if oc["kind"] == "synthetic":
        return uq.SyntheticOracle(vocab, oc["aleatoric_var"] or None, oc["epistemic_coeff"])
    names = [o["name"] for o in config["objectives"]]
    return uq.ExternalTableOracle(oc["table_path"], names, vocab)


def _prepared_dir(config: RunConfig):
    return os.path.join(config.out_dir, "prepared")


def _load_prepared(config: RunConfig):
    prepared = _prepared_dir(config)
    splits_path = os.path.join(prepared, "splits.json")
    if not os.path.exists(splits_path):
        raise ConfigError(f"{splits_path} not found; run `molrl prepare` first")
    with open(splits_path, "r", encoding="utf-8") as fh:
        splits = json.load(fh)
    vocab, property_names = read_manifest(config.section("dataset")["dir"])
    annotations = {}
    with open(os.path.join(prepared, "annotations.csv"), "r", encoding="utf-8",
              newline="") as fh:
        for row in csv.DictReader(fh):
            annotations[row["file"]] = {
                "hash": int(row["hash"], 16),
                "values": [float(row[name]) for name in property_names],
            }
    return vocab, property_names, splits, annotations


def _split_configs(config: RunConfig, split_name: str):
    """Annotated MolecularConfigs of one split, plus the train hash set."""
    vocab, property_names, splits, annotations = _load_prepared(config)
    data_dir = config.section("dataset")["dir"]
    configs = []
    for name in splits[split_name]:
        raw = parse_xyz(os.path.join(data_dir, name), vocab, ())
        configs.append(MolecularConfig.create(
            raw.atom_types, raw.coords, annotations[name]["values"], vocab))
    train_hashes = {annotations[name]["hash"] for name in splits["train"]}
    return vocab, property_names, configs, train_hashes


def _default_checkpoint(config: RunConfig, phase: str):
    return os.path.join(config.out_dir, phase, "checkpoint_final.ckpt")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_prepare(config: RunConfig):
    data_dir = config.section("dataset")["dir"]
    if not os.path.isdir(data_dir):
        raise ConfigError(f"dataset directory {data_dir!r} does not exist")
    vocab, property_names = read_manifest(data_dir)
    files = sorted(n for n in os.listdir(data_dir) if n.endswith(".xyz"))
    if not files:
        raise ConfigError(f"dataset directory {data_dir!r} has no .xyz files")
    configs = [parse_xyz(os.path.join(data_dir, n), vocab, ()) for n in files]
    oracle = _build_oracle(config, vocab)
    out = _ensure_dir(_prepared_dir(config))
    rows = []
    for name, cfg_m in zip(files, configs):
        estimates = oracle.predict(cfg_m)
        row = {"file": name,
               "hash": format(canonical_hash(infer_bonds(cfg_m, vocab)), "x")}
        for p in property_names:
            row[p] = estimates[p].mean
        rows.append(row)
    _write_csv(os.path.join(out, "annotations.csv"),
               ["file", "hash"] + list(property_names), rows)
    ratios = config.section("dataset")["ratios"]
    idx_train, idx_valid, idx_test = species_split_indices(
        [tuple(sorted(set(c.atom_types))) for c in configs], ratios, config.seed)
    splits = {
        "train": [files[i] for i in idx_train],
        "valid": [files[i] for i in idx_valid],
        "test": [files[i] for i in idx_test],
    }
    with open(os.path.join(out, "splits.json"), "w", encoding="utf-8") as fh:
        json.dump(splits, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "vocabulary.json"), "w", encoding="utf-8") as fh:
        json.dump(vocab.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_resolved(config, out)
    print(f"prepared {len(files)} molecules: "
          f"{len(splits['train'])} train / {len(splits['valid'])} valid / "
          f"{len(splits['test'])} test")
    return out


def cmd_pretrain(config: RunConfig):
    vocab, property_names, train, _ = _split_configs(config, "train")
    if not train:
        raise ConfigError("train split is empty")
    sched_cfg = config.section("schedule")
    schedule = build_schedule(sched_cfg["T"], sched_cfg["s"])
    den_cfg = config.section("denoiser")
    init_rng = stream_rng(config.seed, "init")
    params = dn.DenoiserParams.init(vocab, len(property_names), init_rng,
                                    den_cfg["layers"], den_cfg["hidden"])
    pre = config.section("pretrain")
    rng = stream_rng(config.seed, "pretrain")
    out = _ensure_dir(os.path.join(config.out_dir, "pretrain"))
    adam = dn.AdamState(params)
    loss_rows = []
    for step in range(pre["steps"]):
        idx = rng.choice(len(train), size=min(pre["batch_size"], len(train)),
                         replace=False)
        batch = [train[i] for i in idx]

        def closure(pt):
            return dn.pretrain_loss_t(pt, params, batch, schedule, rng)

        loss, grads = dn.value_and_grad(params, closure)
        dn.adam_step(params, grads, adam, pre["learning_rate"])
        loss_rows.append({"step": step, "loss": loss})
        if pre["checkpoint_every"] and (step + 1) % pre["checkpoint_every"] == 0:
            dn.save_checkpoint(os.path.join(out, f"checkpoint_step{step + 1:06d}.ckpt"),
                               params, schedule.T, schedule.s, training_step=step + 1,
                               opt_tensors=dn.optimizer_tensors(adam))
    _write_csv(os.path.join(out, "loss.csv"), ["step", "loss"], loss_rows)
    final = os.path.join(out, "checkpoint_final.ckpt")
    dn.save_checkpoint(final, params, schedule.T, schedule.s, training_step=pre["steps"],
                       opt_tensors=dn.optimizer_tensors(adam))
    _write_resolved(config, out)
    if loss_rows:
        print(f"pretrained {pre['steps']} steps; "
              f"loss {loss_rows[0]['loss']:.4f} -> {loss_rows[-1]['loss']:.4f}")
    return final


def cmd_finetune(config: RunConfig, checkpoint_path=None):
    vocab, property_names, train, train_hashes = _split_configs(config, "train")
    checkpoint_path = checkpoint_path or _default_checkpoint(config, "pretrain")
    params, header, opt = dn.load_checkpoint(checkpoint_path)
    sched = header["schedule"]
    schedule = build_schedule(sched["T"], sched["s"])
    ppo_cfg_raw = config.section("ppo")
    cfg = ppo.PpoConfig(**ppo_cfg_raw)
    reward_cfg = rw.RewardConfig(**config.section("reward"))
    specs = _objective_specs(config)
    oracle = _build_oracle(config, vocab)
    cond_dist = df.fit_condition_size(train)
    out = _ensure_dir(os.path.join(config.out_dir, "finetune"))
    rng = stream_rng(config.seed, "ppo")
    extra = header.get("extra", {})
    start_episode = 0
    cutoff_state = rw.DynamicCutoffState(list(specs))
    adam_state = dn.AdamState(params)
    rng_path = os.path.join(out, "rng_state.json")
    if "rl_episode" in extra:
        start_episode = extra["rl_episode"]
        cutoff_state.ema.update(extra["cutoff_ema"])
        adam_state = dn.restore_optimizer(params, opt)
        with open(rng_path, "r", encoding="utf-8") as fh:
            rng.bit_generator.state = json.load(fh)
    episode_fields = ["episode", "mean_reward", "validity", "uniqueness", "novelty",
                      "atom_stability", "mol_stability", "mean_u_multi", "mean_bonus",
                      "mean_diversity", "lambda"] + [f"cutoff_{s.name}" for s in specs]
    reward_fields = ["episode", "molecule", "u_multi", "bonus", "diversity", "lambda",
                     "total"]
    episodes_path = os.path.join(out, "episodes.csv")
    rewards_path = os.path.join(out, "rewards.csv")
    mode = "a" if start_episode else "w"
    episodes_fh = open(episodes_path, mode, encoding="utf-8", newline="")
    rewards_fh = open(rewards_path, mode, encoding="utf-8", newline="")
    episodes_csv = csv.DictWriter(episodes_fh, fieldnames=episode_fields)
    rewards_csv = csv.DictWriter(rewards_fh, fieldnames=reward_fields)
    if not start_episode:
        episodes_csv.writeheader()
        rewards_csv.writeheader()

    def on_episode(episode, row, reward_rows):
        episodes_csv.writerow({k: _fmt(v) for k, v in row.items()})
        for i, r in enumerate(reward_rows):
            rewards_csv.writerow({"episode": episode, "molecule": i,
                                  "u_multi": _fmt(r.u_multi), "bonus": _fmt(r.bonus),
                                  "diversity": _fmt(r.diversity), "lambda": _fmt(r.lam),
                                  "total": _fmt(r.total)})
        episodes_fh.flush()
        rewards_fh.flush()

    def on_checkpoint(episode, params_now, adam_now, rng_now):
        dn.save_checkpoint(
            os.path.join(out, f"checkpoint_ep{episode:04d}.ckpt"), params_now,
            schedule.T, schedule.s, training_step=header.get("training_step", 0),
            extra={"rl_episode": episode + 1, "cutoff_ema": dict(cutoff_state.ema)},
            opt_tensors=dn.optimizer_tensors(adam_now))
        with open(rng_path, "w", encoding="utf-8") as fh:
            json.dump(rng_now.bit_generator.state, fh)
            fh.write("\n")

    hooks = ppo.TrainHooks(on_episode=on_episode, on_checkpoint=on_checkpoint)
    try:
        params, log_rows = ppo.train(
            params, cfg, reward_cfg, schedule, oracle, specs, cond_dist, train_hashes,
            rng, cutoff_state=cutoff_state, adam_state=adam_state,
            start_episode=start_episode, hooks=hooks)
    finally:
        episodes_fh.close()
        rewards_fh.close()
    final = os.path.join(out, "checkpoint_final.ckpt")
    dn.save_checkpoint(final, params, schedule.T, schedule.s,
                       training_step=header.get("training_step", 0),
                       extra={"rl_episode": cfg.episodes,
                              "cutoff_ema": dict(cutoff_state.ema)},
                       opt_tensors=dn.optimizer_tensors(adam_state))
    _write_resolved(config, out)
    if log_rows:
        print(f"finetuned {len(log_rows)} episodes; mean reward "
              f"{log_rows[0]['mean_reward']:.4f} -> {log_rows[-1]['mean_reward']:.4f}")
    return final


def cmd_sample(config: RunConfig, checkpoint_path=None, n=None):
    vocab, property_names, train, _ = _split_configs(config, "train")
    checkpoint_path = checkpoint_path or _default_checkpoint(config, "finetune")
    if not os.path.exists(checkpoint_path):
        checkpoint_path = _default_checkpoint(config, "pretrain")
    params, header, _ = dn.load_checkpoint(checkpoint_path)
    sched = header["schedule"]
    schedule = build_schedule(sched["T"], sched["s"])
    cond_dist = df.fit_condition_size(train)
    oracle = _build_oracle(config, vocab)
    n = n or config.section("sample")["n"]
    rng = stream_rng(config.seed, "sample")
    out = _ensure_dir(os.path.join(config.out_dir, "samples"))
    rows = []
    for i in range(n):
        condition, m = cond_dist.draw(rng)
        mol, _ = df.sample_molecule(params, condition, m, schedule, rng)
        write_xyz(os.path.join(out, f"mol_{i:05d}.xyz"), mol, property_names)
        estimates = oracle.predict(mol)
        row = {"molecule_id": f"mol_{i:05d}", "n_atoms": mol.n_atoms}
        for k, p in enumerate(property_names):
            row[f"{p}_target"] = float(condition[k])
        for p in property_names:
            row[f"{p}_mean"] = estimates[p].mean
        rows.append(row)
    fields = ["molecule_id", "n_atoms"]
    for p in property_names:
        fields.append(f"{p}_target")
    for p in property_names:
        fields.append(f"{p}_mean")
    _write_csv(os.path.join(out, "properties.csv"), fields, rows)
    _write_resolved(config, out)
    print(f"sampled {n} molecules into {out}")
    return out


def cmd_evaluate(config: RunConfig, samples_dir=None):
    vocab, property_names, _, train_hashes = _split_configs(config, "train")
    samples_dir = samples_dir or os.path.join(config.out_dir, "samples")
    if not os.path.isdir(samples_dir):
        raise ConfigError(f"samples directory {samples_dir!r} does not exist")
    generated = load_xyz_dataset(samples_dir, vocab, property_names)
    if not generated:
        raise ConfigError(f"samples directory {samples_dir!r} has no .xyz files")
    oracle = _build_oracle(config, vocab)
    specs = _objective_specs(config)
    report = mx.evaluate(generated, train_hashes, oracle, specs, vocab)
    out = _ensure_dir(os.path.join(config.out_dir, "evaluate"))
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.summary_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    detail_fields = ["index", "n_atoms", "valid", "unique", "novel", "connected",
                     "n_valence_ok", "hash"]
    _write_csv(os.path.join(out, "details.csv"), detail_fields, report.details)
    _write_resolved(config, out)
    print("Val%    Uni%    Nov%    VUN%    ASta%   MSta%   Top%")
    print(f"{report.validity:<7.2f} {report.uniqueness:<7.2f} {report.novelty:<7.2f} "
          f"{report.vun:<7.2f} {report.atom_stability:<7.2f} "
          f"{report.mol_stability:<7.2f} {report.top_molecules:<7.2f}")
    return report


def cmd_calibrate(config: RunConfig, table_path):
    specs = _objective_specs(config)
    with open(table_path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"property table {table_path!r} is empty")
    out = _ensure_dir(os.path.join(config.out_dir, "calibrate"))
    summary = {}
    for spec in specs:
        truth = np.array([float(r[spec.name]) for r in rows])
        means = np.array([float(r[f"{spec.name}_mean"]) for r in rows])
        sigmas = np.array([float(r[f"{spec.name}_sigma"]) for r in rows])
        curve = uq.calibration_curve(truth, means, sigmas)
        summary[spec.name] = {
            "r_squared": uq.r_squared(truth, means),
            "auce": uq.auce(truth, means, sigmas),
        }
        _write_csv(os.path.join(out, f"calibration_{spec.name}.csv"),
                   ["c", "empirical_coverage"],
                   [{"c": c, "empirical_coverage": p} for c, p in curve])
    with open(os.path.join(out, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_resolved(config, out)
    for name, vals in summary.items():
        print(f"{name}: R2 {vals['r_squared']:.4f}  AUCE {vals['auce']:.4f}")
    return summary


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _common(parser):
    parser.add_argument("--config", required=True, help="run config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override config out_dir")


def build_parser():
    parser = argparse.ArgumentParser(prog="molrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("prepare", "pretrain", "finetune", "sample", "evaluate", "calibrate",
                 "ablate"):
        p = sub.add_parser(name)
        _common(p)
        if name in ("finetune", "sample"):
            p.add_argument("--checkpoint", default=None)
        if name == "sample":
            p.add_argument("--n", type=int, default=None)
        if name == "evaluate":
            p.add_argument("samples_dir", nargs="?", default=None)
        if name == "calibrate":
            p.add_argument("table")
        if name == "ablate":
            p.add_argument("--plan", default=None, help="ablation plan JSON")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = {"seed": args.seed, "out_dir": args.out}
        config = load_config(args.config, overrides)
        if args.command == "prepare":
            cmd_prepare(config)
        elif args.command == "pretrain":
            cmd_pretrain(config)
        elif args.command == "finetune":
            cmd_finetune(config, args.checkpoint)
        elif args.command == "sample":
            cmd_sample(config, args.checkpoint, args.n)
        elif args.command == "evaluate":
            cmd_evaluate(config, args.samples_dir)
        elif args.command == "calibrate":
            cmd_calibrate(config, args.table)
        elif args.command == "ablate":
            from .ablation import run_plan_from_cli
            run_plan_from_cli(config, args.plan)
    except MolrlError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
