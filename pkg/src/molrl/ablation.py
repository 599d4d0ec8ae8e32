"""Component-ablation driver: rerun finetune+evaluate under reward toggles.

The default plan compares the full reward against switching off the quality
bonus, the diversity penalty, and the dynamic cutoff, each over seeds
{1, 2, 3}, and aggregates mean metrics per label.
"""

from __future__ import annotations

import copy
import json
import os

import numpy as np

from .config import RunConfig, validate_config
from .errors import ConfigError

DEFAULT_PLAN = {
    "labels": [
        {"label": "full", "overrides": {}},
        {"label": "no-bonus", "overrides": {"bonus_enabled": False}},
        {"label": "no-diversity", "overrides": {"diversity_enabled": False}},
        {"label": "static-cutoff", "overrides": {"cutoff_mode": "static"}},
    ],
    "seeds": [1, 2, 3],
}

_TOGGLE_KEYS = {"bonus_enabled", "diversity_enabled", "cutoff_mode"}

_METRIC_FIELDS = ["validity", "uniqueness", "novelty", "vun", "atom_stability",
                  "mol_stability", "top_molecules"]


def load_plan(path=None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_PLAN)
    with open(path, "r", encoding="utf-8") as fh:
        plan = json.load(fh)
    labels = [entry["label"] for entry in plan.get("labels", [])]
    if not labels or len(set(labels)) != len(labels):
        raise ConfigError("ablation plan needs unique, nonempty labels")
    for entry in plan["labels"]:
        bad = set(entry.get("overrides", {})) - _TOGGLE_KEYS
        if bad:
            raise ConfigError(f"ablation overrides may only touch reward toggles, got {sorted(bad)}")
    plan.setdefault("seeds", DEFAULT_PLAN["seeds"])
    return plan


def run_plan(plan: dict, base_config: RunConfig, out_dir=None):
    """One finetune+evaluate per (label, seed); returns per-run and mean rows."""
    from . import cli  # local import: cli imports this module lazily too

    out_dir = out_dir or os.path.join(base_config.out_dir, "ablation")
    os.makedirs(out_dir, exist_ok=True)
    run_rows = []
    for entry in plan["labels"]:
        label = entry["label"]
        for seed in plan["seeds"]:
            doc = copy.deepcopy(base_config.raw)
            doc["reward"] = {**doc["reward"], **entry.get("overrides", {})}
            doc["seed"] = int(seed)
            doc["out_dir"] = os.path.join(out_dir, label, f"seed{seed}")
            cfg = validate_config(doc)
            cli.cmd_prepare(cfg)
            cli.cmd_pretrain(cfg)
            cli.cmd_finetune(cfg)
            cli.cmd_sample(cfg)
            report = cli.cmd_evaluate(cfg)
            row = {"label": label, "seed": seed}
            row.update({k: getattr(report, k) for k in _METRIC_FIELDS})
            run_rows.append(row)
            _write_rows(os.path.join(out_dir, "comparison.csv"),
                        ["label", "seed"] + _METRIC_FIELDS, run_rows)
    mean_rows = []
    for entry in plan["labels"]:
        label = entry["label"]
        mine = [r for r in run_rows if r["label"] == label]
        if not mine:
            continue
        row = {"label": label}
        for k in _METRIC_FIELDS:
            row[k] = float(np.mean([r[k] for r in mine]))
        mean_rows.append(row)
    _write_rows(os.path.join(out_dir, "aggregate.csv"), ["label"] + _METRIC_FIELDS,
                mean_rows)
    return run_rows, mean_rows


def _write_rows(path, fieldnames, rows):
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})


def run_plan_from_cli(config: RunConfig, plan_path):
    plan = load_plan(plan_path)
    run_rows, mean_rows = run_plan(plan, config)
    for row in mean_rows:
        print(row["label"], " ".join(f"{row[k]:.2f}" for k in _METRIC_FIELDS))
    return run_rows, mean_rows
