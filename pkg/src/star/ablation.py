"""Ablation variants S1..S6: cumulative reassembly of the full model.

    variant  agents  encoder  conv merge  time attention
    S1       plain CNN baseline (no selection module at all)
    S2       1       off      off         off
    S3       1       on       off         off
    S4       1       on       on          off
    S5       1       on       on          on
    S6       3*      on       on          on          (* = base config value)

S2..S5 run a single agent whose time coordinate, when temporal attention is
off, sweeps the window linearly over the episode. S6 is the base config
unchanged.
"""

from __future__ import annotations

import numpy as np

from .baseline import cnn_baseline_train_eval
from .config import ABLATION_VARIANTS, RunConfig
from .errors import ConfigError
from .metrics import evaluate
from .network import Model, train_model

VARIANT_FLAGS = {
    "S1": {},
    "S2": dict(n_agents=1, use_encoder=False, use_conv_merge=False, use_time_attention=False),
    "S3": dict(n_agents=1, use_encoder=True, use_conv_merge=False, use_time_attention=False),
    "S4": dict(n_agents=1, use_encoder=True, use_conv_merge=True, use_time_attention=False),
    "S5": dict(n_agents=1, use_encoder=True, use_conv_merge=True, use_time_attention=True),
    "S6": {},
}


def configure_ablation(variant: str, base: RunConfig) -> RunConfig:
    """Flag combination for one variant; S6 returns the base unchanged
    (variant tag aside), S1 is routed to the CNN baseline by the runner."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")
    return base.replace(variant=variant, **VARIANT_FLAGS[variant])


def run_variant(variant: str, base: RunConfig, train_windows, test_windows, seed: int):
    """Train and evaluate one variant with one seed. Returns a MetricsReport."""
    cfg = configure_ablation(variant, base).replace(seed=seed)
    if variant == "S1":
        return cnn_baseline_train_eval(train_windows, test_windows, cfg)
    model = Model(cfg)
    train_model(model, cfg, train_windows)
    return evaluate(model, cfg, test_windows)



def run_ablation(base: RunConfig, train_windows, test_windows, seeds,
                 variants=ABLATION_VARIANTS, progress=None):
    """Full sweep: every variant x every seed. Returns result rows."""
    rows = []
    for variant in variants:
        for seed in seeds:
            report = run_variant(variant, base, train_windows, test_windows, seed)
            rows.append({
                "variant": variant,
                "seed": seed,
                "accuracy": report.accuracy,
                "macro_precision": report.macro_precision,
                "macro_recall": report.macro_recall,
                "macro_f1": report.macro_f1,
            })
            if progress is not None:
                progress(rows[-1])
    return rows


def summarize(rows):
    """Per-variant mean and stddev of accuracy, in variant order."""
    out = []
    for variant in ABLATION_VARIANTS:
        accs = [r["accuracy"] for r in rows if r["variant"] == variant]
        if accs:
            out.append((variant, float(np.mean(accs)), float(np.std(accs))))
    return out


def format_summary(rows) -> str:
    lines = ["variant  runs  mean_acc  std_acc"]
    for variant, mean, std in summarize(rows):
        n = sum(1 for r in rows if r["variant"] == variant)
        lines.append(f"{variant:7s}  {n:4d}  {mean:8.4f}  {std:7.4f}")
    return "\n".join(lines)


def write_rows_csv(rows, path):
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "seed", "accuracy",
                                                "macro_precision", "macro_recall", "macro_f1"])
        writer.writeheader()
        writer.writerows(rows)
