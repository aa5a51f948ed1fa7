"""Experiment driver: pretraining, the four study families, and sweeps.

Every command materializes its data from (config, seed), writes a frozen
copy of the resolved configuration into its run directory together with
metrics, a resource report, and the seed, prints a summary table, and
returns the rows for programmatic callers.  Existing run directories are
never overwritten.

Layout under the experiment's ``output_dir``::

    checkpoint.ffck           written by `pretrain`, read by the others
    pretrain/                 loss history and provenance
    probe-layers/             per-layer probe error curve
    fusion-table/<variant>/   one run per fusion head variant, plus table.csv
    comparison/<strategy>/    one run per strategy, plus table.csv and
                              full_scale_reference.csv
    count-params/             closed-form reference table (pure arithmetic)
    sweep/<run>/              one run per grid point, plus summary.csv
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import re
import time
from pathlib import Path

import numpy as np

from .accounting import (
    ModelSpec,
    comparison_model_specs,
    count_trainable_params,
    measure_throughput,
    reference_table,
    resource_report,
    throughput_environment,
)
from .checkpoint import load_checkpoint
from .config import SCHEMA, ConfigError, ExperimentConfig, build_config, config_sections, render_config
from .encoder import FULL_SCALE, build_encoder
from .fusion import HierarchicalFusionSpec, LinearFusionSpec, evenly_spaced_taps, layer_weight_norms
from .model import ProbeBank, build_model
from .params import load_state, set_trainable
from .peft import PeftSpec
from .pretrain import pretrain_masked_prediction
from .synth import generate_corpus
from .tensor import Tensor
from .training import Metrics, Trainer, evaluate_fer, evaluate_fer_per_tap, train_downstream

__all__ = [
    "MissingArtifactError",
    "cmd_pretrain",
    "cmd_probe_layers",
    "cmd_fusion_table",
    "cmd_comparison",
    "cmd_count_params",
    "cmd_sweep",
    "default_fusion_variants",
]


class MissingArtifactError(RuntimeError):
    """A required earlier-stage output (e.g. a checkpoint) is absent."""


# -- run-directory plumbing --------------------------------------------------


def _require_trainable(cfg: ExperimentConfig) -> None:
    if cfg.counting_only():
        raise ConfigError(
            "preset 'full-counting' is for closed-form parameter arithmetic only; "
            "run count-params, or switch the preset to 'desk' to train"
        )


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        raise ConfigError(f"refusing to overwrite existing run directory {path}")
    path.mkdir(parents=True)
    return path


def _checkpoint_file(cfg: ExperimentConfig) -> Path:
    return cfg.output_dir / "checkpoint.ffck"


def _load_pretrained_state(cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    path = _checkpoint_file(cfg)
    if not path.exists():
        raise MissingArtifactError(
            f"no pretrained checkpoint at {path}; run the 'pretrain' subcommand first"
        )
    return load_checkpoint(path)


def _slug(label: str) -> str:
    return re.sub(r"[^a-z0-9._=+-]+", "-", label.lower()).strip("-")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_metrics(path: Path, history: list[Metrics]) -> None:
    _write_csv(
        path,
        ["step", "loss", "fer", "examples_per_sec"],
        [(m.step, f"{m.loss:.6f}", f"{m.frame_error_rate:.4f}", f"{m.throughput:.2f}")
         for m in history],
    )


def _write_provenance(run_dir: Path, cfg: ExperimentConfig) -> None:
    (run_dir / "resolved.ini").write_text(render_config(cfg))
    (run_dir / "seed.txt").write_text(f"{cfg.seed}\n")


def _write_resource_report(run_dir: Path, spec: ModelSpec, batch: int, seq_len: int,
                           throughput: float | None = None):
    report = resource_report(spec, batch, seq_len, throughput=throughput)
    payload = dataclasses.asdict(report)
    payload.update(batch=batch, seq_len=seq_len, environment=throughput_environment())
    (run_dir / "resource_report.json").write_text(json.dumps(payload, indent=2) + "\n")
    return report


def _write_result(run_dir: Path, payload: dict) -> None:
    (run_dir / "result.json").write_text(json.dumps(payload, indent=2) + "\n")


def _print_table(headers, rows) -> None:
    cells = [[str(c) for c in row] for row in rows]
    widths = [
        max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
        for i, h in enumerate(headers)
    ]
    head = "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))
    print(head)
    print("-" * len(head))
    for row in cells:
        print("  ".join(row[i].ljust(widths[i]) for i in range(len(headers))))


# -- the pretraining stage ---------------------------------------------------


def cmd_pretrain(cfg: ExperimentConfig) -> dict:
    """Pretrain the encoder on the unlabeled split; writes the checkpoint
    every later command consumes."""
    _require_trainable(cfg)
    ckpt = _checkpoint_file(cfg)
    run_dir = cfg.output_dir / "pretrain"
    if ckpt.exists():
        raise ConfigError(f"refusing to overwrite existing checkpoint {ckpt}")
    if run_dir.exists():
        raise ConfigError(f"refusing to overwrite existing run directory {run_dir}")
    corpus = generate_corpus(cfg.synth, cfg.seed, "pretrain")
    encoder = build_encoder(cfg.encoder, cfg.seed)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    losses = pretrain_masked_prediction(encoder, corpus, cfg.pretrain, ckpt)
    run_dir.mkdir(parents=True)
    _write_provenance(run_dir, cfg)
    _write_csv(run_dir / "losses.csv", ["step", "loss"],
               [(i + 1, f"{v:.6f}") for i, v in enumerate(losses)])
    gate = cfg.pretrain.gate_window
    first = float(np.mean(losses[:gate]))
    last = float(np.mean(losses[-gate:]))
    summary = {
        "checkpoint": str(ckpt),
        "steps": len(losses),
        "first_window_loss": first,
        "last_window_loss": last,
        "loss_drop_pct": 100.0 * (first - last) / first,
    }
    _write_result(run_dir, summary)
    _print_table(["steps", "first window loss", "last window loss", "drop"],
                 [[len(losses), f"{first:.4f}", f"{last:.4f}",
                   f"{summary['loss_drop_pct']:.1f}%"]])
    return summary


# -- per-layer probes ----------------------------------------------------------


def cmd_probe_layers(cfg: ExperimentConfig, taps=None) -> list[dict]:
    """Train one frozen-encoder linear probe per tap and report test error
    per layer (the feature-quality-by-depth curve)."""
    _require_trainable(cfg)
    num_layers = cfg.encoder.num_layers
    taps = tuple(range(num_layers)) if taps is None else tuple(int(t) for t in taps)
    if not taps:
        raise ConfigError("need at least one tap index to probe")
    if list(taps) != sorted(set(taps)):
        raise ConfigError(f"tap indices must be unique and increasing, got {taps}")
    if taps[0] < 0 or taps[-1] >= num_layers:
        raise ConfigError(f"tap indices {taps} out of range for {num_layers} layers")
    state = _load_pretrained_state(cfg)
    run_dir = _fresh_dir(cfg.output_dir / "probe-layers")

    encoder = build_encoder(cfg.encoder, cfg.seed)
    load_state(encoder, state, prefix="encoder")
    set_trainable(encoder, "**", False)
    bank = ProbeBank(encoder, taps, cfg.synth.vocab, cfg.seed)
    train_set = generate_corpus(cfg.synth, cfg.seed, "train")
    test_set = generate_corpus(cfg.synth, cfg.seed, "test")
    trainer = Trainer(bank, train_set, cfg.train, use_ema=True)
    history = _train_probe_bank(trainer, bank, cfg.train)
    fers = evaluate_fer_per_tap(bank, test_set)

    rows = [{"layer": tap, "fer": fers[tap]} for tap in taps]
    _write_provenance(run_dir, cfg)
    _write_metrics(run_dir / "metrics.csv", history)
    table = [(tap, f"{fers[tap]:.4f}") for tap in taps]
    _write_csv(run_dir / "layer_fer.csv", ["layer", "fer"], table)
    _write_csv(run_dir / "plot_probe_curve.csv", ["layer", "fer"], table)
    # The costing spec covers a single probe; report the deepest one,
    # which dominates the shared forward.
    deepest = ModelSpec(cfg.encoder, None, PeftSpec(), cfg.synth.vocab, probe_tap=taps[-1])
    _write_resource_report(run_dir, deepest, cfg.train.batch_size, cfg.train.crop_len,
                           throughput=history[-1].throughput if history else None)
    _write_result(run_dir, {"layer_fer": {str(t): fers[t] for t in taps}})
    _print_table(["layer", "test fer"], [[t, f"{fers[t]:.4f}"] for t in taps])
    return rows


def _train_probe_bank(trainer: Trainer, bank: ProbeBank, train_cfg) -> list[Metrics]:
    history: list[Metrics] = []
    window: list[float] = []
    t0 = time.perf_counter()
    for step in range(1, train_cfg.steps + 1):
        window.append(trainer.step())
        if step % train_cfg.log_every == 0 or step == train_cfg.steps:
            elapsed = time.perf_counter() - t0
            frames, labels = trainer.sampler.batch()
            per_tap = bank.predictions_per_tap(Tensor(frames))
            fer = float(np.mean([(p != labels).mean() for p in per_tap.values()]))
            rate = len(window) * train_cfg.batch_size / elapsed if elapsed > 0 else float("inf")
            history.append(Metrics(step=step, loss=float(np.mean(window)),
                                   frame_error_rate=fer, throughput=rate))
            window = []
            t0 = time.perf_counter()
    trainer.finish()
    return history


# -- fusion head comparison ----------------------------------------------------


def default_fusion_variants(encoder_cfg) -> dict[str, object]:
    """Tap-count sweep, projector-depth sweep, and both hierarchical
    variants, all over the frozen encoder."""
    num_layers, dim = encoder_cfg.num_layers, encoder_cfg.model_dim
    all_taps = evenly_spaced_taps(num_layers, num_layers)
    out: dict[str, object] = {}
    for n in (1, 2, 4, num_layers):
        if n <= num_layers:
            label = f"linear {n} tap" + ("s" if n > 1 else "")
            out.setdefault(label, LinearFusionSpec(evenly_spaced_taps(num_layers, n),
                                                   depth=1, width=dim))
    for depth in (2, 3, 4):
        out[f"linear {num_layers} taps depth {depth}"] = LinearFusionSpec(
            all_taps, depth=depth, width=dim)
    if num_layers >= 3:  # the tree heads need at least three taps
        for variant in ("balanced", "unbalanced"):
            out[f"hierarchical {variant}"] = HierarchicalFusionSpec(
                all_taps, variant, fp_dim=dim // 2, final_dim=dim, final_depth=3)
    return out


def _describe_fusion(spec) -> str:
    if isinstance(spec, LinearFusionSpec):
        return f"linear {len(spec.tap_indices)} taps depth {spec.depth}"
    return f"hierarchical {spec.variant} {len(spec.tap_indices)} taps"


def cmd_fusion_table(cfg: ExperimentConfig, variants=None) -> list[dict]:
    """Train each fusion head variant over the frozen pretrained encoder;
    emits (variant, head params, error) rows plus per-layer weight norms
    for the linear variants."""
    _require_trainable(cfg)
    if variants is None:
        variants = default_fusion_variants(cfg.encoder)
    elif not isinstance(variants, dict):
        variants = {_describe_fusion(spec): spec for spec in variants}
    state = _load_pretrained_state(cfg)
    base_dir = _fresh_dir(cfg.output_dir / "fusion-table")
    train_set = generate_corpus(cfg.synth, cfg.seed, "train")
    test_set = generate_corpus(cfg.synth, cfg.seed, "test")

    rows: list[dict] = []
    norm_rows: list[tuple] = []
    for label, fspec in variants.items():
        run_dir = _fresh_dir(base_dir / _slug(label))
        spec = ModelSpec(cfg.encoder, fspec, PeftSpec(), cfg.synth.vocab)
        model = build_model(spec, cfg.seed, state)
        history = train_downstream(model, train_set, cfg.train)
        fer = evaluate_fer(model, test_set)
        head_params = model.head.num_params()
        rows.append({"variant": label, "head_params": head_params, "fer": fer})
        if isinstance(fspec, LinearFusionSpec):
            for tap, norm in layer_weight_norms(model.head):
                norm_rows.append((label, tap, f"{norm:.6f}"))
        _write_provenance(run_dir, dataclasses.replace(cfg, fusion=fspec))
        _write_metrics(run_dir / "metrics.csv", history)
        _write_resource_report(run_dir, spec, cfg.train.batch_size, cfg.train.crop_len,
                               throughput=history[-1].throughput if history else None)
        _write_result(run_dir, {"variant": label, "head_params": head_params, "fer": fer})

    _write_csv(base_dir / "table.csv", ["variant", "head_params", "fer"],
               [(r["variant"], r["head_params"], f"{r['fer']:.4f}") for r in rows])
    if norm_rows:
        _write_csv(base_dir / "weight_norms.csv", ["variant", "layer", "weight_norm"], norm_rows)
    _print_table(["variant", "head params", "test fer"],
                 [[r["variant"], f"{r['head_params']:,}", f"{r['fer']:.4f}"] for r in rows])
    return rows


# -- strategy comparison -------------------------------------------------------


def cmd_comparison(cfg: ExperimentConfig) -> list[dict]:
    """Head-to-head run of the eight tuning strategies with measured cost
    columns, plus the closed-form full-scale reference counts."""
    _require_trainable(cfg)
    bottleneck = (cfg.peft.bottleneck_dim if cfg.peft.kind == "adapter"
                  else max(cfg.encoder.model_dim // 4, 1))
    specs = comparison_model_specs(cfg.encoder, cfg.synth.vocab, bottleneck)
    state = _load_pretrained_state(cfg)
    base_dir = _fresh_dir(cfg.output_dir / "comparison")
    train_set = generate_corpus(cfg.synth, cfg.seed, "train")
    test_set = generate_corpus(cfg.synth, cfg.seed, "test")

    rows: list[dict] = []
    for label, spec in specs.items():
        run_dir = _fresh_dir(base_dir / _slug(label))
        model = build_model(spec, cfg.seed, state)
        # Full fine-tuning moves every weight; it needs a gentler step.
        lr_factor = 0.1 if spec.peft.kind == "full" else 1.0
        row_train = dataclasses.replace(
            cfg.train, learning_rate=cfg.train.learning_rate * lr_factor)
        trainer = Trainer(model, train_set, row_train, use_ema=True)
        throughput = measure_throughput(trainer)
        history = train_downstream(model, train_set, row_train, trainer=trainer)
        fer = evaluate_fer(model, test_set)
        enc_params, head_params = count_trainable_params(spec.encoder, spec.fusion, spec.peft)
        report = _write_resource_report(run_dir, spec, row_train.batch_size,
                                        row_train.crop_len, throughput=throughput)
        rows.append({
            "strategy": label,
            "encoder_params": enc_params,
            "head_params": head_params,
            "activation_bytes": report.activation_bytes,
            "examples_per_sec": throughput,
            "fer": fer,
        })
        _write_provenance(run_dir, dataclasses.replace(
            cfg, fusion=spec.fusion, peft=spec.peft, train=row_train))
        _write_metrics(run_dir / "metrics.csv", history)
        _write_result(run_dir, rows[-1])

    _write_csv(
        base_dir / "table.csv",
        ["strategy", "encoder_params", "head_params", "activation_bytes",
         "examples_per_sec", "fer"],
        [(r["strategy"], r["encoder_params"], r["head_params"], r["activation_bytes"],
          f"{r['examples_per_sec']:.2f}", f"{r['fer']:.4f}") for r in rows],
    )
    reference = reference_table(FULL_SCALE)
    _write_csv(
        base_dir / "full_scale_reference.csv",
        ["label", "computed", "reference", "deviation_pct", "tolerance_pct", "within"],
        [(r["label"], r["computed"], r["reference"], f"{r['deviation_pct']:.2f}",
          "" if r["tolerance_pct"] is None else f"{r['tolerance_pct']:.0f}",
          "" if r["within"] is None else r["within"]) for r in reference],
    )
    _print_table(
        ["strategy", "enc params", "head params", "act bytes", "ex/s", "test fer"],
        [[r["strategy"], f"{r['encoder_params']:,}", f"{r['head_params']:,}",
          f"{r['activation_bytes']:,}", f"{r['examples_per_sec']:.2f}",
          f"{r['fer']:.4f}"] for r in rows],
    )
    return rows


# -- closed-form counting ------------------------------------------------------


def cmd_count_params(cfg: ExperimentConfig) -> list[dict]:
    """Pure parameter arithmetic against the published reference counts;
    allocates no tensors and runs in well under a second."""
    target = cfg.encoder if cfg.counting_only() else FULL_SCALE
    rows = reference_table(target)
    run_dir = _fresh_dir(cfg.output_dir / "count-params")
    _write_provenance(run_dir, cfg)
    _write_csv(
        run_dir / "reference_counts.csv",
        ["label", "computed", "reference", "deviation_pct", "tolerance_pct", "within"],
        [(r["label"], r["computed"], r["reference"], f"{r['deviation_pct']:.2f}",
          "" if r["tolerance_pct"] is None else f"{r['tolerance_pct']:.0f}",
          "" if r["within"] is None else r["within"]) for r in rows],
    )
    _print_table(
        ["configuration", "computed", "reference", "deviation", "within tol"],
        [[r["label"], f"{r['computed']:,}", f"{r['reference']:,}",
          f"{r['deviation_pct']:+.2f}%",
          "n/a" if r["within"] is None else ("yes" if r["within"] else "NO")]
         for r in rows],
    )
    return rows


# -- sweeps --------------------------------------------------------------------


def _run_training(cfg: ExperimentConfig, run_dir: Path,
                  state: dict[str, np.ndarray] | None) -> dict:
    """One self-contained training run of the configured model."""
    spec = ModelSpec(cfg.encoder, cfg.fusion, cfg.peft, cfg.synth.vocab)
    spec.validate()
    model = build_model(spec, cfg.seed, state)
    train_set = generate_corpus(cfg.synth, cfg.seed, "train")
    test_set = generate_corpus(cfg.synth, cfg.seed, "test")
    history = train_downstream(model, train_set, cfg.train)
    fer = evaluate_fer(model, test_set)
    _write_provenance(run_dir, cfg)
    _write_metrics(run_dir / "metrics.csv", history)
    _write_resource_report(run_dir, spec, cfg.train.batch_size, cfg.train.crop_len,
                           throughput=history[-1].throughput if history else None)
    result = {"final_loss": history[-1].loss if history else float("nan"), "fer": fer}
    _write_result(run_dir, result)
    return result


def cmd_sweep(cfg: ExperimentConfig, grid: dict[str, list]) -> list[dict]:
    """Cartesian-product runs over config overrides.

    Grid keys are ``section.key`` paths from the config schema and are
    validated, and every run config is built, before anything executes.
    The pretrained checkpoint is reused for runs whose encoder geometry
    matches the base config; otherwise the run starts from random
    initialization.
    """
    _require_trainable(cfg)
    grid = {key: list(values) for key, values in grid.items()}
    for key, values in grid.items():
        if "." not in key:
            raise ConfigError(f"grid key {key!r} must look like section.key")
        section, name = key.split(".", 1)
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError(f"unknown grid key {key!r}")
        if key == "experiment.output_dir":
            raise ConfigError("cannot sweep experiment.output_dir; run directories derive from it")
        if not values:
            raise ConfigError(f"grid key {key!r} has an empty value list")
    sweep_root = cfg.output_dir / "sweep"
    if sweep_root.exists():
        raise ConfigError(f"refusing to overwrite existing sweep directory {sweep_root}")

    base_sections = config_sections(cfg)
    keys = list(grid)
    planned = []
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        overrides = {k: str(v) for k, v in zip(keys, combo)}
        run_cfg = build_config(base_sections, overrides)
        parts = "_".join(f"{k.split('.', 1)[1]}={v}" for k, v in overrides.items())
        slug = f"run_{i:03d}" + (f"_{_slug(parts)}" if parts else "")
        planned.append((slug, overrides, run_cfg))

    ckpt = _checkpoint_file(cfg)
    state = load_checkpoint(ckpt) if ckpt.exists() else None
    sweep_root.mkdir(parents=True)
    summary: list[dict] = []
    for slug, overrides, run_cfg in planned:
        run_dir = _fresh_dir(sweep_root / slug)
        run_state = state if run_cfg.encoder == cfg.encoder else None
        result = _run_training(run_cfg, run_dir, run_state)
        summary.append({"run": slug, **overrides, **result})

    _write_csv(
        sweep_root / "summary.csv",
        ["run", *keys, "final_loss", "fer"],
        [(s["run"], *(s[k] for k in keys), f"{s['final_loss']:.6f}", f"{s['fer']:.4f}")
         for s in summary],
    )
    _print_table(["run", *keys, "final loss", "test fer"],
                 [[s["run"], *(s[k] for k in keys), f"{s['final_loss']:.4f}",
                   f"{s['fer']:.4f}"] for s in summary])
    return summary
