"""Experiment driver behind the CLI: training runs, sweeps, evaluation, export, timing."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import statistics
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import data as D
from .config import DatasetBlock, RunConfig, SweepSpec, dump_json, save_config
from .errors import ConfigError, NumericAbort
from .metrics import (
    MetricsReport,
    accuracy,
    latent_separation,
    micro_macro_f1,
    zero_shot_top1,
)
from .model import (
    BASELINE,
    GDVM,
    GdvmModel,
    ModelVariant,
    TrainConfig,
    latent_means,
    load_checkpoint,
    mc_scores,
    predict_scores,
    save_checkpoint,
    train,
)

log = logging.getLogger(__name__)

# per-image training time on a GPU for the baseline and the latent model, mini-batch 100
REFERENCE_GPU_US = {"baseline": 296.52, "gdvm": 299.22}


# ---------------------------------------------------------------- data plumbing


def materialize(block: DatasetBlock) -> D.Dataset:
    """Build the full dataset a config's dataset block describes."""
    gen, p = block.generator, dict(block.params)
    try:
        if gen == "blobs":
            return D.gen_blobs(block.seed, **p)
        if gen == "multilabel":
            return D.gen_multilabel(block.seed, **p)
        if gen == "zeroshot":
            return D.gen_zeroshot(block.seed, **p)
        if gen == "idx":
            return D.load_idx(p["images"], p["labels"], p.get("n_classes", 10))
        if gen == "mnist-sample":
            images, labels = D.prepare_mnist(p.get("cache_dir", os.path.join("data", "mnist")))
            return D.load_idx(images, labels)
    except TypeError as exc:
        raise ConfigError(f"dataset.params: {exc}") from None
    except KeyError as exc:
        raise ConfigError(f"dataset.params: missing {exc.args[0]!r}") from None
    raise ConfigError(f"dataset.generator: unknown {gen!r}")


@dataclass
class Splits:
    train: D.Dataset
    val: Optional[D.Dataset]
    test: Optional[D.Dataset]

    def full_train(self) -> D.Dataset:
        """Training plus validation rows, for the final refit after selection."""
        if self.val is None:
            return self.train
        merged = np.concatenate([self.train.features, self.val.features])
        targets = np.concatenate([self.train.targets, self.val.targets])
        ids = None
        if self.train.class_ids is not None:
            ids = np.concatenate([self.train.class_ids, self.val.class_ids])
        return D.Dataset(merged, targets, self.train.task, ids, dict(self.train.provenance))

    def items(self):
        return [(name, ds) for name, ds in (("train", self.train), ("val", self.val), ("test", self.test)) if ds is not None]


def make_splits(cfg: RunConfig, seed: int, full: Optional[D.Dataset] = None) -> Splits:
    """Test carve (fixed by the dataset seed), optional per-seed subsample, then validation split."""
    block = cfg.dataset
    full = materialize(block) if full is None else full
    pool, _, test = D.split(full, D.SplitSpec(val_fraction=0.0, test_fraction=block.test_fraction,
                                              seed=block.seed, stratified=block.stratified))
    if block.subsample is not None:
        pool = D.subsample(pool, block.subsample, seed, block.stratified)
    val_fraction = cfg.split.get("val_fraction", 0.2)
    train_ds, val, _ = D.split(pool, D.SplitSpec(val_fraction=val_fraction, test_fraction=0.0, seed=seed,
                                                 stratified=cfg.split.get("stratified", True)))
    return Splits(train_ds, val, test)


def build_model(cfg: RunConfig, ds: D.Dataset, seed: int, variant: Optional[str] = None,
                beta: Optional[float] = None) -> GdvmModel:
    v = ModelVariant(variant or cfg.variant, cfg.beta if beta is None else beta)
    return GdvmModel(cfg.arch(), v, ds.task, ds.input_shape, seed=seed, dtype=np.dtype(cfg.dtype), dropout=cfg.dropout)


def train_config(cfg: RunConfig, epochs: Optional[int] = None) -> TrainConfig:
    return TrainConfig(cfg.epochs if epochs is None else epochs, cfg.batch_size, cfg.optimizer_state())


# ---------------------------------------------------------------- evaluation


def parse_mode(mode: str) -> tuple[str, int, str]:
    """``deterministic`` | ``mc:N`` (prior draws) | ``mcq:N`` (posterior draws)."""
    if mode == "deterministic":
        return "deterministic", 0, "prior"
    kind, _, n = mode.partition(":")
    if kind in ("mc", "mcq") and n.isdigit() and int(n) >= 1:
        return "mc", int(n), "prior" if kind == "mc" else "posterior"
    raise ConfigError(f"mode: expected 'deterministic', 'mc:N' or 'mcq:N', got {mode!r}")


def _prototypes_for(ds: D.Dataset) -> np.ndarray:
    which = ds.provenance.get("prototypes", "unseen")
    return ds.task.seen_prototypes if which == "seen" else ds.task.unseen_prototypes


def score(model: GdvmModel, ds: D.Dataset, scores: np.ndarray) -> dict:
    """Task metrics for output-layer values ``scores`` on ``ds``."""
    kind = ds.task.kind
    if kind == D.MULTICLASS:
        p = np.clip(scores[np.arange(len(ds)), ds.targets], 1e-12, None)
        return {"accuracy": accuracy(scores.argmax(axis=1), ds.targets), "loss": float(-np.mean(np.log(p)))}
    if kind == D.MULTILABEL:
        micro, macro = micro_macro_f1(scores >= 0.5, ds.targets)
        q = np.clip(scores, 1e-7, 1 - 1e-7)
        bce = -np.mean(ds.targets * np.log(q) + (1 - ds.targets) * np.log(1 - q))
        return {"micro_f1": micro, "macro_f1": macro, "loss": float(bce)}
    top1 = zero_shot_top1(scores, _prototypes_for(ds), ds.class_ids)
    return {"top1": top1, "loss": float(np.mean(((scores - ds.targets) ** 2).sum(axis=1)))}


def evaluate(model: GdvmModel, ds: D.Dataset, mode: str = "deterministic", rng=0) -> dict:
    kind, n, source = parse_mode(mode)
    t0 = time.perf_counter()
    if kind == "deterministic":
        scores = predict_scores(model, ds.features)
    else:
        scores = mc_scores(model, ds.features, n, rng, source)
    out = score(model, ds, scores)
    out["predict_seconds"] = time.perf_counter() - t0
    return out


# ---------------------------------------------------------------- commands


def _write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def run_training(cfg: RunConfig, out_dir: Optional[str] = None, save: bool = True) -> MetricsReport:
    """One training run per seed; writes per-seed CSV, aggregate JSON and checkpoints."""
    out_dir = out_dir or cfg.out_dir
    if save:
        os.makedirs(out_dir, exist_ok=True)
        save_config(cfg, os.path.join(out_dir, "config.json"))
    full = materialize(cfg.dataset)
    timing: dict = {}
    report = MetricsReport(context={"variant": cfg.variant, "beta": cfg.beta, "epochs": cfg.epochs,
                                    "train_us_per_image": timing})
    for seed in cfg.seeds:
        splits = make_splits(cfg, seed, full)
        model = build_model(cfg, splits.train, seed)
        result = train(model, splits.train, train_config(cfg), seed)
        row = {}
        for name, ds in splits.items():
            for k, v in evaluate(model, ds).items():
                if k != "predict_seconds":
                    row[f"{name}_{k}"] = v
        row["final_train_objective"] = result.loss_trace[-1] if result.loss_trace else None
        row["logvar_clamp_events"] = result.clamp_events
        report.add(seed, **row)
        if result.epoch_seconds:
            # wall-clock figures stay out of the CSV so reruns give identical bytes
            timing[str(seed)] = _median(result.epoch_seconds) / result.images_per_epoch * 1e6
        if save:
            save_checkpoint(model, os.path.join(out_dir, f"checkpoint-seed{seed}.npz"), extra={"seed": seed})
            _write_text(os.path.join(out_dir, f"loss-trace-seed{seed}.csv"),
                        "epoch,objective,kl\n" + "".join(f"{i},{l!r},{k!r}\n" for i, (l, k)
                                                         in enumerate(zip(result.loss_trace, result.kl_trace))))
    if save:
        _write_text(os.path.join(out_dir, "metrics.csv"), report.to_csv())
        _write_text(os.path.join(out_dir, "report.json"), report.to_json() + "\n")
    return report


def _median(xs):
    return statistics.median(xs) if xs else float("nan")


GRID_FIELDS = ["beta", "epochs", "seed", "metric", "value", "status"]


def select_best(rows: list[dict]) -> Optional[dict]:
    """Best (beta, epochs) cell by mean metric over seeds; failed cells are skipped.

    Ties go to the smaller beta, then fewer epochs.
    """
    cells: dict[tuple, list] = {}
    failed = set()
    for r in rows:
        key = (float(r["beta"]), int(r["epochs"]))
        if r["status"] != "ok" or r["value"] is None or not math.isfinite(float(r["value"])):
            failed.add(key)
        else:
            cells.setdefault(key, []).append(float(r["value"]))
    ranked = [(-float(np.mean(v)), key[0], key[1]) for key, v in cells.items() if key not in failed]
    if not ranked:
        return None
    neg, beta, epochs = min(ranked)
    return {"beta": beta, "epochs": epochs, "mean": -neg}


def grid_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=GRID_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                    for k in GRID_FIELDS})
    return buf.getvalue()


def grid_from_csv(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({"beta": float(r["beta"]), "epochs": int(r["epochs"]), "seed": int(r["seed"]),
                     "metric": r["metric"], "value": float(r["value"]) if r["value"] else None,
                     "status": r["status"]})
    return rows


def run_sweep(cfg: RunConfig, sweep: SweepSpec, out_dir: Optional[str] = None, save: bool = True) -> dict:
    """Grid over (beta, epochs) scored on validation, then a refit of the best cell.

    Each (beta, seed) pair trains once to the largest epoch count and is
    scored at every grid epoch along the way; continuing a run is identical
    to a fresh run with more epochs because all random streams are sequential.
    """
    out_dir = out_dir or cfg.out_dir
    sweep.check_task(cfg.dataset.task_kind)
    full = materialize(cfg.dataset)
    checkpoints = sorted(set(sweep.epochs))
    rows = []
    for beta in sweep.betas:
        for seed in cfg.seeds:
            splits = make_splits(cfg, seed, full)
            if splits.val is None:
                raise ConfigError("split.val_fraction: the sweep needs a non-empty validation split")
            model = build_model(cfg, splits.train, seed, beta=beta)
            scored = {}

            def on_epoch(epoch, _loss, model=model, splits=splits, scored=scored):
                if epoch + 1 in checkpoints:
                    scored[epoch + 1] = evaluate(model, splits.val)[sweep.metric]

            if 0 in checkpoints:
                scored[0] = evaluate(model, splits.val)[sweep.metric]
            status = "ok"
            try:
                train(model, splits.train, train_config(cfg, max(checkpoints)), seed, on_epoch=on_epoch)
            except NumericAbort as exc:
                log.warning("beta=%s seed=%s diverged: %s", beta, seed, exc)
                status = "failed"
            for epochs in sweep.epochs:
                value = scored.get(epochs)
                rows.append({"beta": float(beta), "epochs": epochs, "seed": seed, "metric": sweep.metric,
                             "value": value, "status": status if value is not None else "failed"})
    best = select_best(rows)
    result = {"grid": rows, "best": best, "sweep": sweep.to_dict()}
    if best is not None:
        final_cfg = cfg.with_overrides(beta=best["beta"], epochs=best["epochs"])
        report = MetricsReport(context={"beta": best["beta"], "epochs": best["epochs"]})
        for seed in cfg.seeds:
            splits = make_splits(final_cfg, seed, full)
            refit = splits.full_train()
            model = build_model(final_cfg, refit, seed)
            train(model, refit, train_config(final_cfg), seed)
            if splits.test is not None:
                report.add(seed, **{f"test_{k}": v for k, v in evaluate(model, splits.test).items()
                                    if k != "predict_seconds"})
        result["test_report"] = {"rows": report.rows, "aggregate": report.aggregate()}
    if save:
        os.makedirs(out_dir, exist_ok=True)
        _write_text(os.path.join(out_dir, "grid.csv"), grid_to_csv(rows))
        dump_json({k: v for k, v in result.items() if k != "grid"}, os.path.join(out_dir, "sweep.json"))
    return result


def _checkpoint_splits(cfg: RunConfig, model: GdvmModel) -> Splits:
    seed = int(getattr(model, "checkpoint_extra", {}).get("seed", cfg.seeds[0]))
    return make_splits(cfg, seed)


def run_eval(checkpoint: str, cfg: RunConfig, modes: list[str], out_path: Optional[str] = None, rng=0) -> dict:
    """Evaluate a checkpoint on every split of the config's dataset, once per mode.

    Metrics and wall-clock prediction times are kept in separate sections so
    the metric section is reproducible byte for byte.
    """
    for mode in modes:
        parse_mode(mode)
    model = load_checkpoint(checkpoint, cfg.arch())
    splits = _checkpoint_splits(cfg, model)
    report: dict = {"checkpoint": os.fspath(checkpoint), "variant": model.variant.tag, "modes": {}, "seconds": {}}
    for mode in modes:
        report["modes"][mode], report["seconds"][mode] = {}, {}
        for name, ds in splits.items():
            metrics = evaluate(model, ds, mode, rng)
            report["seconds"][mode][name] = metrics.pop("predict_seconds")
            report["modes"][mode][name] = metrics
    if len(modes) > 1:
        base = report["seconds"][modes[0]]
        report["runtime_ratio"] = {
            mode: {name: (t / base[name] if base[name] > 0 else None) for name, t in per_split.items()}
            for mode, per_split in report["seconds"].items()
        }
    if out_path:
        dump_json(report, out_path)
    return report


def run_export_latent(checkpoint: str, cfg: RunConfig, out_path: str, which: str = "all") -> int:
    """Write ``mu(x)`` coordinates and the label for every sample; returns the row count."""
    model = load_checkpoint(checkpoint, cfg.arch())
    if which == "all":
        ds = materialize(cfg.dataset)
    else:
        ds = dict(_checkpoint_splits(cfg, model).items()).get(which)
        if ds is None:
            raise ConfigError(f"split {which!r} is empty for this config")
    mu = latent_means(model, ds.features)
    labels = _label_column(ds)
    header = [f"z{i + 1}" for i in range(mu.shape[1])] + ["label"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row, lab in zip(mu, labels):
        w.writerow([repr(float(v)) for v in row] + [lab])
    _write_text(out_path, buf.getvalue())
    return len(ds)


def _label_column(ds: D.Dataset) -> list:
    if ds.labels is not None:
        return [int(v) for v in ds.labels]
    return [" ".join(str(i) for i in np.flatnonzero(row)) for row in ds.targets]


def latent_silhouette(model: GdvmModel, ds: D.Dataset) -> float:
    return latent_separation(latent_means(model, ds.features), ds.labels)


def run_bench(cfg: RunConfig, epochs: int = 5, warmup: int = 1, batch_size: int = 100,
              out_path: Optional[str] = None) -> dict:
    """Per-image training time of Baseline vs GDVM on one architecture.

    The two models train in alternating epochs so machine-load drift hits
    both equally; the first ``warmup`` epochs of each are dropped and the
    median of the rest is reported.
    """
    if epochs <= warmup:
        raise ConfigError(f"bench epochs ({epochs}) must exceed warmup ({warmup})")
    seed = cfg.seeds[0]
    splits = make_splits(cfg, seed)
    ds = splits.train
    models = {name: build_model(cfg, ds, seed, variant=name, beta=max(cfg.beta, 1.0) if name == GDVM else 0.0)
              for name in (BASELINE, GDVM)}
    configs = {name: TrainConfig(1, batch_size, cfg.optimizer_state()) for name in models}
    streams = {name: np.random.default_rng(seed) for name in models}
    times: dict[str, list[float]] = {name: [] for name in models}
    for epoch in range(epochs):
        order = (BASELINE, GDVM) if epoch % 2 == 0 else (GDVM, BASELINE)
        for name in order:
            r = train(models[name], ds, configs[name], streams[name])
            if epoch >= warmup:
                times[name].append(r.epoch_seconds[0] / len(ds) * 1e6)
    us = {name: _median(v) for name, v in times.items()}
    report = {
        "baseline_us_per_image": us[BASELINE],
        "gdvm_us_per_image": us[GDVM],
        "ratio": us[GDVM] / us[BASELINE],
        "batch_size": batch_size,
        "epochs": epochs,
        "warmup_epochs": warmup,
        "images_per_epoch": len(ds),
        "per_epoch_us": times,
        "reference_gpu_us_per_image": REFERENCE_GPU_US,
    }
    if out_path:
        dump_json(report, out_path)
    return report
