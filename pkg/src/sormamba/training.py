"""Optimization and evaluation harness.

Runs are deterministic for a given seed: batch order comes from one seeded
stream, view sampling (for the random order modes) from another, and the
optimizer walks parameters in registry order. Early stopping watches
validation forecast error with a fixed patience and the best-validation
parameters are restored before returning (``restore_best=False`` keeps the
final-epoch parameters instead).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, backward, no_grad
from .data import Normalizer, WindowedDataset, series_from_windows
from .losses import (
    ccm_loss,
    global_corr,
    masked_modeling_loss,
    mae_np,
    mse_np,
    reconstruction_loss,
    total_loss,
)
from .model import SORMambaModel, parameter_fingerprint

PRETEXT_MODES = ("ccm", "mm", "rec")


@dataclass
class TrainConfig:
    max_epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    patience: int = 3
    seed: int = 0
    mask_ratio: float = 0.5  # masked-timestep pretraining only
    restore_best: bool = True  # False keeps the final-epoch parameters

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")


class Adam:
    """Standard Adam with bias correction over an ordered parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * (g * g)
            m_hat = self.m[i] / (1 - self.b1**t)
            v_hat = self.v[i] / (1 - self.b2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _snapshot(params: list[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: list[Tensor], snap: list[np.ndarray]) -> None:
    for p, s in zip(params, snap):
        p.data = s.copy()


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float
    extra: dict = field(default_factory=dict)


@dataclass
class FitResult:
    best_val: float
    best_epoch: int
    epochs: list[EpochLog]
    stopped_early: bool

    def to_records(self) -> list[dict]:
        return [asdict(e) for e in self.epochs]


def _fit(
    model: SORMambaModel,
    params: list[Tensor],
    cfg: TrainConfig,
    batch_loss,  # (x_idx batch arrays, rng) -> Tensor scalar
    val_loss,  # () -> float
    n_train: int,
) -> FitResult:
    opt = Adam(params, lr=cfg.lr)
    rng_shuffle = np.random.default_rng(cfg.seed)
    rng_views = np.random.default_rng(cfg.seed + 7919)
    best = float("inf")
    best_epoch = -1
    best_snap = _snapshot(params)
    bad_epochs = 0
    logs: list[EpochLog] = []
    stopped = False
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        total = 0.0
        n_batches = 0
        for idx in iterate_batches(n_train, cfg.batch_size, rng_shuffle):
            opt.zero_grad()
            loss = batch_loss(idx, rng_views)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}, batch {n_batches}"
                )
            backward(loss)
            opt.step()
            total += value
            n_batches += 1
        vl = val_loss()
        logs.append(
            EpochLog(
                epoch=epoch,
                train_loss=total / max(1, n_batches),
                val_loss=vl,
                seconds=time.perf_counter() - t0,
            )
        )
        if vl < best:
            best = vl
            best_epoch = epoch
            best_snap = _snapshot(params)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                stopped = True
                break
    if cfg.restore_best:
        _restore(params, best_snap)
    return FitResult(best_val=best, best_epoch=best_epoch, epochs=logs, stopped_early=stopped)


def _val_forecast_mse(model: SORMambaModel, ds: WindowedDataset, batch_size: int) -> float:
    se_sum = 0.0
    count = 0
    with no_grad():
        for idx in iterate_batches(len(ds), batch_size, None):
            pred, _ = model.forecast(Tensor(ds.x[idx]))
            d = pred.data - ds.y[idx]
            se_sum += float(np.sum(d * d))
            count += d.size
    return se_sum / count


def train_supervised(
    model: SORMambaModel,
    train: WindowedDataset,
    val: WindowedDataset,
    cfg: TrainConfig,
    trainable_prefixes: tuple[str, ...] | None = None,
) -> FitResult:
    """Fit the forecasting objective (plus the order-consistency penalty
    configured on the model). ``trainable_prefixes`` restricts which
    parameters move; everything else stays bitwise frozen."""
    mcfg = model.config
    if trainable_prefixes is None:
        named = model.named_parameters(exclude_prefixes=("ccm.", "rec."))
    else:
        named = [
            (n, t)
            for n, t in model.param_items()
            if any(n.startswith(p) for p in trainable_prefixes)
        ]
    params = [t for _, t in named]

    def batch_loss(idx, rng_views):
        pred, pairs = model.forecast(Tensor(train.x[idx]), rng=rng_views)
        report = total_loss(pred, train.y[idx], pairs, mcfg.reg_weight, mcfg.reg_metric)
        return report.total

    return _fit(
        model,
        params,
        cfg,
        batch_loss,
        lambda: _val_forecast_mse(model, val, cfg.batch_size),
        len(train),
    )


def linear_probe(
    model: SORMambaModel,
    train: WindowedDataset,
    val: WindowedDataset,
    cfg: TrainConfig,
) -> FitResult:
    """Fit only the forecast head; asserts the trunk stayed bitwise frozen."""
    frozen_before = parameter_fingerprint(
        model, prefixes=("embed.", "layer", "ccm.", "rec.")
    )
    result = train_supervised(model, train, val, cfg, trainable_prefixes=("head.",))
    frozen_after = parameter_fingerprint(
        model, prefixes=("embed.", "layer", "ccm.", "rec.")
    )
    if frozen_before != frozen_after:
        raise AssertionError("linear probe moved non-head parameters")
    return result


def fine_tune(
    model: SORMambaModel,
    train: WindowedDataset,
    val: WindowedDataset,
    cfg: TrainConfig,
) -> FitResult:
    return train_supervised(model, train, val, cfg)


def pretrain(
    model: SORMambaModel,
    train: WindowedDataset,
    val: WindowedDataset,
    cfg: TrainConfig,
    mode: str = "ccm",
    corr_target: np.ndarray | None = None,
) -> FitResult:
    """Self-supervised pretraining. The forecast head is never touched.

    ``ccm`` matches channel-embedding correlations to ``corr_target``
    (computed from the training windows when not supplied); ``mm``
    reconstructs masked timesteps; ``rec`` reconstructs the full window.
    """
    if mode not in PRETEXT_MODES:
        raise ValueError(f"mode must be one of {PRETEXT_MODES}, got {mode!r}")
    named = model.named_parameters(exclude_prefixes=("head.",))
    params = [t for _, t in named]
    rng_mask = np.random.default_rng(cfg.seed + 104729)

    if mode == "ccm" and corr_target is None:
        # correlation of the contiguous training region, recovered from the
        # overlapping windows
        corr_target = global_corr(series_from_windows(train.x))

    def batch_loss(idx, rng_views):
        x = Tensor(train.x[idx])
        if mode == "ccm":
            z = model.latent_for_ccm(x, rng=rng_views)
            return ccm_loss(z, corr_target)
        if mode == "mm":
            return masked_modeling_loss(model, x, cfg.mask_ratio, rng_mask)
        return reconstruction_loss(model, x)

    def val_loss() -> float:
        rng_val_mask = np.random.default_rng(cfg.seed + 224737)
        total, batches = 0.0, 0
        with no_grad():
            for idx in iterate_batches(len(val), cfg.batch_size, None):
                x = Tensor(val.x[idx])
                if mode == "ccm":
                    loss = ccm_loss(model.latent_for_ccm(x), corr_target)
                elif mode == "mm":
                    loss = masked_modeling_loss(model, x, cfg.mask_ratio, rng_val_mask)
                else:
                    loss = reconstruction_loss(model, x)
                total += float(loss.data)
                batches += 1
        return total / max(1, batches)

    head_before = parameter_fingerprint(model, prefixes=("head.",))
    result = _fit(model, params, cfg, batch_loss, val_loss, len(train))
    if parameter_fingerprint(model, prefixes=("head.",)) != head_before:
        raise AssertionError("pretraining moved the forecast head")
    return result


def evaluate(
    model: SORMambaModel,
    ds: WindowedDataset,
    normalizer: Normalizer | None = None,
    denormalize: bool = True,
    batch_size: int = 64,
    return_predictions: bool = False,
):
    """Test metrics, de-normalized back to input units by default."""
    preds = []
    with no_grad():
        for idx in iterate_batches(len(ds), batch_size, None):
            pred, _ = model.forecast(Tensor(ds.x[idx]))
            preds.append(pred.data)
    pred = np.concatenate(preds, axis=0)
    target = ds.y
    if denormalize:
        if normalizer is None:
            raise ValueError("denormalize=True requires a normalizer")
        pred = normalizer.inverse(pred)
        target = normalizer.inverse(target)
    metrics = {"mse": mse_np(pred, target), "mae": mae_np(pred, target)}
    if return_predictions:
        return metrics, pred
    return metrics


def last_value_baseline(
    ds: WindowedDataset, normalizer: Normalizer | None = None, denormalize: bool = True
) -> dict:
    """Repeat each window's final observation across the horizon."""
    pred = np.repeat(ds.x[:, -1:, :], ds.y.shape[1], axis=1)
    target = ds.y
    if denormalize:
        if normalizer is None:
            raise ValueError("denormalize=True requires a normalizer")
        pred = normalizer.inverse(pred)
        target = normalizer.inverse(target)
    return {"mse": mse_np(pred, target), "mae": mae_np(pred, target)}


# ---- reporting ------------------------------------------------------------


@dataclass
class ExperimentReport:
    """Per-seed metric rows plus their average."""

    name: str
    runs: list[dict]

    def averaged(self) -> dict:
        keys = sorted({k for run in self.runs for k in run if isinstance(run[k], (int, float))})
        return {k: float(np.mean([run[k] for run in self.runs if k in run])) for k in keys}


def write_jsonl(path: str, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_summary_csv(path: str, rows: list[dict], fieldnames: list[str] | None = None) -> None:
    """Deterministic summary table: stable field order, no timing columns
    (wall-clock measurements belong in the JSONL logs)."""
    if not rows:
        raise ValueError("no rows to write")
    if fieldnames is None:
        fieldnames = list(rows[0].keys())
        for row in rows[1:]:
            for k in row:
                if k not in fieldnames:
                    fieldnames.append(k)
    banned = {"seconds", "wall_clock", "elapsed", "time"}
    leaked = banned & set(fieldnames)
    if leaked:
        raise ValueError(f"timing columns belong in JSONL logs, not summaries: {sorted(leaked)}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})
