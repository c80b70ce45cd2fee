"""Adam, the plateau/early-stop/checkpoint controllers and the epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .core_math import Normalizer, evaluate_predictions, fit_normalizer, znormalize
from .errors import DomainError, FormatError, NumericError
from .model_zoo import Model, forward, param_gradients, save_model
from .preprocessing import augment

log = logging.getLogger(__name__)


# Adam -------------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update. Parameters without a gradient are left as they are.

    Moments are kept in float64; updated parameters keep their own dtype.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise DomainError(f"gradient shape mismatch for {name!r}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = dict(params), {}, {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        p = np.asarray(params[name])
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = (p.astype(np.float64) - step).astype(p.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, t=t, m={**state.m, **new_m}, v={**state.v, **new_v})


# controllers ------------------------------------------------------------------------


@dataclass(frozen=True)
class ControllerConfig:
    min_delta: float = 0.0001
    patience_es: int = 12
    patience_lr: int = 6
    lr_factor: float = 0.5


@dataclass(frozen=True)
class ControllerState:
    best_metric: float = -math.inf
    best_epoch: int = -1
    epoch: int = 0
    epochs_since_improve_es: int = 0
    epochs_since_improve_lr: int = 0


@dataclass(frozen=True)
class Decision:
    action: str  # "continue" | "reduce_lr" | "stop_and_restore"
    lr: float
    improved: bool  # take a best-weights snapshot


def controller_update(state: ControllerState, val_pcc: float, current_lr: float,
                      cfg: ControllerConfig = ControllerConfig()) -> tuple[Decision, ControllerState]:
    """Advance early stopping, LR-on-plateau and checkpointing by one epoch.

    Maximises ``val_pcc``; an epoch improves only if it beats the best by more
    than ``min_delta``. The two patience counters run independently, and a
    stop takes precedence over a reduction in the same epoch.
    """
    epoch = state.epoch + 1
    improved = not math.isnan(val_pcc) and val_pcc > state.best_metric + cfg.min_delta
    if improved:
        new = ControllerState(val_pcc, epoch, epoch, 0, 0)
        return Decision("continue", current_lr, True), new
    es = state.epochs_since_improve_es + 1
    lr_wait = state.epochs_since_improve_lr + 1
    if es >= cfg.patience_es:
        new = replace(state, epoch=epoch, epochs_since_improve_es=es, epochs_since_improve_lr=lr_wait)
        return Decision("stop_and_restore", current_lr, False), new
    if lr_wait >= cfg.patience_lr:
        new = replace(state, epoch=epoch, epochs_since_improve_es=es, epochs_since_improve_lr=0)
        return Decision("reduce_lr", current_lr * cfg.lr_factor, False), new
    new = replace(state, epoch=epoch, epochs_since_improve_es=es, epochs_since_improve_lr=lr_wait)
    return Decision("continue", current_lr, False), new


# history ---------------------------------------------------------------------------

HISTORY_HEADER = ("epoch", "train_loss", "val_loss", "val_pcc_mean", "lr", "seconds")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_pcc_mean: float
    lr: float
    seconds: float


def format_history(history: list[EpochRecord]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_pcc_mean), repr(r.lr),
                    f"{r.seconds:.3f}"])
    return out.getvalue()


def parse_history(text: str) -> list[EpochRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != HISTORY_HEADER:
        raise FormatError("history CSV has an unexpected header")
    try:
        return [EpochRecord(int(r[0]), *(float(v) for v in r[1:])) for r in rows[1:] if r]
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad history row: {exc}") from None


# training loop ---------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[EpochRecord]
    model: Model  # in-memory weights at the end (best weights after an early stop)
    best_params: dict
    last_params: dict
    normalizer: Normalizer
    stopped_early: bool = False


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def predict(model: Model, clips: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Sigmoid outputs for already normalized clips."""
    outs = [forward(model.config, model.params, clips[i : i + batch_size]).data
            for i in range(0, len(clips), batch_size)]
    return np.concatenate(outs, axis=0).astype(np.float64)


def train(model_kind: str, splits: dict, run: RunConfig, out_dir=None) -> TrainResult:
    """Fit a model on ``splits['train']`` monitoring ``splits['val']``.

    Each split is a (clips, targets) pair with raw clips in [0, 1] and scaled
    targets. Writes ``weights.best`` on every improvement and ``weights.last``
    plus ``history.csv`` at the end when ``out_dir`` is given.
    """
    train_x, train_y = (np.asarray(a) for a in splits["train"])
    val_x, val_y = (np.asarray(a) for a in splits["val"])
    if len(train_x) == 0 or len(val_x) == 0:
        raise DomainError("train and validation splits must be non-empty")
    if model_kind != run.model:
        run = replace(run, model=model_kind)
    cfg = run.model_config()
    model = Model(cfg, seed=run.seed)
    if run.freeze_backbone:
        model.frozen |= {k for k in model.params if k.startswith("backbone.")}
    norm = fit_normalizer([train_x])
    val_n = znormalize(val_x.astype(np.float32), norm)
    policy = run.augment_policy()
    ctrl_cfg = ControllerConfig(run.min_delta, run.patience_es, run.patience_lr, run.lr_factor)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    meta = {"normalizer": norm.to_dict()}

    params = model.params
    adam = AdamState(lr=run.lr)
    ctrl = ControllerState()
    best = {k: v.copy() for k, v in params.items()}
    history: list[EpochRecord] = []
    stopped = False
    n = len(train_x)
    start = time.perf_counter()
    use_dropout = cfg.arch == "cnn_transformer" and cfg.transformer.dropout > 0

    for epoch in range(run.epochs):
        rng = np.random.default_rng([run.seed, epoch])
        total = 0.0
        for b, idx in enumerate(_batches(n, run.batch_size, rng)):
            xb = train_x[idx]
            if policy is not None:
                xb = np.stack([augment(c, policy, clip_id=epoch * n + int(i)) for c, i in zip(xb, idx)])
            xb = znormalize(xb.astype(np.float32), norm)
            drop_rng = np.random.default_rng([run.seed, epoch, b, 1]) if use_dropout else None
            loss, grads = param_gradients(model.with_params(params), xb, train_y[idx], rng=drop_rng)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            total += loss * len(idx)
            params, adam = adam_step(params, grads, adam)
        epoch_model = model.with_params(params)
        pred = predict(epoch_model, val_n)
        report = evaluate_predictions(pred, val_y)
        lr_used = adam.lr
        decision, ctrl = controller_update(ctrl, report.pcc_mean, adam.lr, ctrl_cfg)
        seconds = time.perf_counter() - start if run.record_wall_time else 0.0
        history.append(EpochRecord(epoch + 1, total / n, report.mse, report.pcc_mean, lr_used, seconds))
        log.info("epoch %d train_loss=%.5f val_loss=%.5f val_pcc=%.4f lr=%.3g", epoch + 1, total / n,
                 report.mse, report.pcc_mean, lr_used)
        if decision.improved:
            best = {k: v.copy() for k, v in params.items()}
            if out:
                save_model(out / "weights.best", epoch_model, meta)
        if decision.action == "reduce_lr":
            adam = replace(adam, lr=decision.lr)
        elif decision.action == "stop_and_restore":
            stopped = True
            break

    last = {k: v.copy() for k, v in params.items()}
    final = model.with_params(best if stopped else params)
    final.normalizer = norm
    if out:
        save_model(out / "weights.last", model.with_params(last), meta)
        (out / "history.csv").write_text(format_history(history), encoding="utf-8")
    return TrainResult(history, final, best, last, norm, stopped)
