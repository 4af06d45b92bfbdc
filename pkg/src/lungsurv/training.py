"""Training loops shared by the single-volume and sequence models.

One CSV row is written per optimization step; the validation metric is
filled in on each epoch's last step, so a run with E epochs and S steps per
epoch emits exactly E*S rows. Survival batches that happen to contain no
event are redrawn (the partial likelihood is undefined there); the redraw
count is logged per step and totaled in the result.

All randomness descends from the config seed: batch sampling, dropout, and
the two sharpness passes of a step share its per-step substream, so a rerun
reproduces the trajectory bit for bit.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DataError
from .cohort import Cohort, WeightedSampler
from .models import CrnnModel, mortality_prob, model_state, load_model_state
from .optimize import OptimConfig, SamOptimizer, cyclic_lr
from .survloss import (confusion_counts, cox_loss, cox_loss_grad,
                       cross_entropy_batch, f1_mcc, harrell_c, ipcw_c,
                       roc_auc, roc_points)


@dataclass
class TrainConfig:
    epochs: int = 5
    seed: int = 0
    steps_per_epoch: int | None = None    # default: ceil(n_train / batch)
    balance_classes: bool = True
    class_weights: tuple | None = None
    target: str = "mortality"             # "mortality" or "cause"
    max_batch_redraws: int = 50

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.target not in ("mortality", "cause"):
            raise ConfigurationError(f"unknown training target {self.target!r}")


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_val: float = -np.inf
    best_state: dict | None = None
    final_state: dict | None = None
    resampled_batches: int = 0
    val_metric_name: str = ""


def sequence_deltas(cohort: Cohort, indices) -> np.ndarray:
    """Per-step day gaps, (T, B); the first step has no predecessor."""
    scans = cohort.scan_times[indices]
    gaps = np.zeros((scans.shape[1], len(indices)))
    gaps[1:] = np.diff(scans, axis=1).T
    return gaps


def make_inputs(cohort: Cohort, indices, mode: str):
    """Model-ready arrays for a subject subset.

    ``mode`` "last": latest-scan input, (B, d) features or (B, 1, D, H, W)
    volumes. ``mode`` "sequence": (T, B, ...) stacked timepoints plus day
    gaps.
    """
    indices = np.asarray(indices, dtype=np.int64)
    feats = cohort.features[indices]
    volumetric = feats.ndim == 5
    if mode == "last":
        last = feats[:, -1]
        if volumetric:
            last = last[:, None]          # channel axis
        return {"x": last}
    if mode == "sequence":
        seq = np.moveaxis(feats, 0, 1)    # (T, B, ...)
        if volumetric:
            seq = seq[:, :, None]
        return {"x": seq, "deltas": sequence_deltas(cohort, indices)}
    raise ConfigurationError(f"unknown input mode {mode!r}")


def class_targets(cohort: Cohort, indices, target: str) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if target == "mortality":
        return cohort.events[indices]
    # cause models see non-survivors only: cardiac -> 0, respiratory -> 1
    causes = cohort.causes[indices]
    if np.any(causes == 0):
        raise DataError("cause target requires non-survivor subjects only")
    return causes - 1


def _forward(model, batch, training, rng):
    if isinstance(model, CrnnModel):
        return model.forward(batch["x"], batch.get("deltas"), training=training, rng=rng)
    _, out = model.forward(batch["x"], training=training, rng=rng)
    return out


def _subset_batch(inputs, rows):
    # sequence arrays have the batch axis second; latest-scan arrays lead with it
    if "deltas" in inputs:
        return {"x": inputs["x"][:, rows], "deltas": inputs["deltas"][:, rows]}
    return {"x": inputs["x"][rows]}


def predict_scores(model, cohort: Cohort, indices, chunk: int = 64) -> np.ndarray:
    """Mortality probability / positive-class probability / risk per subject."""
    mode = "sequence" if isinstance(model, CrnnModel) else "last"
    inputs = make_inputs(cohort, indices, mode)
    n = len(np.asarray(indices))
    scores = np.empty(n)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        batch = _subset_batch(inputs, rows)
        out = _forward(model, batch, training=False, rng=None)
        out = np.atleast_2d(out)
        if model.cfg.head_kind == "cox":
            scores[rows] = out[:, 0]
        else:
            scores[rows] = mortality_prob(out)
    return scores


def evaluate_split(model, cohort: Cohort, indices, tau=None) -> dict:
    """Head-appropriate metric set on one subject subset."""
    indices = np.asarray(indices, dtype=np.int64)
    scores = predict_scores(model, cohort, indices)
    if model.cfg.head_kind == "cox":
        t = cohort.times[indices]
        e = cohort.events[indices]
        return {"harrell_c": harrell_c(scores, t, e),
                "ipcw_c": ipcw_c(scores, t, e, tau=tau)}
    target = "cause" if model.cfg.head_kind == "classifier_cause2" else "mortality"
    y = class_targets(cohort, indices, target)
    pred = (scores >= 0.5).astype(np.int64)
    tp, fp, tn, fn = confusion_counts(pred, y)
    f1, mcc = f1_mcc(tp, fp, tn, fn)
    return {"auc": roc_auc(scores, y), "f1": f1, "mcc": mcc,
            "_roc": roc_points(scores, y)}


def _val_metric(model, cohort, val_idx):
    metrics = evaluate_split(model, cohort, val_idx)
    if model.cfg.head_kind == "cox":
        return metrics["harrell_c"], "harrell_c"
    return metrics["auc"], "auc"


def _draw_classifier_batch(sampler, plain_rng, n, batch_size, balance):
    if balance:
        return sampler.draw(batch_size)
    return plain_rng.choice(n, size=batch_size, replace=True)


def train_model(model, cohort: Cohort, train_idx, val_idx,
                opt_cfg: OptimConfig, train_cfg: TrainConfig) -> TrainResult:
    """SGD/SAM training with per-step logging and best-validation tracking."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    head = model.cfg.head_kind
    is_cox = head == "cox"
    target = "cause" if head == "classifier_cause2" else "mortality"
    if target == "cause":
        train_idx = train_idx[cohort.events[train_idx] == 1]
        val_idx = val_idx[cohort.events[val_idx] == 1]
    if len(train_idx) == 0:
        raise DataError("empty training subset")

    mode = "sequence" if isinstance(model, CrnnModel) else "last"
    inputs = make_inputs(cohort, train_idx, mode)
    if is_cox:
        times = cohort.times[train_idx]
        events = cohort.events[train_idx]
        if events.sum() == 0:
            raise DataError("training subset has no events")
    else:
        labels = class_targets(cohort, train_idx, target)

    n = len(train_idx)
    batch_size = min(opt_cfg.batch_size, n)
    steps = train_cfg.steps_per_epoch or max(1, int(np.ceil(n / batch_size)))
    if opt_cfg.half_period is None:
        opt_cfg = replace(opt_cfg, half_period=steps)

    params = model.trainable_params() if isinstance(model, CrnnModel) else model.params()
    optim = SamOptimizer(params, opt_cfg)

    seed_seq = np.random.SeedSequence(train_cfg.seed)
    sampler_seed, step_seed_base = (int(s.generate_state(1)[0]) for s in seed_seq.spawn(2))
    plain_rng = np.random.default_rng(sampler_seed)
    sampler = None
    if not is_cox and train_cfg.balance_classes:
        sampler = WeightedSampler(labels, sampler_seed)

    result = TrainResult()
    global_step = 0
    for epoch in range(train_cfg.epochs):
        for s in range(steps):
            lr_t = cyclic_lr(global_step, opt_cfg)
            redraws = 0
            if is_cox:
                rows = plain_rng.choice(n, size=batch_size, replace=True)
                while events[rows].sum() == 0:
                    redraws += 1
                    if redraws > train_cfg.max_batch_redraws:
                        raise DataError("could not draw a batch containing an event")
                    rows = plain_rng.choice(n, size=batch_size, replace=True)
            else:
                rows = _draw_classifier_batch(sampler, plain_rng, n, batch_size,
                                              train_cfg.balance_classes)
            result.resampled_batches += redraws
            batch = _subset_batch(inputs, rows)

            if is_cox:
                bt, be = times[rows], events[rows]

                def closure(pass_rng):
                    out = _forward(model, batch, training=True, rng=pass_rng)
                    risks = np.atleast_2d(out)[:, 0]
                    loss = cox_loss(risks, bt, be)
                    g = cox_loss_grad(risks, bt, be)
                    model.backward(g[:, None])
                    return loss
            else:
                by = labels[rows]

                def closure(pass_rng):
                    out = _forward(model, batch, training=True, rng=pass_rng)
                    loss, dlogits = cross_entropy_batch(out, by, train_cfg.class_weights)
                    model.backward(dlogits)
                    return loss

            loss = optim.step(closure, lr_t, step_seed=step_seed_base + global_step)
            row = {"epoch": epoch, "step": global_step, "lr": lr_t,
                   "loss": float(loss), "val_metric": "", "resampled": redraws}
            if s == steps - 1 and len(val_idx):
                val, name = _val_metric(model, cohort, val_idx)
                result.val_metric_name = name
                row["val_metric"] = float(val)
                if val > result.best_val:
                    result.best_val = float(val)
                    result.best_state = {k: v.copy() for k, v in model_state(model).items()}
            result.history.append(row)
            global_step += 1

    result.final_state = {k: v.copy() for k, v in model_state(model).items()}
    if result.best_state is not None:
        load_model_state(model, result.best_state)
    else:
        result.best_state = result.final_state
    return result


def write_train_log(path, history):
    fields = ["epoch", "step", "lr", "loss", "val_metric", "resampled"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in fields})
