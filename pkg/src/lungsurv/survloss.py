"""Losses and evaluation for right-censored survival prediction.

Subjects carry an observed time (days from the last screening point) and an
event indicator (1 = death, 0 = censored). The partial-likelihood loss uses
the risk-set convention R(t) = {j : T_j >= t}, so a subject is in its own
risk set; tied event times share a risk set and contribute one term each.

Rank metrics (ROC-AUC and both concordance indices) give half credit to
ties, which makes them invariant under strictly increasing score transforms
and lets brute-force pair enumeration serve as an exact oracle.
"""
from __future__ import annotations

import hashlib
import json
import time as _time
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .errors import (ConfigurationError, DegenerateWeightError,
                     UndefinedLossError, UndefinedMetricError)

DAYS_PER_YEAR = 365.25


class SurvivalLabel(NamedTuple):
    time: float   # days, >= 0
    event: int    # 1 = death, 0 = censored


def _as_survival_arrays(times, events):
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events)
    if t.shape != e.shape or t.ndim != 1:
        raise ConfigurationError("times and events must be 1-d and equal length")
    if np.any(t < 0):
        raise ConfigurationError("negative survival time")
    if not np.all(np.isin(e, (0, 1))):
        raise ConfigurationError("event indicator must be 0 or 1")
    return t, e.astype(np.int64)


class StepFunction:
    """Right-continuous step function equal to 1 before the first knot."""

    def __init__(self, knots, values):
        self.knots = np.asarray(knots, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.knots.shape != self.values.shape or self.knots.ndim != 1:
            raise ConfigurationError("knots and values must be 1-d and equal length")
        if self.knots.size and np.any(np.diff(self.knots) <= 0):
            raise ConfigurationError("knots must be strictly increasing")

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        vals = np.where(idx < 0, 1.0, self.values[np.clip(idx, 0, None)])
        return float(vals) if vals.ndim == 0 else vals

    def left_limit(self, t):
        """Value just before t (so a drop at t itself is not yet applied)."""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.knots, t, side="left") - 1
        vals = np.where(idx < 0, 1.0, self.values[np.clip(idx, 0, None)])
        return float(vals) if vals.ndim == 0 else vals


# ---------------------------------------------------------------------------
# losses

def cross_entropy(logits, label, class_weights=None):
    """Weighted negative log-softmax of the true class.

    Returns (loss, grad_logits) with grad = weight * (softmax - onehot).
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ConfigurationError(f"logits must be 1-d with k >= 2, got shape {z.shape}")
    k = z.size
    label = int(label)
    if not 0 <= label < k:
        raise ConfigurationError(f"label {label} out of range for {k} classes")
    if class_weights is None:
        w = np.ones(k)
    else:
        w = np.asarray(class_weights, dtype=np.float64)
        if w.shape != (k,) or np.any(w <= 0):
            raise ConfigurationError("class_weights must be positive, one per class")
    zs = z - z.max()
    logsum = np.log(np.sum(np.exp(zs)))
    logp = zs - logsum
    loss = -w[label] * logp[label]
    grad = w[label] * np.exp(logp)
    grad[label] -= w[label]
    return loss, grad


def cross_entropy_batch(logits, labels, class_weights=None):
    """Mean per-sample weighted cross-entropy over a batch; grad matches."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ConfigurationError(f"batch logits must be (B, k), got {z.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    total = 0.0
    grads = np.empty_like(z)
    for b in range(z.shape[0]):
        loss, g = cross_entropy(z[b], labels[b], class_weights)
        total += loss
        grads[b] = g
    n = z.shape[0]
    return total / n, grads / n


def _cox_terms(risks, times, events):
    h = np.asarray(risks, dtype=np.float64)
    t, e = _as_survival_arrays(times, events)
    if h.shape != t.shape:
        raise ConfigurationError("risks and labels must align")
    if not np.all(np.isfinite(h)):
        raise ConfigurationError("non-finite risk score")
    n_events = int(e.sum())
    if n_events == 0:
        raise UndefinedLossError("no events in batch; partial likelihood undefined")
    return h, t, e, n_events


def cox_loss(risks, times, events):
    """Negative partial log-likelihood, averaged over events (Breslow ties)."""
    h, t, e, n_events = _cox_terms(risks, times, events)
    loss = 0.0
    for i in np.flatnonzero(e):
        in_set = t >= t[i]
        hs = h[in_set]
        m = hs.max()
        loss -= h[i] - (m + np.log(np.sum(np.exp(hs - m))))
    return loss / n_events


def cox_loss_grad(risks, times, events):
    """Analytic gradient of cox_loss with respect to each risk score."""
    h, t, e, n_events = _cox_terms(risks, times, events)
    grad = -e.astype(np.float64)
    for i in np.flatnonzero(e):
        in_set = t >= t[i]
        hs = h[in_set]
        m = hs.max()
        w = np.exp(hs - m)
        grad[in_set] += w / w.sum()
    return grad / n_events


# ---------------------------------------------------------------------------
# classification metrics

def roc_auc(scores, labels):
    """Probability a random positive outranks a random negative; ties half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ConfigurationError("scores and labels must be 1-d and equal length")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes present")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, labels):
    """ROC curve as (fpr, tpr, threshold) rows, threshold descending.

    Prediction rule at a threshold: positive iff score >= threshold. The
    first row uses an infinite threshold, pinning the curve at (0, 0).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC curve needs both classes present")
    thresholds = np.concatenate(([np.inf], np.unique(s)[::-1]))
    rows = []
    for th in thresholds:
        pred = s >= th
        tpr = np.sum(pred & (y == 1)) / n_pos
        fpr = np.sum(pred & (y == 0)) / n_neg
        rows.append((fpr, tpr, th))
    return np.asarray(rows)


def write_roc_csv(path, points):
    with open(path, "w") as f:
        f.write("fpr,tpr,threshold\n")
        for fpr, tpr, th in points:
            f.write(f"{fpr:.10g},{tpr:.10g},{th:.10g}\n")


def f1_mcc(tp, fp, tn, fn):
    """F1 and Matthews correlation from confusion counts.

    MCC is 0 whenever a marginal is empty; F1 is 0 when there are no
    positives anywhere (no true and no predicted).
    """
    counts = (tp, fp, tn, fn)
    if any(c < 0 for c in counts):
        raise ConfigurationError("confusion counts must be >= 0")
    if sum(counts) == 0:
        raise UndefinedMetricError("empty confusion table")
    tp, fp, tn, fn = (float(c) for c in counts)
    denom_f1 = 2 * tp + fp + fn
    f1 = 2 * tp / denom_f1 if denom_f1 > 0 else 0.0
    marginals = ((tp + fp), (tp + fn), (tn + fp), (tn + fn))
    if any(m == 0 for m in marginals):
        mcc = 0.0
    else:
        mcc = (tp * tn - fp * fn) / np.sqrt(np.prod(marginals))
    return f1, float(mcc)


def confusion_counts(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    tn = int(np.sum((pred == 0) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    return tp, fp, tn, fn


# ---------------------------------------------------------------------------
# survival metrics

def kaplan_meier(times, events, censoring=False):
    """Product-limit estimator with knots at event times only.

    With ``censoring=True`` the indicator is inverted, yielding the
    censoring-survival curve used by IPCW weights.
    """
    t, e = _as_survival_arrays(times, events)
    if t.size == 0:
        raise ConfigurationError("empty cohort")
    if censoring:
        e = 1 - e
    event_times = np.unique(t[e == 1])
    knots, values = [], []
    surv = 1.0
    for et in event_times:
        at_risk = int(np.sum(t >= et))
        deaths = int(np.sum((t == et) & (e == 1)))
        surv *= 1.0 - deaths / at_risk
        knots.append(et)
        values.append(surv)
    return StepFunction(knots, values)


def harrell_c(risks, times, events):
    """Concordance over pairs (T_i < T_j, E_i = 1); risk ties count half."""
    h = np.asarray(risks, dtype=np.float64)
    t, e = _as_survival_arrays(times, events)
    if h.shape != t.shape:
        raise ConfigurationError("risks and labels must align")
    num = 0.0
    den = 0
    for i in range(t.size):
        if e[i] != 1:
            continue
        later = t > t[i]
        den += int(later.sum())
        num += np.sum(h[i] > h[later]) + 0.5 * np.sum(h[i] == h[later])
    if den == 0:
        raise UndefinedMetricError("no comparable pair for concordance")
    return float(num / den)


def ipcw_c(risks, times, events, tau=None):
    """Truncated concordance with inverse-censoring-probability weights.

    Pairs (i, j) with E_i = 1, T_i < tau and T_i < T_j are weighted by
    1/G(T_i-)^2, G the censoring-survival estimate evaluated just before
    T_i. ``tau`` defaults to the largest event time.
    """
    h = np.asarray(risks, dtype=np.float64)
    t, e = _as_survival_arrays(times, events)
    if h.shape != t.shape:
        raise ConfigurationError("risks and labels must align")
    if not np.any(e == 1):
        raise UndefinedMetricError("no events, concordance undefined")
    if tau is None:
        tau = float(t[e == 1].max())
    if tau > t.max():
        raise ConfigurationError(f"tau {tau} exceeds the largest observed time {t.max()}")
    g = kaplan_meier(t, e, censoring=True)
    num = 0.0
    den = 0.0
    any_pair = False
    for i in range(t.size):
        if e[i] != 1 or not t[i] < tau:
            continue
        later = t > t[i]
        if not np.any(later):
            continue
        gi = g.left_limit(t[i])
        if gi == 0.0:
            raise DegenerateWeightError(
                f"censoring survival vanished before t={t[i]}; IPCW weight undefined")
        w = 1.0 / gi ** 2
        any_pair = True
        den += w * int(later.sum())
        num += w * (np.sum(h[i] > h[later]) + 0.5 * np.sum(h[i] == h[later]))
    if not any_pair:
        raise UndefinedMetricError("no comparable pair below tau")
    return float(num / den)


# ---------------------------------------------------------------------------
# band analysis

def band_truth(times, events, band_years, causes=None):
    """Ground-truth class per subject for a follow-up band.

    Death strictly inside the band is a non-survivor (class 1 + cause when
    causes are given); surviving past the band edge is class 0; subjects
    censored before the edge are unknowable and masked out (-1).
    """
    t, e = _as_survival_arrays(times, events)
    horizon = band_years * DAYS_PER_YEAR
    truth = np.full(t.shape, -1, dtype=np.int64)
    survivor = t >= horizon
    dead = (e == 1) & (t < horizon)
    truth[survivor] = 0
    if causes is None:
        truth[dead] = 1
    else:
        c = np.asarray(causes, dtype=np.int64)
        truth[dead] = 1 + c[dead]
    return truth


def band_confusion(pred_classes, times, events, band_years, causes=None):
    """One-vs-rest sensitivity/specificity per class at a band horizon.

    Returns {class_label: {"cases", "sensitivity", "specificity"}} over the
    subjects whose band status is known; classes with no ground-truth
    members are absent from the result.
    """
    pred = np.asarray(pred_classes, dtype=np.int64)
    truth = band_truth(times, events, band_years, causes)
    known = truth >= 0
    pred, truth = pred[known], truth[known]
    out = {}
    for cls in np.unique(truth):
        is_cls = truth == cls
        pred_cls = pred == cls
        tp = int(np.sum(pred_cls & is_cls))
        fn = int(np.sum(~pred_cls & is_cls))
        fp = int(np.sum(pred_cls & ~is_cls))
        tn = int(np.sum(~pred_cls & ~is_cls))
        sens = tp / (tp + fn)
        spec = tn / (tn + fp) if (tn + fp) > 0 else None
        out[int(cls)] = {"cases": int(is_cls.sum()), "sensitivity": sens,
                         "specificity": spec}
    return out


# ---------------------------------------------------------------------------
# reporting

VOLATILE_REPORT_FIELD = "generated_at"

#: fixed provenance note carried by every report
DATA_SOURCE_NOTE = ("synthetic cohort fixtures; the source screening imaging is "
                    "access-restricted, so published cohort numbers are not "
                    "reproducible here and results are property-checked instead")


class MetricsReport:
    """Cross-validated metric summary with mean (sd) presentation.

    Holds per-fold metric dicts, optional external-split metrics, ROC point
    sets, a band table, and provenance. ``digest`` hashes the canonical JSON
    minus the volatile timestamp, so identical runs hash identically.
    """

    def __init__(self, study: str, head: str, fold_metrics: list[dict],
                 external: dict | None = None, roc_sets: dict | None = None,
                 band_table: dict | None = None, provenance: dict | None = None):
        self.study = study
        self.head = head
        self.fold_metrics = list(fold_metrics)
        self.external = external
        self.roc_sets = roc_sets or {}
        self.band_table = band_table
        self.provenance = dict(provenance or {})
        self.provenance.setdefault("data_source", DATA_SOURCE_NOTE)

    @property
    def n_folds(self):
        return len(self.fold_metrics)

    def summary(self):
        """Per-metric mean and sample sd (ddof=1) over folds."""
        keys = sorted({k for m in self.fold_metrics for k in m})
        mean, sd = {}, {}
        for k in keys:
            vals = np.asarray([m[k] for m in self.fold_metrics if k in m], dtype=np.float64)
            mean[k] = float(vals.mean())
            sd[k] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        return {"mean": mean, "sd": sd}

    def format_mean_sd(self, key, digits=3):
        s = self.summary()
        return f"{s['mean'][key]:.{digits}f} ({s['sd'][key]:.{digits}f})"

    def to_dict(self, volatile=True):
        doc = {
            "study": self.study,
            "head": self.head,
            "folds": self.fold_metrics,
            "summary": self.summary(),
            "external": self.external,
            "roc": {name: np.asarray(pts).tolist() for name, pts in self.roc_sets.items()},
            "bands": self.band_table,
            "provenance": self.provenance,
        }
        if volatile:
            doc[VOLATILE_REPORT_FIELD] = _time.strftime("%Y-%m-%dT%H:%M:%S")
        return doc

    def digest(self):
        doc = self.to_dict(volatile=False)
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path):
        doc = self.to_dict()
        doc["digest"] = self.digest()
        with open(path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            doc = json.load(f)
        report = cls(doc["study"], doc["head"], doc["folds"], doc.get("external"),
                     {k: np.asarray(v) for k, v in doc.get("roc", {}).items()},
                     doc.get("bands"), doc.get("provenance"))
        return report
