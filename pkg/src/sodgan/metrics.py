"""Saliency evaluation battery: MAE, PR / F-measure curves, S-measure, ROC AUC."""
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, InvalidArgumentError

THRESHOLDS = np.arange(256, dtype=np.float64) / 255.0
BETA2 = 0.3


def _as_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    return pred, gt


def _as_lists(preds, gts):
    preds, gts = list(preds), list(gts)
    if not preds:
        raise EmptyInputError("no predictions to evaluate")
    if len(preds) != len(gts):
        raise InvalidArgumentError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    return [_as_pair(p, g) for p, g in zip(preds, gts)]


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den != 0)
    return out


def mae(pred, gt):
    pred, gt = _as_pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def threshold_counts(pred, gt):
    """Per-threshold (TP, FP) counts for ``pred >= t`` over the 256 thresholds, plus (#fg, #bg)."""
    pred, gt = _as_pair(pred, gt)
    fg = gt > 0.5
    # bin b = number of thresholds <= pred, so pred >= THRESHOLDS[k] iff b > k
    bins = np.searchsorted(THRESHOLDS, pred.ravel(), side="right")
    fg_hist = np.bincount(bins[fg.ravel()], minlength=257)
    bg_hist = np.bincount(bins[~fg.ravel()], minlength=257)
    tp = np.cumsum(fg_hist[::-1])[::-1][1:]
    fp = np.cumsum(bg_hist[::-1])[::-1][1:]
    return tp, fp, int(fg.sum()), int((~fg).sum())


def _aggregate_counts(preds, gts):
    tp = np.zeros(256, dtype=np.int64)
    fp = np.zeros(256, dtype=np.int64)
    npos = nneg = 0
    for p, g in _as_lists(preds, gts):
        a, b, c, d = threshold_counts(p, g)
        tp += a
        fp += b
        npos += c
        nneg += d
    return tp, fp, npos, nneg


def f_beta(precision, recall, beta2=BETA2):
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    return _safe_div((1 + beta2) * precision * recall, beta2 * precision + recall)


def pr_curve(preds, gts):
    """Dataset-aggregated (precision, recall) at each of the 256 thresholds, shape (256, 2)."""
    tp, fp, npos, _ = _aggregate_counts(preds, gts)
    return np.stack([_safe_div(tp, tp + fp), _safe_div(tp, npos)], axis=1)


def f_measure_curve(preds, gts, beta2=BETA2):
    """Return ``(f_curve[256], max_f, mean_f)`` from dataset-aggregated precision/recall."""
    pr = pr_curve(preds, gts)
    curve = f_beta(pr[:, 0], pr[:, 1], beta2)
    return curve, float(curve.max()), float(curve.mean())


def auc(preds, gts):
    """Trapezoidal area under the ROC curve traced by the 256 thresholds."""
    tp, fp, npos, nneg = _aggregate_counts(preds, gts)
    tpr = np.concatenate([[0.0], _safe_div(tp, npos)[::-1]])
    fpr = np.concatenate([[0.0], _safe_div(fp, nneg)[::-1]])
    return float(np.trapezoid(tpr, fpr))


def _centroid(gt):
    h, w = gt.shape
    if not gt.any():
        return int(round(w / 2)) + 1, int(round(h / 2)) + 1
    ys, xs = np.nonzero(gt)
    return int(np.round(xs.mean())) + 1, int(np.round(ys.mean())) + 1


def _ssim(pred, gt):
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    dof = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / dof
    sy = ((gt - y) ** 2).sum() / dof
    sxy = ((pred - x) * (gt - y)).sum() / dof
    a = 4 * x * y * sxy
    b = (x ** 2 + y ** 2) * (sx + sy)
    if a != 0:
        return a / (b + np.spacing(1))
    return 1.0 if b == 0 else 0.0


def _region_similarity(pred, gt):
    x, y = _centroid(gt)
    h, w = gt.shape
    quads = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
             (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    area = h * w
    weights = [x * y / area, (w - x) * y / area, x * (h - y) / area]
    weights.append(1 - sum(weights))
    return sum(wt * _ssim(pred[q], gt[q].astype(np.float64)) for wt, q in zip(weights, quads))


def _object_score(values):
    if values.size == 0:
        return 0.0
    mean = values.mean()
    std = values.std(ddof=1) if values.size > 1 else 0.0
    return 2 * mean / (mean ** 2 + 1 + std + np.spacing(1))


def _object_similarity(pred, gt):
    fg = pred * gt
    bg = (1 - pred) * ~gt
    u = gt.mean()
    return u * _object_score(fg[gt]) + (1 - u) * _object_score(bg[~gt])


def s_measure(pred, gt, alpha=0.5):
    """Structure measure: alpha * object-aware + (1 - alpha) * region-aware similarity."""
    pred, gt = _as_pair(pred, gt)
    gt = gt > 0.5
    y = gt.mean()
    if y == 0:
        score = 1 - pred.mean()
    elif y == 1:
        score = pred.mean()
    else:
        score = alpha * _object_similarity(pred, gt) + (1 - alpha) * _region_similarity(pred, gt)
    return float(min(max(score, 0.0), 1.0))


@dataclass
class MetricReport:
    mae: float
    max_f: float
    mean_f: float
    s_measure: float
    auc: float
    f_curve: np.ndarray = field(repr=False)
    pr_curve: np.ndarray = field(repr=False)

    def scalars(self):
        return {k: round(float(getattr(self, k)), 6) for k in ("mae", "max_f", "mean_f", "s_measure", "auc")}


def evaluate(preds, gts, beta2=BETA2):
    pairs = _as_lists(preds, gts)
    preds = [p for p, _ in pairs]
    gts = [g for _, g in pairs]
    curve, max_f, mean_f = f_measure_curve(preds, gts, beta2)
    return MetricReport(
        mae=float(np.mean([mae(p, g) for p, g in pairs])),
        max_f=max_f,
        mean_f=mean_f,
        s_measure=float(np.mean([s_measure(p, g) for p, g in pairs])),
        auc=auc(preds, gts),
        f_curve=curve,
        pr_curve=pr_curve(preds, gts),
    )


def write_report(report, out_dir, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    payload = {k: float(f"{v:.6f}") for k, v in report.scalars().items()}
    if extra:
        payload.update(extra)
    path = os.path.join(out_dir, "report.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_curves(report, out_dir):
    """Write ``pr_curve.csv`` and ``f_curve.csv`` (6-decimal fixed); returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    pr_path = os.path.join(out_dir, "pr_curve.csv")
    f_path = os.path.join(out_dir, "f_curve.csv")
    with open(pr_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("threshold,precision,recall\n")
        for t, (p, r) in zip(THRESHOLDS, report.pr_curve):
            fh.write(f"{t:.6f},{p:.6f},{r:.6f}\n")
    with open(f_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("threshold,f\n")
        for t, f in zip(THRESHOLDS, report.f_curve):
            fh.write(f"{t:.6f},{f:.6f}\n")
    return pr_path, f_path


def emit_plots(report, out_dir):
    """CSV curves plus their PNG renderings."""
    from . import plots

    pr_csv, f_csv = write_curves(report, out_dir)
    pr_png = plots.plot_pr_curve(report.pr_curve, os.path.join(out_dir, "pr_curve.png"))
    f_png = plots.plot_f_curve(THRESHOLDS, report.f_curve, os.path.join(out_dir, "f_curve.png"))
    return [pr_csv, f_csv, pr_png, f_png]
