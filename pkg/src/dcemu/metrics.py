"""
Assessment of emulated reflectance and cloud products against the teacher.

Metrics that cannot be computed (no clear pixels, zero variance, empty class)
return ``None`` and serialize as ``"undefined"``; they are never reported as 0.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DataError, DimensionError
from .model import classify_cloud

UNDEFINED = "undefined"


@dataclass
class RasterPair:
    """Teacher rasters and a predictive distribution over the same grid.

    ``predicted_clear``, when given, restricts reflectance metrics to pixels
    that both the teacher and the emulator call clear.
    """

    teacher_sr: np.ndarray          # [H, W, bands]
    teacher_clear: np.ndarray       # [H, W]
    mean: np.ndarray                # [H, W, bands]
    variance: np.ndarray            # [H, W, bands]
    p_clear: np.ndarray             # [H, W]
    class_map: np.ndarray | None = None
    predicted_clear: np.ndarray | None = None

    def __post_init__(self):
        grid = np.shape(self.teacher_clear)
        for name in ("teacher_sr", "mean", "variance"):
            if np.shape(getattr(self, name))[:-1] != grid:
                raise DimensionError(f"{name} grid {np.shape(getattr(self, name))[:-1]} != {grid}")
        for name in ("p_clear", "class_map", "predicted_clear"):
            v = getattr(self, name)
            if v is not None and np.shape(v) != grid:
                raise DimensionError(f"{name} shape {np.shape(v)} != {grid}")

    @property
    def clear(self):
        """Pixels used for reflectance metrics."""
        m = np.asarray(self.teacher_clear) > 0
        if self.predicted_clear is not None:
            m = m & (np.asarray(self.predicted_clear) > 0)
        return m

    def restrict(self, mask):
        """Copy with every pixel outside ``mask`` marked not clear."""
        return RasterPair(self.teacher_sr, np.asarray(self.teacher_clear) * mask, self.mean,
                          self.variance, self.p_clear, self.class_map, self.predicted_clear)


# ---------------------------------------------------------------------------
# reflectance


def conditional_rmse(pair, band):
    m = pair.clear
    if not m.any():
        return None
    r = pair.teacher_sr[..., band][m] - pair.mean[..., band][m]
    return float(np.sqrt(np.mean(r * r)))


def mean_and_cv(field, mask=None):
    """Mean and coefficient of variation (percent, population std)."""
    v = _masked(field, mask)
    if v.size < 2:
        return (float(v.mean()) if v.size else None), None
    mean = float(v.mean())
    if mean == 0.0:
        return mean, None
    return mean, float(100.0 * v.std() / mean)


def correlation(pair, band):
    m = pair.clear
    if m.sum() < 2:
        return None
    a = pair.teacher_sr[..., band][m]
    b = pair.mean[..., band][m]
    if a.std() == 0.0 or b.std() == 0.0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def _masked(field, mask):
    field = np.asarray(field, dtype=float)
    m = np.isfinite(field)
    if mask is not None:
        m &= np.asarray(mask) > 0
    return field[m]


def moran_sums(field, mask=None, center=None):
    """Pieces of Moran's I under rook-adjacent binary weights.

    Returns ``(n, sum_w, sum_wzz, sum_zz)`` where masked or non-finite pixels
    drop out of both the cross products and the weights.
    """
    field = np.asarray(field, dtype=float)
    valid = np.isfinite(field)
    if mask is not None:
        valid &= np.asarray(mask) > 0
    n = int(valid.sum())
    if n == 0:
        return 0, 0, 0.0, 0.0
    if center is None:
        center = field[valid].mean()
    z = np.where(valid, field - center, 0.0)
    sw = 0
    swzz = 0.0
    for a, b, va, vb in ((z[:, :-1], z[:, 1:], valid[:, :-1], valid[:, 1:]),
                         (z[:-1, :], z[1:, :], valid[:-1, :], valid[1:, :])):
        both = va & vb
        # each adjacent pair counts in both directions (w_ij and w_ji)
        sw += 2 * int(both.sum())
        swzz += 2.0 * float(np.sum(a[both] * b[both]))
    return n, sw, swzz, float(np.sum(z[valid] ** 2))


def morans_i(field, mask=None):
    field = np.asarray(field, dtype=float)
    if field.size < 9:
        raise DataError("Moran's I needs a grid of at least 9 pixels")
    return _moran_from_sums(*moran_sums(field, mask))


def _moran_from_sums(n, sw, swzz, szz):
    if n == 0 or sw == 0 or szz == 0.0:
        return None
    return float(n / sw * swzz / szz)


def morans_i_pooled(fields, masks):
    """Moran's I over several grids that share one mean and have no cross-grid neighbors."""
    vals = np.concatenate([_masked(f, m) for f, m in zip(fields, masks)])
    if vals.size == 0:
        return None
    center = vals.mean()
    tot = np.zeros(4)
    for f, m in zip(fields, masks):
        tot += moran_sums(f, m, center)
    return _moran_from_sums(int(tot[0]), int(tot[1]), tot[2], tot[3])


# ---------------------------------------------------------------------------
# cloud classification


@dataclass
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self):
        return (self.tp + self.tn) / self.total if self.total else None

    @property
    def sensitivity(self):
        pos = self.tp + self.fn
        return self.tp / pos if pos else None

    @property
    def specificity(self):
        neg = self.tn + self.fp
        return self.tn / neg if neg else None

    def to_dict(self):
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
                "accuracy": self.accuracy, "sensitivity": self.sensitivity,
                "specificity": self.specificity}


def confusion(pred_mask, ref_mask):
    """Counts with clear sky (1) as the positive class."""
    pred = np.asarray(pred_mask) > 0
    ref = np.asarray(ref_mask) > 0
    if pred.shape != ref.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    return Confusion(int(np.sum(pred & ref)), int(np.sum(~pred & ~ref)),
                     int(np.sum(pred & ~ref)), int(np.sum(~pred & ref)))


@dataclass
class ThresholdSweep:
    levels: np.ndarray
    accuracy: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    roc_fpr: np.ndarray
    roc_tpr: np.ndarray
    auc: float | None

    @property
    def best_index(self):
        return int(np.argmax(self.accuracy))

    @property
    def best_threshold(self):
        return float(self.levels[self.best_index])

    @property
    def best_accuracy(self):
        return float(self.accuracy[self.best_index])


def threshold_sweep(p_clear, ref_mask, levels=None):
    """Accuracy and ROC over decision thresholds.

    A pixel is called clear when ``p > level``.  With ``levels=None`` every
    distinct score is used as a threshold, which gives the exact ROC (and an
    AUC unchanged by any strictly increasing transform of the scores).
    """
    p = np.asarray(p_clear, dtype=float).ravel()
    ref = (np.asarray(ref_mask) > 0).ravel()
    if p.shape != ref.shape:
        raise DimensionError("score and mask sizes differ")
    if levels is None:
        levels = np.unique(p)
    else:
        levels = np.asarray(levels, dtype=float)
        if np.any(np.diff(levels) < 0):
            raise ValueError("levels must be sorted")
    pos = np.sort(p[ref])
    neg = np.sort(p[~ref])
    tp = pos.size - np.searchsorted(pos, levels, side="right")
    fp = neg.size - np.searchsorted(neg, levels, side="right")
    tn = neg.size - fp
    acc = (tp + tn) / p.size
    tpr = tp / pos.size if pos.size else np.full(levels.shape, np.nan)
    fpr = fp / neg.size if neg.size else np.full(levels.shape, np.nan)
    auc = None
    rf = np.concatenate([[0.0], fpr, [1.0]])
    rt = np.concatenate([[0.0], tpr, [1.0]])
    order = np.lexsort((rt, rf))
    rf, rt = rf[order], rt[order]
    if pos.size and neg.size:
        auc = float(np.sum(np.diff(rf) * (rt[1:] + rt[:-1]) / 2.0))
    return ThresholdSweep(levels, acc, tpr, fpr, rf, rt, auc)


# ---------------------------------------------------------------------------
# uncertainty calibration


@dataclass
class CalibrationCurve:
    levels: np.ndarray
    frequency: np.ndarray
    n_used: int
    n_zero_variance: int


def calibration_curve(pair, band, levels=None):
    """Observed coverage of central Gaussian intervals versus their nominal mass."""
    levels = np.linspace(0.0, 1.0, 11) if levels is None else np.asarray(levels, dtype=float)
    m = pair.clear
    var = pair.variance[..., band][m]
    ok = var > 0
    n_zero = int(np.sum(~ok))
    y = pair.teacher_sr[..., band][m][ok]
    mu = pair.mean[..., band][m][ok]
    if y.size == 0:
        return CalibrationCurve(levels, np.full(levels.shape, np.nan), 0, n_zero)
    z = np.sort(np.abs(y - mu) / np.sqrt(var[ok]))
    half = stats.norm.ppf(0.5 + levels / 2.0)
    freq = np.searchsorted(z, half, side="right") / z.size
    return CalibrationCurve(levels, freq, int(y.size), n_zero)


# ---------------------------------------------------------------------------
# stratification


@dataclass
class ClassRow:
    class_id: int
    n_pixels: int
    n_clear: int
    rmse: list
    cloud_accuracy: float | None
    flagged: bool

    def to_dict(self):
        return {"class": self.class_id, "n_pixels": self.n_pixels, "n_clear": self.n_clear,
                "conditional_rmse": self.rmse, "cloud_accuracy": self.cloud_accuracy,
                "flagged": self.flagged}


def stratified_report(pair, class_map=None, threshold=0.5, floor=0):
    """Conditional RMSE and cloud accuracy per class of ``class_map``.

    Classes with fewer than ``floor`` pixels are flagged.
    """
    cmap = pair.class_map if class_map is None else np.asarray(class_map)
    if cmap is None:
        raise DataError("no class map")
    if np.shape(cmap) != np.shape(pair.teacher_clear):
        raise DimensionError("class map is not aligned with the rasters")
    pred = classify_cloud(pair.p_clear, threshold)
    rows = []
    for c in np.unique(cmap):
        sel = cmap == c
        sub = pair.restrict(sel)
        bands = pair.mean.shape[-1]
        conf = confusion(pred[sel], np.asarray(pair.teacher_clear)[sel])
        rows.append(ClassRow(int(c), int(sel.sum()), int(sub.clear.sum()),
                             [conditional_rmse(sub, b) for b in range(bands)],
                             conf.accuracy, bool(sel.sum() < floor)))
    return rows


def class_summary(rows):
    """Pixel-weighted recombination of unflagged class rows.

    RMSE recombines as a root of the clear-pixel weighted mean square, cloud
    accuracy as a pixel-weighted mean.
    """
    kept = [r for r in rows if not r.flagged]
    bands = len(kept[0].rmse) if kept else 0
    rmse = []
    for b in range(bands):
        used = [r for r in kept if r.rmse[b] is not None]
        n = sum(r.n_clear for r in used)
        rmse.append(math.sqrt(sum(r.n_clear * r.rmse[b] ** 2 for r in used) / n) if n else None)
    acc_rows = [r for r in kept if r.cloud_accuracy is not None]
    n_pix = sum(r.n_pixels for r in acc_rows)
    acc = sum(r.n_pixels * r.cloud_accuracy for r in acc_rows) / n_pix if n_pix else None
    return {"classes": [r.class_id for r in kept], "excluded": [r.class_id for r in rows if r.flagged],
            "conditional_rmse": rmse, "cloud_accuracy": acc}


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    data: dict = field(default_factory=dict)

    def to_text(self):
        return json.dumps(_clean(self.data), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_text(cls, text):
        return cls(json.loads(text))

    def curves_csv(self):
        """Threshold sweep and calibration curves as CSV text."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["curve", "band", "x", "y", "extra"])
        sweep = self.data.get("cloud", {}).get("sweep", {})
        for lv, acc, fpr, tpr in zip(sweep.get("levels", []), sweep.get("accuracy", []),
                                     sweep.get("fpr", []), sweep.get("tpr", [])):
            w.writerow(["accuracy", "", lv, acc, ""])
            w.writerow(["roc", "", fpr, tpr, lv])
        for band, cal in sorted(self.data.get("calibration", {}).items()):
            for lv, fr in zip(cal["levels"], cal["frequency"]):
                w.writerow(["calibration", band, lv, fr, ""])
        return buf.getvalue()


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else UNDEFINED
    if obj is None:
        return UNDEFINED
    return obj


DEFAULT_SWEEP = np.round(np.linspace(0.0, 1.0, 101), 10)
DEFAULT_CALIBRATION = np.round(np.linspace(0.0, 1.0, 11), 10)


def evaluate_pairs(pairs, band_names, threshold=0.5, sweep_levels=None,
                   calibration_levels=None, class_floor=0):
    """Full report over one or more aligned raster pairs, pooling their pixels."""
    if not pairs:
        raise DataError("nothing to evaluate")
    sweep_levels = DEFAULT_SWEEP if sweep_levels is None else np.asarray(sweep_levels, float)
    calibration_levels = (DEFAULT_CALIBRATION if calibration_levels is None
                          else np.asarray(calibration_levels, float))
    pooled = _pool(pairs)
    bands = {}
    for b, name in enumerate(band_names):
        m = pooled.clear
        t_mean, t_cv = mean_and_cv(pooled.teacher_sr[..., b], m)
        e_mean, e_cv = mean_and_cv(pooled.mean[..., b], m)
        teacher_fields = [p.teacher_sr[..., b] for p in pairs]
        emu_fields = [p.mean[..., b] for p in pairs]
        masks = [p.clear for p in pairs]
        bands[name] = {
            "teacher_mean": t_mean,
            "emulator_mean": e_mean,
            "mean_difference": None if t_mean is None or e_mean is None else t_mean - e_mean,
            "teacher_cv": t_cv,
            "emulator_cv": e_cv,
            "cv_relative_difference": (None if t_cv in (None, 0.0) or e_cv is None
                                       else 100.0 * (t_cv - e_cv) / t_cv),
            "correlation": correlation(pooled, b),
            "conditional_rmse": conditional_rmse(pooled, b),
            "teacher_morans_i": morans_i_pooled(teacher_fields, masks),
            "emulator_morans_i": morans_i_pooled(emu_fields, masks),
        }
    pred = classify_cloud(pooled.p_clear, threshold)
    conf = confusion(pred, pooled.teacher_clear)
    sweep = threshold_sweep(pooled.p_clear, pooled.teacher_clear, sweep_levels)
    exact = threshold_sweep(pooled.p_clear, pooled.teacher_clear)
    cloud = {
        "threshold": threshold,
        "confusion": conf.to_dict(),
        "auc": exact.auc,
        "sweep": {"levels": sweep.levels, "accuracy": sweep.accuracy, "tpr": sweep.tpr,
                  "fpr": sweep.fpr, "auc": sweep.auc, "best_threshold": sweep.best_threshold,
                  "best_accuracy": sweep.best_accuracy},
    }
    calibration = {}
    for b, name in enumerate(band_names):
        cc = calibration_curve(pooled, b, calibration_levels)
        calibration[name] = {"levels": cc.levels, "frequency": cc.frequency,
                             "n_used": cc.n_used, "n_zero_variance": cc.n_zero_variance}
    data = {"n_pixels": int(np.size(pooled.teacher_clear)),
            "n_clear_evaluated": int(pooled.clear.sum()),
            "bands": bands, "cloud": cloud, "calibration": calibration}
    if pooled.class_map is not None:
        rows = stratified_report(pooled, threshold=threshold, floor=class_floor)
        data["classes"] = [r.to_dict() for r in rows]
        data["class_summary"] = class_summary(rows)
    return EvalReport(data)


def _pool(pairs):
    if len(pairs) == 1:
        return pairs[0]

    def cat(name, flat_axes):
        vals = [getattr(p, name) for p in pairs]
        if any(v is None for v in vals):
            return None
        return np.concatenate([np.asarray(v).reshape(-1, *np.shape(v)[flat_axes:])
                               for v in vals])[None]

    return RasterPair(cat("teacher_sr", 2), cat("teacher_clear", 2), cat("mean", 2),
                      cat("variance", 2), cat("p_clear", 2), cat("class_map", 2),
                      cat("predicted_clear", 2))
