"""Evaluation suite: MAE, S-measure, E-measure, F-measure, weighted
F-measure, and 256-point precision/recall/F/E threshold curves.

Conventions (fixed so results are reproducible):
  * curves binarize at thresholds (k+1)/256 for k = 0..255 with ``>=``,
    a grid on which a prediction identical to its binary ground truth
    scores 1.0 at every point;
  * adaptive threshold is min(2*mean(p), 1);
  * eps = 1e-8 wherever a denominator can vanish; 0/0 ratios are 0;
  * empty-ground-truth frames use the degenerate S/E conventions and
    record F and weighted F as 0 with a per-image flag;
  * the weighted F-measure resolves nearest-foreground ties
    lexicographically by (distance^2, row, col).

Predictions are float maps in [0,1]; ground truth is binary.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import load_map
from .tensor.ops import bilinear_resize_array

EPS = 1e-8
BETA2 = 0.3  # beta^2 of the F-measure
S_ALPHA = 0.5
WFM_SIGMA = 5.0
WFM_KSIZE = 7
WFM_DECAY = math.log(0.5) / 5.0

THRESHOLDS = (np.arange(256, dtype=np.float64) + 1.0) / 256.0

CURVE_HEADER = ["threshold", "precision", "recall", "f", "e"]
PER_IMAGE_HEADER = [
    "id", "mae", "s_alpha", "e_max", "e_mean", "e_adaptive",
    "f_max", "f_mean", "f_adaptive", "f_weighted", "empty_gt",
]


def _prep(p, g) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(getattr(p, "data", p), dtype=np.float64).reshape(np.shape(p)[-2:])
    g = np.asarray(getattr(g, "data", g), dtype=np.float64).reshape(np.shape(g)[-2:])
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} vs ground truth {g.shape}")
    return p, (g > 0.5).astype(np.float64)


def mae(p, g) -> float:
    p, g = _prep(p, g)
    return float(np.mean(np.abs(p - g)))


def adaptive_threshold(p: np.ndarray) -> float:
    return min(2.0 * float(p.mean()), 1.0)


# ---------------------------------------------------------------------------
# threshold counting, F-measure, E-measure
# ---------------------------------------------------------------------------


def threshold_counts(p: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(TP, FP, FN, TN) int arrays over the 256-threshold grid."""
    gm = g.reshape(-1) > 0.5
    pv = p.reshape(-1)
    n = pv.size
    ng = int(gm.sum())
    binarized = pv[None, :] >= THRESHOLDS[:, None]
    tp = binarized[:, gm].sum(axis=1).astype(np.int64)
    pp = binarized.sum(axis=1).astype(np.int64)
    fp = pp - tp
    fn = ng - tp
    tn = n - ng - fp
    return tp, fp, fn, tn


def _fmeasure(tp, fp, fn):
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        rec = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f = np.where(prec + rec > 0, (1.0 + BETA2) * prec * rec / (BETA2 * prec + rec), 0.0)
    return prec, rec, f


@dataclass
class FCurve:
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray
    f_max: float
    f_mean: float
    f_adaptive: float


def f_measure_curve(p, g) -> FCurve:
    p, g = _prep(p, g)
    tp, fp, fn, _ = threshold_counts(p, g)
    prec, rec, f = _fmeasure(tp, fp, fn)
    bin_ad = p >= adaptive_threshold(p)
    tp_a = int(np.sum(bin_ad * g))
    fp_a = int(bin_ad.sum()) - tp_a
    fn_a = int(g.sum()) - tp_a
    _, _, f_a = _fmeasure(np.array([tp_a]), np.array([fp_a]), np.array([fn_a]))
    return FCurve(prec, rec, f, float(f.max()), float(f.mean()), float(f_a[0]))


def _e_from_counts(tp: int, fp: int, fn: int, tn: int) -> float:
    """Alignment score from the four pixel-class counts.

    The centered maps are two-valued, so the pointwise mean of the
    enhanced alignment matrix collapses to a sum over the classes.
    Degenerate ground truth uses the reference conventions.
    """
    n = tp + fp + fn + tn
    ng = tp + fn
    npred = tp + fp
    if ng == 0:
        return 1.0 - npred / n
    if ng == n:
        return npred / n
    mu_g = ng / n
    mu_p = npred / n
    total = 0.0
    for cnt, a, b in (
        (tp, 1.0 - mu_g, 1.0 - mu_p),
        (fn, 1.0 - mu_g, -mu_p),
        (fp, -mu_g, 1.0 - mu_p),
        (tn, -mu_g, -mu_p),
    ):
        xi = 2.0 * a * b / (a * a + b * b + EPS)
        total += cnt * (1.0 + xi) ** 2 / 4.0
    return total / n


@dataclass
class ECurve:
    e: np.ndarray
    e_max: float
    e_mean: float
    e_adaptive: float


def e_measure_curve(p, g) -> ECurve:
    p, g = _prep(p, g)
    tp, fp, fn, tn = threshold_counts(p, g)
    e = np.array([_e_from_counts(int(a), int(b), int(c), int(d))
                  for a, b, c, d in zip(tp, fp, fn, tn)])
    bin_ad = p >= adaptive_threshold(p)
    tp_a = int(np.sum(bin_ad * g))
    fp_a = int(bin_ad.sum()) - tp_a
    fn_a = int(g.sum()) - tp_a
    tn_a = g.size - tp_a - fp_a - fn_a
    return ECurve(e, float(e.max()), float(e.mean()), _e_from_counts(tp_a, fp_a, fn_a, tn_a))


# ---------------------------------------------------------------------------
# S-measure
# ---------------------------------------------------------------------------


def _object_score(values: np.ndarray) -> float:
    x = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + 2.0 * sigma + EPS)


def _ssim_block(pr: np.ndarray, gt: np.ndarray) -> float:
    n = pr.size
    x = float(pr.mean())
    y = float(gt.mean())
    denom = n - 1 + EPS
    sx2 = float(((pr - x) ** 2).sum()) / denom
    sy2 = float(((gt - y) ** 2).sum()) / denom
    sxy = float(((pr - x) * (gt - y)).sum()) / denom
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx2 + sy2)
    if alpha != 0.0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0.0 else 0.0


def s_measure(p, g) -> float:
    """alpha-blend of object- and region-aware structural similarity.

    Degenerate conventions: all-background truth scores 1 - mean(p),
    all-foreground scores mean(p). The final value is clamped to [0,1].
    """
    p, g = _prep(p, g)
    h, w = g.shape
    ng = int(g.sum())
    if ng == 0:
        return float(np.clip(1.0 - p.mean(), 0.0, 1.0))
    if ng == g.size:
        return float(np.clip(p.mean(), 0.0, 1.0))

    fg = g > 0.5
    mu = ng / g.size
    s_object = mu * _object_score(p[fg]) + (1.0 - mu) * _object_score(1.0 - p[~fg])

    rows, cols = np.nonzero(fg)
    cy = int(np.round(rows.mean()))
    cx = int(np.round(cols.mean()))
    cut_y, cut_x = cy + 1, cx + 1
    s_region = 0.0
    for ys in (slice(0, cut_y), slice(cut_y, h)):
        for xs in (slice(0, cut_x), slice(cut_x, w)):
            gb = g[ys, xs]
            if gb.size == 0:
                continue
            s_region += (gb.size / g.size) * _ssim_block(p[ys, xs], gb)

    return float(np.clip(S_ALPHA * s_object + (1.0 - S_ALPHA) * s_region, 0.0, 1.0))


# ---------------------------------------------------------------------------
# weighted F-measure
# ---------------------------------------------------------------------------


def edt_nearest_fg(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact squared EDT to the nearest foreground pixel, with indices.

    Ties are resolved lexicographically by (distance^2, row, col): the
    per-row scan prefers the left neighbor on equal column distance and
    the cross-row scan keeps the smallest row on equal totals.
    Returns (d2, row_idx, col_idx); foreground pixels map to themselves.
    """
    h, w = g.shape
    fg = g > 0.5
    if not fg.any():
        raise ValueError("no foreground pixels")
    big = np.int64(1 << 40)
    cols = np.arange(w, dtype=np.int64)

    # per-row nearest foreground column
    left = np.where(fg, cols[None, :], -big)
    left = np.maximum.accumulate(left, axis=1)
    right = np.where(fg, cols[None, :], big)
    right = np.minimum.accumulate(right[:, ::-1], axis=1)[:, ::-1]
    dl = cols[None, :] - left
    dr = right - cols[None, :]
    use_left = dl <= dr
    row_col = np.where(use_left, left, right)
    row_d2 = np.where(use_left, dl, dr).astype(np.float64) ** 2
    row_d2[row_col < 0] = np.inf
    row_d2[row_col >= big] = np.inf

    best = np.full((h, w), np.inf)
    best_row = np.zeros((h, w), dtype=np.int64)
    best_col = np.zeros((h, w), dtype=np.int64)
    rows = np.arange(h, dtype=np.float64)
    for rp in range(h):
        if not np.isfinite(row_d2[rp]).any():
            continue
        cand = (rows - rp)[:, None] ** 2 + row_d2[rp][None, :]
        upd = cand < best  # strict: earlier rows win ties
        best[upd] = cand[upd]
        best_row[upd] = rp
        np.copyto(best_col, np.broadcast_to(row_col[rp], (h, w)), where=upd)
    return best, best_row, best_col


def _gauss_kernel2d(k: int, sigma: float) -> np.ndarray:
    c = (k - 1) / 2.0
    yy, xx = np.mgrid[0:k, 0:k].astype(np.float64)
    ker = np.exp(-((yy - c) ** 2 + (xx - c) ** 2) / (2.0 * sigma * sigma))
    return ker / ker.sum()


def _gauss_filter_zero(a: np.ndarray, k: int, sigma: float) -> np.ndarray:
    """Correlation with a normalized Gaussian, zero padding."""
    ker = _gauss_kernel2d(k, sigma)
    r = k // 2
    p = np.pad(a, r)
    h, w = a.shape
    out = np.zeros_like(a)
    for i in range(k):
        for j in range(k):
            out += ker[i, j] * p[i : i + h, j : j + w]
    return out


def weighted_f(p, g) -> float:
    """Boundary-aware F-measure on the continuous prediction.

    Background errors are read at the nearest foreground pixel, smoothed
    with a 7x7 sigma-5 Gaussian (zero padded), min-ruled against the raw
    error on the foreground, and scaled by a distance-decaying background
    importance 2 - 2*exp(ln(0.5)/5 * D).
    """
    p, g = _prep(p, g)
    fg = g > 0.5
    ng = int(fg.sum())
    if ng == 0:
        return 0.0
    e = np.abs(p - g)
    d2, ir, ic = edt_nearest_fg(g)
    et = e.copy()
    bg = ~fg
    et[bg] = e[ir[bg], ic[bg]]
    ea = _gauss_filter_zero(et, WFM_KSIZE, WFM_SIGMA)
    min_e_ea = e.copy()
    sel = fg & (ea < e)
    min_e_ea[sel] = ea[sel]
    b = np.ones_like(e)
    b[bg] = 2.0 - 2.0 * np.exp(WFM_DECAY * np.sqrt(d2[bg]))
    ew = min_e_ea * b
    tpw = ng - float(ew[fg].sum())
    fpw = float(ew[bg].sum())
    recall = 1.0 - float(ew[fg].mean())
    precision = tpw / (tpw + fpw + EPS)
    return 2.0 * precision * recall / (precision + recall + EPS)


# ---------------------------------------------------------------------------
# per-image scoring and dataset aggregation
# ---------------------------------------------------------------------------


@dataclass
class ImageScores:
    id: str
    mae: float
    s_alpha: float
    e_max: float
    e_mean: float
    e_adaptive: float
    f_max: float
    f_mean: float
    f_adaptive: float
    f_weighted: float
    empty_gt: bool
    precision: np.ndarray
    recall: np.ndarray
    f_curve: np.ndarray
    e_curve: np.ndarray


MEAN_FIELDS = ("mae", "s_alpha", "e_max", "e_mean", "e_adaptive",
               "f_max", "f_mean", "f_adaptive", "f_weighted")


@dataclass
class MetricReport:
    per_image: list[ImageScores]
    means: dict[str, float]
    precision: np.ndarray
    recall: np.ndarray
    f_curve: np.ndarray
    e_curve: np.ndarray
    n_images: int
    n_empty_gt: int
    means_excluding_empty: dict[str, float] = field(default_factory=dict)


def score_pair(p, g, image_id: str = "") -> ImageScores:
    p, g = _prep(p, g)
    empty = not (g > 0.5).any()
    fc = f_measure_curve(p, g)
    ec = e_measure_curve(p, g)
    if empty:
        f_max = f_mean = f_adaptive = f_weighted = 0.0
    else:
        f_max, f_mean, f_adaptive = fc.f_max, fc.f_mean, fc.f_adaptive
        f_weighted = weighted_f(p, g)
    return ImageScores(
        id=image_id,
        mae=mae(p, g),
        s_alpha=s_measure(p, g),
        e_max=ec.e_max,
        e_mean=ec.e_mean,
        e_adaptive=ec.e_adaptive,
        f_max=f_max,
        f_mean=f_mean,
        f_adaptive=f_adaptive,
        f_weighted=f_weighted,
        empty_gt=empty,
        precision=fc.precision,
        recall=fc.recall,
        f_curve=fc.f,
        e_curve=ec.e,
    )


def _normalize(p: np.ndarray) -> np.ndarray:
    lo, hi = p.min(), p.max()
    return (p - lo) / (hi - lo) if hi > lo else np.zeros_like(p)


def _score_files(args) -> ImageScores:
    pred_path, gt_path, normalize = args
    g = (load_map(gt_path) >= 128.0 / 255.0).astype(np.float64)
    p = load_map(pred_path)
    if p.shape != g.shape:
        p = np.clip(bilinear_resize_array(p, g.shape[0], g.shape[1]), 0.0, 1.0)
    if normalize:
        p = _normalize(p)
    return score_pair(p, g, image_id=Path(pred_path).stem)


def evaluate_dataset(pred_dir, gt_dir, out_dir=None, normalize: bool = False,
                     jobs: int = 1) -> MetricReport:
    """Score stem-matched PNG pairs; optionally write the three CSVs.

    Predictions are bilinearly resized to ground-truth resolution when
    sizes differ. Aggregation order is lexicographic by stem regardless
    of worker count.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {q.stem: q for q in sorted(pred_dir.glob("*.png"))}
    gts = {q.stem: q for q in sorted(gt_dir.glob("*.png"))}
    common = sorted(set(preds) & set(gts))
    missing = sorted(set(preds) ^ set(gts))
    if not common:
        raise FileNotFoundError(f"no stem-matched pairs between {pred_dir} and {gt_dir}")
    if missing:
        print(f"warning: {len(missing)} unmatched stems skipped: {', '.join(missing[:8])}"
              + ("..." if len(missing) > 8 else ""))
    tasks = [(preds[s], gts[s], normalize) for s in common]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_score_files, tasks))
    else:
        records = [_score_files(t) for t in tasks]

    means = {k: float(np.mean([getattr(r, k) for r in records])) for k in MEAN_FIELDS}
    full = [r for r in records if not r.empty_gt]
    means_ex = {
        k: (float(np.mean([getattr(r, k) for r in full])) if full else 0.0)
        for k in MEAN_FIELDS
    }
    report = MetricReport(
        per_image=records,
        means=means,
        precision=np.mean([r.precision for r in records], axis=0),
        recall=np.mean([r.recall for r in records], axis=0),
        f_curve=np.mean([r.f_curve for r in records], axis=0),
        e_curve=np.mean([r.e_curve for r in records], axis=0),
        n_images=len(records),
        n_empty_gt=sum(r.empty_gt for r in records),
        means_excluding_empty=means_ex,
    )
    if out_dir is not None:
        write_report_csvs(report, out_dir)
    return report


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_report_csvs(report: MetricReport, out_dir) -> None:
    """per_image.csv, summary.csv and curves.csv; 6 decimals, LF endings."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "per_image.csv", "w", newline="\n") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(PER_IMAGE_HEADER)
        for r in report.per_image:
            wr.writerow([r.id] + [_fmt(getattr(r, k)) for k in MEAN_FIELDS] + [int(r.empty_gt)])
    with open(out_dir / "summary.csv", "w", newline="\n") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["n_images", "n_empty_gt"] + list(MEAN_FIELDS))
        wr.writerow([report.n_images, report.n_empty_gt]
                    + [_fmt(report.means[k]) for k in MEAN_FIELDS])
    with open(out_dir / "curves.csv", "w", newline="\n") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(CURVE_HEADER)
        for i in range(256):
            wr.writerow([
                _fmt(THRESHOLDS[i]),
                _fmt(report.precision[i]),
                _fmt(report.recall[i]),
                _fmt(report.f_curve[i]),
                _fmt(report.e_curve[i]),
            ])
