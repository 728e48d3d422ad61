"""Regenerate metric_reference.json from the PySODMetrics reference implementation.

Usage: python3 make_metric_reference.py > metric_reference.json

Ground truths are single axis-aligned rectangles (plus one checkerboard case whose
prediction error is uniform) so that every background pixel has a unique nearest
foreground pixel and the distance-transform tie-break cannot influence the
weighted F-measure.

The reference E-measure divides the enhanced-alignment sum by (N - 1 + eps); the
stored value is rescaled to a plain mean over N pixels.
"""

import json
import sys

import numpy as np
from py_sod_metrics.sod_metrics import EPS, Emeasure, Fmeasure, MAE, Smeasure, WeightedFmeasure
from py_sod_metrics.utils import get_adaptive_threshold


def reference(pred, gt):
    sm, wfm, fm, em, mae = Smeasure(), WeightedFmeasure(), Fmeasure(), Emeasure(), MAE()
    for m in (sm, wfm, mae):
        m.step(pred, gt, normalize=False)
    adaptive_fm = fm.cal_adaptive_fm(pred, gt)
    em.gt_fg_numel = np.count_nonzero(gt)
    em.gt_size = gt.size
    raw_em = em.cal_em_with_threshold(pred, gt, get_adaptive_threshold(pred, max_value=1))
    n = gt.size
    return {
        "sm": float(sm.get_results()["sm"]),
        "wfm": float(wfm.get_results()["wfm"]),
        "fm": float(adaptive_fm),
        "em": float(raw_em * (n - 1 + EPS) / n),
        "mae": float(mae.get_results()["mae"]),
    }


def case(name, pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=bool)
    h, w = gt.shape
    return {
        "name": name,
        "height": h,
        "width": w,
        "pred": [float(v) for v in pred.ravel()],
        "gt": [int(v) for v in gt.ravel()],
        "expected": reference(pred, gt),
    }


def main():
    rng = np.random.default_rng(20240601)
    cases = []

    checker = (np.indices((4, 4)).sum(axis=0) % 2).astype(bool)
    cases.append(case("checkerboard_inverted", 1.0 - checker, checker))
    cases.append(case("checkerboard_soft", np.where(checker, 0.7, 0.2), checker))

    for k in range(12):
        h, w = rng.integers(5, 17, size=2)
        top, left = rng.integers(0, h - 1), rng.integers(0, w - 1)
        bottom, right = rng.integers(top + 1, h + 1), rng.integers(left + 1, w + 1)
        gt = np.zeros((h, w), dtype=bool)
        gt[top:bottom, left:right] = True
        if gt.all():
            continue
        if k % 3 == 0:
            pred = rng.random((h, w))
        elif k % 3 == 1:
            pred = np.clip(gt * 0.8 + rng.normal(0, 0.2, (h, w)), 0, 1)
        else:
            pred = np.zeros((h, w))
            t2, l2 = max(top - 1, 0), max(left - 1, 0)
            pred[t2:bottom, l2:right] = rng.uniform(0.3, 1.0)
        cases.append(case(f"rect_{k}", pred, gt))

    json.dump({"cases": cases}, sys.stdout, indent=1)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
