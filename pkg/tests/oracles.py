"""Straight-line reference implementations of the metrics, written without numpy vectorization."""

import math


def iou(pred, gt):
    inter = union = 0
    for row_p, row_g in zip(pred, gt):
        for p, g in zip(row_p, row_g):
            inter += bool(p) and bool(g)
            union += bool(p) or bool(g)
    return 1.0 if union == 0 else inter / union


def boundary(mask):
    h, w = len(mask), len(mask[0])
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i][j]:
                continue
            edge = i == 0 or j == 0 or i == h - 1 or j == w - 1
            if edge or not (mask[i - 1][j] and mask[i + 1][j] and mask[i][j - 1] and mask[i][j + 1]):
                pts.append((i, j))
    return pts


def _matched(src, dst, tol):
    hits = 0
    for i, j in src:
        if any((i - a) ** 2 + (j - b) ** 2 <= tol * tol for a, b in dst):
            hits += 1
    return hits


def boundary_f(pred, gt, tol):
    bp, bg = boundary(pred), boundary(gt)
    if not bp and not bg:
        return 1.0
    if not bp or not bg:
        return 0.0
    precision = _matched(bp, bg, tol) / len(bp)
    recall = _matched(bg, bp, tol) / len(bg)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def mae(heat, gt):
    terms = [abs(float(h) - float(g)) for row_h, row_g in zip(heat, gt) for h, g in zip(row_h, row_g)]
    return math.fsum(terms) / len(terms)


def max_fmeasure(heat, gt, beta2=0.3):
    n_gt = sum(bool(g) for row in gt for g in row)
    best, curve = 0.0, []
    for i in range(1, 256):
        t = i / 256
        n_pred = tp = 0
        for row_h, row_g in zip(heat, gt):
            for h, g in zip(row_h, row_g):
                if float(h) >= t:
                    n_pred += 1
                    tp += bool(g)
        if n_pred == 0:
            p, r = 1.0, 0.0
        else:
            p = tp / n_pred
            r = tp / n_gt if n_gt else 1.0
        curve.append((p, r))
        denom = beta2 * p + r
        f = 0.0 if denom == 0 else (1 + beta2) * p * r / denom
        best = max(best, f)
    return best, curve


def default_tol(h, w):
    return float(math.ceil(0.008 * math.hypot(h, w)))
