"""Point-level segmentation metrics and the CSV report format."""

import csv

import numpy as np
from scipy.spatial import cKDTree

from .frame_io import NO_GT


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.size != gt.size:
        raise ValueError("prediction and ground truth differ in length")
    if gt.size == 0:
        raise ValueError("no points to evaluate")
    return pred, gt


def accuracy(pred, gt):
    pred, gt = _pair(pred, gt)
    return float(np.mean(pred == gt))


def class_iou(pred, gt):
    """IoU for every class present in the ground truth, as {class: iou}."""
    pred, gt = _pair(pred, gt)
    out = {}
    for c in np.unique(gt).tolist():
        p, g = pred == c, gt == c
        out[c] = float(np.sum(p & g) / np.sum(p | g))
    return out


def weighted_iou(pred, gt):
    pred, gt = _pair(pred, gt)
    classes, counts = np.unique(gt, return_counts=True)
    ious = class_iou(pred, gt)
    freq = counts / gt.size
    return float(sum(f * ious[c] for c, f in zip(classes.tolist(), freq)))


def per_class_accuracy(pred, gt):
    pred, gt = _pair(pred, gt)
    return {c: float(np.mean(pred[gt == c] == c)) for c in np.unique(gt).tolist()}


def _point_sets(inst, cat):
    sets = {}
    for iid in np.unique(inst).tolist():
        m = inst == iid
        vals, cnt = np.unique(cat[m], return_counts=True)
        sets[iid] = (np.flatnonzero(m), int(vals[np.argmax(cnt)]))
    return sets


def instance_sets(instances, categories, ignore=(0,)):
    """{instance id: (point indices, majority category)} skipping ignored ids."""
    instances = np.asarray(instances, dtype=np.int64)
    categories = np.asarray(categories, dtype=np.int64)
    keep = ~np.isin(instances, np.asarray(ignore, dtype=np.int64))
    idx = np.flatnonzero(keep)
    sets = _point_sets(instances[keep], categories[keep])
    return {k: (idx[v[0]], v[1]) for k, v in sets.items()}


def average_precision_50(pred, gt, threshold=0.5):
    """Per-class AP at IoU >= threshold and the mean over classes with GT.

    `pred` is a list of (point indices, category, confidence); `gt` a list of
    (point indices, category). Returns ({class: ap}, mean) with mean None when
    there is no ground-truth instance.
    """
    gt_by_cls = {}
    for pts, c in gt:
        gt_by_cls.setdefault(int(c), []).append(np.unique(np.asarray(pts, dtype=np.int64)))
    per_class = {}
    for c, gsets in sorted(gt_by_cls.items()):
        preds = [(np.unique(np.asarray(p, dtype=np.int64)), conf) for p, pc, conf in pred
                 if int(pc) == c]
        order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
        matched = np.zeros(len(gsets), dtype=bool)
        tp = np.zeros(len(order))
        for rank, i in enumerate(order):
            p = preds[i][0]
            best, best_iou = -1, -1.0
            for g, gs in enumerate(gsets):
                if matched[g]:
                    continue
                inter = np.intersect1d(p, gs, assume_unique=True).size
                iou = inter / (p.size + gs.size - inter)
                if iou > best_iou:
                    best, best_iou = g, iou
            if best >= 0 and best_iou >= threshold:
                matched[best] = True
                tp[rank] = 1
        per_class[c] = _all_point_ap(tp, len(gsets))
    if not per_class:
        return {}, None
    return per_class, float(np.mean(list(per_class.values())))


def _all_point_ap(tp, n_gt):
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.r_[0.0, recall]
    mpre = np.r_[0.0, precision]
    # precision envelope, then sum over recall steps
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def transfer_ground_truth(pred_xyz, gt_xyz, gt_fields, radius):
    """Nearest ground-truth point within `radius` for each predicted point.

    Returns (matched mask, {name: values for matched points}).
    """
    tree = cKDTree(np.asarray(gt_xyz, dtype=np.float64))
    d, j = tree.query(np.asarray(pred_xyz, dtype=np.float64), k=1, distance_upper_bound=radius)
    ok = np.isfinite(d)
    return ok, {k: np.asarray(v)[j[ok]] for k, v in gt_fields.items()}


def cloud_xyz(points):
    return np.stack([points["x"], points["y"], points["z"]], axis=1).astype(np.float64)


def evaluate_clouds(pred, gt, radius):
    """Metrics rows for a predicted cloud against a ground-truth cloud."""
    ok, g = transfer_ground_truth(cloud_xyz(pred), cloud_xyz(gt),
                                  {"label": gt["label"], "instance": gt["instance"]}, radius)
    glab = g["label"].astype(np.int64)
    labeled = glab != NO_GT
    sel = np.flatnonzero(ok)[labeled]
    return semantic_rows(pred["label"][sel], glab[labeled]) + instance_rows(
        pred["instance"][sel], pred["label"][sel], pred["confidence"][sel],
        g["instance"][labeled], glab[labeled])


def semantic_rows(pred, gt):
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    rows = [("accuracy", "all", accuracy(pred, gt)), ("wiou", "all", weighted_iou(pred, gt))]
    pca = per_class_accuracy(pred, gt)
    rows += [("class_accuracy", str(c), v) for c, v in sorted(pca.items())]
    rows.append(("mean_class_accuracy", "all", float(np.mean(list(pca.values())))))
    return rows


def instance_rows(pred_inst, pred_cat, conf, gt_inst, gt_cat, object_labels=None):
    pred_inst = np.asarray(pred_inst, dtype=np.int64)
    gt_inst = np.asarray(gt_inst, dtype=np.int64)
    gsets = instance_sets(gt_inst, gt_cat)
    if object_labels is not None:
        gsets = {k: v for k, v in gsets.items() if v[1] in object_labels}
    if not gsets:
        return []
    conf = np.asarray(conf, dtype=np.float64)
    psets = instance_sets(pred_inst, pred_cat)
    preds = [(pts, c, float(np.mean(conf[pts]))) for _, (pts, c) in sorted(psets.items())]
    per_class, mean = average_precision_50(preds, list(gsets.values()))
    rows = [("ap50", str(c), v) for c, v in per_class.items()]
    rows.append(("map50", "all", mean))
    rows.append(("instance_coverage", "all", instance_coverage(pred_inst, gt_inst, gsets)))
    return rows


def instance_coverage(pred_inst, gt_inst, gsets=None):
    """Smallest fraction of a GT object's points held by its dominant predicted id."""
    if gsets is None:
        gsets = instance_sets(gt_inst, np.zeros_like(gt_inst))
    worst = 1.0
    for pts, _ in gsets.values():
        ids, cnt = np.unique(pred_inst[pts], return_counts=True)
        cnt = np.where(ids == 0, 0, cnt)
        worst = min(worst, cnt.max() / pts.size)
    return float(worst)


CSV_HEADER = ("scene", "method", "metric", "class", "value")


def write_report(rows, path):
    """Rows of (scene, method, metric, class, value)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for scene, method, metric, cls, value in rows:
            w.writerow((scene, method, metric, cls, f"{value:.6f}"))


def read_report(path):
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(s, m, k, c, float(v)) for s, m, k, c, v in r]
