"""Independent reference implementations used as test oracles."""
import math


def voxel_set_metrics(pred, gt):
    """DSC/IoU/Sens/Spec by enumerating voxel coordinates into Python sets."""
    shape = pred.shape
    coords = [(i, j, k) for i in range(shape[0]) for j in range(shape[1]) for k in range(shape[2])]
    P = {c for c in coords if pred[c]}
    G = {c for c in coords if gt[c]}
    U = set(coords)
    inter = len(P & G)
    neg_p, neg_g = U - P, U - G
    tn = len(neg_p & neg_g)
    out = {}
    out["dsc"] = 1.0 if not P and not G else 2 * inter / (len(P) + len(G))
    out["iou"] = 1.0 if not (P | G) else inter / len(P | G)
    out["sensitivity"] = 1.0 if not G else inter / len(G)
    out["specificity"] = 1.0 if not neg_g else tn / len(neg_g)
    return out


def mean_sd_text(cells):
    """Mean and n-1 SD of decimal strings, computed with math.fsum."""
    vals = [float(c) for c in cells]
    n = len(vals)
    mean = math.fsum(vals) / n
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1)) if n > 1 else 0.0
    return mean, sd
