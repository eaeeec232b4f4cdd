"""End-point error and outlier rate."""
import numpy as np

from .errors import ConfigError, ShapeError


def endpoint_errors(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[0] != 2:
        raise ShapeError(f"flow shapes differ or are not [2, ...]: {pred.shape} vs {gt.shape}")
    return np.hypot(*(pred - gt))


def outliers(err, gt_len, rule="or"):
    """Pixels whose error exceeds 3 px, combined with "exceeds 5% of |gt|" by ``rule``."""
    abs_bad = err > 3.0
    rel_bad = err > 0.05 * gt_len
    if rule == "or":
        return abs_bad | rel_bad
    if rule == "and":
        return abs_bad & rel_bad
    raise ConfigError(f"unknown F1 rule {rule!r}")


def flow_metrics(pred, gt, rule="or"):
    """AEPE and F1-all (percent) between [2, ...] flows in image pixels."""
    err = endpoint_errors(pred, gt)
    gt_len = np.hypot(*np.asarray(gt, dtype=np.float64))
    bad = outliers(err, gt_len, rule)
    return {"aepe": float(err.mean()), "f1_all": 100.0 * float(bad.mean())}


class MetricAccumulator:
    """Pixel-weighted running AEPE / F1-all over many flow fields."""

    def __init__(self, rule="or"):
        self.rule = rule
        self.err_sum = 0.0
        self.bad = 0
        self.pixels = 0

    def add(self, pred, gt):
        err = endpoint_errors(pred, gt)
        gt_len = np.hypot(*np.asarray(gt, dtype=np.float64))
        self.err_sum += float(err.sum())
        self.bad += int(outliers(err, gt_len, self.rule).sum())
        self.pixels += err.size

    def result(self):
        if self.pixels == 0:
            return {"aepe": float("nan"), "f1_all": float("nan"), "pixels": 0}
        return {"aepe": self.err_sum / self.pixels, "f1_all": 100.0 * self.bad / self.pixels,
                "pixels": self.pixels}
