"""Segmentation loss evaluators and the attention-weight schedule.

Pure numeric functions used as verification oracles and quality scores.
No gradients, no learning.
"""

import numpy as np
from dataclasses import dataclass
from scipy.spatial import cKDTree


@dataclass
class LambdaSchedule:
    start_epoch: int = 1000
    end_epoch: int = 2000
    max_value: float = 1000.0

    def __post_init__(self):
        if self.end_epoch <= self.start_epoch:
            raise ValueError("end_epoch must exceed start_epoch")


@dataclass
class LossConfig:
    lambda_ce: float = 1.0
    eps_dice: float = 1e-5
    eps0: float = -100.0
    eps1: float = 100.0
    sdf_clip: tuple = (-3.0, 3.0)
    lambda_schedule: LambdaSchedule = None

    def __post_init__(self):
        if self.lambda_schedule is None:
            self.lambda_schedule = LambdaSchedule()
        if self.sdf_clip[0] > self.sdf_clip[1]:
            raise ValueError("sdf_clip must be ordered")


def _values(g):
    data = g.data if hasattr(g, "data") else g
    return np.asarray(data, dtype=np.float64).ravel()


def _pair(y, yhat):
    a, b = _values(y), _values(yhat)
    if a.shape != b.shape:
        raise ValueError("loss inputs have mismatched shapes")
    return a, b


def dice_ce(y, yhat, lambda_ce=1.0, eps_dice=1e-5):
    """Dice loss plus weighted mean binary cross-entropy.

    Logs are floored at -100 so certain-but-wrong voxels stay finite.
    The Dice term keeps its defect on empty targets: y == yhat == 0
    evaluates to 1, not 0.
    """
    yv, pv = _pair(y, yhat)
    inter = float(yv @ pv)
    dice = 1.0 - 2.0 * inter / (yv.sum() + pv.sum() + eps_dice)
    with np.errstate(divide="ignore"):
        lp = np.maximum(np.log(pv), -100.0)
        ln = np.maximum(np.log(1.0 - pv), -100.0)
    ce = -float(np.mean(yv * lp + (1.0 - yv) * ln))
    return dice + lambda_ce * ce


def gdl(y, yhat, eps0=-100.0, eps1=100.0):
    """Generalized Dice loss over the background/foreground pair.

    Class weights are 1/(class volume + eps_c)^2; the offsets keep the
    loss smooth near empty classes. Per-class sums are formed before the
    weights multiply in, which makes the empty-and-correct case come out
    exactly 0.
    """
    yv, pv = _pair(y, yhat)
    num = 0.0
    den = 0.0
    for cls, eps in ((1, eps1), (0, eps0)):
        yc = yv if cls == 1 else 1.0 - yv
        pc = pv if cls == 1 else 1.0 - pv
        wden = float(yc.sum()) + eps
        if wden == 0.0:
            raise ValueError("GDL class weight denominator is zero")
        w = 1.0 / wden ** 2
        num += w * float(yc @ pc)
        den += w * float(yc.sum() + pc.sum())
    if den == 0.0:
        raise ValueError("GDL denominator is zero")
    return 1.0 - 2.0 * num / den


def boundary_term(sdf_y, yhat, clip=(-3.0, 3.0)):
    """Sum of -clipped_sdf * prediction; negative when mass sits inside."""
    sv, pv = _pair(sdf_y, yhat)
    return float(np.sum(-np.clip(sv, clip[0], clip[1]) * pv))


def chamfer(a, b):
    """Symmetric squared chamfer distance between two point clouds."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs nonempty point clouds")
    da = cKDTree(b).query(a)[0]
    db = cKDTree(a).query(b)[0]
    return float(np.mean(da ** 2) + np.mean(db ** 2))


def lambda_at(epoch, schedule):
    """Piecewise-linear ramp: 0, then linear from start to end, then flat."""
    s = schedule
    if epoch < s.start_epoch:
        return 0.0
    if epoch >= s.end_epoch:
        return float(s.max_value)
    t = (epoch - s.start_epoch) / (s.end_epoch - s.start_epoch)
    return float(s.max_value) * t
