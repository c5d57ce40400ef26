"""Substitution-aware detection and amount metrics.

A detection counts as correct if some ingredient of the same substitution
group was predicted; the per-group match count c caps each group at the
smaller of its true/predicted positive counts. Group-level variants first
collapse vectors through the membership matrix G and then apply the plain
formulas in group space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetric
from .groups import SubstitutionModel, collapse_amounts, collapse_detection
from .transport import emd_metric


@dataclass(frozen=True)
class RecipeMetrics:
    cvg: float
    iou: float
    emd: float
    cvg_group: float
    iou_group: float
    emd_group: float

    def as_dict(self) -> dict:
        return {
            "cvg": self.cvg,
            "iou": self.iou,
            "emd": self.emd,
            "cvg_group": self.cvg_group,
            "iou_group": self.iou_group,
            "emd_group": self.emd_group,
        }


def _group_positive_counts(vec, groups):
    return np.array([sum(vec[k] for k in g) for g in groups], dtype=np.float64)


def common_count(y, y_hat, groups) -> float:
    """c = sum over groups of min(true positives, predicted positives)."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    cy = _group_positive_counts(y, groups)
    ch = _group_positive_counts(y_hat, groups)
    return float(np.minimum(cy, ch).sum())


def brute_force_common_count(y, y_hat, groups) -> float:
    """Oracle for common_count: maximum one-to-one matching of positives.

    Builds the bipartite graph linking each true positive to every
    predicted positive in the same group and grows a maximum matching by
    augmenting paths.
    """
    y = np.asarray(y)
    y_hat = np.asarray(y_hat)
    gid = {}
    for g_idx, g in enumerate(groups):
        for k in g:
            gid[int(k)] = g_idx
    left = [i for i in range(len(y)) if y[i] > 0]
    right = [i for i in range(len(y_hat)) if y_hat[i] > 0]
    adj = {
        li: [rj for rj, r in enumerate(right) if gid[r] == gid[l]]
        for li, l in enumerate(left)
    }

    match_right = {}

    def try_assign(li, seen):
        for rj in adj[li]:
            if rj in seen:
                continue
            seen.add(rj)
            if rj not in match_right or try_assign(match_right[rj], seen):
                match_right[rj] = li
                return True
        return False

    matched = 0
    for li in range(len(left)):
        if try_assign(li, set()):
            matched += 1
    return float(matched)


def cvg(y, y_hat, groups) -> float:
    """Coverage of ground-truth ingredients: c / sum(y)."""
    y = np.asarray(y, dtype=np.float64)
    total = y.sum()
    if total <= 0:
        raise UndefinedMetric("coverage undefined for empty ground truth")
    return common_count(y, y_hat, groups) / float(total)


def iou(y, y_hat, groups) -> float:
    """Intersection over union: c / (sum(y) + sum(y_hat) - c)."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    denom_base = y.sum() + y_hat.sum()
    if denom_base <= 0:
        raise UndefinedMetric("iou undefined when both vectors are empty")
    c = common_count(y, y_hat, groups)
    return c / float(denom_base - c)


def group_metrics(y, y_hat, v, v_hat, substitution: SubstitutionModel, amount_constant: float = 1000.0):
    """Collapse to group space and compute (cvg_group, iou_group, emd_group)."""
    G = substitution.G
    y1 = collapse_detection(y, G)
    y1_hat = collapse_detection(y_hat, G)
    total = y1.sum()
    if total <= 0:
        raise UndefinedMetric("group coverage undefined for empty ground truth")
    inter = float(y1 @ y1_hat)
    cvg_g = inter / float(total)
    iou_g = inter / float(y1.sum() + y1_hat.sum() - inter)
    v1 = collapse_amounts(v, G)
    v1_hat = collapse_amounts(v_hat, G)
    emd_g = emd_metric(v1_hat, v1, substitution.M1, amount_constant)
    return cvg_g, iou_g, emd_g


def recipe_metrics(y, y_hat, v, v_hat, substitution: SubstitutionModel, amount_constant: float = 1000.0) -> RecipeMetrics:
    """All six per-recipe metrics for one (truth, prediction) pair."""
    cvg_g, iou_g, emd_g = group_metrics(y, y_hat, v, v_hat, substitution, amount_constant)
    return RecipeMetrics(
        cvg=cvg(y, y_hat, substitution.groups),
        iou=iou(y, y_hat, substitution.groups),
        emd=emd_metric(v_hat, v, substitution.M, amount_constant),
        cvg_group=cvg_g,
        iou_group=iou_g,
        emd_group=emd_g,
    )
