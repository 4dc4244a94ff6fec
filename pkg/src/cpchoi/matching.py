"""Hungarian matching of queries to ground truth, and cross matching between paths."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .boxes import giou_matrix, l1_matrix
from .data import Scene


class CapacityError(ValueError):
    """More ground-truth triplets than queries."""


@dataclass(frozen=True)
class MatchWeights:
    w_cls: float = 1.0
    w_box: float = 5.0
    w_giou: float = 2.0
    w_act: float = 1.0


@dataclass
class Assignment:
    """``sigma_inv[n]`` is the query matched to ground truth ``n``."""

    sigma_inv: dict
    n_queries: int
    cost: float = 0.0

    def __post_init__(self):
        queries = list(self.sigma_inv.values())
        if len(set(queries)) != len(queries):
            raise ValueError("an assignment may not reuse a query")

    @property
    def sigma(self):
        return {i: n for n, i in self.sigma_inv.items()}

    @property
    def background(self):
        used = set(self.sigma_inv.values())
        return [i for i in range(self.n_queries) if i not in used]

    def as_vector(self):
        return tuple(self.sigma_inv[n] for n in sorted(self.sigma_inv))


def _scene_arrays(preds, b):
    return preds.scene(b) if hasattr(preds, "scene") else preds


def _bce_matrix(p, targets):
    """[N, M] mean over actions of BCE(p_i, t_n); 0*log(0) counts as 0."""
    tiny = 1e-300
    lp = np.log(np.maximum(p, tiny))
    lq = np.log(np.maximum(1.0 - p, tiny))
    pos = targets[None, :, :] > 0
    neg = targets[None, :, :] < 1
    terms = (-np.where(pos, targets[None] * lp[:, None, :], 0.0)
             - np.where(neg, (1.0 - targets[None]) * lq[:, None, :], 0.0))
    return terms.mean(axis=-1)


def build_cost_matrix(preds, gts, weights=MatchWeights(), b=0):
    """``[N, M]`` matching cost between the queries of scene ``b`` and its triplets.

    ``preds`` is a PredictionSet (scene ``b`` is used) or a dict of numpy arrays
    with keys human_boxes, object_boxes, object_probs, action_probs.
    """
    if isinstance(gts, Scene):
        gts = gts.triplets
    p = _scene_arrays(preds, b)
    n = p["human_boxes"].shape[0]
    m = len(gts)
    if m > n:
        raise CapacityError(f"{m} ground-truth triplets exceed {n} queries")
    if m == 0:
        return np.zeros((n, 0))
    hbox = np.array([t.human_box for t in gts], dtype=np.float64)
    obox = np.array([t.object_box for t in gts], dtype=np.float64)
    cats = np.array([t.object_category for t in gts])
    acts = np.array([t.actions for t in gts], dtype=np.float64)
    cost = weights.w_cls * (1.0 - p["object_probs"][:, cats])
    cost = cost + weights.w_box * (l1_matrix(p["human_boxes"], hbox) + l1_matrix(p["object_boxes"], obox))
    cost = cost + weights.w_giou * ((1.0 - giou_matrix(p["human_boxes"], hbox))
                                    + (1.0 - giou_matrix(p["object_boxes"], obox)))
    cost = cost + weights.w_act * _bce_matrix(p["action_probs"], acts)
    return cost


def hungarian(cost) -> Assignment:
    """Minimum-cost injective map from ground truth (columns) to queries (rows).

    Among optimal maps the lexicographically smallest query vector is returned.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n, m = cost.shape
    if m > n:
        raise CapacityError(f"{m} ground-truth triplets exceed {n} queries")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    if m == 0:
        return Assignment({}, n, 0.0)
    cols = K.lex_lsa(np.ascontiguousarray(cost.T))
    total = 0.0
    for gt in range(m):
        total += cost[cols[gt], gt]
    return Assignment({gt: int(cols[gt]) for gt in range(m)}, n, total)


def match_path(preds, gts, weights=MatchWeights(), b=0) -> Assignment:
    """Hungarian assignment for one scene; queries left out are background."""
    return hungarian(build_cost_matrix(preds, gts, weights, b))


def match_batch(preds, scenes, weights=MatchWeights()):
    return [match_path(preds, s, weights, b) for b, s in enumerate(scenes)]


def cross_match(assignments, pair):
    """``(n, query in k, query in k')`` for ground truth matched on both paths."""
    k, kp = pair
    a, ap = assignments[k], assignments[kp]
    common = sorted(set(a.sigma_inv) & set(ap.sigma_inv))
    return [(n, a.sigma_inv[n], ap.sigma_inv[n]) for n in common]
