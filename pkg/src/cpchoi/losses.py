"""Supervision, cross-path consistency and the combined training objective.

Consistency between two paths is computed on query pairs that the two
paths matched to the same ground-truth triplet.  Sigmoid-typed outputs
(boxes, multi-label actions) are compared with squared error on
probabilities; the softmax-typed object category with Jensen-Shannon
divergence over the full distribution, no-object slot included.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxes import giou_rows
from .tensor import Tensor

LN2 = math.log(2.0)
_TINY = 1e-300


@dataclass(frozen=True)
class LossWeights:
    lambda_h: float = 1.0
    lambda_o: float = 1.0
    lambda_act: float = 1.0
    w_cls: float = 1.0
    w_box: float = 5.0
    w_giou: float = 2.0
    w_bce: float = 1.0
    no_object_weight: float = 0.1
    w_max: float = 0.5
    ramp_fraction: float = 0.25

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossReport:
    sup: dict
    pairs: dict
    cpc: float | None
    w: float
    total: float
    cpc_empty: bool = False
    tensor: Tensor | None = field(default=None, repr=False)

    def resum(self):
        total = None
        for k in sorted(self.sup):
            total = self.sup[k] if total is None else total + self.sup[k]
        if self.cpc is not None and self.w:
            total = total + self.cpc * self.w
        return total

    def to_json(self):
        out = {"sup": {str(k): v for k, v in sorted(self.sup.items())}, "total": self.total}
        if self.cpc is not None:
            out.update(cpc=self.cpc, w=self.w, pairs={f"{a}-{b}": v for (a, b), v in sorted(self.pairs.items())})
        return out


# ---------------------------------------------------------------------------
# element losses
# ---------------------------------------------------------------------------


def _same_shape(a, b, name):
    if a.shape != b.shape:
        raise T.TensorError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def l1_loss(a, b):
    a, b = T.as_tensor(a), T.as_tensor(b)
    _same_shape(a, b, "l1_loss")
    return T.absolute(a - b).mean()


def mse(a, b):
    a, b = T.as_tensor(a), T.as_tensor(b)
    _same_shape(a, b, "mse")
    return T.square(a - b).mean()


def softmax_ce(logits, targets):
    """Mean cross entropy of ``[K, C]`` logits against integer targets."""
    logits = T.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise T.TensorError("softmax_ce expects [K, C] logits and K targets")
    return -(T.log_softmax(logits, -1)[np.arange(len(targets)), targets].mean())


def bce(logits, targets):
    """Mean binary cross entropy on logits: softplus(x) - t*x."""
    logits = T.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise T.TensorError("bce: shape mismatch")
    return (T.softplus(logits) - logits * targets).mean()


def jsd(p, q) -> float:
    """Jensen-Shannon divergence (nats) of two probability vectors."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("jsd: shape mismatch")
    if abs(p.sum() - 1) > 1e-6 or abs(q.sum() - 1) > 1e-6 or (p < 0).any() or (q < 0).any():
        raise ValueError("jsd: inputs must be probability vectors")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * (np.log(a[nz]) - np.log(m[nz]))))

    return 0.5 * (kl(p) + kl(q))


def jsd_from_logits(za, zb):
    """Row-wise JSD between softmax(za) and softmax(zb), ``[K, C] -> [K]``."""
    la, lb = T.log_softmax(za, -1), T.log_softmax(zb, -1)
    pa, pb = T.exp(la), T.exp(lb)
    lm = T.log(T.maximum((pa + pb) * 0.5, _TINY))
    return ((pa * (la - lm)).sum(-1) + (pb * (lb - lm)).sum(-1)) * 0.5


# ---------------------------------------------------------------------------
# supervision
# ---------------------------------------------------------------------------


def _targets(preds, assignments, scenes, no_object_weight):
    b_sz, n_q = preds.batch_size, preds.n_queries
    n_cls = preds.object_logits.shape[-1]
    n_act = preds.action_logits.shape[-1]
    if len(assignments) != b_sz or len(scenes) != b_sz:
        raise ValueError("one assignment and one scene per batch entry required")
    cls = np.full((b_sz, n_q), n_cls - 1, dtype=np.int64)
    cls_w = np.full((b_sz, n_q), no_object_weight)
    act = np.zeros((b_sz, n_q, n_act))
    mb, mq, hbox, obox = [], [], [], []
    for b, (a, scene) in enumerate(zip(assignments, scenes)):
        if a.n_queries != n_q:
            raise ValueError("assignment was built for a different query count")
        for n, i in sorted(a.sigma_inv.items()):
            t = scene.triplets[n]
            cls[b, i] = t.object_category
            cls_w[b, i] = 1.0
            act[b, i] = t.actions
            mb.append(b)
            mq.append(i)
            hbox.append(t.human_box)
            obox.append(t.object_box)
    return cls, cls_w, act, np.array(mb, dtype=np.int64), np.array(mq, dtype=np.int64), \
        np.array(hbox).reshape(-1, 4), np.array(obox).reshape(-1, 4)


def supervision_loss(preds, assignments, scenes, weights=LossWeights()):
    """DETR-style set loss of one path over a batch.

    Box terms average over matched triplets.  Classification covers all
    queries, unmatched ones pushed to no-object (down-weighted) and zero
    actions; the category term is a weighted mean over queries.
    """
    cls, cls_w, act, mb, mq, hbox, obox = _targets(preds, assignments, scenes, weights.no_object_weight)
    b_sz, n_q = cls.shape
    bb, qq = np.divmod(np.arange(b_sz * n_q), n_q)
    ce = -T.log_softmax(preds.object_logits, -1)[bb, qq, cls.reshape(-1)]
    # weighted mean, normalized by the total class weight
    loss = (ce * cls_w.reshape(-1)).sum() * (weights.w_cls / cls_w.sum())
    loss = loss + bce(preds.action_logits, act) * weights.w_bce
    m = len(mb)
    if m:
        ph = preds.human_boxes[mb, mq]
        po = preds.object_boxes[mb, mq]
        l1 = T.absolute(ph - hbox).sum() + T.absolute(po - obox).sum()
        gi = (1.0 - giou_rows(ph, hbox)).sum() + (1.0 - giou_rows(po, obox)).sum()
        loss = loss + l1 * (weights.w_box / m) + gi * (weights.w_giou / m)
    return loss


# ---------------------------------------------------------------------------
# consistency
# ---------------------------------------------------------------------------


def _pair_index(pair_matches):
    # one scene is a list of (n, i, i') tuples; a batch is a list of such lists
    if pair_matches and isinstance(pair_matches[0], tuple):
        pair_matches = [pair_matches]
    rows = [(b, i, ip) for b, scene in enumerate(pair_matches) for (_, i, ip) in scene]
    if not rows:
        return None
    arr = np.array(rows, dtype=np.int64)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def pair_consistency_terms(pair_matches, preds_a, preds_b, weights=LossWeights()):
    """Per-match consistency values ``[K]`` between two paths, or None if nothing matched."""
    idx = _pair_index(pair_matches)
    if idx is None:
        return None
    b, ia, ib = idx
    terms = None

    def acc(x):
        nonlocal terms
        terms = x if terms is None else terms + x

    if weights.lambda_h:
        acc(T.square(preds_a.human_boxes[b, ia] - preds_b.human_boxes[b, ib]).mean(-1) * weights.lambda_h)
    if weights.lambda_o:
        box = T.square(preds_a.object_boxes[b, ia] - preds_b.object_boxes[b, ib]).mean(-1)
        cat = jsd_from_logits(preds_a.object_logits[b, ia], preds_b.object_logits[b, ib])
        acc((box + cat) * weights.lambda_o)
    if weights.lambda_act:
        pa = T.sigmoid(preds_a.action_logits[b, ia])
        pb = T.sigmoid(preds_b.action_logits[b, ib])
        acc(T.square(pa - pb).mean(-1) * weights.lambda_act)
    if terms is None:
        terms = Tensor._wrap(np.zeros(len(b)))
    return terms


def pair_consistency_loss(pair_matches, preds_a, preds_b, weights=LossWeights()):
    """Mean consistency over cross-matched ground truth (0 when none)."""
    terms = pair_consistency_terms(pair_matches, preds_a, preds_b, weights)
    if terms is None:
        return Tensor._wrap(np.array(0.0))
    return terms.mean()


def path_pairs(active_paths):
    return list(itertools.combinations(sorted(active_paths), 2))


def cpc_loss(pair_terms, n_gt):
    """Sum of every per-ground-truth pair term divided by (pairs * ground truths).

    ``pair_terms`` maps each unordered path pair to its term vector (None for
    pairs without cross matches).  Returns ``(loss, empty)``.
    """
    s = len(pair_terms)
    total = None
    for pair in sorted(pair_terms):
        t = pair_terms[pair]
        if t is None:
            continue
        part = t.sum()
        total = part if total is None else total + part
    if total is None or n_gt == 0 or s == 0:
        return Tensor._wrap(np.array(0.0)), True
    return total * (1.0 / (s * n_gt)), False


def rampup(t, total_ramp_steps, w_max):
    """Gaussian ramp w_max * exp(-5 (1 - t/T)^2), flat at w_max from T on."""
    if total_ramp_steps <= 0:
        raise ValueError("ramp length must be positive")
    if t < 0:
        raise ValueError("step must be non-negative")
    phase = 1.0 - min(t, total_ramp_steps) / total_ramp_steps
    return w_max * math.exp(-5.0 * phase * phase)


def total_loss(sup, cpc, w):
    """Combine per-path supervision tensors with the weighted consistency tensor."""
    total = None
    for k in sorted(sup):
        total = sup[k] if total is None else total + sup[k]
    if cpc is not None and w:
        total = total + cpc * w
    cpc_value = float(cpc.data) if cpc is not None else None
    return LossReport(
        sup={k: float(v.data) for k, v in sup.items()},
        pairs={},
        cpc=cpc_value,
        w=float(w),
        total=float(total.data),
        tensor=total,
    )
