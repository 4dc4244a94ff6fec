"""Box geometry on ``(cx, cy, w, h)`` boxes, in numpy and as differentiable ops."""
import numpy as np

from . import tensor as T

# widths/heights are clamped here so degenerate boxes never divide by zero
MIN_SIDE = 1e-7


def to_xyxy(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    half = 0.5 * np.maximum(boxes[..., 2:4], MIN_SIDE)
    return np.concatenate([boxes[..., 0:2] - half, boxes[..., 0:2] + half], axis=-1)


def _pairwise(a, b):
    a, b = to_xyxy(a), to_xyxy(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lo = np.maximum(a[:, None, :2], b[None, :, :2])
    hi = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(hi - lo, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return a, b, inter, union


def iou_matrix(a, b):
    _, _, inter, union = _pairwise(a, b)
    return inter / union


def giou_matrix(a, b):
    """``[len(a), len(b)]`` generalized IoU, each entry in (-1, 1]."""
    a, b, inter, union = _pairwise(a, b)
    lo = np.minimum(a[:, None, :2], b[None, :, :2])
    hi = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = hi - lo
    enclose = wh[..., 0] * wh[..., 1]
    return inter / union - (enclose - union) / enclose


def giou(box_a, box_b) -> float:
    return float(giou_matrix(np.reshape(box_a, (1, 4)), np.reshape(box_b, (1, 4)))[0, 0])


def l1_matrix(a, b):
    return np.abs(np.asarray(a)[:, None, :] - np.asarray(b)[None, :, :]).sum(axis=-1)


def giou_rows(a, b):
    """Row-wise GIoU of two ``[K, 4]`` tensors (second operand may be constant)."""
    a, b = T.as_tensor(a), T.as_tensor(b)

    def corners(x):
        c, wh = x[:, 0:2], T.maximum(x[:, 2:4], MIN_SIDE)
        return c - 0.5 * wh, c + 0.5 * wh, wh

    alo, ahi, awh = corners(a)
    blo, bhi, bwh = corners(b)
    iwh = T.relu(T.minimum(ahi, bhi) - T.maximum(alo, blo))
    inter = iwh[:, 0] * iwh[:, 1]
    union = awh[:, 0] * awh[:, 1] + bwh[:, 0] * bwh[:, 1] - inter
    ewh = T.maximum(ahi, bhi) - T.minimum(alo, blo)
    enclose = ewh[:, 0] * ewh[:, 1]
    return inter / union - (enclose - union) / enclose
