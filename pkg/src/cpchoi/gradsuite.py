"""Finite-difference checks for every autodiff op and for the full training loss."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import generate_dataset, render_batch
from .engine import TrainConfig, batch_losses
from .model import HOIModel, ModelConfig
from .tensor import Tensor

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


def _away_from_zero(rng, shape, low=0.2, high=2.0):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _distinct_pair(rng, shape, gap=0.2):
    a = rng.normal(size=shape)
    b = a + _away_from_zero(rng, shape, gap, 1.5)
    return a, b


def op_cases(rng):
    """``(name, fn, arrays)`` triples; each fn maps tensors to a tensor."""
    s = (3, 4)
    a, b = rng.normal(size=s), rng.normal(size=s)
    pa, pb = _distinct_pair(rng, s)
    cases = [
        ("add", lambda x, y: x + y, [a, rng.normal(size=(4,))]),
        ("sub", lambda x, y: x - y, [a, b]),
        ("mul", lambda x, y: x * y, [a, rng.normal(size=(3, 1))]),
        ("div", lambda x, y: x / y, [a, _away_from_zero(rng, s, 0.5, 2.0)]),
        ("neg", lambda x: -x, [a]),
        ("exp", T.exp, [a]),
        ("log", T.log, [rng.uniform(0.3, 3.0, size=s)]),
        ("relu", T.relu, [_away_from_zero(rng, s)]),
        ("sigmoid", T.sigmoid, [3 * a]),
        ("softplus", T.softplus, [3 * a]),
        ("absolute", T.absolute, [_away_from_zero(rng, s)]),
        ("square", T.square, [a]),
        ("maximum", T.maximum, [pa, pb]),
        ("minimum", T.minimum, [pa, pb]),
        ("matmul", T.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))]),
        ("softmax", lambda x: T.softmax(x, -1), [2 * a]),
        ("softmax_axis0", lambda x: T.softmax(x, 0), [2 * a]),
        ("log_softmax", lambda x: T.log_softmax(x, -1), [2 * a]),
        ("layernorm", T.layernorm, [rng.normal(size=(2, 3, 6)), rng.normal(size=(6,)), rng.normal(size=(6,))]),
        ("sum", lambda x: x.sum(axis=1), [a]),
        ("mean", lambda x: x.mean(axis=0, keepdims=True), [a]),
        ("max", lambda x: x.max(axis=-1), [rng.permutation(12).reshape(s) * 0.3 + 0.05 * a]),
        ("reshape", lambda x: x.reshape((2, 6)), [a]),
        ("transpose", lambda x: x.transpose((1, 0)), [a]),
        ("getitem", lambda x: x[np.array([0, 2, 0]), np.array([1, 3, 1])], [a]),
        ("slice", lambda x: x[1:, :2], [a]),
        ("concat", lambda x, y: T.concat([x, y], axis=0), [a, b]),
    ]
    return cases


def check_op(fn, arrays, rng):
    inputs = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in arrays]
    probe = fn(*inputs)
    weights = rng.normal(size=probe.shape)
    return T.gradcheck(lambda *xs: (fn(*xs) * weights).sum(), inputs)


def op_suite(seed=0):
    """Maximum relative error per op name."""
    rng = np.random.default_rng(seed)
    return {name: check_op(fn, arrays, rng) for name, fn, arrays in op_cases(rng)}


def end_to_end(seed=0, entries=5):
    """Max relative error of d(total loss)/d(parameters), matching held fixed.

    A small model with four paths and CPC active; ``entries`` coordinates are
    sampled from every parameter tensor.
    """
    cfg = ModelConfig(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, n_queries=4)
    scenes = generate_dataset(2, seed)
    grids = render_batch(scenes, cfg.grid, cfg.n_obj_categories)
    train_cfg = TrainConfig(steps=100, active_paths=(1, 2, 3, 4), seed=seed)
    model = HOIModel(cfg, paths=train_cfg.active_paths, seed=seed)
    params = model.parameters()
    names = sorted(params)
    step = train_cfg.ramp_steps // 2
    _, fixed = batch_losses(model, grids, scenes, train_cfg, step)

    def loss(*_):
        report, _ = batch_losses(model, grids, scenes, train_cfg, step, assignments=fixed)
        return report.tensor

    for n in names:
        params[n].requires_grad = True
    return T.gradcheck(loss, [params[n] for n in names], entries=entries,
                       rng=np.random.default_rng(seed))


def run_suite(seed=0, entries=5):
    ops = op_suite(seed)
    return {"ops": ops, "ops_max": max(ops.values()), "end_to_end": end_to_end(seed, entries)}
