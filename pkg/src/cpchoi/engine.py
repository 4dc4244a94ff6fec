"""Training loop, AdamW, triplet mAP, checkpoints and the ablation grid."""
from __future__ import annotations

import base64
import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses as L
from .boxes import iou_matrix
from .data import render_batch
from .matching import MatchWeights, cross_match, match_path
from .model import HOIModel, ModelConfig
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
IOU_THRESHOLD = 0.5


class TrainingError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr_model: float = 1e-4
    lr_embed: float = 1e-5
    weight_decay: float = 1e-4
    active_paths: tuple = (1, 2, 3, 4)
    share_decoder: bool = True
    cpc_enabled: bool = True
    freeze_encoder: bool = False
    seed: int = 0
    eval_every: int = 0
    w_max: float = 0.5
    ramp_fraction: float = 0.25
    lambda_h: float = 1.0
    lambda_o: float = 1.0
    lambda_act: float = 1.0
    grad_clip: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "active_paths", tuple(sorted(set(self.active_paths))))
        if 1 not in self.active_paths:
            raise ValueError("active_paths must contain path 1")
        if self.lr_model <= 0 or self.lr_embed <= 0:
            raise ValueError("learning rates must be positive")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")

    @property
    def ramp_steps(self):
        return max(1, int(round(self.ramp_fraction * self.steps)))

    def loss_weights(self):
        return L.LossWeights(lambda_h=self.lambda_h, lambda_o=self.lambda_o, lambda_act=self.lambda_act,
                             w_max=self.w_max, ramp_fraction=self.ramp_fraction)

    def to_json(self):
        d = asdict(self)
        d["active_paths"] = list(self.active_paths)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["active_paths"] = tuple(d["active_paths"])
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adamw_step(param, grad, m, v, t, lr, wd, betas=(0.9, 0.999), eps=1e-8):
    """One in-place AdamW update of ``param`` (step ``t`` counts from 1)."""
    b1, b2 = betas
    param *= 1.0 - lr * wd
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the norm."""
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for _, g in sorted(grads.items()))))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class AdamW:
    def __init__(self, params, lrs, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lrs = lrs
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads):
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for parameter {name!r} at step {self.t + 1}")
        self.t += 1
        for name in sorted(self.params):
            adamw_step(self.params[name].data, grads[name], self.m[name], self.v[name], self.t,
                       self.lrs[name], self.weight_decay, self.betas, self.eps)


# ---------------------------------------------------------------------------
# losses for one batch
# ---------------------------------------------------------------------------


def match_all(preds, scenes, weights=MatchWeights()):
    out = {}
    for k, p in preds.items():
        arrays = {
            "human_boxes": p.human_boxes.data,
            "object_boxes": p.object_boxes.data,
            "object_probs": p.object_probs(),
            "action_probs": p.action_probs(),
        }
        out[k] = [match_path({key: a[b] for key, a in arrays.items()}, s, weights)
                  for b, s in enumerate(scenes)]
    return out


def batch_losses(model, grids, scenes, config, step, assignments=None, memory=None):
    """Forward all active paths and assemble the training objective.

    Returns ``(report, assignments)``; ``report.tensor`` is the scalar to
    differentiate.  Passing ``assignments`` reuses a fixed matching.
    """
    weights = config.loss_weights()
    if memory is None:
        memory = model.encode(model.embed_features(grids))
    preds = model.run_all_paths(memory, config.active_paths)
    if assignments is None:
        assignments = match_all(preds, scenes)
    sup = {k: L.supervision_loss(preds[k], assignments[k], scenes, weights) for k in preds}
    cpc, w, pair_means, empty = None, 0.0, {}, False
    if config.cpc_enabled and len(preds) > 1:
        terms = {}
        for a, b in L.path_pairs(preds):
            matches = [cross_match({a: assignments[a][i], b: assignments[b][i]}, (a, b))
                       for i in range(len(scenes))]
            terms[(a, b)] = L.pair_consistency_terms(matches, preds[a], preds[b], weights)
            pair_means[(a, b)] = 0.0 if terms[(a, b)] is None else float(terms[(a, b)].data.mean())
        n_gt = sum(len(s.triplets) for s in scenes)
        cpc, empty = L.cpc_loss(terms, n_gt)
        w = L.rampup(step, config.ramp_steps, config.w_max)
    report = L.total_loss(sup, cpc, w)
    report.pairs = pair_means
    report.cpc_empty = empty
    return report, assignments


# ---------------------------------------------------------------------------
# data order
# ---------------------------------------------------------------------------


class BatchOrder:
    """Stateless epoch-wise shuffles: batch ``s`` is a pure function of (seed, n, B, s)."""

    def __init__(self, seed, n, batch_size):
        self.seed, self.n, self.batch_size = seed, n, batch_size
        self._perms = {}

    def _perm(self, epoch):
        p = self._perms.get(epoch)
        if p is None:
            p = self._perms[epoch] = np.random.default_rng([self.seed, epoch]).permutation(self.n)
            if len(self._perms) > 4:
                self._perms.pop(min(self._perms))
        return p

    def indices(self, step):
        start = step * self.batch_size
        pos = np.arange(start, start + self.batch_size)
        return np.array([self._perm(int(q // self.n))[q % self.n] for q in pos])

    def digest(self, steps):
        h = hashlib.sha1()
        for s in range(steps):
            h.update(self.indices(s).astype(np.int64).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _b64(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _unb64(text, shape):
    return np.frombuffer(base64.b64decode(text), dtype="<f8").reshape(shape).copy()


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    schema: int = CHECKPOINT_SCHEMA

    def to_json(self):
        enc = lambda d: {n: {"shape": list(a.shape), "data": _b64(a)} for n, a in sorted(d.items())}
        return {
            "schema": self.schema,
            "model_config": self.model_config.to_json(),
            "train_config": self.train_config.to_json(),
            "step": self.step,
            "rng": self.rng,
            "params": enc(self.params),
            "optimizer": {"t": self.step, "m": enc(self.m), "v": enc(self.v)},
        }

    @classmethod
    def from_json(cls, obj):
        if obj.get("schema") != CHECKPOINT_SCHEMA:
            raise CheckpointError(
                f"checkpoint schema {obj.get('schema')!r} is not supported (expected {CHECKPOINT_SCHEMA})")
        dec = lambda d: {n: _unb64(e["data"], tuple(e["shape"])) for n, e in d.items()}
        return cls(
            model_config=ModelConfig(**obj["model_config"]),
            train_config=TrainConfig.from_json(obj["train_config"]),
            params=dec(obj["params"]),
            step=int(obj["step"]),
            m=dec(obj["optimizer"]["m"]),
            v=dec(obj["optimizer"]["v"]),
            rng=obj.get("rng", {}),
        )


def save_checkpoint(ckpt, path):
    Path(path).write_text(json.dumps(ckpt.to_json(), sort_keys=True, separators=(",", ":")), encoding="utf-8")


def load_checkpoint(path):
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from exc
    return Checkpoint.from_json(obj)


def load_params(model, params):
    own = model.parameters()
    missing = sorted(set(own) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensor {missing[0]!r}")
    for name, p in own.items():
        arr = params[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
    for name, p in own.items():
        p.data[...] = params[name]


def build_model(ckpt, model_config=None):
    cfg = model_config or ckpt.model_config
    tc = ckpt.train_config
    model = HOIModel(cfg, paths=tc.active_paths, share_decoder=tc.share_decoder, seed=tc.seed)
    load_params(model, ckpt.params)
    return model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def average_precision(scores, tp, n_pos):
    """Area under the precision envelope of a ranked list (all-points)."""
    if n_pos == 0:
        return float("nan")
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_pos
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_detections(predictions, scenes, n_actions, score_threshold=0.0):
    """Triplet mAP from per-scene numpy predictions.

    ``predictions[s]`` holds ``human_boxes [N,4]``, ``object_boxes [N,4]``,
    ``object_probs [N,C+1]`` (last slot no-object) and ``action_probs [N,A]``.
    A detection is a true positive for action ``a`` when an unclaimed ground
    truth with that action has human and object IoU >= 0.5 and the same
    category.  Actions with no positives are left out of the mean.
    """
    per_action = {}
    for a in range(n_actions):
        scores, tps = [], []
        n_pos = 0
        for pred, scene in zip(predictions, scenes):
            gts = [t for t in scene.triplets if t.actions[a]]
            n_pos += len(gts)
            probs = pred["object_probs"][:, :-1]
            cat = probs.argmax(axis=1)
            s = pred["action_probs"][:, a] * probs[np.arange(len(cat)), cat]
            keep = np.nonzero(s > score_threshold)[0]
            if not len(keep):
                continue
            if gts:
                ih = iou_matrix(pred["human_boxes"][keep], np.array([t.human_box for t in gts]))
                io = iou_matrix(pred["object_boxes"][keep], np.array([t.object_box for t in gts]))
                ok = (ih >= IOU_THRESHOLD) & (io >= IOU_THRESHOLD) & (
                    cat[keep][:, None] == np.array([t.object_category for t in gts])[None, :])
                overlap = np.where(ok, np.minimum(ih, io), -1.0)
            claimed = np.zeros(len(gts), dtype=bool)
            for r in np.argsort(-s[keep], kind="stable"):
                hit = False
                if gts:
                    cand = np.where(claimed, -1.0, overlap[r])
                    g = int(np.argmax(cand))
                    if cand[g] >= 0:
                        claimed[g] = True
                        hit = True
                scores.append(s[keep][r])
                tps.append(hit)
        per_action[a] = average_precision(scores, tps, n_pos)
    valid = [v for v in per_action.values() if not np.isnan(v)]
    return {"map": float(np.mean(valid)) if valid else 0.0, "ap": per_action}


def predict_p1(model, scenes, batch_size=64):
    cfg = model.config
    out = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        preds = model.infer_p1(render_batch(chunk, cfg.grid, cfg.n_obj_categories))
        out.extend(preds.scene(b) for b in range(len(chunk)))
    return out


def evaluate_map(model_or_ckpt, scenes, score_threshold=0.0, batch_size=64):
    model = build_model(model_or_ckpt) if isinstance(model_or_ckpt, Checkpoint) else model_or_ckpt
    preds = predict_p1(model, scenes, batch_size)
    return evaluate_detections(preds, scenes, model.config.n_actions, score_threshold)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: HOIModel
    losses: list
    evals: list
    data_order: str

    @property
    def metrics(self):
        last = self.evals[-1] if self.evals else None
        return {"map": last["map"] if last else None,
                "ap": last["ap"] if last else None,
                "losses": self.losses}


def _trainable(model, config):
    params = model.parameters()
    groups = model.parameter_groups()
    frozen = set()
    if config.freeze_encoder:
        frozen = set(groups["embed"]) | set(groups["encoder"])
    lrs = {n: (config.lr_embed if n in groups["embed"] else config.lr_model) for n in params}
    return {n: p for n, p in params.items() if n not in frozen}, lrs


def train(config, dataset, model_config=None, eval_set=None, resume=None, events=None, stop_at=None):
    """Train on ``dataset`` for ``config.steps`` steps.

    ``events`` is an optional callable receiving one dict per evaluation.
    ``resume`` continues from a checkpoint's step, optimizer moments and
    parameters; the remaining trajectory matches an uninterrupted run.
    ``stop_at`` ends the run early (the schedule still follows ``config.steps``).
    """
    if not dataset:
        raise ValueError("training set is empty")
    mcfg = model_config or (resume.model_config if resume else ModelConfig())
    worst = max(len(s.triplets) for s in dataset)
    if worst > mcfg.n_queries:
        raise ValueError(f"a scene holds {worst} triplets but the model has {mcfg.n_queries} queries")
    model = HOIModel(mcfg, paths=config.active_paths, share_decoder=config.share_decoder, seed=config.seed)
    trainable, lrs = _trainable(model, config)
    opt = AdamW(trainable, {n: lrs[n] for n in trainable}, config.weight_decay)
    start = 0
    if resume is not None:
        load_params(model, resume.params)
        for n in trainable:
            opt.m[n][...] = resume.m[n]
            opt.v[n][...] = resume.v[n]
        opt.t = start = resume.step
    grids_all = render_batch(dataset, mcfg.grid, mcfg.n_obj_categories)
    order = BatchOrder(config.seed, len(dataset), config.batch_size)
    losses, evals = [], []
    frozen = config.freeze_encoder
    end = config.steps if stop_at is None else min(stop_at, config.steps)
    for step in range(start, end):
        idx = order.indices(step)
        scenes = [dataset[i] for i in idx]
        grids = grids_all[idx]
        memory = model.encode(model.embed_features(grids)) if frozen else None
        with Tape() as tape:
            report, _ = batch_losses(model, grids, scenes, config, step, memory=memory)
            if not np.isfinite(report.total):
                raise TrainingError(f"non-finite loss at step {step}", report)
            tape.backward(report.tensor)
        grads = {n: tape.grad(p) for n, p in trainable.items()}
        del tape
        if config.grad_clip:
            clip_grad_norm(grads, config.grad_clip)
        opt.step(grads)
        losses.append({"step": step, **report.to_json()})
        if config.eval_every and eval_set is not None and (step + 1) % config.eval_every == 0:
            metrics = evaluate_map(model, eval_set)
            record = {"step": step + 1, "map": metrics["map"], "ap": {str(k): v for k, v in metrics["ap"].items()}}
            evals.append(record)
            if events:
                events(record)
            log.info("step %d  loss %.4f  mAP %.3f", step + 1, report.total, metrics["map"])
    ckpt = Checkpoint(
        model_config=mcfg,
        train_config=config,
        params={n: p.data.copy() for n, p in model.parameters().items()},
        step=max(start, end),
        m={n: a.copy() for n, a in opt.m.items()},
        v={n: a.copy() for n, a in opt.v.items()},
        rng={"batch_order": "epoch-permutation", "seed": config.seed, "position": max(start, end)},
    )
    return TrainResult(ckpt, model, losses, evals, order.digest(end))


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


def ablation_configs(base):
    runs = []
    for share in (True, False):
        for cpc in (True, False):
            runs.append((f"grid_share{int(share)}_cpc{int(cpc)}",
                         replace(base, share_decoder=share, cpc_enabled=cpc, active_paths=(1, 2, 3, 4))))
    for paths in ((1,), (1, 2), (1, 2, 3), (1, 2, 3, 4)):
        runs.append(("paths_" + "".join(map(str, paths)), replace(base, active_paths=paths)))
    return runs


def _ablation_run(args):
    name, config, train_set, eval_set, model_config = args
    started = time.process_time()
    result = train(config, train_set, model_config=model_config)
    metrics = evaluate_map(result.model, eval_set)
    params = result.model.parameters()
    n_dec = sum(p.size for n, p in params.items() if n.startswith("decoder"))
    return {
        "run": name,
        "paths": "".join(map(str, config.active_paths)),
        "share_decoder": config.share_decoder,
        "cpc": config.cpc_enabled,
        "seed": config.seed,
        "steps": config.steps,
        "n_params": sum(p.size for p in params.values()),
        "n_decoder_params": n_dec,
        "p1_map": metrics["map"],
        "data_order": result.data_order,
        "cpu_seconds": round(time.process_time() - started, 3),
    }


def run_jobs(jobs, workers=1):
    """Train and score ``(name, config, train_set, eval_set, model_config)`` jobs, in order."""
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_ablation_run, jobs))
    return [_ablation_run(j) for j in jobs]


def ablate(base_config, train_set, eval_set, model_config=None, workers=1):
    """2x2 grid over decoder sharing and CPC, then the path-count sweep."""
    return run_jobs([(name, cfg, train_set, eval_set, model_config)
                     for name, cfg in ablation_configs(base_config)], workers)


def write_table(rows, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
