"""Toy set-prediction transformer with a decoder shared across decoding paths.

A decoding path splits the prediction of a (human, object, interaction)
triplet into ordered stages.  Each stage re-runs the same decoder on the
previous stage's output plus a stage-specific learnable query, and reads
out the stage's triplet elements with its own feed-forward heads::

    P1: x -> HOI          P2: x -> HO -> I
    P3: x -> HI -> O      P4: x -> OI -> H

Only P1 is used at inference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import FeatureGrid
from .tensor import Tensor

HUMAN, OBJECT, INTERACTION = "H", "O", "I"
ELEMENTS = (HUMAN, OBJECT, INTERACTION)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_queries: int = 8
    n_obj_categories: int = 5
    n_actions: int = 6
    grid: int = 8

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if self.d_model % 4:
            raise ModelError("d_model must be divisible by 4 for the 2-D position encoding")

    @property
    def in_channels(self):
        return 1 + self.n_obj_categories

    @property
    def n_classes(self):
        # categories plus the trailing no-object slot
        return self.n_obj_categories + 1

    @property
    def no_object(self):
        return self.n_obj_categories

    def to_json(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class PathSpec:
    path_id: int
    stages: tuple

    def stage_of(self, element):
        for j, stage in enumerate(self.stages):
            if element in stage:
                return j
        raise KeyError(element)


PATHS = {
    1: PathSpec(1, ((HUMAN, OBJECT, INTERACTION),)),
    2: PathSpec(2, ((HUMAN, OBJECT), (INTERACTION,))),
    3: PathSpec(3, ((HUMAN, INTERACTION), (OBJECT,))),
    4: PathSpec(4, ((OBJECT, INTERACTION), (HUMAN,))),
}


@dataclass
class PredictionSet:
    """Per-query triplet predictions of one path for a batch, ``[B, N, ...]``.

    Boxes are post-sigmoid ``(cx, cy, w, h)``; class and action outputs are
    logits.  ``provenance`` maps each element to the stage that produced it.
    """

    human_boxes: Tensor
    object_boxes: Tensor
    object_logits: Tensor
    action_logits: Tensor
    provenance: dict = field(default_factory=dict)

    @property
    def batch_size(self):
        return self.human_boxes.shape[0]

    @property
    def n_queries(self):
        return self.human_boxes.shape[1]

    def object_probs(self):
        z = self.object_logits.data
        z = np.exp(z - z.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    def action_probs(self):
        from scipy.special import expit

        return expit(self.action_logits.data)

    def scene(self, b):
        """Plain numpy view of scene ``b``."""
        return {
            "human_boxes": self.human_boxes.data[b],
            "object_boxes": self.object_boxes.data[b],
            "object_probs": self.object_probs()[b],
            "action_probs": self.action_probs()[b],
        }


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Module:
    def named_parameters(self, prefix=""):
        seen = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix):
        for name, value in vars(self).items():
            yield from _walk_value(value, prefix + name)

    def parameters(self):
        return dict(self.named_parameters())


def _walk_value(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value._walk(name + ".")
    elif isinstance(value, dict):
        for k in value:
            yield from _walk_value(value[k], f"{name}.{k}")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk_value(v, f"{name}.{i}")


def _param(arr):
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out):
        limit = math.sqrt(6.0 / (d_in + d_out))
        self.weight = _param(rng.uniform(-limit, limit, size=(d_in, d_out)))
        self.bias = _param(np.zeros(d_out))

    def __call__(self, x):
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = _param(np.ones(d))
        self.beta = _param(np.zeros(d))

    def __call__(self, x):
        return T.layernorm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, rng, d, hidden):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention(q, k, v):
    """Scaled dot-product attention on ``[B, H, T, dh]`` operands."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q * scale) @ k.transpose(0, 1, 3, 2)
    return T.softmax(scores, axis=-1) @ v


class MultiHeadAttention(Module):
    def __init__(self, rng, d, n_heads):
        self.n_heads = n_heads
        self.q_proj = Linear(rng, d, d)
        self.kv_proj = Linear(rng, d, 2 * d)
        self.out_proj = Linear(rng, d, d)

    def __call__(self, x, memory):
        d = x.shape[-1]
        kv = self.kv_proj(memory)
        q = _split_heads(self.q_proj(x), self.n_heads)
        k = _split_heads(kv[..., :d], self.n_heads)
        v = _split_heads(kv[..., d:], self.n_heads)
        return self.out_proj(_merge_heads(attention(q, k, v)))


class EncoderLayer(Module):
    def __init__(self, rng, d, n_heads):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, n_heads)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(rng, d, 2 * d)

    def __call__(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ffn(self.norm2(x))


class DecoderLayer(Module):
    def __init__(self, rng, d, n_heads):
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, n_heads)
        self.norm2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(rng, d, n_heads)
        self.norm3 = LayerNorm(d)
        self.ffn = FeedForward(rng, d, 2 * d)

    def __call__(self, x, memory):
        h = self.norm1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.ffn(self.norm3(x))


class Encoder(Module):
    def __init__(self, rng, cfg):
        self.layers = [EncoderLayer(rng, cfg.d_model, cfg.n_heads) for _ in range(cfg.n_enc_layers)]
        self.norm = LayerNorm(cfg.d_model)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


class Decoder(Module):
    def __init__(self, rng, cfg):
        self.layers = [DecoderLayer(rng, cfg.d_model, cfg.n_heads) for _ in range(cfg.n_dec_layers)]
        self.norm = LayerNorm(cfg.d_model)

    def __call__(self, x, memory):
        for layer in self.layers:
            x = layer(x, memory)
        return self.norm(x)


class ReadoutHead(Module):
    """Two-layer ReLU MLP, hidden width ``d_model``."""

    def __init__(self, rng, d, d_out):
        self.fc1 = Linear(rng, d, d)
        self.fc2 = Linear(rng, d, d_out)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


def sine_position_encoding(grid, d_model):
    """``[grid*grid, d_model]``: half the channels encode the row, half the column."""
    per_axis = d_model // 2
    freq = 10000.0 ** (2 * (np.arange(per_axis) // 2) / per_axis)
    pos = (np.arange(grid) + 0.5) / grid * 2 * math.pi
    enc = pos[:, None] / freq[None, :]
    enc[:, 0::2] = np.sin(enc[:, 0::2])
    enc[:, 1::2] = np.cos(enc[:, 1::2])
    rows = np.repeat(enc, grid, axis=0)
    cols = np.tile(enc, (grid, 1))
    return np.concatenate([rows, cols], axis=1)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def _head_width(cfg, element):
    if element == HUMAN:
        return 4
    if element == OBJECT:
        return 4 + cfg.n_classes
    return cfg.n_actions


class HOIModel(Module):
    """Encoder, decoder(s), per-path/stage queries and readout heads.

    With ``share_decoder`` every path runs the one ``decoder``; otherwise each
    path owns an independent copy ``decoders[k]``.
    """

    def __init__(self, config=None, paths=(1, 2, 3, 4), share_decoder=True, seed=0):
        cfg = config or ModelConfig()
        paths = tuple(sorted(set(paths)))
        if not paths or 1 not in paths or not set(paths) <= set(PATHS):
            raise ModelError(f"paths must be a subset of {{1,2,3,4}} containing 1, got {paths}")
        self.config = cfg
        self.paths = paths
        self.share_decoder = share_decoder
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.patch_embed = Linear(rng, cfg.in_channels, d)
        self.encoder = Encoder(rng, cfg)
        if share_decoder:
            self.decoder = Decoder(rng, cfg)
            self.decoders = {k: self.decoder for k in paths}
        else:
            self.decoders = {k: Decoder(rng, cfg) for k in paths}
        self.queries = {}
        self.heads = {}
        for k in paths:
            for j, stage in enumerate(PATHS[k].stages, 1):
                self.queries[f"p{k}s{j}"] = _param(rng.normal(0.0, 1.0, size=(cfg.n_queries, d)))
                for m in stage:
                    self.heads[f"p{k}s{j}{m}"] = ReadoutHead(rng, d, _head_width(cfg, m))
        self._pos = sine_position_encoding(cfg.grid, d)

    def _walk(self, prefix):
        # the shared decoder appears once, under "decoder"
        for name, value in vars(self).items():
            if name == "decoders" and self.share_decoder:
                continue
            yield from _walk_value(value, prefix + name)

    def parameter_groups(self):
        """Names split into the embedding stand-in, the encoder and everything else."""
        groups = {"embed": [], "encoder": [], "rest": []}
        for name in self.parameters():
            if name.startswith("patch_embed."):
                groups["embed"].append(name)
            elif name.startswith("encoder."):
                groups["encoder"].append(name)
            else:
                groups["rest"].append(name)
        return groups

    # forward pieces -------------------------------------------------------

    def _grids(self, grids):
        if isinstance(grids, FeatureGrid):
            grids = grids.data
        arr = np.asarray(grids, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        cfg = self.config
        if arr.shape[1:] != (cfg.in_channels, cfg.grid, cfg.grid):
            raise ModelError(
                f"feature grid must be (B, {cfg.in_channels}, {cfg.grid}, {cfg.grid}), got {arr.shape}")
        return arr

    def embed_features(self, grids):
        arr = self._grids(grids)
        b, c, g, _ = arr.shape
        tokens = Tensor._wrap(np.ascontiguousarray(arr.reshape(b, c, g * g).transpose(0, 2, 1)))
        return self.patch_embed(tokens) + Tensor._wrap(self._pos)

    def encode(self, features):
        return self.encoder(features)

    def decode_stage(self, e_prev, query, memory, path_id=1):
        return self.decoders[path_id](e_prev + query, memory)

    def run_path(self, k, memory):
        if k not in self.paths:
            raise ModelError(f"path {k} is not configured")
        cfg = self.config
        b = memory.shape[0]
        e = Tensor._wrap(np.zeros((b, cfg.n_queries, cfg.d_model)))
        outputs, provenance = {}, {}
        for j, stage in enumerate(PATHS[k].stages, 1):
            e = self.decode_stage(e, self.queries[f"p{k}s{j}"], memory, k)
            for m in stage:
                outputs[m] = self.heads[f"p{k}s{j}{m}"](e)
                provenance[m] = j
        obj = outputs[OBJECT]
        return PredictionSet(
            human_boxes=T.sigmoid(outputs[HUMAN]),
            object_boxes=T.sigmoid(obj[..., :4]),
            object_logits=obj[..., 4:],
            action_logits=outputs[INTERACTION],
            provenance=provenance,
        )

    def run_all_paths(self, memory, active_paths=None):
        active = self.paths if active_paths is None else tuple(sorted(set(active_paths)))
        if not active or 1 not in active:
            raise ModelError("active paths must be non-empty and contain path 1")
        return {k: self.run_path(k, memory) for k in active}

    def forward(self, grids, active_paths=None):
        memory = self.encode(self.embed_features(grids))
        return memory, self.run_all_paths(memory, active_paths)

    def infer_p1(self, grids):
        return self.run_path(1, self.encode(self.embed_features(grids)))


def p1_parameter_names(model: HOIModel):
    """The parameters a P1-only forward pass reads."""
    names = []
    for name in model.parameters():
        if name.startswith(("patch_embed.", "encoder.")):
            names.append(name)
        elif name.startswith("decoder.") or name.startswith("decoders.1."):
            names.append(name)
        elif name.startswith(("queries.p1s", "heads.p1s")):
            names.append(name)
    return names
