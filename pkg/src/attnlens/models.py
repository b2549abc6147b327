"""Toy ViT and Swin-style transformers that keep an attribution trace.

Both variants share one attention code path: a ViT block is a single
window holding every token (CLS included), a Swin block partitions the
token grid into ``window_side x window_side`` windows, cyclically shifted
by ``window_side // 2`` on odd blocks of a stage. Between Swin stages the
2x2 neighbourhoods are concatenated, layer-normed and projected back to
``embed_dim`` (patch merging).

Weights use the ``x @ W`` convention, i.e. a projection from ``m`` to
``n`` features is stored as an ``[m, n]`` array.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, WeightError

VARIANTS = ("vit", "swin")


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    embed_dim: int
    heads: int
    stage_depths: tuple
    patch_size: int
    image_size: int
    num_classes: int
    channels: int = 1
    window_side: int = 0
    mlp_ratio: int = 2
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be a positive multiple of heads")
        if not self.stage_depths or min(self.stage_depths) < 1:
            raise ConfigError("every stage needs at least one block")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.num_classes < 1 or self.channels < 1 or self.mlp_ratio < 1:
            raise ConfigError("num_classes, channels and mlp_ratio must be positive")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.variant == "vit":
            if len(self.stage_depths) != 1:
                raise ConfigError("ViT has exactly one stage")
            return
        if self.window_side < 1:
            raise ConfigError("swin needs window_side >= 1")
        for side in self.tokens_per_side:
            if side < 1 or side % self.window_side:
                raise ConfigError(
                    f"stage grid side {side} is not divisible by window_side {self.window_side}"
                )
        for side in self.tokens_per_side[:-1]:
            if side % 2:
                raise ConfigError("patch merging needs an even grid side")

    @property
    def num_stages(self):
        return len(self.stage_depths)

    @property
    def depth(self):
        return sum(self.stage_depths)

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def grid_side(self):
        return self.image_size // self.patch_size

    @property
    def tokens_per_side(self):
        side = self.grid_side
        sides = []
        for _ in self.stage_depths:
            sides.append(side)
            side //= 2
        return tuple(sides)

    def tokens_at(self, stage):
        n = self.tokens_per_side[stage] ** 2
        return n + 1 if self.variant == "vit" else n

    def block_layout(self):
        """``(global_block, stage, block_in_stage)`` for every block, in order."""
        out, b = [], 0
        for s, depth in enumerate(self.stage_depths):
            for k in range(depth):
                out.append((b, s, k))
                b += 1
        return out

    def to_json(self):
        d = asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from None


def toy_vit_config():
    """5 tokens (2x2 patches + CLS), 4 blocks, 2 heads, d=16."""
    return ModelConfig(variant="vit", embed_dim=16, heads=2, stage_depths=(4,),
                       patch_size=4, image_size=8, num_classes=4)


def toy_swin_config():
    """Stages of 16 and 4 tokens, two blocks each, 2x2 windows."""
    return ModelConfig(variant="swin", embed_dim=16, heads=2, stage_depths=(2, 2),
                       patch_size=4, image_size=16, num_classes=4, window_side=2)


def weight_shapes(cfg: ModelConfig) -> dict:
    """Every tensor name the model needs, mapped to its shape."""
    d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    shapes = {
        "patch_embed.weight": (cfg.patch_size**2 * cfg.channels, d),
        "patch_embed.bias": (d,),
        "pos_embed": (cfg.tokens_at(0), d),
    }
    if cfg.variant == "vit":
        shapes["cls_token"] = (1, d)
    for b, _, _ in cfg.block_layout():
        p = f"blocks.{b}."
        shapes.update({
            p + "norm1.weight": (d,), p + "norm1.bias": (d,),
            p + "attn.q.weight": (d, d), p + "attn.q.bias": (d,),
            p + "attn.k.weight": (d, d), p + "attn.k.bias": (d,),
            p + "attn.v.weight": (d, d), p + "attn.v.bias": (d,),
            p + "attn.proj.weight": (d, d), p + "attn.proj.bias": (d,),
            p + "norm2.weight": (d,), p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (d, hidden), p + "mlp.fc1.bias": (hidden,),
            p + "mlp.fc2.weight": (hidden, d), p + "mlp.fc2.bias": (d,),
        })
    for s in range(cfg.num_stages - 1):
        p = f"merges.{s}."
        shapes.update({
            p + "norm.weight": (4 * d,), p + "norm.bias": (4 * d,),
            p + "reduction.weight": (4 * d, d),
        })
    shapes.update({
        "norm.weight": (d,), "norm.bias": (d,),
        "head.weight": (d, cfg.num_classes), "head.bias": (cfg.num_classes,),
    })
    return shapes


def validate_weights(cfg: ModelConfig, weights: dict):
    expected = weight_shapes(cfg)
    missing = sorted(set(expected) - set(weights))
    unknown = sorted(set(weights) - set(expected))
    wrong = sorted(n for n in expected if n in weights
                   and tuple(np.shape(weights[n])) != expected[n])
    problems = []
    if missing:
        problems.append("missing: " + ", ".join(missing))
    if unknown:
        problems.append("unknown: " + ", ".join(unknown))
    if wrong:
        problems.append("wrong shape: " + ", ".join(
            f"{n} {tuple(np.shape(weights[n]))} != {expected[n]}" for n in wrong))
    if problems:
        raise WeightError("; ".join(problems))


def random_weights(cfg: ModelConfig, seed: int, scale: float = 0.05) -> dict:
    """Uniform [-scale, scale] weights; layer-norm gains start at 1, biases at 0."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in weight_shapes(cfg).items():
        if "norm" in name and name.endswith(".weight"):
            out[name] = np.ones(shape, dtype=np.float32)
        elif "norm" in name and name.endswith(".bias"):
            out[name] = np.zeros(shape, dtype=np.float32)
        else:
            out[name] = rng.uniform(-scale, scale, size=shape).astype(np.float32)
    return out


# --- token bookkeeping ------------------------------------------------------

def window_map(side: int, window: int, shift: int) -> np.ndarray:
    """Token ids held by each window slot, shape ``[n_windows, window**2]``.

    Windows tile the grid cyclically rolled by ``-shift`` on both axes, so
    slot ``(a, b)`` of window ``(wr, wc)`` holds the original token at
    ``((wr*window + a + shift) % side, (wc*window + b + shift) % side)``.
    """
    n = side // window
    out = np.empty((n * n, window * window), dtype=np.intp)
    for wr in range(n):
        for wc in range(n):
            for a in range(window):
                for b in range(window):
                    r = (wr * window + a + shift) % side
                    c = (wc * window + b + shift) % side
                    out[wr * n + wc, a * window + b] = r * side + c
    return out


def merge_groups(side: int) -> np.ndarray:
    """2x2 groups of a ``side x side`` grid, in coarse-token order.

    Within a group the order is (top-left, bottom-left, top-right,
    bottom-right), which fixes the feature layout of the merged token.
    """
    half = side // 2
    groups = np.empty((half * half, 4), dtype=np.intp)
    for r in range(half):
        for c in range(half):
            tl = (2 * r) * side + 2 * c
            groups[r * half + c] = (tl, tl + side, tl + 1, tl + side + 1)
    return groups


# --- trace types ------------------------------------------------------------

@dataclass
class AttentionRecord:
    block: int
    stage: int
    attn: np.ndarray                      # [n_windows, heads, Nw, Nw]
    window_map: np.ndarray                # [n_windows, Nw] original token ids
    shift: int
    grad: Optional[np.ndarray] = None
    node_id: int = field(default=-1, repr=False)
    # layer-normed tokens entering attention and the head outputs before
    # the output projection, both in original token order
    attn_input: Optional[np.ndarray] = field(default=None, repr=False)
    attn_output: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class TokenStats:
    block: int
    std: np.ndarray                       # one entry per token of the stage


@dataclass
class MergeMap:
    boundary: int
    groups: np.ndarray                    # [N_coarse, group size] fine token ids

    def validate(self, n_fine: int):
        flat = np.sort(self.groups.reshape(-1))
        if self.groups.ndim != 2 or not np.array_equal(flat, np.arange(n_fine)):
            raise ContractError(f"merge map {self.boundary} does not partition {n_fine} tokens")


@dataclass
class ForwardTrace:
    config: ModelConfig
    records: list
    stats: list
    merge_maps: list
    logits: np.ndarray
    predicted: int
    class_index: Optional[int] = None
    _graph: Optional[T.Graph] = field(default=None, repr=False)
    _logits_node: Optional[T.Node] = field(default=None, repr=False)

    def stage_records(self, stage):
        return [r for r in self.records if r.stage == stage]

    def stage_stats(self, stage):
        blocks = {r.block for r in self.stage_records(stage)}
        return [s for s in self.stats if s.block in blocks]


def predict(logits) -> int:
    """Argmax with ties going to the lowest index."""
    return int(np.argmax(np.asarray(logits)))


# --- forward ----------------------------------------------------------------

def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """``[H, W, C]`` image to ``[n_patches, patch*patch*C]`` rows, row-major."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    return (image.reshape(gh, patch, gw, patch, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, patch * patch * c))


def patch_embed(image, cfg: ModelConfig, weights, graph: T.Graph):
    """Token matrix ``[N, embed_dim]`` with positions added (CLS first for ViT)."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ConfigError(
            f"image shape {image.shape} does not match config "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.channels})")
    w = weights
    x = T.add(T.matmul(graph.constant(patchify(image, cfg.patch_size)), w["patch_embed.weight"]),
              w["patch_embed.bias"])
    if cfg.variant == "vit":
        x = T.concat([w["cls_token"], x], axis=0)
    return T.add(x, w["pos_embed"])


def _attention(x, w, prefix, cfg, wmap, graph, override):
    n_win, n_slot = wmap.shape
    h, dh, d = cfg.heads, cfg.head_dim, cfg.embed_dim
    xw = T.reshape(T.take(x, wmap.reshape(-1)), (n_win, n_slot, d))

    def heads(name):
        y = T.add(T.matmul(xw, w[prefix + name + ".weight"]), w[prefix + name + ".bias"])
        return T.transpose(T.reshape(y, (n_win, n_slot, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), dh ** -0.5)
    attn = T.softmax_lastdim(scores)
    if override is not None:
        attn = graph.constant(override)
    graph.mark(attn)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (n_win * n_slot, d))
    heads_out = T.take(out, np.argsort(wmap.reshape(-1)))
    out = T.add(T.matmul(heads_out, w[prefix + "proj.weight"]), w[prefix + "proj.bias"])
    return out, attn, heads_out


def _merge(x, w, prefix, groups, cfg):
    d = cfg.embed_dim
    cat = T.reshape(T.take(x, groups.reshape(-1)), (groups.shape[0], 4 * d))
    normed, _ = T.layer_norm(cat, w[prefix + "norm.weight"], w[prefix + "norm.bias"], cfg.eps)
    return T.matmul(normed, w[prefix + "reduction.weight"])


def forward(cfg: ModelConfig, weights: dict, image, *, dtype=np.float32,
            attn_override: Optional[dict] = None):
    """Run the model and record everything attribution needs.

    ``attn_override`` maps a block index to an array that replaces that
    block's post-softmax attention (used by finite-difference checks).
    Returns ``(logits, ForwardTrace)``; ``grad`` fields stay empty until
    :func:`backward_attention_grads`.
    """
    validate_weights(cfg, weights)
    attn_override = attn_override or {}
    graph = T.Graph(dtype=dtype)
    w = {name: graph.constant(value) for name, value in weights.items()}

    x = patch_embed(image, cfg, w, graph)
    records, stats, merges = [], [], []
    sides = cfg.tokens_per_side
    for b, s, k in cfg.block_layout():
        if s > 0 and k == 0:
            groups = merge_groups(sides[s - 1])
            merges.append(MergeMap(boundary=s - 1, groups=groups))
            x = _merge(x, w, f"merges.{s - 1}.", groups, cfg)

        if cfg.variant == "vit":
            wmap, shift = np.arange(cfg.tokens_at(0), dtype=np.intp)[None, :], 0
        else:
            shift = cfg.window_side // 2 if k % 2 else 0
            wmap = window_map(sides[s], cfg.window_side, shift)

        p = f"blocks.{b}."
        normed, ln_stats = T.layer_norm(x, w[p + "norm1.weight"], w[p + "norm1.bias"], cfg.eps)
        attn_out, attn, heads_out = _attention(normed, w, p + "attn.", cfg, wmap, graph,
                                    attn_override.get(b))
        x = T.add(x, attn_out)
        normed2, _ = T.layer_norm(x, w[p + "norm2.weight"], w[p + "norm2.bias"], cfg.eps)
        hidden = T.gelu(T.add(T.matmul(normed2, w[p + "mlp.fc1.weight"]), w[p + "mlp.fc1.bias"]))
        x = T.add(x, T.add(T.matmul(hidden, w[p + "mlp.fc2.weight"]), w[p + "mlp.fc2.bias"]))

        records.append(AttentionRecord(block=b, stage=s, attn=attn.value.copy(),
                                       window_map=wmap, shift=shift, node_id=attn.id,
                                       attn_input=normed.value.copy(),
                                       attn_output=heads_out.value.copy()))
        stats.append(TokenStats(block=b, std=ln_stats.std.copy()))

    x, _ = T.layer_norm(x, w["norm.weight"], w["norm.bias"], cfg.eps)
    pooled = T.take(x, [0]) if cfg.variant == "vit" else T.mean(x, axis=0, keepdims=True)
    logits_node = T.reshape(
        T.add(T.matmul(pooled, w["head.weight"]), w["head.bias"]), (cfg.num_classes,))
    logits = logits_node.value.copy()
    trace = ForwardTrace(config=cfg, records=records, stats=stats, merge_maps=merges,
                         logits=logits, predicted=predict(logits),
                         _graph=graph, _logits_node=logits_node)
    return logits, trace


def backward_attention_grads(trace: ForwardTrace, class_index: int) -> ForwardTrace:
    """Fill every record's ``grad`` with d logits[class_index] / dA."""
    if not 0 <= class_index < trace.config.num_classes:
        raise ContractError(
            f"class index {class_index} outside [0, {trace.config.num_classes})")
    if trace._graph is None:
        raise ContractError("trace carries no graph; run forward first")
    target = T.take(trace._logits_node, [class_index])
    grads = trace._graph.backward(target)
    for rec in trace.records:
        rec.grad = grads[rec.node_id].copy()
    trace.class_index = class_index
    return trace


@dataclass(frozen=True)
class Model:
    """A config and its weights; immutable and shareable across threads."""

    config: ModelConfig
    weights: dict

    def __post_init__(self):
        validate_weights(self.config, self.weights)

    def forward(self, image, **kwargs):
        return forward(self.config, self.weights, image, **kwargs)

    def logits(self, image):
        return self.forward(image)[0]

    def predict(self, image):
        return predict(self.logits(image))

    def trace(self, image, class_index=None, *, dtype=np.float32):
        """Forward plus attention gradients for ``class_index`` (predicted if None)."""
        _, trace = self.forward(image, dtype=dtype)
        target = trace.predicted if class_index is None else int(class_index)
        return backward_attention_grads(trace, target)
