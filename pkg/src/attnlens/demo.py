"""Hand-built Swin instance showing how a high-variance token hijacks relevance.

Token 0 (top-left corner) carries a huge positional embedding, so its
pre-attention layer-norm std is ~30x that of every other token, and all
queries attend to it. The image rectangle covering the central 2x2 tokens
feeds a much larger value into the class-0 logit. Gradient x attention
alone ranks the corner first; dividing columns by token std moves the
maximum onto the rectangle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attribution import AttributionOptions, attribute
from .models import Model, ModelConfig, weight_shapes

TARGET_TOKENS = (5, 6, 9, 10)
CORNER_TOKEN = 0


def corner_config():
    return ModelConfig(variant="swin", embed_dim=6, heads=1, stage_depths=(1,),
                       patch_size=4, image_size=16, num_classes=2, window_side=4,
                       mlp_ratio=1)


def corner_weights(corner_scale=50.0, target_value=8.0, corner_value=0.1, out_gain=0.1):
    cfg = corner_config()
    e = np.eye(cfg.embed_dim)
    pattern_t = e[0] + e[1] - e[2] - e[3]        # image-driven feature
    pattern_c = e[0] - e[1]                      # corner feature
    unit_t = pattern_t / np.linalg.norm(pattern_t)
    unit_c = pattern_c / np.linalg.norm(pattern_c)
    w = {name: np.zeros(shape) for name, shape in weight_shapes(cfg).items()}
    for name in w:
        if "norm" in name and name.endswith(".weight"):
            w[name] = np.ones(w[name].shape)
    w["patch_embed.weight"] = np.tile(pattern_t / 16.0, (16, 1))
    pos = np.tile(0.5 * (e[2] - e[3]), (16, 1))
    pos[CORNER_TOKEN] = corner_scale * pattern_c
    w["pos_embed"] = pos
    # constant query, key responds only to the corner feature
    w["blocks.0.attn.q.bias"] = np.sqrt(5.0) * e[0]
    w["blocks.0.attn.k.weight"] = np.outer(unit_c, np.sqrt(5.0) * e[0])
    w["blocks.0.attn.v.weight"] = np.outer(target_value * unit_t + corner_value * unit_c, e[0])
    w["blocks.0.attn.proj.weight"] = np.outer(e[0], out_gain * (e[4] - e[5]))
    w["head.weight"][:, 0] = e[4] - e[5]
    return {k: v.astype(np.float32) for k, v in w.items()}


def corner_image():
    img = np.zeros((16, 16, 1), dtype=np.float32)
    img[4:12, 4:12] = 1.0
    return img


@dataclass
class CornerDemo:
    model: Model
    image: np.ndarray
    with_std: object           # Heatmap
    without_std: object        # Heatmap
    token_std: np.ndarray
    value_share: np.ndarray    # share of the class-0 logit routed through each token
    trace: object


def value_share(trace, weights):
    """Fraction of the attention-path logit contributed by each source token."""
    rec = trace.records[0]
    v = rec.attn_input.astype(np.float64) @ weights["blocks.0.attn.v.weight"]
    to_logit = weights["blocks.0.attn.proj.weight"] @ weights["head.weight"][:, 0]
    per_token = rec.attn[0, 0].sum(axis=0) * (v @ to_logit)
    order = np.argsort(rec.window_map[0])
    per_token = per_token[order]
    return per_token / per_token.sum()


def run_corner_demo() -> CornerDemo:
    model = Model(corner_config(), corner_weights())
    image = corner_image()
    trace = model.trace(image, class_index=0)
    on = AttributionOptions(start_stage=0, target_class=0)
    off = AttributionOptions(start_stage=0, target_class=0, use_std_scaling=False)
    return CornerDemo(model=model, image=image, with_std=attribute(trace, on),
                      without_std=attribute(trace, off), token_std=trace.stats[0].std.copy(),
                      value_share=value_share(trace, model.weights), trace=trace)
