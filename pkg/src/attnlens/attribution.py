"""Gradient-weighted attention relevance with layer-norm statistics.

Per block the fused contribution is

    Abar = mean_h clamp(gradA * A)          (heads fused, negatives dropped)
    Abar = Abar / std[None, :]              (optional; std of each input token)
    Abar = Abar / Abar.sum()                (optional; whole-matrix sum to one)
    R    = R + Abar @ R

``R`` starts at the identity for each stage. Stages are chained from the
start stage ``j`` upward with ``R <- R_i @ merge_rows(R)``, where
``merge_rows`` averages the rows of the 2x2 patches that were merged.
Rows of every relevance matrix index output tokens, columns input tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ContractError, UnsupportedVariantError
from .models import AttentionRecord, ForwardTrace, MergeMap

NORMALIZE_FLOOR = 1e-12


@dataclass(frozen=True)
class AttributionOptions:
    start_stage: Optional[int] = None     # None: last stage
    use_std_scaling: bool = True
    use_sum_normalize: bool = True
    use_gradients: bool = True
    target_class: Optional[int] = None    # None: predicted class

    @classmethod
    def preset(cls, method: str, **overrides):
        """``attn`` (gradient x attention only) or ``attn-ln`` (with std and sum scaling)."""
        if method == "attn":
            base = cls(use_std_scaling=False, use_sum_normalize=False)
        elif method == "attn-ln":
            base = cls()
        else:
            raise ContractError(f"unknown method {method!r}")
        return replace(base, **overrides)

    def resolve_stage(self, num_stages: int) -> int:
        j = num_stages - 1 if self.start_stage is None else self.start_stage
        if not 0 <= j < num_stages:
            raise ContractError(f"start stage {j} outside [0, {num_stages})")
        return j


@dataclass
class Heatmap:
    grid: np.ndarray
    degenerate: bool

    @property
    def argmax(self):
        return np.unravel_index(int(np.argmax(self.grid)), self.grid.shape)


# --- per-block pieces -------------------------------------------------------

def assemble_full_attention(record: AttentionRecord, n_tokens: int, use_gradients: bool = True):
    """Scatter windowed attention into dense float64 ``[heads, N, N]`` matrices.

    Returns ``(A_full, grad_full)``; ``grad_full`` is None when gradients
    are not requested. Entries linking different windows are zero.
    """
    wmap = np.asarray(record.window_map)
    if wmap.ndim != 2 or wmap.shape[0] != record.attn.shape[0] \
            or wmap.shape[1] != record.attn.shape[-1]:
        raise ContractError("window map does not match the attention shape")
    if not np.array_equal(np.sort(wmap.reshape(-1)), np.arange(n_tokens)):
        raise ContractError(f"window map does not cover {n_tokens} tokens exactly once")
    heads = record.attn.shape[1]
    a_full = np.zeros((heads, n_tokens, n_tokens), dtype=np.float64)
    g_full = None
    if use_gradients:
        if record.grad is None:
            raise ContractError(f"block {record.block} has no attention gradient")
        g_full = np.zeros_like(a_full)
    for w, ids in enumerate(wmap):
        sel = np.ix_(np.arange(heads), ids, ids)
        a_full[sel] = record.attn[w]
        if g_full is not None:
            g_full[sel] = record.grad[w]
    return a_full, g_full


def fuse_heads(attn, grad):
    """Mean over heads of clamp_nonneg(grad * attn)."""
    attn, grad = np.asarray(attn), np.asarray(grad)
    if attn.ndim != 3 or attn.shape[0] == 0:
        raise ContractError("fuse_heads needs at least one head")
    if attn.shape != grad.shape:
        raise ContractError(f"attention {attn.shape} and gradient {grad.shape} differ")
    return np.maximum(grad * attn, 0).mean(axis=0)


def scale_by_token_std(abar, std):
    """Divide column ``j`` by ``std[j]``."""
    abar, std = np.asarray(abar), np.asarray(std, dtype=np.float64)
    if std.shape != (abar.shape[1],):
        raise ContractError(f"need {abar.shape[1]} token stds, got {std.shape}")
    if np.any(std <= 0):
        raise ContractError("token std must be positive")
    return abar / std[None, :]


def sum_normalize(abar):
    """Scale so the entries sum to one; returns ``(matrix, degenerate)``.

    Matrices summing to at most ``NORMALIZE_FLOOR`` come back unchanged
    with ``degenerate`` set.
    """
    abar = np.asarray(abar)
    total = abar.sum()
    if total <= NORMALIZE_FLOOR:
        return abar, True
    return abar / total, False


def block_update(r, abar):
    """R + Abar @ R."""
    r, abar = np.asarray(r), np.asarray(abar)
    if abar.ndim != 2 or abar.shape[0] != abar.shape[1] or abar.shape[1] != r.shape[0]:
        raise ContractError(f"cannot update R {r.shape} with Abar {abar.shape}")
    return r + abar @ r


def block_contribution(record: AttentionRecord, std, n_tokens: int, opts: AttributionOptions):
    """The fused, scaled and normalised matrix a single block adds to R."""
    a_full, g_full = assemble_full_attention(record, n_tokens, opts.use_gradients)
    if g_full is None:
        g_full = np.ones_like(a_full)
    abar = fuse_heads(a_full, g_full)
    if opts.use_std_scaling:
        abar = scale_by_token_std(abar, std)
    if opts.use_sum_normalize:
        abar, _ = sum_normalize(abar)
    return abar


def stage_relevance(trace: ForwardTrace, stage: int, opts: AttributionOptions):
    """Relevance of stage inputs for stage outputs, ``[N_i, N_i]``."""
    cfg = trace.config
    if not 0 <= stage < cfg.num_stages:
        raise ContractError(f"stage {stage} not in model")
    n = cfg.tokens_at(stage)
    stds = {s.block: s.std for s in trace.stats}
    r = np.eye(n, dtype=np.float64)
    for rec in trace.stage_records(stage):
        r = block_update(r, block_contribution(rec, stds[rec.block], n, opts))
    return r


def merge_rows(r, mm: MergeMap):
    """Row ``g`` of the result is the mean of the rows in merge group ``g``."""
    r = np.asarray(r)
    mm.validate(r.shape[0])
    return r[mm.groups].mean(axis=1)


def compose_stages(trace: ForwardTrace, opts: AttributionOptions):
    """Chain stage relevances from the start stage to the last one.

    Rows index last-stage tokens, columns index start-stage tokens.
    """
    cfg = trace.config
    j = opts.resolve_stage(cfg.num_stages)
    r = stage_relevance(trace, j, opts)
    for i in range(j + 1, cfg.num_stages):
        r = stage_relevance(trace, i, opts) @ merge_rows(r, trace.merge_maps[i - 1])
    return r


# --- read-outs --------------------------------------------------------------

def _is_degenerate(grid):
    return bool(grid.size == 0 or np.ptp(grid) <= NORMALIZE_FLOOR)


def heatmap_swin(r, side: int) -> Heatmap:
    """Column sums of R on the start-stage token grid."""
    grid = np.asarray(r).sum(axis=0).reshape(side, side)
    return Heatmap(grid=grid, degenerate=_is_degenerate(grid))


def heatmap_vit(r) -> Heatmap:
    """CLS row of R without the CLS column, on the patch grid."""
    row = np.asarray(r)[0, 1:]
    side = int(round(np.sqrt(row.size)))
    if side * side != row.size:
        raise ContractError(f"{row.size} patch tokens do not form a square grid")
    grid = row.reshape(side, side)
    return Heatmap(grid=grid, degenerate=_is_degenerate(grid))


def rollout_factors(trace: ForwardTrace, normalize_rows: bool = True):
    """Per-block ``I + mean_h A``, optionally with rows rescaled to sum to one."""
    cfg = trace.config
    if cfg.variant != "vit":
        raise UnsupportedVariantError("rollout is defined for single-stage ViT only")
    n = cfg.tokens_at(0)
    factors = []
    for rec in trace.records:
        a_full, _ = assemble_full_attention(rec, n, use_gradients=False)
        f = np.eye(n) + a_full.mean(axis=0)
        if normalize_rows:
            f = f / f.sum(axis=1, keepdims=True)
        factors.append(f)
    return factors


def rollout(trace: ForwardTrace) -> Heatmap:
    n = trace.config.tokens_at(0)
    r = np.eye(n)
    for f in rollout_factors(trace):
        r = f @ r
    return heatmap_vit(r)


def attribute(trace: ForwardTrace, opts: AttributionOptions) -> Heatmap:
    """Heatmap for a trace whose gradients match ``opts``."""
    cfg = trace.config
    r = compose_stages(trace, opts)
    if cfg.variant == "vit":
        return heatmap_vit(r)
    j = opts.resolve_stage(cfg.num_stages)
    return heatmap_swin(r, cfg.tokens_per_side[j])


def explain(model, image, opts: AttributionOptions, method: str = "relevance"):
    """Forward, backward for the chosen class, then read out a heatmap.

    ``method`` is ``relevance`` (gradient-weighted pipeline) or ``rollout``.
    Returns ``(Heatmap, trace)``.
    """
    if method == "rollout":
        _, trace = model.forward(image)
        return rollout(trace), trace
    if method != "relevance":
        raise ContractError(f"unknown attribution method {method!r}")
    opts.resolve_stage(model.config.num_stages)
    if opts.use_gradients:
        trace = model.trace(image, opts.target_class)
    else:
        _, trace = model.forward(image)
    return attribute(trace, opts), trace


# --- pixel space ------------------------------------------------------------

def _bilinear_axis(n_in, n_out):
    """Interpolation weights for half-pixel-centred resampling of one axis."""
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def min_max(x):
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= NORMALIZE_FLOOR:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def upsample(grid, height: int, width: int, method: str = "nearest"):
    """Resize a token grid to pixels, then min-max normalise to [0, 1]."""
    grid = np.asarray(grid, dtype=np.float64)
    gh, gw = grid.shape
    if method == "nearest":
        if height % gh or width % gw:
            raise ContractError(f"{height}x{width} is not a multiple of grid {gh}x{gw}")
        out = np.repeat(np.repeat(grid, height // gh, axis=0), width // gw, axis=1)
    elif method == "bilinear":
        out = _bilinear_axis(gh, height) @ grid @ _bilinear_axis(gw, width).T
    else:
        raise ContractError(f"unknown upsample method {method!r}")
    return min_max(out)
