"""Brute-force reference computations used by ``selftest`` and the tests.

Nothing here calls into :mod:`attnlens.attribution` or
:mod:`attnlens.evaluation`; each routine recomputes its quantity from the
trace (or raw arrays) with explicit loops and dense matrices.
"""

from __future__ import annotations

import itertools

import numpy as np


def scatter_loops(block_values, window_map, n_tokens):
    """Dense ``[heads, N, N]`` from ``[n_windows, heads, Nw, Nw]`` by explicit loops."""
    n_win, heads, nw, _ = block_values.shape
    out = np.zeros((heads, n_tokens, n_tokens))
    for w in range(n_win):
        for h in range(heads):
            for a in range(nw):
                for b in range(nw):
                    out[h, window_map[w][a], window_map[w][b]] = block_values[w, h, a, b]
    return out


def averaging_matrix(groups, n_fine):
    """M with M[g, t] = 1/|group g| for every fine token t in group g."""
    groups = np.asarray(groups)
    m = np.zeros((len(groups), n_fine))
    for g, members in enumerate(groups):
        for t in members:
            m[g, t] = 1.0 / len(members)
    return m


def fused_block(attn_full, grad_full, std, use_std, use_norm):
    """One block's contribution, head by head with explicit diagonal scaling."""
    heads, n, _ = attn_full.shape
    acc = np.zeros((n, n))
    for h in range(heads):
        prod = grad_full[h] * attn_full[h]
        acc += np.where(prod > 0, prod, 0.0)
    abar = acc / heads
    if use_std:
        abar = abar @ np.diag(1.0 / np.asarray(std, dtype=np.float64))
    if use_norm:
        total = abar.sum()
        if total > 1e-12:
            abar = abar / total
    return abar


def compose_chain(trace, start_stage, use_std, use_norm, use_grad):
    """Relevance chain with dense averaging matrices instead of row merging."""
    cfg = trace.config
    std_of = {s.block: s.std for s in trace.stats}
    stage_mats = []
    for stage in range(cfg.num_stages):
        n = cfg.tokens_at(stage)
        r = np.eye(n)
        for rec in trace.records:
            if rec.stage != stage:
                continue
            a = scatter_loops(rec.attn, rec.window_map, n)
            g = scatter_loops(rec.grad, rec.window_map, n) if use_grad else np.ones_like(a)
            r = (np.eye(n) + fused_block(a, g, std_of[rec.block], use_std, use_norm)) @ r
        stage_mats.append(r)
    r = stage_mats[start_stage]
    for i in range(start_stage + 1, cfg.num_stages):
        mm = trace.merge_maps[i - 1]
        r = stage_mats[i] @ (averaging_matrix(mm.groups, cfg.tokens_at(i - 1)) @ r)
    return r


def rollout_chain(trace):
    """Classic rollout: product of row-normalised (I + mean-head attention)."""
    n = trace.config.tokens_at(0)
    r = np.eye(n)
    for rec in trace.records:
        a = scatter_loops(rec.attn, rec.window_map, n).mean(axis=0)
        f = np.eye(n) + a
        r = (f / f.sum(axis=1, keepdims=True)) @ r
    return r


def windowed_output_dense(record, weights, cfg):
    """Head outputs computed as dense ``A_full @ V`` per head, ``[N, d]``."""
    p = f"blocks.{record.block}.attn."
    x = np.asarray(record.attn_input, dtype=np.float64)
    v = x @ weights[p + "v.weight"].astype(np.float64) + weights[p + "v.bias"]
    n = x.shape[0]
    a = scatter_loops(record.attn, record.window_map, n)
    dh = cfg.head_dim
    return np.concatenate([a[h] @ v[:, h * dh:(h + 1) * dh] for h in range(cfg.heads)], axis=1)


# --- evaluation references --------------------------------------------------

def ranked_indices(scores):
    """Pixel indices by descending score, ties by ascending index (plain sort)."""
    flat = list(np.asarray(scores, dtype=np.float64).reshape(-1))
    return sorted(range(len(flat)), key=lambda i: (-flat[i], i))


def ap_by_prefixes(scores, positives):
    """AP as sum over ranking prefixes of (recall step) * precision."""
    pos = [bool(p) for p in np.asarray(positives).reshape(-1)]
    order = ranked_indices(scores)
    total = sum(pos)
    ap, prev_recall = 0.0, 0.0
    for k in range(1, len(order) + 1):
        prefix = order[:k]
        tp = sum(pos[i] for i in prefix)
        recall = tp / total
        ap += (recall - prev_recall) * (tp / k)
        prev_recall = recall
    return ap


def class_counts(pred, gt, cls):
    tp = fp = fn = 0
    for p, g in zip(pred, gt):
        p, g = p == cls, g == cls
        tp += p and g
        fp += p and not g
        fn += g and not p
    return tp, fp, fn


def seg_reference(scores, gt):
    """(mIoU, mAP, pixel accuracy, mF1) by counting pixel by pixel."""
    flat = [float(s) for s in np.asarray(scores, dtype=np.float64).reshape(-1)]
    g = [bool(v) for v in np.asarray(gt).reshape(-1)]
    threshold = sum(flat) / len(flat)
    pred = [s > threshold for s in flat]
    ious, f1s = [], []
    for cls in (True, False):
        tp, fp, fn = class_counts(pred, g, cls)
        ious.append(tp / (tp + fp + fn) if tp + fp + fn else 1.0)
        f1s.append(2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0)
    acc = sum(p == q for p, q in zip(pred, g)) / len(g)
    return sum(ious) / 2, ap_by_prefixes(flat, g), acc, sum(f1s) / 2


def all_binary_masks(h, w):
    """Every h x w boolean mask with at least one pixel of each class."""
    for bits in itertools.product((False, True), repeat=h * w):
        if any(bits) and not all(bits):
            yield np.array(bits, dtype=bool).reshape(h, w)


def trapezoid_by_hand(xs, ys):
    return sum((xs[i + 1] - xs[i]) * (ys[i] + ys[i + 1]) / 2 for i in range(len(xs) - 1))
