"""Invariant checks run by ``attnlens selftest``.

Each check compares a pipeline quantity against a reference from
:mod:`attnlens.oracles` (or finite differences) and returns a
:class:`CheckResult`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from . import oracles
from .attribution import (AttributionOptions, assemble_full_attention, attribute,
                          compose_stages, merge_rows, rollout_factors,
                          stage_relevance)
from .models import Model, forward
from .tensor import finite_diff_grad

GRAD_REL_TOL = 1e-4
GRAD_FLOOR = 1e-6
FD_EPS = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def random_image(cfg, rng):
    return rng.random((cfg.image_size, cfg.image_size, cfg.channels)).astype(np.float32)


def gradient_relative_errors(model: Model, image, class_index: int):
    """Backward vs central differences on every attention entry, in float64.

    Returns the relative errors ``|g - fd| / max(|g|, |fd|)`` of the entries
    with ``|g| > GRAD_FLOOR``.
    """
    cfg, w = model.config, model.weights
    trace = model.trace(image, class_index, dtype=np.float64)
    errs = []
    for rec in trace.records:
        def f(a, block=rec.block):
            logits, _ = forward(cfg, w, image, dtype=np.float64, attn_override={block: a})
            return logits[class_index]

        fd = finite_diff_grad(f, rec.attn, FD_EPS)
        g = rec.grad
        keep = np.abs(g) > GRAD_FLOOR
        errs.append(np.abs(g - fd)[keep] / np.maximum(np.abs(g), np.abs(fd))[keep])
    return np.concatenate(errs) if errs else np.zeros(0)


def check_gradients(model, rng):
    image = random_image(model.config, rng)
    cls = int(rng.integers(model.config.num_classes))
    errs = gradient_relative_errors(model, image, cls)
    worst = float(errs.max()) if errs.size else 0.0
    return CheckResult("gradient fidelity", worst < GRAD_REL_TOL,
                       f"max rel err {worst:.2e} over {errs.size} entries")


def check_attention_rows(model, rng):
    _, trace = model.forward(random_image(model.config, rng))
    worst = max(float(np.abs(r.attn.sum(-1) - 1).max()) for r in trace.records)
    return CheckResult("attention rows sum to 1", worst < 1e-5, f"max deviation {worst:.1e}")


def check_window_assembly(model, rng):
    _, trace = model.forward(random_image(model.config, rng))
    worst = 0.0
    for rec in trace.records:
        dense = oracles.windowed_output_dense(rec, model.weights, model.config)
        worst = max(worst, float(np.abs(dense - rec.attn_output).max()))
    return CheckResult("window assembly", worst < 1e-5, f"max abs diff {worst:.1e}")


def check_merge_maps(model, rng):
    cfg = model.config
    if cfg.num_stages < 2:
        return CheckResult("merge oracle", True, "single stage, nothing to merge")
    _, trace = model.forward(random_image(cfg, rng))
    worst = 0.0
    for mm in trace.merge_maps:
        n = cfg.tokens_at(mm.boundary)
        mm.validate(n)
        m = oracles.averaging_matrix(mm.groups, n)
        for _ in range(10):
            r = rng.random((n, n))
            worst = max(worst, float(np.abs(merge_rows(r, mm) - m @ r).max()))
    return CheckResult("merge oracle", worst < 1e-6, f"max abs diff {worst:.1e}")


def check_composition(model, rng):
    cfg = model.config
    trace = model.trace(random_image(cfg, rng))
    worst = 0.0
    for j in range(cfg.num_stages):
        for flags in itertools.product((False, True), repeat=3):
            opts = AttributionOptions(start_stage=j, use_std_scaling=flags[0],
                                      use_sum_normalize=flags[1], use_gradients=flags[2])
            got = compose_stages(trace, opts)
            ref = oracles.compose_chain(trace, j, *flags)
            worst = max(worst, float(np.abs(got - ref).max()))
    return CheckResult("composition oracle", worst < 1e-6, f"max abs diff {worst:.1e}")


def check_rollout(model, rng):
    cfg = model.config
    if cfg.variant != "vit":
        return CheckResult("rollout equivalence", True, "not a ViT, skipped")
    _, trace = model.forward(random_image(cfg, rng))
    opts = AttributionOptions(use_gradients=False, use_std_scaling=False, use_sum_normalize=False)
    n = cfg.tokens_at(0)
    worst = 0.0
    for rec, f in zip(trace.records, rollout_factors(trace, normalize_rows=False)):
        a_full, _ = assemble_full_attention(rec, n, use_gradients=False)
        single = replace(trace, records=[rec])
        mine = stage_relevance(single, 0, opts)
        worst = max(worst, float(np.abs(mine - f).max()),
                    float(np.abs(np.eye(n) + a_full.mean(0) - f).max()))
    return CheckResult("rollout equivalence", worst < 1e-6, f"max abs diff {worst:.1e}")


def check_degenerate(model, rng):
    cfg = model.config
    trace = model.trace(random_image(cfg, rng))
    for rec in trace.records:
        rec.grad = np.zeros_like(rec.grad)
    ok, bad = True, []
    for j in range(cfg.num_stages):
        for flags in itertools.product((False, True), repeat=2):
            opts = AttributionOptions(start_stage=j, use_std_scaling=flags[0],
                                      use_sum_normalize=flags[1])
            r = compose_stages(trace, opts)
            hm = attribute(trace, opts)
            if not (np.all(np.isfinite(r)) and np.all(r >= 0) and hm.degenerate):
                ok = False
                bad.append((j, flags))
    return CheckResult("zero-gradient degeneracy", ok, "ok" if ok else f"failed for {bad}")


def check_nonnegative(model, rng):
    cfg = model.config
    trace = model.trace(random_image(cfg, rng))
    worst = 0.0
    for j in range(cfg.num_stages):
        for flags in itertools.product((False, True), repeat=3):
            opts = AttributionOptions(start_stage=j, use_std_scaling=flags[0],
                                      use_sum_normalize=flags[1], use_gradients=flags[2])
            worst = min(worst, float(compose_stages(trace, opts).min()))
    return CheckResult("relevance nonnegative", worst >= 0, f"min entry {worst:.2e}")


CHECKS = (check_attention_rows, check_window_assembly, check_merge_maps, check_composition,
          check_rollout, check_nonnegative, check_degenerate, check_gradients)


def run_selftest(models, seed=0):
    rng = np.random.default_rng(seed)
    results = []
    for label, model in models:
        for check in CHECKS:
            res = check(model, rng)
            res.name = f"{label}: {res.name}"
            results.append(res)
    return results
