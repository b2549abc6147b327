"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line through the ``criterion`` fixture; the
lines are printed in a summary section at the end of the pytest run.
"""

import itertools
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from attnlens import oracles
from attnlens.attribution import (AttributionOptions, assemble_full_attention, attribute,
                                  block_contribution, compose_stages, merge_rows,
                                  rollout_factors, sum_normalize)
from attnlens.demo import TARGET_TOKENS, run_corner_demo
from attnlens.errors import ContractError
from attnlens.evaluation import FRACTIONS, auc, seg_metrics
from attnlens.models import Model, ModelConfig, random_weights, toy_swin_config, toy_vit_config
from attnlens.selftest import gradient_relative_errors

from conftest import random_image

pytestmark = pytest.mark.acceptance


def test_gradient_fidelity(criterion):
    with criterion("[1] attention gradients match central differences (eps 1e-3, rel < 1e-4, < 60 s)") as c:
        rng = np.random.default_rng(0)
        start = time.perf_counter()
        worst, count = 0.0, 0
        for cfg in (toy_vit_config(), toy_swin_config()):
            model = Model(cfg, random_weights(cfg, 1))
            errs = gradient_relative_errors(model, random_image(cfg, rng),
                                            int(rng.integers(cfg.num_classes)))
            worst, count = max(worst, float(errs.max())), count + errs.size
        elapsed = time.perf_counter() - start
        c["msg"] = f"max rel err {worst:.2e} over {count} entries in {elapsed:.1f} s"
        assert count > 0
        assert worst < 1e-4
        assert elapsed < 60


def test_sum_normalize_invariant(criterion):
    with criterion("[2] sum_normalize sums to 1 on 1000 random matrices; zero flagged") as c:
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(1000):
            n, m = rng.integers(1, 20, size=2)
            a = rng.random((n, m)) * 10.0 ** rng.uniform(-6, 6)
            a[rng.random((n, m)) < 0.3] = 0
            if a.sum() == 0:
                a[0, 0] = 1.0
            out, degenerate = sum_normalize(a)
            assert not degenerate
            worst = max(worst, abs(out.sum() - 1))
        zero, degenerate = sum_normalize(np.zeros((4, 4)))
        c["msg"] = f"max |sum - 1| {worst:.1e}"
        assert worst < 1e-6
        assert degenerate and np.all(np.isfinite(zero)) and not zero.any()


def test_rollout_equivalence(criterion):
    with criterion("[3] unit-gradient, unscaled factors equal I + mean_h A on 100 ViT instances") as c:
        rng = np.random.default_rng(3)
        opts = AttributionOptions(use_gradients=False, use_std_scaling=False,
                                  use_sum_normalize=False)
        cfg = toy_vit_config()
        worst = 0.0
        for seed in range(100):
            model = Model(cfg, random_weights(cfg, seed))
            _, trace = model.forward(random_image(cfg, rng))
            stds = {s.block: s.std for s in trace.stats}
            for rec, f in zip(trace.records, rollout_factors(trace, normalize_rows=False)):
                mine = np.eye(5) + block_contribution(rec, stds[rec.block], 5, opts)
                direct = np.eye(5) + rec.attn[0].astype(np.float64).mean(0)
                worst = max(worst, np.abs(mine - f).max(), np.abs(direct - f).max())
        c["msg"] = f"max abs diff {worst:.1e}"
        assert worst < 1e-6


def test_merge_oracle(criterion):
    with criterion("[4] merge_rows equals M @ R on the Swin boundary, 100 random R") as c:
        rng = np.random.default_rng(4)
        model = Model(toy_swin_config(), random_weights(toy_swin_config(), 0))
        _, trace = model.forward(random_image(model.config, rng))
        mm = trace.merge_maps[0]
        m = oracles.averaging_matrix(mm.groups, 16)
        assert set(np.unique(m)) == {0.0, 0.25} and np.all(m.sum(1) == 1)
        worst = 0.0
        for _ in range(100):
            r = rng.random((16, int(rng.integers(1, 20)))) * 10
            worst = max(worst, np.abs(merge_rows(r, mm) - m @ r).max())
        c["msg"] = f"max abs diff {worst:.1e}"
        assert worst < 1e-6


def test_composition_oracle(criterion):
    with criterion("[5] compose_stages equals brute-force chain for all 8 flag combinations") as c:
        rng = np.random.default_rng(5)
        model = Model(toy_swin_config(), random_weights(toy_swin_config(), 5))
        trace = model.trace(random_image(model.config, rng))
        worst = 0.0
        for j in range(2):
            for flags in itertools.product((False, True), repeat=3):
                opts = AttributionOptions(start_stage=j, use_std_scaling=flags[0],
                                          use_sum_normalize=flags[1], use_gradients=flags[2])
                ref = oracles.compose_chain(trace, j, *flags)
                worst = max(worst, np.abs(compose_stages(trace, opts) - ref).max())
        c["msg"] = f"max abs diff {worst:.1e}"
        assert worst < 1e-6


def test_window_assembly_oracle(criterion):
    with criterion("[6] assembled attention reproduces windowed output, 100 instances") as c:
        rng = np.random.default_rng(6)
        cfg = toy_swin_config()
        worst, shifted = 0.0, 0
        for seed in range(25):
            w = random_weights(cfg, 100 + seed)
            _, trace = Model(cfg, w).forward(random_image(cfg, rng))
            for rec in trace.records:
                p = f"blocks.{rec.block}.attn."
                x = rec.attn_input.astype(np.float64)
                v = x @ w[p + "v.weight"].astype(np.float64) + w[p + "v.bias"]
                a_full, _ = assemble_full_attention(rec, x.shape[0], use_gradients=False)
                dh = cfg.head_dim
                dense = np.concatenate([a_full[h] @ v[:, h * dh:(h + 1) * dh]
                                        for h in range(cfg.heads)], axis=1)
                worst = max(worst, np.abs(dense - rec.attn_output).max())
                shifted += rec.shift > 0
        c["msg"] = f"max abs diff {worst:.1e} over 100 blocks ({shifted} shifted)"
        assert shifted > 0
        assert worst < 1e-5


def _random_config(rng):
    variant = str(rng.choice(["vit", "swin"]))
    heads = int(rng.integers(1, 4))
    common = dict(embed_dim=heads * int(rng.integers(2, 5)), heads=heads, patch_size=4,
                  num_classes=int(rng.integers(2, 5)), mlp_ratio=int(rng.integers(1, 3)))
    if variant == "vit":
        return ModelConfig(variant="vit", stage_depths=(int(rng.integers(1, 4)),),
                           image_size=4 * int(rng.integers(1, 4)), **common)
    stages = int(rng.integers(1, 3))
    return ModelConfig(variant="swin", stage_depths=tuple(int(d) for d in rng.integers(1, 3, stages)),
                       image_size=16, window_side=int(rng.choice([1, 2])), **common)


def test_nonnegativity_and_degeneracy(criterion):
    with criterion("[7] relevance >= 0 and zero gradients stay finite, 1000 random configurations") as c:
        rng = np.random.default_rng(7)
        min_entry, degenerate_ok = np.inf, 0
        for i in range(1000):
            cfg = _random_config(rng)
            model = Model(cfg, random_weights(cfg, i, scale=float(rng.uniform(0.01, 1.0))))
            trace = model.trace(random_image(cfg, rng), int(rng.integers(cfg.num_classes)))
            flags = rng.random(3) < 0.5
            opts = AttributionOptions(start_stage=int(rng.integers(cfg.num_stages)),
                                      use_std_scaling=bool(flags[0]),
                                      use_sum_normalize=bool(flags[1]),
                                      use_gradients=bool(flags[2]))
            r = compose_stages(trace, opts)
            assert np.all(np.isfinite(r))
            min_entry = min(min_entry, r.min(), attribute(trace, opts).grid.min())

            zeroed = replace(trace, records=[replace(rec, grad=np.zeros_like(rec.grad))
                                             for rec in trace.records])
            zopts = replace(opts, use_gradients=True)
            rz = compose_stages(zeroed, zopts)
            hm = attribute(zeroed, zopts)
            if np.all(np.isfinite(rz)) and rz.min() >= 0 and np.all(np.isfinite(hm.grid)) \
                    and hm.degenerate:
                degenerate_ok += 1
        c["msg"] = f"min entry {min_entry:.2e}; zero-gradient runs ok {degenerate_ok}/1000"
        assert min_entry >= 0
        assert degenerate_ok == 1000


def test_evaluation_oracles(criterion):
    with criterion("[8] seg_metrics matches enumerator on all 3x3 masks x 20 maps; AUC trapezoids") as c:
        rng = np.random.default_rng(8)
        maps = [rng.random((3, 3)) for _ in range(18)]
        maps += [np.round(rng.random((3, 3)) * 2) / 2, np.full((3, 3), 0.5)]   # ties
        worst, count, rejected = 0.0, 0, 0
        for bits in itertools.product((False, True), repeat=9):
            gt = np.array(bits).reshape(3, 3)
            for scores in maps:
                if gt.all() or not gt.any():
                    with pytest.raises(ContractError):
                        seg_metrics(scores, gt)
                    rejected += 1
                    continue
                m = seg_metrics(scores, gt)
                ref = oracles.seg_reference(scores, gt)
                worst = max(worst, np.abs(np.array([m.miou, m.map, m.pixel_acc, m.mf1]) - ref).max())
                count += 1

        xs = list(FRACTIONS)
        curves = {
            "linear": ([1 - i / 9 for i in range(10)], 0.45),
            "flat": ([1.0] * 10, 0.9),
            "step": ([1.0] * 5 + [0.0] * 5, 0.45),
        }
        auc_err = 0.0
        for ys, hand in curves.values():
            got = auc(xs, ys)
            auc_err = max(auc_err, abs(got - hand), abs(got - oracles.trapezoid_by_hand(xs, ys)))
        c["msg"] = (f"max metric diff {worst:.1e} over {count} pairs ({rejected} degenerate "
                    f"rejected); max AUC diff {auc_err:.1e}")
        assert count == 510 * 20 and rejected == 2 * 20
        assert worst < 1e-12
        assert auc_err < 1e-12


def _run_cli(*args):
    proc = subprocess.run([sys.executable, "-m", "attnlens", *map(str, args)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def test_cli_determinism(criterion, tmp_path):
    with criterion("[9] attribute and eval outputs are byte-identical across runs") as c:
        compared = 0
        for variant in ("vit", "swin"):
            toy = tmp_path / variant
            _run_cli("make-toy", "--variant", variant, "--seed", 9, "--samples", 6, "--out", toy)
            model = ["--config", toy / "config.json", "--weights", toy / "weights.bin"]
            for run in ("a", "b"):
                out = tmp_path / f"{variant}-{run}"
                _run_cli("attribute", *model, "--image", toy / "dataset" / "img_0001.pgm",
                         "--seed", 9, "--out", out / "attr")
                for mode in ("perturbation", "segmentation"):
                    _run_cli("eval", *model, "--dataset", toy / "dataset", "--mode", mode,
                             "--seed", 9, "--out", out / mode)
            first, second = tmp_path / f"{variant}-a", tmp_path / f"{variant}-b"
            files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
            assert files
            for rel in files:
                assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel
                compared += 1
        c["msg"] = f"{compared} output files identical"


def test_corner_demo(criterion):
    with criterion("[10] (non-gating) std scaling moves the argmax from the corner to the target group") as c:
        demo = run_corner_demo()
        side = demo.with_std.grid.shape[1]
        with_std = int(demo.with_std.argmax[0] * side + demo.with_std.argmax[1])
        without_std = int(demo.without_std.argmax[0] * side + demo.without_std.argmax[1])
        max_std = int(np.argmax(demo.token_std))
        ref_with = oracles.compose_chain(demo.trace, 0, True, True, True).sum(0)
        ref_without = oracles.compose_chain(demo.trace, 0, False, True, True).sum(0)
        c["msg"] = (f"argmax with std {with_std}, without std {without_std}, "
                    f"max-std token {max_std}, target share {demo.value_share[list(TARGET_TOKENS)].sum():.2f}")
        assert with_std in TARGET_TOKENS
        assert without_std == max_std
        np.testing.assert_allclose(demo.with_std.grid.reshape(-1), ref_with, atol=1e-9)
        np.testing.assert_allclose(demo.without_std.grid.reshape(-1), ref_without, atol=1e-9)
        assert int(np.argmax(ref_with)) == with_std and int(np.argmax(ref_without)) == without_std
