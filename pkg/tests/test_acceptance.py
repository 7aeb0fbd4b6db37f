"""Acceptance criteria 1-10; each test records one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines appear in the
terminal summary) or as a script, which exits 3 when any criterion fails.
"""
import math
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from camsnet.aggregators import AggregatorConfig, count_shared_vs_unshared
from camsnet.blocks import PAPER_TARGETS, LIFMBlock, LIFMConfig, NCMambaBlock, lifm_count, reference_configs
from camsnet.checks import GRADCHECKS, bench_scan, loglog_slope, run_gradcheck
from camsnet.data import PhantomSpec, Sample, generate_phantom
from camsnet.metrics import dice_score, hausdorff
from camsnet.network import (FULL_CONFIG, PAPER_TOTAL_M, TINY_CONFIG, CAMSNet, network_param_report,
                             stage_plan)
from camsnet.params import ParamStore
from camsnet.scan import selective_scan, selective_scan_chunked
from camsnet.train import RunConfig, evaluate_net, train

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str, seconds: float) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.1f}s]"
    RESULTS[n] = line
    print(line)
    assert ok, line


def test_c01_reference_parameter_counts():
    t0 = time.perf_counter()
    counts = {}
    for key, cfg in reference_configs().items():
        store = ParamStore()
        (LIFMBlock if isinstance(cfg, LIFMConfig) else NCMambaBlock)(store, key, cfg)
        counts[key] = store.total_count
    ok = counts == PAPER_TARGETS
    detail = ", ".join(f"{k} {v:,}/{PAPER_TARGETS[k]:,}" for k, v in counts.items())
    record(1, ok, detail, time.perf_counter() - t0)


def test_c02_full_configuration_total():
    t0 = time.perf_counter()
    rep = network_param_report(FULL_CONFIG, target_m=PAPER_TOTAL_M, sweep=(128, 256, 320, 352, 384))
    sweep = ", ".join(f"{r}:{n / 1e6:.2f}M" for r, n in rep.resolution_sweep.items())
    detail = (f"{rep.total:,} at 256x256 vs {PAPER_TOTAL_M} M +/- 5% ({rep.relative_error:+.2%}); "
              f"by input size {sweep}")
    record(2, rep.passed, detail, time.perf_counter() - t0)


@pytest.mark.slow
def test_c03_gradient_suite():
    t0 = time.perf_counter()
    worst, failed = {}, []
    for scope in ("op", "block", "network"):
        worst[scope] = 0.0
        for name in GRADCHECKS[scope]:
            report, tol = run_gradcheck(scope, name)
            for group, err in report.items():
                worst[scope] = max(worst[scope], err)
                if not err < tol:
                    failed.append(f"{scope}:{name}/{group}={err:.1e}")
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 300
    detail = (f"max rel. error op {worst['op']:.1e} (<1e-6), block {worst['block']:.1e} (<1e-4), "
              f"network {worst['network']:.1e} (<1e-4)")
    if failed:
        detail += f"; {len(failed)} groups over tolerance, e.g. {', '.join(failed[:3])}"
    record(3, ok, detail, elapsed)


def test_c04_chunked_scan_equals_reference():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        b, length, d, n = rng.integers(1, 4), rng.integers(1, 200), rng.integers(1, 9), rng.integers(1, 9)
        chunk = int(rng.integers(1, 70))
        args = (rng.standard_normal((b, length, d)),
                np.abs(rng.standard_normal((b, length, d))) * rng.choice([0.1, 1.0, 10.0]) + 1e-3,
                rng.standard_normal((b, length, n)), rng.standard_normal((b, length, n)),
                -np.exp(rng.standard_normal((d, n))), rng.standard_normal(d))
        ref = selective_scan(*args).data
        out = selective_scan_chunked(*args, chunk_size=chunk).data
        worst = max(worst, float(np.abs(out - ref).max()))
    record(4, worst < 1e-10, f"max |chunked - reference| = {worst:.1e} over 100 trials (< 1e-10)",
           time.perf_counter() - t0)


def test_c05_linear_scan_complexity():
    t0 = time.perf_counter()
    rows = bench_scan([1024, 2048, 4096, 8192], repeats=5)
    slope = loglog_slope([r["L"] for r in rows], [r["median_ms"] for r in rows])
    times = ", ".join(f"{r['L']}:{r['median_ms']:.1f}ms" for r in rows)
    record(5, 0.9 <= slope <= 1.2, f"log-log slope {slope:.3f} in [0.9, 1.2] ({times})", time.perf_counter() - t0)


def test_c06_shape_and_normalisation():
    t0 = time.perf_counter()
    parts, ok = [], True
    for size in (32, 64, 128):
        net = CAMSNet(replace(TINY_CONFIG, height=size, width=size), seed=0)
        x = np.random.default_rng(size).standard_normal((1, 1, size, size)).astype(np.float32)
        p = net(x).data
        dev = float(np.abs(p.sum(axis=1) - 1.0).max())
        ok &= p.shape == (1, 5, size, size) and dev <= 1e-5
        parts.append(f"{size}^2 -> {p.shape} sum dev {dev:.1e}")
    record(6, ok, "; ".join(parts), time.perf_counter() - t0)


def test_c07_weight_sharing_economy():
    t0 = time.perf_counter()
    ok, checked = True, 0
    for cfg in (FULL_CONFIG, TINY_CONFIG):
        for st in stage_plan(cfg):
            kinds = [("channel", None, None)]
            if st.kind == "csif":
                kinds.append(("spatial", st.height, st.width))
            for kind, h, w in kinds:
                agg = AggregatorConfig(kind, st.c_in, st.c_out, height=h, width=w)
                shared, unshared = count_shared_vs_unshared(agg)
                width = st.height * st.width if kind == "spatial" else None
                lifm = LIFMConfig.build(width or st.c_in, width or st.c_out)
                ok &= unshared - shared == sum(lifm_count(lifm).values())
                checked += 1
    shared, unshared = count_shared_vs_unshared(AggregatorConfig("channel", 32, 64))
    ok &= unshared - shared == PAPER_TARGETS["lifm"]
    record(7, ok, f"unshared - shared = one LIFM for {checked} aggregators; MCA 32->64 delta "
                  f"{unshared - shared:,}", time.perf_counter() - t0)


def _brute_dice(p, g, k):
    ps = {(i, j) for i in range(16) for j in range(16) if p[i, j] == k}
    gs = {(i, j) for i in range(16) for j in range(16) if g[i, j] == k}
    return 1.0 if not ps and not gs else 2 * len(ps & gs) / (len(ps) + len(gs))


def _brute_hd(p, g, k):
    ps, gs = np.argwhere(p == k), np.argwhere(g == k)
    if not len(ps) or not len(gs):
        return math.nan
    d = [[math.dist(a, b) for b in gs] for a in ps]
    return max(max(min(r) for r in d), max(min(c) for c in zip(*d)))


def test_c08_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    dice_ok, hd_err = True, 0.0
    for _ in range(100):
        fill = rng.choice([0.05, 0.2, 0.6])
        p, g = (np.where(rng.random((16, 16)) < fill, rng.integers(1, 5, (16, 16)), 0) for _ in range(2))
        for k in range(1, 5):
            dice_ok &= dice_score(p, g, k) == _brute_dice(p, g, k)
            a, b = hausdorff(p, g, k), _brute_hd(p, g, k)
            if math.isnan(a) or math.isnan(b):
                hd_err = max(hd_err, 0.0 if math.isnan(a) and math.isnan(b) else math.inf)
            else:
                hd_err = max(hd_err, abs(a - b))
    record(8, dice_ok and hd_err <= 1e-9, f"Dice exact: {dice_ok}; max HD error {hd_err:.1e} (<= 1e-9)",
           time.perf_counter() - t0)


@pytest.mark.slow
def test_c09_tiny_config_overfits_phantoms():
    t0 = time.perf_counter()
    spec = PhantomSpec(size=TINY_CONFIG.height, seed=0)
    samples = [Sample(f"p{i}", *generate_phantom(spec, i), fold=0) for i in range(8)]
    # optimizer defaults (betas 0.5/0.55, halving every 100 epochs); lr raised for a 500-step budget
    run = RunConfig(network=TINY_CONFIG, lr=3e-3, epochs=500, batch_size=8, max_steps=500, eval_every=50)
    result = train(run, samples)
    hit = next((e for e in result.evals if e["dice"]["avg"] >= 0.90), None)
    final = evaluate_net(result.net, samples).mean_dice
    elapsed = time.perf_counter() - t0
    ok = hit is not None and elapsed < 900
    where = f"first >= 0.90 at step {hit['step']}" if hit else "never reached 0.90"
    record(9, ok, f"mean foreground Dice {final:.3f} after {len(result.records)} steps; {where}", elapsed)


def test_c10_ablation_structure():
    t0 = time.perf_counter()
    base = RunConfig(network=TINY_CONFIG)
    rows = {
        "MCA only": base.with_ablation(msa_on=False, bidirectional=False),
        "+MSA": base.with_ablation(msa_on=True, bidirectional=False),
        "+bidirectional": base.with_ablation(msa_on=True, bidirectional=True, share_weights=False),
        "+sharing": base.with_ablation(msa_on=True, bidirectional=True, share_weights=True),
        "+sharing -pos_embed": base.with_ablation(msa_on=True, bidirectional=True, share_weights=True,
                                                  pos_embed=False),
    }
    x = np.random.default_rng(10).standard_normal((1, 1, 32, 32))
    counts, outs = {}, {}
    for name, run in rows.items():
        net = CAMSNet(run.network, seed=0, dtype=np.float64)
        counts[name], outs[name] = net.store.total_count, net(x).data
    c = counts
    directions = (c["+MSA"] > c["MCA only"] and c["+bidirectional"] > c["+MSA"]
                  and c["+sharing"] < c["+bidirectional"] and c["+sharing"] == c["+MSA"]
                  and c["+sharing -pos_embed"] == c["+sharing"])
    names = list(outs)
    distinct = all(not np.allclose(outs[a], outs[b]) for i, a in enumerate(names) for b in names[i + 1:])
    detail = "; ".join(f"{k} {v:,}" for k, v in c.items()) + f"; outputs pairwise distinct: {distinct}"
    record(10, directions and distinct, detail, time.perf_counter() - t0)


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(0 if code == 0 else 3)
