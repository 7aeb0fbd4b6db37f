"""Gradient-check registry and the scan timing benchmark.

Every check builds its inputs in float64 from a seed, so the same call always
checks the same numbers.
"""
from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable

import numpy as np

from . import ops
from .aggregators import CSIF, MCA, MSA, AggregatorConfig
from .autograd import Tensor
from .blocks import LIFMBlock, LIFMConfig, NCMambaBlock, NCMambaConfig
from .gradcheck import check_gradients, weighted_sum
from .metrics import dice_loss
from .network import TINY_CONFIG, CAMSNet
from .params import ParamStore
from .scan import selective_scan, selective_scan_chunked

TOLERANCE = {"op": 1e-6, "block": 1e-4, "network": 1e-4}


def _t(rng, *shape, positive=False, scale=1.0):
    x = rng.standard_normal(shape) * scale
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _scan_inputs(rng, b=2, length=7, d=3, n=4):
    return {
        "u": _t(rng, b, length, d),
        "delta": _t(rng, b, length, d, positive=True, scale=0.3),
        "B": _t(rng, b, length, n),
        "C": _t(rng, b, length, n),
        "A": Tensor(-np.exp(rng.standard_normal((d, n)) * 0.5), requires_grad=True, dtype=np.float64),
        "D": _t(rng, d),
    }


# Each builder returns (fn, inputs): ``fn`` recomputes a scalar from the inputs.
def _op_cases() -> dict[str, Callable]:
    def unary(f, positive=False, shape=(3, 4)):
        def build(rng):
            x = _t(rng, *shape, positive=positive)
            return (lambda: weighted_sum(f(x))), {"x": x}
        return build

    def binary(f, sa=(3, 4), sb=(4,), positive_b=False):
        def build(rng):
            a, b = _t(rng, *sa), _t(rng, *sb, positive=positive_b)
            return (lambda: weighted_sum(f(a, b))), {"a": a, "b": b}
        return build

    def linear(rng):
        x, w, b = _t(rng, 2, 3, 4), _t(rng, 4, 5), _t(rng, 5)
        return (lambda: weighted_sum(ops.linear(x, w, b))), {"x": x, "w": w, "b": b}

    def layer_norm(rng):
        x, w, b = _t(rng, 2, 3, 6), _t(rng, 6), _t(rng, 6)
        return (lambda: weighted_sum(ops.layer_norm(x, w, b))), {"x": x, "w": w, "b": b}

    def dropout(rng):
        x = _t(rng, 4, 5)
        # a fresh generator per call keeps the mask fixed across finite differences
        return (lambda: weighted_sum(ops.dropout(x, 0.3, True, np.random.default_rng(3)))), {"x": x}

    def split(rng):
        x = _t(rng, 3, 7)
        return (lambda: sum((weighted_sum(p, seed=i) for i, p in enumerate(ops.split(x, [2, 4, 1]))),
                            Tensor(0.0, dtype=np.float64))), {"x": x}

    def scan(kernel):
        def build(rng):
            inp = _scan_inputs(rng)
            names = ("u", "delta", "B", "C", "A", "D")
            return (lambda: weighted_sum(kernel(*(inp[k] for k in names)))), inp
        return build

    return {
        "add": binary(ops.add),
        "sub": binary(ops.sub),
        "mul": binary(ops.mul),
        "div": binary(ops.div, positive_b=True),
        "matmul": binary(ops.matmul, (2, 3, 4), (4, 5)),
        "linear": linear,
        "sigmoid": unary(ops.sigmoid),
        "silu": unary(ops.silu),
        "softplus": unary(ops.softplus),
        "exp": unary(ops.exp),
        "log": unary(ops.log, positive=True),
        "softmax": unary(lambda x: ops.softmax(x, axis=1), shape=(2, 5, 3)),
        "sum": unary(lambda x: ops.sum(x, axis=1, keepdims=True) * x),
        "mean": unary(lambda x: ops.mean(x, axis=0) * x),
        "reshape": unary(lambda x: ops.reshape(x, (2, 6)) * ops.reshape(x, (2, 6))),
        "permute": unary(lambda x: ops.permute(x, (2, 0, 1)), shape=(2, 3, 4)),
        "flip": unary(lambda x: ops.flip(x, 1) * x),
        "narrow": unary(lambda x: ops.narrow(x, 1, 1, 2)),
        "split": split,
        "avg_pool2d": unary(ops.avg_pool2d, shape=(1, 2, 4, 6)),
        "bilinear_upsample2d": unary(ops.bilinear_upsample2d, shape=(1, 2, 3, 4)),
        "layer_norm": layer_norm,
        "dropout": dropout,
        "selective_scan": scan(selective_scan),
        "selective_scan_chunked": scan(lambda *a: selective_scan_chunked(*a, chunk_size=3)),
    }


def generic_point(store: ParamStore, rng: np.random.Generator, scale: float = 0.5, only: str = "") -> None:
    """Redraw parameters (those whose name contains ``only``) from N(0, scale^2).

    Used for single blocks only; across a whole network redrawn weights
    saturate the softmax and the checks hit the round-off floor instead.

    At the default init the step sizes are tiny, so some gradients sit near
    the finite-difference round-off floor; a generic point keeps every group
    well above it.
    """
    for name, t in store.items():
        if only in name:
            t.data = rng.standard_normal(t.shape) * scale


def _store_case(make: Callable[[ParamStore], Callable[[Tensor], Tensor]], x_shape):
    def build(rng):
        store = ParamStore(seed=int(rng.integers(1 << 30)), dtype=np.float64)
        module = make(store)
        generic_point(store, rng)
        x = _t(rng, *x_shape)
        inputs = {"input": x, **dict(store.items())}
        return (lambda: weighted_sum(module(x))), inputs
    return build


def _block_cases() -> dict[str, Callable]:
    agg = AggregatorConfig("channel", 4, 6, height=2, width=2, chunk_size=2)
    return {
        "nc_mamba": _store_case(lambda s: NCMambaBlock(s, "blk", NCMambaConfig(3, 4, 2, 3, chunk_size=2)),
                                (2, 5, 3)),
        "lifm": _store_case(lambda s: LIFMBlock(s, "lifm", LIFMConfig.build(3, 4, chunk_size=2)), (2, 5, 3)),
        "mca": _store_case(lambda s: MCA(s, "mca", agg), (1, 4, 2, 2)),
        "mca_unshared": _store_case(lambda s: MCA(s, "mca", replace(agg, share_weights=False)), (1, 4, 2, 2)),
        "msa": _store_case(lambda s: MSA(s, "msa", replace(agg, kind="spatial")), (1, 4, 2, 2)),
        "csif": _store_case(lambda s: CSIF(s, "csif", agg), (1, 4, 2, 2)),
    }


# Four pools behind a 2x2 patch need sides divisible by 32. At 32x32 the bottleneck is
# 1x1, its upsampled map is constant, and the dec1 spatial aggregator then normalises
# zero-variance features; 64x64 is the smallest non-degenerate input.
GRADCHECK_NET = replace(TINY_CONFIG, height=64, width=64)


def _network_cases() -> dict[str, Callable]:
    def tiny(rng):
        cfg = GRADCHECK_NET
        net = CAMSNet(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        img = rng.standard_normal((1, 1, cfg.height, cfg.width))
        target = rng.integers(0, cfg.num_classes, size=(1, cfg.height, cfg.width))
        return (lambda: dice_loss(net(img, training=False), target)), dict(net.store.items())
    return {"tiny": tiny}


GRADCHECKS = {"op": _op_cases(), "block": _block_cases(), "network": _network_cases()}


def run_gradcheck(scope: str, name: str, seed: int = 0, max_entries: int | None = None,
                  ) -> tuple[dict[str, float], float]:
    """Run one registered check; returns (max relative error per input, tolerance)."""
    if scope not in GRADCHECKS:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    if name not in GRADCHECKS[scope]:
        raise ValueError(f"unknown {scope} check {name!r}; choose from {sorted(GRADCHECKS[scope])}")
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    fn, inputs = GRADCHECKS[scope][name](rng)
    if max_entries is None and scope == "network":
        max_entries = 6
    return check_gradients(fn, inputs, max_entries=max_entries, seed=seed), TOLERANCE[scope]


# -- scan benchmark ----------------------------------------------------------------

def bench_scan(lengths, repeats: int = 5, d_inner: int = 16, d_state: int = 16, batch: int = 1,
               kernel: str = "chunked", seed: int = 0) -> list[dict]:
    """Forward scan timings per length: mean, std and median milliseconds over ``repeats``.

    Each repeat times every length in turn, so a burst of machine load spreads
    over all lengths instead of skewing one of them.
    """
    if repeats <= 0:
        raise ValueError("repeats must be positive")
    fn = {"sequential": selective_scan,
          "chunked": selective_scan_chunked}.get(kernel)
    if fn is None:
        raise ValueError(f"unknown kernel {kernel!r}")
    rng = np.random.default_rng(seed)
    cases = []
    for length in lengths:
        cases.append((
            rng.standard_normal((batch, length, d_inner)),
            np.abs(rng.standard_normal((batch, length, d_inner))) * 0.1 + 1e-3,
            rng.standard_normal((batch, length, d_state)),
            rng.standard_normal((batch, length, d_state)),
            -np.exp(rng.standard_normal((d_inner, d_state))),
        ))
    for args in cases:      # warm-up at full size
        fn(*args)
    times = np.zeros((repeats, len(cases)))
    for r in range(repeats):
        for i, args in enumerate(cases):
            t0 = time.perf_counter()
            fn(*args)
            times[r, i] = 1e3 * (time.perf_counter() - t0)
    return [{"L": int(length), "mean_ms": float(col.mean()), "std_ms": float(col.std()),
             "median_ms": float(np.median(col))} for length, col in zip(lengths, times.T)]


def loglog_slope(lengths, times) -> float:
    """Least-squares slope of log(time) against log(length)."""
    return float(np.polyfit(np.log(lengths), np.log(times), 1)[0])
