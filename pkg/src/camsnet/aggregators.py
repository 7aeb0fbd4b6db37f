"""Channel and spatial Mamba aggregators and their fusion module.

* MCA scans the H*W positions as a sequence whose features are the channels.
* MSA scans the channels as a sequence whose features are the H*W positions,
  then maps the channel count with a per-position linear layer.
* CS-IF adds the dropout-regularised outputs of one MCA and one MSA.

Both aggregators can run bidirectionally: the LIFM block is applied to the
sequence and to its reversal, the reversed result is flipped back and the two
are summed. With ``share_weights`` the two directions use one LIFM.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from . import ops
from .autograd import ShapeError, Tensor
from .blocks import DEFAULT_LAYOUT, LIFMBlock, LIFMConfig, Layout, Linear, Module
from .params import ParamStore, named_rng

UNIDIRECTIONAL = "unidirectional"
BIDIRECTIONAL = "bidirectional"


@dataclass(frozen=True)
class AggregatorConfig:
    kind: str                       # "channel" or "spatial"
    c_in: int
    c_out: int
    height: int | None = None       # spatial aggregator only: fixes L = H * W
    width: int | None = None
    scan_mode: str = BIDIRECTIONAL
    share_weights: bool = True
    dropout_p: float = 0.1
    residual_both_directions: bool = False
    layout: Layout = DEFAULT_LAYOUT
    chunk_size: int | None = 32

    def __post_init__(self):
        if self.kind not in ("channel", "spatial"):
            raise ValueError(f"unknown aggregator kind {self.kind!r}")
        if self.scan_mode not in (UNIDIRECTIONAL, BIDIRECTIONAL):
            raise ValueError(f"unknown scan mode {self.scan_mode!r}")
        if self.c_in <= 0 or self.c_out <= 0:
            raise ValueError("channel counts must be positive")
        if self.kind == "spatial" and not (self.height and self.width):
            raise ValueError("the spatial aggregator needs H and W at construction")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @property
    def bidirectional(self) -> bool:
        return self.scan_mode == BIDIRECTIONAL

    @property
    def length(self) -> int | None:
        return None if self.height is None else self.height * self.width


def to_sequence(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H*W, C), positions flattened row-major."""
    b, c, h, w = x.shape
    return ops.permute(x, (0, 2, 3, 1)).reshape(b, h * w, c)


def from_sequence(s: Tensor, h: int, w: int) -> Tensor:
    """(B, H*W, C) -> (B, C, H, W); inverse of :func:`to_sequence`."""
    b, length, c = s.shape
    if length != h * w:
        raise ShapeError(f"sequence length {length} != {h}x{w}")
    return ops.permute(s.reshape(b, h, w, c), (0, 3, 1, 2))


def to_channel_sequence(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C, H*W)."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w)


def from_channel_sequence(s: Tensor, h: int, w: int) -> Tensor:
    b, c, length = s.shape
    if length != h * w:
        raise ShapeError(f"feature width {length} != {h}x{w}")
    return s.reshape(b, c, h, w)


class _Scanner(Module):
    """LIFM over a (B, L, F) sequence in one or both directions, plus a residual linear."""

    def __init__(self, store: ParamStore, name: str, cfg: AggregatorConfig, lifm_cfg: LIFMConfig,
                 residual_in: int, residual_out: int):
        super().__init__(store, name)
        self.cfg = cfg
        if cfg.bidirectional and not cfg.share_weights:
            self.lifm = LIFMBlock(store, f"{name}.lifm_fwd", lifm_cfg)
            self.lifm_bwd = LIFMBlock(store, f"{name}.lifm_bwd", lifm_cfg)
        else:
            self.lifm = LIFMBlock(store, f"{name}.lifm", lifm_cfg)
            self.lifm_bwd = self.lifm
        self.residual = Linear(store, f"{name}.residual", residual_in, residual_out)

    def scan(self, s: Tensor) -> Tensor:
        out = self.lifm(s)
        if self.cfg.bidirectional:
            out = out + ops.flip(self.lifm_bwd(ops.flip(s, 1)), 1)
        res = self.residual(s)
        if self.cfg.bidirectional and self.cfg.residual_both_directions:
            # a per-position linear commutes with the flip, so the reversed pass equals res
            res = res + ops.flip(self.residual(ops.flip(s, 1)), 1)
        return out + res


class MCA(_Scanner):
    """Channel aggregator: ``out = unflatten(LIFM(s) [+ flip LIFM flip s] + W_c s)``."""

    def __init__(self, store: ParamStore, name: str, cfg: AggregatorConfig):
        if cfg.kind != "channel":
            cfg = replace(cfg, kind="channel")
        lifm_cfg = LIFMConfig.build(cfg.c_in, cfg.c_out, layout=cfg.layout, chunk_size=cfg.chunk_size)
        super().__init__(store, name, cfg, lifm_cfg, cfg.c_in, cfg.c_out)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.c_in:
            raise ShapeError(f"{self.name}: expected (B, {self.cfg.c_in}, H, W), got {x.shape}")
        h, w = x.shape[2:]
        return from_sequence(self.scan(to_sequence(x)), h, w)


class MSA(_Scanner):
    """Spatial aggregator: ``out = W_ci unflatten(LIFM(s) [+ flip LIFM flip s] + W_s s)``.

    The LIFM feature width is the number of positions, so H and W are fixed
    when the module is built.
    """

    def __init__(self, store: ParamStore, name: str, cfg: AggregatorConfig):
        if cfg.kind != "spatial":
            raise ValueError("MSA needs a spatial AggregatorConfig")
        length = cfg.length
        lifm_cfg = LIFMConfig.build(length, length, layout=cfg.layout, chunk_size=cfg.chunk_size)
        super().__init__(store, name, cfg, lifm_cfg, length, length)
        self.w_ci = Linear(store, f"{name}.w_ci", cfg.c_in, cfg.c_out)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.c_in:
            raise ShapeError(f"{self.name}: expected (B, {cfg.c_in}, H, W), got {x.shape}")
        if x.shape[2:] != (cfg.height, cfg.width):
            raise ShapeError(
                f"{self.name}: built for {cfg.height}x{cfg.width} positions, got {x.shape[2]}x{x.shape[3]}"
            )
        t = from_channel_sequence(self.scan(to_channel_sequence(x)), cfg.height, cfg.width)
        return ops.permute(self.w_ci(ops.permute(t, (0, 2, 3, 1))), (0, 3, 1, 2))


class CSIF(Module):
    """``dropout(MCA(x)) + dropout(MSA(x))`` with a private dropout stream per branch."""

    def __init__(self, store: ParamStore, name: str, cfg: AggregatorConfig, seed: int | None = None):
        super().__init__(store, name)
        self.cfg = cfg
        self.mca = MCA(store, f"{name}.mca", replace(cfg, kind="channel"))
        self.msa = MSA(store, f"{name}.msa", replace(cfg, kind="spatial"))
        seed = store.seed if seed is None else seed
        self.rng_mca = named_rng(seed, f"{name}.mca", stream=1)
        self.rng_msa = named_rng(seed, f"{name}.msa", stream=1)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        a = self.mca(x)
        b = self.msa(x)
        if a.shape != b.shape:
            raise ShapeError(f"{self.name}: MCA output {a.shape} != MSA output {b.shape}")
        p = self.cfg.dropout_p
        return ops.dropout(a, p, training, self.rng_mca) + ops.dropout(b, p, training, self.rng_msa)


def build_aggregator(store: ParamStore, name: str, cfg: AggregatorConfig):
    return (MCA if cfg.kind == "channel" else MSA)(store, name, cfg)


def count_shared_vs_unshared(cfg: AggregatorConfig) -> tuple[int, int]:
    """Parameter counts of ``cfg`` built with and without bidirectional weight sharing."""
    counts = []
    for share in (True, False):
        store = ParamStore()
        build_aggregator(store, "agg", replace(cfg, share_weights=share))
        counts.append(store.total_count)
    return counts[0], counts[1]
