"""U-shaped segmentation network built only from Mamba aggregators.

Layout for the five-stage default (channels 64..1024)::

    patch embed (2x2, linear) + sinusoidal positions
    enc1 MCA  64->64      pool
    enc2 MCA  64->128     pool
    enc3 MCA 128->256     pool
    enc4 CS-IF 256->512   pool
    bottleneck CS-IF 512->1024
    up, dec1 CS-IF 1024->512, + enc4
    up, dec2 MCA 512->256,    + enc3
    up, dec3 MCA 256->128,    + enc2
    up, dec4 MCA 128->64,     + enc1
    up, per-position linear 64->classes, softmax over classes

Skips are additive, so each decoder stage runs its aggregator before adding the
mirrored encoder output (the channel counts only agree after the aggregator).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .aggregators import BIDIRECTIONAL, CSIF, MCA, AggregatorConfig
from .autograd import ShapeError, Tensor, as_tensor
from .blocks import (DEFAULT_LAYOUT, BiasFlags, Layout, Linear, Module, lifm_count, linear_count,
                     LIFMConfig)
from .params import ParamStore

PAPER_TOTAL_M = 18.56


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 5
    patch_size: int = 2
    encoder_channels: tuple[int, ...] = (64, 128, 256, 512, 1024)
    decoder_channels: tuple[int, ...] = (512, 256, 128, 64)
    csif_stages: tuple[str, ...] = ("enc4", "bottleneck", "dec1")
    msa_on: bool = True
    use_pos_embed: bool = True
    scan_mode: str = BIDIRECTIONAL
    share_weights: bool = True
    height: int = 256
    width: int = 256
    dropout_p: float = 0.1
    e1_identity: bool = False
    residual_both_directions: bool = False
    layout: Layout = DEFAULT_LAYOUT
    chunk_size: int | None = 32

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        object.__setattr__(self, "csif_stages", tuple(self.csif_stages))
        enc, dec = self.encoder_channels, self.decoder_channels
        if len(enc) < 2 or any(b <= a for a, b in zip(enc, enc[1:])):
            raise ValueError(f"encoder_channels must be strictly increasing, got {enc}")
        if dec != tuple(reversed(enc[:-1])):
            raise ValueError(f"decoder_channels must mirror the encoder: expected {tuple(reversed(enc[:-1]))}, got {dec}")
        if self.patch_size != 2:
            raise ValueError("only 2x2 patches are supported")
        if self.use_pos_embed and enc[0] % 2:
            raise ValueError(f"sinusoidal embedding needs an even embed dim, got {enc[0]}")
        m = self.divisor
        if self.height % m or self.width % m:
            raise ValueError(f"input {self.height}x{self.width} must be divisible by {m}")

    @property
    def num_pools(self) -> int:
        return len(self.encoder_channels) - 1

    @property
    def divisor(self) -> int:
        return self.patch_size * 2 ** self.num_pools

    @property
    def embed_dim(self) -> int:
        return self.encoder_channels[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("encoder_channels", "decoder_channels", "csif_stages"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if isinstance(d.get("layout"), dict):
            lay = dict(d["layout"])
            lay["bias"] = BiasFlags(**lay.get("bias", {}))
            d["layout"] = Layout(**lay)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown network config fields: {sorted(unknown)}")
        return cls(**d)


FULL_CONFIG = NetworkConfig()
TINY_CONFIG = NetworkConfig(encoder_channels=(4, 8, 12, 16, 20), decoder_channels=(16, 12, 8, 4),
                            height=32, width=32)
DESK_CONFIG = NetworkConfig(encoder_channels=(16, 32, 64, 128, 256), decoder_channels=(128, 64, 32, 16),
                            height=64, width=64)


@dataclass(frozen=True)
class StagePlan:
    name: str
    kind: str           # "mca", "csif" or "identity"
    c_in: int
    c_out: int
    height: int
    width: int
    skip: str | None = None


def stage_plan(cfg: NetworkConfig) -> list[StagePlan]:
    enc, n = cfg.encoder_channels, cfg.num_pools
    h, w = cfg.height // cfg.patch_size, cfg.width // cfg.patch_size

    def kind(name):
        if name in cfg.csif_stages and cfg.msa_on:
            return "csif"
        return "mca"

    plan = []
    c_prev = enc[0]
    for i in range(n):
        name = f"enc{i + 1}"
        k = "identity" if (i == 0 and cfg.e1_identity) else kind(name)
        plan.append(StagePlan(name, k, c_prev, enc[i], h, w))
        c_prev = enc[i]
        h, w = h // 2, w // 2
    plan.append(StagePlan("bottleneck", kind("bottleneck"), c_prev, enc[n], h, w))
    c_prev = enc[n]
    for j, c in enumerate(cfg.decoder_channels):
        h, w = h * 2, w * 2
        name = f"dec{j + 1}"
        plan.append(StagePlan(name, kind(name), c_prev, c, h, w, skip=f"enc{n - j}"))
        c_prev = c
    return plan


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    """(length, dim) table with PE[p, 2k] = sin(p / 10000^(2k/dim)), PE[p, 2k+1] = cos(.)."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


def pos_embed(features: Tensor) -> Tensor:
    """Add the fixed sinusoidal table over row-major positions to (B, C, H, W) features."""
    features = as_tensor(features)
    b, c, h, w = features.shape
    table = sinusoidal_table(h * w, c).T.reshape(1, c, h, w).astype(features.dtype)
    return features + Tensor(table)


class PatchEmbed(Module):
    """Flatten each non-overlapping 2x2 patch (channel-major) and project it linearly."""

    def __init__(self, store: ParamStore, name: str, in_channels: int, dim: int, patch: int = 2):
        super().__init__(store, name)
        self.patch = patch
        self.proj = Linear(store, f"{name}.proj", in_channels * patch * patch, dim)

    def __call__(self, img: Tensor) -> Tensor:
        b, c, h, w = img.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"{self.name}: spatial dims {h}x{w} are not multiples of {p}")
        x = img.reshape(b, c, h // p, p, w // p, p)
        x = ops.permute(x, (0, 2, 4, 1, 3, 5)).reshape(b, h // p, w // p, c * p * p)
        return ops.permute(self.proj(x), (0, 3, 1, 2))


class CAMSNet(Module):
    def __init__(self, cfg: NetworkConfig, store: ParamStore | None = None, seed: int = 0,
                 dtype=np.float32):
        store = store if store is not None else ParamStore(seed=seed, dtype=dtype)
        super().__init__(store, "")
        self.cfg = cfg
        self.plan = stage_plan(cfg)
        self.embed = PatchEmbed(store, "embed", cfg.in_channels, cfg.embed_dim, cfg.patch_size)
        self.stages: dict[str, object] = {}
        for st in self.plan:
            self.stages[st.name] = self._build_stage(st)
        self.head = Linear(store, "head", cfg.decoder_channels[-1], cfg.num_classes)

    def _build_stage(self, st: StagePlan):
        if st.kind == "identity":
            return None
        cfg = self.cfg
        agg = AggregatorConfig(
            "channel", st.c_in, st.c_out, st.height, st.width, cfg.scan_mode, cfg.share_weights,
            cfg.dropout_p, cfg.residual_both_directions, cfg.layout, cfg.chunk_size,
        )
        if st.kind == "csif":
            return CSIF(self.store, st.name, agg)
        return MCA(self.store, st.name, agg)

    def _stage(self, name: str, x: Tensor, training: bool) -> Tensor:
        mod = self.stages[name]
        if mod is None:
            return x
        try:
            return mod(x, training=training)
        except ShapeError as e:
            raise ShapeError(f"stage {name}: {e}") from None

    def features(self, img, training: bool = False) -> Tensor:
        """Decoder output (B, C1, H/2, W/2) before the final upsample and head."""
        img = as_tensor(img)
        cfg = self.cfg
        if img.ndim != 4 or img.shape[1] != cfg.in_channels:
            raise ShapeError(f"input must be (B, {cfg.in_channels}, H, W), got {img.shape}")
        if img.shape[2:] != (cfg.height, cfg.width):
            raise ShapeError(
                f"network built for {cfg.height}x{cfg.width} input (MSA widths depend on it), got "
                f"{img.shape[2]}x{img.shape[3]}"
            )
        x = self.embed(img)
        if cfg.use_pos_embed:
            x = pos_embed(x)
        skips = {}
        n = cfg.num_pools
        for i in range(n):
            name = f"enc{i + 1}"
            x = self._stage(name, x, training)
            skips[name] = x
            x = ops.avg_pool2d(x)
        x = self._stage("bottleneck", x, training)
        for j in range(n):
            name = f"dec{j + 1}"
            x = self._stage(name, ops.bilinear_upsample2d(x), training)
            x = x + skips[f"enc{n - j}"]
        return x

    def logits(self, img, training: bool = False) -> Tensor:
        x = ops.bilinear_upsample2d(self.features(img, training))
        return ops.permute(self.head(ops.permute(x, (0, 2, 3, 1))), (0, 3, 1, 2))

    def __call__(self, img, training: bool = False) -> Tensor:
        """Per-pixel class probabilities (B, num_classes, H, W)."""
        return ops.softmax(self.logits(img, training), axis=1)


# -- parameter reporting ---------------------------------------------------------

def _mca_count(c_in, c_out, cfg: NetworkConfig) -> int:
    lifm = sum(lifm_count(LIFMConfig.build(c_in, c_out, layout=cfg.layout)).values())
    copies = 2 if cfg.scan_mode == BIDIRECTIONAL and not cfg.share_weights else 1
    return copies * lifm + linear_count(c_in, c_out)


def _msa_count(c_in, c_out, length, cfg: NetworkConfig) -> int:
    lifm = sum(lifm_count(LIFMConfig.build(length, length, layout=cfg.layout)).values())
    copies = 2 if cfg.scan_mode == BIDIRECTIONAL and not cfg.share_weights else 1
    return copies * lifm + linear_count(length, length) + linear_count(c_in, c_out)


def analytic_stage_counts(cfg: NetworkConfig) -> dict[str, int]:
    """Per-stage parameter counts from the closed-form block formulas (no network is built)."""
    out = {"embed": linear_count(cfg.in_channels * cfg.patch_size ** 2, cfg.embed_dim)}
    for st in stage_plan(cfg):
        if st.kind == "identity":
            out[st.name] = 0
            continue
        n = _mca_count(st.c_in, st.c_out, cfg)
        if st.kind == "csif":
            n += _msa_count(st.c_in, st.c_out, st.height * st.width, cfg)
        out[st.name] = n
    out["head"] = linear_count(cfg.decoder_channels[-1], cfg.num_classes)
    return out


@dataclass
class ParamReport:
    config: NetworkConfig
    stages: dict[str, int]
    total: int
    target_m: float | None = None
    tolerance: float = 0.05
    resolution_sweep: dict[int, int] = field(default_factory=dict)

    @property
    def relative_error(self) -> float | None:
        if self.target_m is None:
            return None
        return self.total / (self.target_m * 1e6) - 1.0

    @property
    def passed(self) -> bool | None:
        if self.target_m is None:
            return None
        return abs(self.relative_error) <= self.tolerance

    def to_text(self) -> str:
        w = max(len(k) for k in self.stages)
        lines = [f"{'stage':<{w}}  {'params':>12}"]
        lines += [f"{k:<{w}}  {v:>12,}" for k, v in self.stages.items()]
        lines.append(f"{'total':<{w}}  {self.total:>12,}  ({self.total / 1e6:.2f} M)")
        if self.target_m is not None:
            verdict = "PASS" if self.passed else "FAIL"
            lines.append(
                f"target {self.target_m:.2f} M +/- {self.tolerance:.0%}: {self.relative_error:+.2%}  {verdict}"
            )
        if self.resolution_sweep:
            lines.append("total vs input size (spatial-aggregator widths scale with H*W):")
            lines += [f"  {r}x{r}: {n / 1e6:.2f} M" for r, n in self.resolution_sweep.items()]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"stages": self.stages, "total": self.total, "target_m": self.target_m,
                "relative_error": self.relative_error, "passed": self.passed,
                "resolution_sweep": {str(k): v for k, v in self.resolution_sweep.items()}}


def network_param_report(cfg: NetworkConfig, net: CAMSNet | None = None, target_m: float | None = None,
                         sweep: tuple[int, ...] = ()) -> ParamReport:
    """Per-stage counts of a built network (or the closed form if ``net`` is None)."""
    if net is None:
        stages = analytic_stage_counts(cfg)
    else:
        stages = {"embed": net.store.count("embed")}
        stages.update({st.name: net.store.count(st.name) for st in net.plan})
        stages["head"] = net.store.count("head")
    res = {}
    for r in sweep:
        try:
            res[r] = sum(analytic_stage_counts(replace(cfg, height=r, width=r)).values())
        except ValueError:
            continue
    return ParamReport(cfg, stages, sum(stages.values()), target_m, resolution_sweep=res)


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(net: CAMSNet, path, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one CTF file per parameter into directory ``path``."""
    from .data import ctf_write

    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, t) in enumerate(net.store.items()):
        fname = f"params/{i:04d}.ctf"
        ctf_write(path / fname, t.data)
        entries.append({"name": name, "file": fname, "shape": list(t.shape)})
    manifest = {"network_config": net.cfg.to_dict(), "seed": net.store.seed,
                "dtype": str(net.store.dtype), "params": entries}
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path, expected: NetworkConfig | None = None) -> CAMSNet:
    """Rebuild the network from a checkpoint directory, checking the config first."""
    from .data import ctf_read

    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    cfg = NetworkConfig.from_dict(manifest["network_config"])
    if expected is not None and expected != cfg:
        diff = {k: (getattr(expected, k), getattr(cfg, k)) for k in cfg.__dataclass_fields__
                if getattr(expected, k) != getattr(cfg, k)}
        raise ValueError(f"checkpoint config differs from the requested one: {diff}")
    net = CAMSNet(cfg, seed=manifest.get("seed", 0), dtype=np.dtype(manifest.get("dtype", "float32")))
    state = {e["name"]: ctf_read(path / e["file"]) for e in manifest["params"]}
    net.store.load_state_dict(state)
    return net

