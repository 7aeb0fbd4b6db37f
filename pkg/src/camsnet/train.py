"""Training and evaluation loops."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autograd import no_grad
from .data import Sample, random_augment
from .metrics import EvalReport, argmax_labels, dice_loss, evaluate
from .network import DESK_CONFIG, CAMSNet, NetworkConfig, save_checkpoint
from .optim import AdamW, halving_lr

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """Everything a training run needs; serialised as JSON.

    Batch size and input resolution are not fixed by the reference protocol;
    the desk-scale defaults here are assumptions.
    """

    network: NetworkConfig = DESK_CONFIG
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.55
    eps: float = 1e-8
    weight_decay: float = 1e-2
    halve_every: int = 100
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    augment: bool = False
    val_fold: int | None = None
    eval_every: int = 10
    max_steps: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("lr", "eps", "halve_every", "epochs", "batch_size", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown run config fields: {sorted(unknown)}")
        if "network" in d:
            net = d["network"]
            d["network"] = net if isinstance(net, NetworkConfig) else NetworkConfig.from_dict(net)
        return cls(**d)

    def with_ablation(self, msa_on=None, bidirectional=None, share_weights=None, pos_embed=None):
        net = self.network
        if msa_on is not None:
            net = replace(net, msa_on=msa_on)
        if bidirectional is not None:
            net = replace(net, scan_mode="bidirectional" if bidirectional else "unidirectional")
        if share_weights is not None:
            net = replace(net, share_weights=share_weights)
        if pos_embed is not None:
            net = replace(net, use_pos_embed=pos_embed)
        return replace(self, network=net)


@dataclass
class TrainResult:
    net: CAMSNet
    records: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def predict(net: CAMSNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Label maps (N, H, W) from inference-mode forwards."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = images[i:i + batch_size].astype(net.store.dtype)
            out.append(argmax_labels(net(x, training=False)))
    return np.concatenate(out)


def evaluate_net(net: CAMSNet, samples: list[Sample], spacing=1.0, boundary_only=False) -> EvalReport:
    images = np.stack([s.image for s in samples])
    preds = predict(net, images)
    return evaluate(preds, [s.label for s in samples], net.cfg.num_classes, spacing, boundary_only)


def train(run: RunConfig, samples: list[Sample], out_dir=None, eval_samples: list[Sample] | None = None,
          progress: bool = False) -> TrainResult:
    """Dice-loss training with AdamW and a step-halving learning rate.

    With ``out_dir`` set, writes ``train_log.jsonl`` (one record per step,
    flushed immediately), ``eval_log.jsonl`` and a checkpoint at every eval
    interval and at the end.
    """
    if not samples:
        raise ValueError("no training samples")
    cfg = run.network
    shape = samples[0].image.shape[1:]
    if shape != (cfg.height, cfg.width):
        raise ValueError(f"samples are {shape[0]}x{shape[1]} but the network expects {cfg.height}x{cfg.width}")
    net = CAMSNet(cfg, seed=run.seed, dtype=np.dtype(run.dtype))
    opt = AdamW(net.store, lr=run.lr, betas=(run.beta1, run.beta2), eps=run.eps, weight_decay=run.weight_decay)
    rng = np.random.default_rng([run.seed, 7])
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label for s in samples]).astype(np.int64)
    eval_samples = eval_samples if eval_samples is not None else samples

    out = Path(out_dir) if out_dir is not None else None
    step_log = eval_log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.json").write_text(json.dumps(run.to_dict(), indent=2))
        step_log = open(out / "train_log.jsonl", "w")
        eval_log = open(out / "eval_log.jsonl", "w")

    result = TrainResult(net)
    step = 0
    try:
        for epoch in range(run.epochs):
            lr = halving_lr(run.lr, epoch, run.halve_every)
            for idx in _batches(len(samples), run.batch_size, rng):
                t0 = time.perf_counter()
                x, y = images[idx], labels[idx]
                if run.augment:
                    pairs = [random_augment(xi, yi, rng) for xi, yi in zip(x, y)]
                    x = np.stack([p[0] for p in pairs])
                    y = np.stack([p[1] for p in pairs])
                opt.zero_grad()
                loss = dice_loss(net(x.astype(net.store.dtype), training=True), y)
                loss.backward()
                opt.step(lr)
                step += 1
                rec = {"step": step, "epoch": epoch, "lr": lr, "loss": float(loss.item()),
                       "wall_ms": round(1e3 * (time.perf_counter() - t0), 3)}
                result.records.append(rec)
                if step_log:
                    step_log.write(json.dumps(rec) + "\n")
                    step_log.flush()
                if progress and step % 10 == 0:
                    log.info("step %d epoch %d loss %.4f lr %.2e", step, epoch, rec["loss"], lr)
                if run.max_steps is not None and step >= run.max_steps:
                    break
            last = epoch == run.epochs - 1 or (run.max_steps is not None and step >= run.max_steps)
            if (epoch + 1) % run.eval_every == 0 or last:
                rep = evaluate_net(net, eval_samples)
                ev = {"epoch": epoch, "step": step, **rep.to_dict()}
                result.evals.append(ev)
                if eval_log:
                    eval_log.write(json.dumps(ev) + "\n")
                    eval_log.flush()
                if out is not None:
                    save_checkpoint(net, out / "checkpoint", {"epoch": epoch, "step": step})
            if run.max_steps is not None and step >= run.max_steps:
                break
    finally:
        if step_log:
            step_log.close()
            eval_log.close()
    return result
