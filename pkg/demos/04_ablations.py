"""How each architectural switch changes the tiny network.

Builds the ablation ladder (channel aggregators only; plus spatial
aggregators; plus bidirectional scanning; plus weight sharing) and the
positional-embedding switch. For each it prints the parameter count and how
far its output moves from the full model's.

Run: python3 demos/04_ablations.py
"""
import numpy as np

from camsnet.network import TINY_CONFIG, CAMSNet
from camsnet.train import RunConfig


def main():
    base = RunConfig(network=TINY_CONFIG)
    ladder = {
        "channel aggregators only": base.with_ablation(msa_on=False, bidirectional=False),
        "+ spatial aggregators": base.with_ablation(bidirectional=False),
        "+ bidirectional, unshared": base.with_ablation(share_weights=False),
        "+ weight sharing (full)": base,
        "full, no positional embedding": base.with_ablation(pos_embed=False),
    }
    x = np.random.default_rng(0).standard_normal((1, 1, 32, 32))
    full = CAMSNet(base.network, seed=0, dtype=np.float64)(x).data
    for name, run in ladder.items():
        net = CAMSNet(run.network, seed=0, dtype=np.float64)
        shift = np.abs(net(x).data - full).max()
        print(f"{name:<32} {net.store.total_count:>7,} params   max |p - p_full| = {shift:.3f}")


if __name__ == "__main__":
    main()
