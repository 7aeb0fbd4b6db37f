"""Where the parameters of a convolution-free Mamba segmenter live.

Walks from one Mamba block up to the full U-shaped network:

1. the three reference block counts and the bias/skip/norm layout that reproduces them;
2. what the LIFM factorisation saves over a plain block of the same widths;
3. per-stage totals of the full network and how the spatial aggregators make
   the total depend on the input resolution.

Run: python3 demos/01_parameter_accounting.py
"""
from camsnet.blocks import (PAPER_TARGETS, lifm_count, nc_mamba_count, reconcile_layout, reference_configs,
                            residual_table)
from camsnet.network import FULL_CONFIG, PAPER_TOTAL_M, network_param_report


def main():
    ranked = reconcile_layout()
    exact = [c for c in ranked if c.exact]
    print(f"{len(ranked)} layouts searched, {len(exact)} match all three targets; chosen:")
    print(" ", ranked[0].layout)
    print(residual_table(ranked[0]))

    cfgs = reference_configs()
    print("\nplain block 32->64 (E=2, D=16), per term:")
    for k, v in nc_mamba_count(cfgs["nc-mamba"]).items():
        print(f"  {k:<8} {v:>6,}")
    lifm = lifm_count(cfgs["lifm"])
    print(f"LIFM 32->64: {lifm}  total {sum(lifm.values()):,} "
          f"({sum(lifm.values()) / PAPER_TARGETS['nc-mamba']:.0%} of the plain block)")

    rep = network_param_report(FULL_CONFIG, target_m=PAPER_TOTAL_M, sweep=(128, 192, 256, 320, 352, 384))
    print("\nfull network at 256x256:")
    print(rep.to_text())


if __name__ == "__main__":
    main()
