"""Cost accounting for the reference plan: where the bits and ops go.

Walks the shipped network plan layer by layer, prints the full BOPs / FLOPs /
parameter table, and then shows the point of the whole exercise: removing the
FC head and re-costing. The boosted-tree head that replaces it is costed
out-of-band (its worst case is a few thousand compares), so the deployed
hybrid is strictly cheaper than the network it came from.
"""

import argparse

import numpy as np

from rxgb import costmodel, gbdt, netspec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--width-mult", type=float, default=1.0,
                    help="channel width multiplier (0.5 = desk-scale plan)")
    args = ap.parse_args()

    spec = netspec.reference_spec(width_mult=args.width_mult)
    report = costmodel.cost_report(spec)
    budget = costmodel.DESIGN_BUDGET if args.width_mult == 1.0 else None
    print(costmodel.render_table(report, budget=budget))
    print()

    # --- drop the FC head --------------------------------------------------
    headless = costmodel.cost_report(
        netspec.reference_spec(width_mult=args.width_mult, include_fc=False))
    diff = costmodel.diff_reports(report, headless)
    print(f"removing the FC head: {diff.delta_headline_flops:+,} FLOPs, "
          f"{diff.delta_param_bytes:+,.0f} parameter bytes "
          f"({diff.delta_param_megabytes:+.2f} MB)")
    if args.width_mult == 1.0:
        rec = costmodel.fc_removal_vs_budget(diff)
        print(f"at the budget table's precision that is {rec.flops_pct:+.2f}% "
              f"of compute and {rec.param_pct:+.2f}% of size")

    # --- what replaces it ---------------------------------------------------
    head = costmodel.gbdt_cost(gbdt.GBDTConfig())
    print(f"\nworst-case tree head (20 trees, depth 10): "
          f"{head.compare_flops} compares, {head.param_bytes:,.0f} bytes")
    fc_flops = -diff.delta_headline_flops
    print(f"the FC head it replaces costs {fc_flops:,} FLOPs: "
          f"{fc_flops / head.compare_flops:,.0f}x more per inference")

    # --- unified metric -----------------------------------------------------
    print(f"\ntotal {report.total_bops:,} BOPs + {report.total_flops:,} FLOPs "
          f"= {report.ops:,.0f} OPs "
          f"(headline {report.headline_ops:,.0f} counting matmul FLOPs only)")
    print(f"deployed size {report.param_megabytes:.2f} MB, of which "
          f"{report.binary_param_bits / report.total_param_bits:.0%} "
          f"is 1-bit weights")


if __name__ == "__main__":
    main()
