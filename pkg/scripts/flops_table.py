"""Print the joint-vs-frozen training cost table with a per-tower breakdown.

The CLI (`capalign flops`) prints the summary table; this script also shows
how the totals decompose into vision and text towers, which is where the
whole argument for freezing the text side lives: the text tower is a fixed
per-sample tax that precomputation removes entirely.
"""

import argparse

from capalign.costmodel import (
    GIGA,
    VISION_PRESETS,
    clip_text_tower,
    compare_joint_vs_frozen,
    mean_reduction,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n-ctx", type=int, nargs="+", default=[77, 128],
                        help="text context lengths to tabulate")
    args = parser.parse_args()

    header = (f"{'model':<10} {'n_ctx':>5} {'vision G':>10} {'text G':>10} "
              f"{'joint G':>10} {'frozen G':>10} {'saved':>7}")
    print(header)
    print("-" * len(header))
    for name, vision in VISION_PRESETS.items():
        for n_ctx in args.n_ctx:
            cmp = compare_joint_vs_frozen(vision, clip_text_tower(name, n_ctx))
            print(f"{name:<10} {n_ctx:>5} "
                  f"{cmp.vision.train_total / GIGA:>10.2f} "
                  f"{cmp.text.train_total / GIGA:>10.2f} "
                  f"{cmp.joint_train_total / GIGA:>10.2f} "
                  f"{cmp.frozen_train_total / GIGA:>10.2f} "
                  f"{100.0 * cmp.reduction:>6.1f}%")
    print()
    for n_ctx in args.n_ctx:
        print(f"mean reduction across model sizes at n_ctx={n_ctx}: "
              f"{100.0 * mean_reduction(n_ctx):.1f}%")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
