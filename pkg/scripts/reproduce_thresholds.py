"""Print the compression-threshold table, budget rank losses and memory thresholds."""
import argparse

from flashsvd.factorizer import param_threshold, rank_loss_for_budget
from flashsvd.planner import Geometry, memory_threshold


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d-model", type=int, default=768)
    ap.add_argument("--heads", type=int, default=12)
    ap.add_argument("--budget", type=int, default=1_500_000, help="q/k/v parameter budget")
    args = ap.parse_args()
    d, h = args.d_model, args.heads

    print(f"parameter thresholds at D_A={d}, H={h}")
    print(f"  single-head: r < {param_threshold('single', d)}")
    for g in (g for g in range(1, h + 1) if h % g == 0):
        bound = param_threshold("grouped", d, h, g)
        print(f"  grouped G={g:<2}: r < {bound} = {float(bound):.2f}")
    bound = param_threshold("multi", d, h)
    print(f"  multi-head : r < {bound} = {float(bound):.2f}")

    print(f"\nrank loss for a {args.budget:,}-parameter q/k/v budget")
    for mode in ("single", "multi"):
        print(f"  {mode:<6}: {rank_loss_for_budget(d, h, args.budget, mode):.3f}")

    print("\nactivation-memory thresholds (B=1)")
    print(f"  {'M':>5} {'single':>10} {'multi':>10}")
    for m in (32, 64, 128, 256, 512):
        g = Geometry(1, m, d, 4 * d, h, 1)
        print(f"  {m:>5} {float(memory_threshold(g, 'single')):>10.2f} {float(memory_threshold(g, 'multi')):>10.2f}")


if __name__ == "__main__":
    main()
