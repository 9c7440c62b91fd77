#!/usr/bin/env python3
"""Reference value of alpha_bar_S for the linear noise schedule.

Computes prod_{s=1}^{S} (1 - beta_s) with beta_s spaced linearly from
beta_start to beta_end, using 60-digit decimal arithmetic.
"""

import argparse
from decimal import Decimal, getcontext


def alpha_bar(steps: int, beta_start: Decimal, beta_end: Decimal) -> Decimal:
    prod = Decimal(1)
    for s in range(steps):
        frac = Decimal(s) / Decimal(steps - 1) if steps > 1 else Decimal(0)
        prod *= 1 - (beta_start + (beta_end - beta_start) * frac)
    return prod


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=1000)
    parser.add_argument("--beta-start", default="0.0001")
    parser.add_argument("--beta-end", default="0.02")
    args = parser.parse_args()
    getcontext().prec = 60
    value = alpha_bar(args.steps, Decimal(args.beta_start), Decimal(args.beta_end))
    print(f"alpha_bar_{args.steps} = {value}")
    print(f"as f64 literal: {float(value)!r}")


if __name__ == "__main__":
    main()
