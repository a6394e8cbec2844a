#!/usr/bin/env python3
"""Reference J values for the deterministic harvesting model.

With sigma = 0, constant growth c and constant effort u0,
X(t) = x0 exp((c - K u0) t), so
J(u0) = u0 x0 exp(-delta T) * int_0^T exp((delta + c - K u0) t) dt.
"""
import argparse
import csv
import math
import sys


def j_value(c, k, x0, delta, horizon, u0):
    a = delta + c - k * u0
    if abs(a) < 1e-12:
        integral = horizon
    else:
        integral = math.expm1(a * horizon) / a
    return u0 * x0 * math.exp(-delta * horizon) * integral


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--growth", type=float, required=True)
    p.add_argument("--catchability", type=float, required=True)
    p.add_argument("--x0", type=float, required=True)
    p.add_argument("--discount", type=float, required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--u-max", type=float, default=1.0)
    p.add_argument("--points", type=int, default=21)
    args = p.parse_args()

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["u", "J"])
    for k in range(args.points):
        u0 = args.u_max * k / (args.points - 1)
        j = j_value(args.growth, args.catchability, args.x0, args.discount, args.horizon, u0)
        w.writerow([repr(u0), repr(j)])


if __name__ == "__main__":
    main()
