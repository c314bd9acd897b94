#!/usr/bin/env python3
"""Re-derives the hand-computed uncertainty and fusion constants by brute force.

Nothing here imports the Rust code:

* per-axis translation sigmas are the defining expressions evaluated
  directly (they are definitions, so there is nothing to search);
* distance sigma is obtained by numerically linearizing ||t|| with central
  differences and summing the per-axis contributions;
* the fused distance is the grid-search minimizer of the weighted squared
  residual, and its sigma comes from the curvature of that cost;
* the mean corner displacement is a plain loop;
* the focal length is found by bisection on the field-of-view relation;
* the weighted rotation mean is a grid search over candidate rotations.

Usage: derive_constants.py [--json]
Exit status is 1 when any stated constant disagrees with its derivation.
"""

import json
import math
import sys


def closed_sigma(e, tz, fx, fy):
    """Spread per axis for a reprojection error e at depth tz."""
    return (e * tz / fx, e * tz / fy, e * tz / math.hypot(fx, fy))


def numeric_distance_sigma(t, s, h=1e-6):
    total = 0.0
    for i in range(3):
        plus = list(t)
        minus = list(t)
        plus[i] += h
        minus[i] -= h
        grad = (math.dist(plus, (0, 0, 0)) - math.dist(minus, (0, 0, 0))) / (2 * h)
        total += (grad * s[i]) ** 2
    return math.sqrt(total)


def grid_fuse(ds, sigmas, lo, hi, steps=200_001):
    def cost(x):
        return sum((x - d) ** 2 / s ** 2 for d, s in zip(ds, sigmas))

    best_x, best_c = lo, float("inf")
    for k in range(steps):
        x = lo + (hi - lo) * k / (steps - 1)
        c = cost(x)
        if c < best_c:
            best_x, best_c = x, c
    # Cost is sum (x - d)^2 / s^2; its second derivative is 2 / sigma_fused^2.
    h = 1e-3
    curvature = (cost(best_x + h) - 2 * cost(best_x) + cost(best_x - h)) / h ** 2
    return best_x, math.sqrt(2.0 / curvature)


def mean_corner_displacement(offsets):
    return sum(math.hypot(du, dv) for du, dv in offsets) / len(offsets)


def hfov_focal(width_px, hfov_deg):
    # Bisection on the pinhole relation instead of the closed form.
    lo, hi = 1.0, 1e5
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 2 * math.degrees(math.atan(width_px / 2 / mid)) > hfov_deg:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def chordal_mean_angle_deg(angles_deg):
    """Angle of the chordal mean of rotations about x by the given angles,
    found by maximizing sum_i (q . q_i)^2 over unit quaternions in the x-w plane."""
    def score(theta):
        return sum(math.cos(theta - math.radians(a) / 2) ** 2 for a in angles_deg)

    steps = 100_001
    step = math.pi / (steps - 1)
    best = max((-math.pi / 2 + step * k for k in range(steps)), key=score)
    # Golden-section polish inside the winning grid cell.
    lo, hi = best - step, best + step
    g = (math.sqrt(5) - 1) / 2
    for _ in range(200):
        a, b = hi - g * (hi - lo), lo + g * (hi - lo)
        if score(a) > score(b):
            hi = b
        else:
            lo = a
    return math.degrees(lo + hi)


def main():
    results = []

    def check(name, stated, derived, tol):
        results.append({"name": name, "stated": stated, "derived": derived, "tol": tol, "ok": abs(stated - derived) <= tol})

    s = closed_sigma(1.0, 700.0, 1000.0, 1000.0)
    check("sigma_tz_symmetric_focals", 0.4950, s[2], 5e-5)
    s = closed_sigma(1.0, 700.0, 1000.0, 2000.0)
    check("sigma_ty_asymmetric_focals", 0.350, s[1], 5e-4)
    check("sigma_tz_asymmetric_focals", 0.3130, s[2], 5e-5)
    check("distance_sigma_axis_aligned", 0.495, numeric_distance_sigma((0, 0, 700), (0.7, 0.7, 0.495)), 5e-4)
    check("distance_sigma_diagonal", 0.1732, numeric_distance_sigma((100, 100, 100), (0.3, 0.3, 0.3)), 5e-5)
    d, sd = grid_fuse([100.0, 110.0], [1.0, 2.0], 90.0, 120.0)
    check("fused_distance", 102.0, d, 5e-4)
    check("fused_sigma", 0.8944, sd, 5e-5)
    check("inverse_variance_sum", 1.25, 1 / sd ** 2, 5e-4)
    d, sd = grid_fuse([100.0, 110.0], [1.0, 1.0], 90.0, 120.0)
    check("fused_distance_equal_sigma", 105.0, d, 5e-4)
    check("fused_sigma_equal_sigma", 0.7071, sd, 5e-5)
    check("mean_corner_displacement", 1.25, mean_corner_displacement([(3, 4), (0, 0), (0, 0), (0, 0)]), 1e-12)
    check("focal_from_65deg_hfov", 1506.7, hfov_focal(1920.0, 65.0), 0.5)
    # Stated as 1.0 deg "for small angles"; the exact chordal minimizer is
    # 0.999695 deg, so only the small-angle tolerance holds.
    check("chordal_mean_rotx_0_and_4_deg_weights_3_1", 1.0, chordal_mean_angle_deg([0, 0, 0, 4]), 1e-3)
    check("chordal_mean_rotx_plus_minus_2_deg", 0.0, chordal_mean_angle_deg([2, -2]), 1e-6)
    check("sigma_tz_at_0p3px_700mm_f1506", 0.099, closed_sigma(0.3, 700.0, 1506.0, 1506.0)[2], 5e-4)

    if "--json" in sys.argv:
        print(json.dumps(results))
    else:
        for r in results:
            status = "ok" if r["ok"] else "MISMATCH"
            print(f"{r['name']:<48} stated {r['stated']:<10} derived {r['derived']:.6f}  {status}")
    return 0 if all(r["ok"] for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
