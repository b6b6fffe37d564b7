"""Directional-statistics primitives: unit projection, Bessel evaluation,
and the vMF density.

Run:  python3 demos/01_sphere_geometry.py
"""

import math

import numpy as np

from vmfcl import VmfParams, log_bessel_i, normalize, vmf_log_density
from vmfcl.vmf import normalize_rows, uniform_log_density

# --- projection onto the sphere ---------------------------------------------
v = np.array([3.0, 4.0])
print("normalize([3, 4])        ->", normalize(v))
print("idempotent:                ", np.array_equal(normalize(normalize(v)), normalize(v)))

# --- log I_v(x) across both evaluation regimes ------------------------------
# The implementation switches from an ascending series to the large-argument
# asymptotic expansion at x = 30 (order + 1); values stay smooth across it.
for order in (0.0, 3.5, 7.0):
    xc = 30.0 * (order + 1)
    for x in (xc / 2, xc * 0.999, xc * 1.001, 2 * xc):
        print(f"log I_{order:>4}({x:9.2f}) = {log_bessel_i(order, x):14.6f}")

# closed form at half order: I_1/2(x) = sqrt(2/(pi x)) sinh x
x = 2.0
closed = math.log(math.sqrt(2 / (math.pi * x)) * math.sinh(x))
print("half-order check:", log_bessel_i(0.5, x), "vs closed form", closed)

# --- the vMF density normalizes over the sphere -----------------------------
rng = np.random.default_rng(0)
d, kappa = 3, 8.0
mu = normalize(rng.standard_normal(d))
params = VmfParams(mu, kappa)

samples = normalize_rows(rng.standard_normal((200_000, d)))
log_c = vmf_log_density(mu, params) - kappa  # log normalizer, since mu . mu = 1
dens = np.exp(log_c + kappa * (samples @ mu))
area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
print(f"\nMonte-Carlo integral of the vMF density over S^{d-1}:",
      round(float(np.mean(dens)) * area, 4), "(should be ~1)")

# density is maximal at the mean direction and minimal at its antipode
print("log density at mean:     ", vmf_log_density(mu, params))
print("log density at antipode: ", vmf_log_density(-mu, params))
print("uniform (kappa=0) density on the circle:", vmf_log_density(
    np.array([1.0, 0.0]), VmfParams(np.array([0.0, 1.0]), 0.0)), "= -log(2 pi)")
