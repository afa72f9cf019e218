"""Random tangent fields on the round sphere: zeros, indices and the Euler density.

A random field is the tangential projection of a fixed ambient vector, so its
zeros are the two points +-v/|v| and the indices always sum to 2.
"""
import numpy as np

from gbc.gaussian import RngStream
from gbc.kernel import KernelGeometry
from gbc.models import get_model
from gbc.zeros import TestFunction, find_zeros, pair_current, quadrature_expectation, sample_section

model = get_model("sphere-tangent")
fam = model.family()

root = RngStream(2024)
for i in range(5):
    coef = sample_section(fam, root.substream(i))
    zs = find_zeros(coef, fam)
    where = ", ".join(f"{np.round(z.ambient, 4)} ({z.index:+d})" for z in zs.zeros)
    print(f"sample {i}: |v| = {np.linalg.norm(coef):.3f}  zeros {where}  sum {zs.signed_count}")
    print(f"  pairing with x3^2: {pair_current(zs, TestFunction('x3sq'), model):.6f}")

# the induced metric is the round one, so the Euler density is 1/(2 pi) against area
pts = np.array([[0.4, 1.0], [1.3, 4.0], [2.6, 0.2]])
kg = KernelGeometry.from_family(fam, "polar", pts)
print("Euler density:", kg.euler_density(), "vs", 1 / (2 * np.pi))
for name in ("one", "x3", "x3sq"):
    print(f"E[pairing with {name}] by quadrature: {quadrature_expectation(fam, TestFunction(name)):.12f}")
