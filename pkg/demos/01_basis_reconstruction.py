"""Tour of the basis-function score synthesis.

Shows the single-coefficient stamp, the tent partition of unity, and
agreement between the vectorized synthesis and a literal loop evaluation.
Run: python demos/01_basis_reconstruction.py
"""

import numpy as np

from lapseg import BasisBank, reconstruct, tent_basis
from lapseg.reference import reconstruct_naive
from lapseg.rng import Stream

s, k, c = 4, 3, 2

print("== single-coefficient stamp ==")
st = Stream(0, "demo1")
bank = BasisBank(stride=s, functions=(st.uniform((2 * s, 2 * s, k, c)) - 0.5))
coeffs = np.zeros((1, c, k, 3, 3))
coeffs[0, 1, 2, 1, 1] = 1.0          # class 1, basis 2, position (1, 1)
scores = reconstruct(coeffs, bank)
print(f"scores shape: {scores.shape} (s*h x s*w per class)")
stamp = scores[0, 1, s:s + 2 * s, s:s + 2 * s]
print(f"stamp == basis function exactly: {np.array_equal(stamp, bank.functions[:, :, 2, 1])}")
print(f"everything outside the stamp is zero: {abs(scores).sum() == abs(stamp).sum()}")

print("\n== tent basis tiles to a constant ==")
tent = tent_basis(s)
tent_bank = BasisBank(stride=s, functions=tent[:, :, None, None])
ones = np.ones((1, 1, 1, 4, 4))
out = reconstruct(ones, tent_bank)[0, 0]
print("top-left 6x6 corner (border band is a partial tent sum):")
with np.printoptions(precision=3, suppress=True):
    print(out[:6, :6])
print(f"interior exactly 1: {np.allclose(out[s:, s:], 1.0)}")

print("\n== vectorized path equals the literal equation ==")
coeffs = st.uniform((1, c, k, 3, 2)) - 0.5
got = reconstruct(coeffs, bank)
want = reconstruct_naive(coeffs, bank.functions, s)
print(f"max |difference| = {np.abs(got - want).max():.2e}")
