"""
Set losses from first principles
================================

Two sets are the same object regardless of element order, so a loss
between them has to be permutation-invariant. This walk-through builds
intuition for the two losses in the library and for the padding
degeneracy that motivates size-aware decoders.
"""

import itertools

import numpy as np

from setforge import chamfer, degeneracy_count, hungarian_loss, pairwise_cost

rng = np.random.default_rng(0)

# two small point sets in the plane
a = rng.normal(size=(4, 2))
b = rng.normal(size=(4, 2))

# the pairwise cost matrix is the shared ingredient: entry (i, j) is the
# Huber penalty between a[i] and b[j], summed over coordinates
C = pairwise_cost(a, b).values
print("cost matrix:\n", C.round(3))

# chamfer: every element matches its nearest neighbour in the other set,
# in both directions. Cheap (n*m) but many-to-one matches are allowed.
print("chamfer(a, b)  =", chamfer(a, b).item())

# hungarian: the optimal one-to-one assignment. For n=4 we can afford to
# check it against all 24 permutations.
hung = hungarian_loss(a, b).item()
brute = min(C[np.arange(4), p].sum() for p in itertools.permutations(range(4)))
print("hungarian      =", hung)
print("brute force    =", brute, "(must agree)")

# both are invariant to shuffling either argument
perm = rng.permutation(4)
print("chamfer under a permutation: ",
      abs(chamfer(a[perm], b).item() - chamfer(a, b).item()))

# --- the padding degeneracy -------------------------------------------------
#
# Training pipelines often zero-pad every target to a fixed size. Padding a
# set turns it into a multiset, and chamfer cannot tell apart candidates
# that reshuffle multiplicity between the pad point and real points.
pts = rng.normal(size=(3, 2)) + 1.0
report = degeneracy_count(pts, 2)
print("\n3 points padded with 2 zeros:",
      report.count, "distinct multisets reach chamfer exactly 0")

# one of them duplicates a real point instead of keeping both pads, so a
# model that trusts the loss sees no reason to output the right cardinality
target = np.concatenate([pts, np.zeros((2, 2))])
dupe = np.concatenate([pts, pts[:1], np.zeros((1, 2))])
print("duplicate-a-point candidate:   chamfer =", chamfer(dupe, target).item())

# the hungarian loss does not suffer from this (it is one-to-one), which is
# one reason the degeneracy matters mostly for chamfer-trained models
print("same candidate under hungarian:",
      hungarian_loss(dupe, target).item())
