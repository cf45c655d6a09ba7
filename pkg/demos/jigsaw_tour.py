"""Shuffle a segmentation map, classify the permutation, and restore it.

    python demos/jigsaw_tour.py
"""
import numpy as np

from ssdas import jigsaw, synthdata

domain = synthdata.generate_domain(synthdata.DomainSpec(seed=0), 1)
mask = domain.masks[0]
onehot = np.eye(4)[mask].transpose(2, 0, 1)  # [C, H, W]

pset = jigsaw.build_permutation_set(4, 100)
print(f"{pset.size} permutations of {pset.n * pset.n} cells, min Hamming distance {jigsaw.min_hamming(pset)}")

rng = np.random.default_rng(0)
puzzle = jigsaw.sample_puzzle(onehot, pset, rng)
perm = pset.perms[puzzle.label]
print(f"label {puzzle.label} -> permutation {perm.tolist()}")


def show(m):
    # one character per 2x2 pixel block: . background, 1-3 foreground classes
    cls = m.argmax(axis=0)[::2, ::2]
    return "\n".join("".join(".123"[c] for c in row) for row in cls)


print("original\n" + show(onehot))
print("shuffled\n" + show(puzzle.shuffled))
back = jigsaw.restore(puzzle.shuffled, perm)
print("restore(shuffle(m)) == m:", np.array_equal(back, onehot))
