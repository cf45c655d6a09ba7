"""Jigsaw puzzles over segmentation maps.

A map is cut into an ``n x n`` grid of equal patches.  A permutation ``perm``
of the ``n**2`` grid cells shuffles it so that output cell ``g`` holds input
cell ``perm[g]``; the puzzle label is the index of ``perm`` inside a fixed
:class:`PermutationSet`.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np

from . import numerics as nx
from .numerics import Tensor

# Full enumeration up to 9! candidates; beyond that a seeded candidate pool.
_ENUMERATE_LIMIT = 400_000
_POOL_MIN = 5_000


@dataclass(frozen=True)
class PermutationSet:
    n: int
    perms: np.ndarray  # [N, n*n], read-only, perms[0] is the identity

    @property
    def size(self) -> int:
        return self.perms.shape[0]

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, i) -> np.ndarray:
        return self.perms[i]


@dataclass
class PuzzleInstance:
    shuffled: np.ndarray
    label: int


def _candidates(cells: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if math.factorial(cells) <= _ENUMERATE_LIMIT:
        return np.array(list(itertools.permutations(range(cells))), dtype=np.int8)
    pool = max(_POOL_MIN, 20 * count)
    perms = np.argsort(rng.random((pool, cells)), axis=1).astype(np.int8)
    perms = np.unique(perms, axis=0)
    ident = np.arange(cells, dtype=np.int8)
    if not (perms == ident).all(axis=1).any():
        perms = np.vstack([ident[None], perms])
    return perms


@lru_cache(maxsize=32)
def build_permutation_set(n: int, N: int, seed: int = 0) -> PermutationSet:
    """Pick ``N`` permutations greedily maximising the minimum Hamming distance.

    The identity comes first; each further pick is the candidate farthest (in
    min-Hamming sense) from everything chosen so far, ties broken by ``seed``.
    """
    if n < 1:
        raise ValueError("grid side n must be >= 1")
    cells = n * n
    if N < 1 or N > math.factorial(cells):
        raise ValueError(f"N={N} outside 1..{cells}! for a {n}x{n} grid")
    rng = np.random.default_rng(seed)
    cand = _candidates(cells, N, rng)
    if cand.shape[0] < N:
        raise ValueError(f"candidate pool too small for N={N}")
    ident = np.arange(cells, dtype=np.int8)
    first = int(np.flatnonzero((cand == ident).all(axis=1))[0])
    chosen = [first]
    mind = (cand != cand[first]).sum(axis=1).astype(np.int64)
    mind[first] = -1
    for _ in range(N - 1):
        best = np.flatnonzero(mind == mind.max())
        pick = int(best[rng.integers(best.size)]) if best.size > 1 else int(best[0])
        chosen.append(pick)
        np.minimum(mind, (cand != cand[pick]).sum(axis=1), out=mind)
        mind[chosen] = -1
    perms = cand[chosen].astype(np.int64)
    perms.setflags(write=False)
    return PermutationSet(n=n, perms=perms)


def min_hamming(pset: PermutationSet) -> int:
    p = pset.perms
    if p.shape[0] < 2:
        return 0
    d = (p[:, None, :] != p[None, :, :]).sum(axis=2)
    d[np.diag_indices_from(d)] = p.shape[1] + 1
    return int(d.min())


def _check_perm(perm: np.ndarray, n: int) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (n * n,) or not np.array_equal(np.sort(perm), np.arange(n * n)):
        raise ValueError(f"not a permutation of {n * n} cells: {perm}")
    return perm


def grid_of(perm) -> int:
    n = math.isqrt(len(perm))
    if n * n != len(perm):
        raise ValueError("permutation length is not a perfect square")
    return n


@lru_cache(maxsize=4096)
def _source_pixels(h: int, w: int, n: int, perm: tuple) -> np.ndarray:
    """Flat source pixel for every output pixel of a shuffled ``h x w`` map."""
    ph, pw = h // n, w // n
    ys, xs = np.divmod(np.arange(h * w), w)
    cell = (ys // ph) * n + (xs // pw)
    src = np.asarray(perm)[cell]
    sy = (src // n) * ph + ys % ph
    sx = (src % n) * pw + xs % pw
    out = sy * w + sx
    out.setflags(write=False)
    return out


def _check_dims(h: int, w: int, n: int) -> None:
    if h % n or w % n:
        raise ValueError(f"map size {h}x{w} not divisible by grid side {n}")


def shuffle(seg_map: Union[np.ndarray, Tensor], perm) -> Union[np.ndarray, Tensor]:
    """Rearrange patches of a ``[..., H, W]`` map: output cell g <- input cell perm[g]."""
    n = grid_of(perm)
    perm = _check_perm(perm, n)
    h, w = seg_map.shape[-2:]
    _check_dims(h, w, n)
    src = _source_pixels(h, w, n, tuple(perm.tolist()))
    if isinstance(seg_map, Tensor):
        lead = int(np.prod(seg_map.shape[:-2], dtype=np.int64))
        idx = (np.arange(lead)[:, None] * (h * w) + src[None, :]).reshape(seg_map.shape)
        return nx.gather(seg_map, idx)
    flat = np.asarray(seg_map).reshape(seg_map.shape[:-2] + (h * w,))
    return flat[..., src].reshape(seg_map.shape)


def restore(seg_map: Union[np.ndarray, Tensor], perm) -> Union[np.ndarray, Tensor]:
    """Exact inverse of :func:`shuffle`."""
    perm = _check_perm(perm, grid_of(perm))
    return shuffle(seg_map, np.argsort(perm))


def shuffle_batch(maps: Tensor, pset: PermutationSet, labels: np.ndarray) -> Tensor:
    """Differentiably shuffle each ``[C,H,W]`` map of a batch by its own permutation."""
    b, c, h, w = maps.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ValueError("one label per map required")
    _check_dims(h, w, pset.n)
    src = np.stack([_source_pixels(h, w, pset.n, tuple(pset.perms[l].tolist())) for l in labels])
    base = (np.arange(b * c) * (h * w)).reshape(b, c, 1)
    idx = (base + src[:, None, :]).reshape(b, c, h, w)
    return nx.gather(maps, idx)


def sample_labels(rng: np.random.Generator, pset: PermutationSet, count: int) -> np.ndarray:
    return rng.integers(0, pset.size, size=count)


def sample_puzzle(seg_map: np.ndarray, pset: PermutationSet, rng: np.random.Generator) -> PuzzleInstance:
    label = int(rng.integers(0, pset.size))
    return PuzzleInstance(shuffled=shuffle(seg_map, pset.perms[label]), label=label)
