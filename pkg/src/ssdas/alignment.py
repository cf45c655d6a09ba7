"""Cross-domain similarity weighting and progressive sample masks.

Source jigsaw losses are re-weighted by how much the source and target
classifiers agree on the same shuffled source map, source samples the
target classifier disagrees with most are dropped as training progresses,
and unlabeled target samples on which the target classifier is most
confident are gradually admitted into the source classifier's training.

All masks are plain float arrays (constants for the autodiff graph); losses
are :class:`~ssdas.numerics.Tensor` objects.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np

from . import numerics as nx
from .jigsaw import PermutationSet, sample_labels, shuffle_batch
from .nets import JigsawClassifier
from .numerics import Tensor

DEGENERATE_SPREAD = 1e-12


@dataclass(frozen=True)
class EpochProgress:
    epoch: int
    max_epoch: int

    def __post_init__(self):
        if self.max_epoch < 1 or not 0 <= self.epoch <= self.max_epoch:
            raise ValueError(f"invalid progress {self.epoch}/{self.max_epoch}")

    @property
    def fraction(self) -> float:
        return self.epoch / self.max_epoch


@dataclass
class PuzzleBatch:
    shuffled: Tensor  # [B, C, h, w]
    labels: np.ndarray  # [B]

    def __len__(self) -> int:
        return self.labels.shape[0]


def make_puzzles(maps: Tensor, pset: PermutationSet, rng: np.random.Generator,
                 labels: Optional[np.ndarray] = None) -> PuzzleBatch:
    if labels is None:
        labels = sample_labels(rng, pset, maps.shape[0])
    return PuzzleBatch(shuffle_batch(maps, pset, labels), np.asarray(labels, dtype=np.int64))


def puzzle_loss(puzzles: PuzzleBatch, clf: JigsawClassifier, detach: bool = False) -> Tensor:
    """Per-sample cross-entropy of ``clf`` on a puzzle batch, shape ``[B]``."""
    return nx.cross_entropy(clf(puzzles.shuffled, detach=detach), puzzles.labels, axis=-1)


def jig_loss(P: Tensor, clf: JigsawClassifier, pset: PermutationSet, rng: np.random.Generator,
             detach: bool = False) -> Tensor:
    """Shuffle each map by a random permutation and score ``clf`` on it (unreduced)."""
    _check_bound(clf, pset)
    return puzzle_loss(make_puzzles(P, pset, rng), clf, detach=detach)


def _check_bound(clf: JigsawClassifier, pset: PermutationSet) -> None:
    if clf.num_perms != pset.size or clf.grid != pset.n:
        raise ValueError(
            f"classifier ({clf.grid}x{clf.grid}, N={clf.num_perms}) not bound to set "
            f"({pset.n}x{pset.n}, N={pset.size})")


# --- similarity map --------------------------------------------------------------
def discrepancy(p_s: np.ndarray, p_t: np.ndarray) -> np.ndarray:
    """Total-variation distance between matching rows of two probability tables."""
    return 0.5 * np.abs(np.asarray(p_s) - np.asarray(p_t)).sum(axis=-1)


def unity_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo < DEGENERATE_SPREAD:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def cds_from_discrepancy(d: np.ndarray) -> np.ndarray:
    return 1.0 - unity_normalize(d)


def cds_map(source: PuzzleBatch, J_s: JigsawClassifier, J_t: JigsawClassifier) -> np.ndarray:
    """Per-sample similarity in [0, 1] from both classifiers on the same source puzzles."""
    if (J_s.num_perms, J_s.grid, J_s.size) != (J_t.num_perms, J_t.grid, J_t.size):
        raise ValueError("source and target classifiers are bound to different puzzle sets")
    with nx.no_grad():
        ps = J_s(source.shuffled).data
        pt = J_t(source.shuffled).data
    return cds_from_discrepancy(discrepancy(ps, pt))


def jig_entropy(puzzles: PuzzleBatch, J_t: JigsawClassifier) -> np.ndarray:
    """Entropy ``-sum p ln p`` of ``J_t``'s permutation prediction per sample."""
    with nx.no_grad():
        return nx.entropy(J_t(puzzles.shuffled).data, axis=-1)


# --- progressive masks --------------------------------------------------------------
def _cut_index(length: int, prog: EpochProgress) -> int:
    return min(length * prog.epoch // prog.max_epoch, length - 1)


def compute_m_rm(cds, prog: EpochProgress) -> np.ndarray:
    """Keep samples whose similarity reaches the epoch-dependent quantile."""
    cds = np.asarray(cds, dtype=np.float64).reshape(-1)
    if cds.size == 0:
        raise ValueError("empty similarity vector")
    thres = np.sort(cds, kind="stable")[_cut_index(cds.size, prog)]
    return (cds >= thres).astype(np.float64)


def compute_m_add(entropies, prog: EpochProgress) -> np.ndarray:
    """Admit samples whose entropy is at most the epoch-dependent quantile."""
    ent = np.asarray(entropies, dtype=np.float64).reshape(-1)
    if ent.size == 0:
        raise ValueError("empty entropy vector")
    thres = np.sort(ent, kind="stable")[_cut_index(ent.size, prog)]
    return (ent <= thres).astype(np.float64)


# --- masked losses ------------------------------------------------------------------
def _check_len(name: str, mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (n,):
        raise ValueError(f"{name} has length {mask.shape}, batch has {n}")
    return mask


def labeled_flow_loss(source: PuzzleBatch, target: PuzzleBatch, J_s: JigsawClassifier,
                      J_t: JigsawClassifier, cds, m_rm, lam: float, parts: Optional[dict] = None) -> Tensor:
    """``lam * (mean(L_s * cds * m_rm) + mean(L_t))``.

    A frozen ``J_t`` still passes gradient to the maps but not to its own
    weights.  When ``parts`` is given it receives the unweighted per-sample
    losses under ``"source"`` and ``"target"``.
    """
    cds = _check_len("cds", cds, len(source))
    m_rm = _check_len("m_rm", m_rm, len(source))
    ls = puzzle_loss(source, J_s)
    lt = puzzle_loss(target, J_t, detach=J_t.frozen)
    if parts is not None:
        parts["source"] = ls.data.copy()
        parts["target"] = lt.data.copy()
    return (nx.mean(ls * (cds * m_rm)) + nx.mean(lt)) * lam


def unlabeled_flow_loss(unlabeled: PuzzleBatch, J_s: JigsawClassifier, m_add,
                        lam: float) -> Tuple[Tensor, Tensor]:
    """Admitted samples train the maps and ``J_s``; the rest train the maps only."""
    m_add = _check_len("m_add", m_add, len(unlabeled))
    admitted = nx.mean(puzzle_loss(unlabeled, J_s) * m_add) * lam
    rest = nx.mean(puzzle_loss(unlabeled, J_s, detach=True) * (1.0 - m_add)) * lam
    return admitted, rest


def acda_unlabeled_loss(unlabeled: PuzzleBatch, J_s: JigsawClassifier, lam: float) -> Tensor:
    """Fixed ``J_s``: only the segmentation maps receive gradient."""
    return nx.mean(puzzle_loss(unlabeled, J_s, detach=True)) * lam


# --- audit dump ---------------------------------------------------------------------
def write_mask_dump(path, rows: Iterable[tuple], value_name: str, mask_name: str) -> Path:
    """CSV of ``epoch, sample_id, <value>, <mask>`` rows."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "sample_id", value_name, mask_name])
        for epoch, sid, value, mask in rows:
            w.writerow([int(epoch), int(sid), repr(float(value)), int(mask)])
    return path
