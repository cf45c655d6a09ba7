"""Segmentation network and jigsaw-puzzle classifiers.

Checkpoint layout (little-endian)::

    4 bytes   magic b"SSDL"
    uint32    format version
    uint64    number of float64 values that follow
    float64[] parameters, flattened row-major, in declaration order
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterable, List, Tuple

import numpy as np

from . import numerics as nx
from .numerics import Tensor

MAGIC = b"SSDL"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class FormatError(ValueError):
    """Malformed or incompatible file contents."""


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    a = np.sqrt(1.0 / fan_in)
    return rng.uniform(-a, a, size=shape)


class Module:
    """Holds named parameters in declaration order."""

    frozen = False

    def __init__(self):
        self._names: List[str] = []

    def _param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        setattr(self, name, t)
        self._names.append(name)
        return t

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(n, getattr(self, n)) for n in self._names]

    def parameters(self) -> List[Tensor]:
        return [getattr(self, n) for n in self._names]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def _weights(self, detach: bool) -> List[Tensor]:
        # Detached copies share the arrays but stop gradient at the parameters.
        ps = self.parameters()
        return [Tensor(p.data) for p in ps] if detach else ps

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.parameters()])

    def load_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.num_parameters():
            raise FormatError(f"expected {self.num_parameters()} values, got {values.size}")
        pos = 0
        for p in self.parameters():
            p.data = values[pos:pos + p.size].reshape(p.shape).copy()
            pos += p.size


def param_hash(module: Module) -> str:
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


class SegModel(Module):
    """conv3x3(3->16)+ReLU -> conv3x3(16->32)+ReLU -> conv3x3(32->C) -> softmax."""

    def __init__(self, num_classes: int, seed: int = 0, widths=(16, 32), zero_head: bool = False):
        super().__init__()
        self.num_classes = num_classes
        self.widths = tuple(widths)
        rng = np.random.default_rng(seed)
        c1, c2 = self.widths
        self._param("w1", _uniform(rng, (c1, 3, 3, 3), 3 * 9))
        self._param("b1", _uniform(rng, (c1,), 3 * 9))
        self._param("w2", _uniform(rng, (c2, c1, 3, 3), c1 * 9))
        self._param("b2", _uniform(rng, (c2,), c1 * 9))
        w3 = _uniform(rng, (num_classes, c2, 3, 3), c2 * 9)
        b3 = _uniform(rng, (num_classes,), c2 * 9)
        if zero_head:
            w3[:] = 0.0
            b3[:] = 0.0
        self._param("w3", w3)
        self._param("b3", b3)

    def features(self, images: Tensor) -> Tensor:
        """Penultimate per-pixel features ``[B, widths[-1], H, W]``."""
        h = nx.relu(nx.conv2d(images, self.w1, self.b1))
        return nx.relu(nx.conv2d(h, self.w2, self.b2))

    def logits(self, images: Tensor) -> Tensor:
        return nx.conv2d(self.features(images), self.w3, self.b3)

    def __call__(self, images) -> Tensor:
        images = nx.as_tensor(images)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected [B,3,H,W] images, got {images.shape}")
        return nx.softmax(self.logits(images), axis=1)


def seg_forward(model: SegModel, images) -> Tensor:
    return model(images)


class JigsawClassifier(Module):
    """conv3x3(C->hidden)+ReLU -> average pool to (n*s) x (n*s) -> linear to N logits.

    Pooling each puzzle cell to ``s x s`` sub-cells (``subcells``) keeps track
    of which side of a cell a broken edge lies on; plain per-cell pooling left
    the permutation unidentifiable.
    """

    def __init__(self, in_channels: int, grid: int, num_perms: int, size: Tuple[int, int],
                 seed: int = 0, hidden: int = 16, zero_head: bool = False, subcells: int = 2):
        super().__init__()
        self.in_channels = in_channels
        self.grid = grid
        self.num_perms = num_perms
        self.size = tuple(size)
        self.hidden = hidden
        self.subcells = subcells
        self.frozen = False
        if size[0] % (grid * subcells) or size[1] % (grid * subcells):
            raise ValueError(f"size {size} not divisible by grid*subcells={grid * subcells}")
        rng = np.random.default_rng(seed)
        self._param("w1", _uniform(rng, (hidden, in_channels, 3, 3), in_channels * 9))
        self._param("b1", _uniform(rng, (hidden,), in_channels * 9))
        fan = hidden * (grid * subcells) ** 2
        w2 = _uniform(rng, (num_perms, fan), fan)
        b2 = _uniform(rng, (num_perms,), fan)
        if zero_head:
            w2[:] = 0.0
            b2[:] = 0.0
        self._param("w2", w2)
        self._param("b2", b2)

    def logits(self, puzzles: Tensor, detach: bool = False) -> Tensor:
        puzzles = nx.as_tensor(puzzles)
        if puzzles.ndim != 4 or puzzles.shape[1] != self.in_channels or tuple(puzzles.shape[2:]) != self.size:
            raise ValueError(
                f"classifier expects [B,{self.in_channels},{self.size[0]},{self.size[1]}], got {puzzles.shape}")
        w1, b1, w2, b2 = self._weights(detach)
        h = nx.relu(nx.conv2d(puzzles, w1, b1))
        pooled = nx.avg_pool_grid(h, self.grid * self.subcells)
        flat = nx.reshape(pooled, (puzzles.shape[0], -1))
        return nx.linear(flat, w2, b2)

    def __call__(self, puzzles, detach: bool = False) -> Tensor:
        return nx.softmax(self.logits(puzzles, detach=detach), axis=-1)


def jig_forward(clf: JigsawClassifier, puzzle) -> Tensor:
    """Permutation-class probabilities for one ``[C,H,W]`` map or a batch."""
    puzzle = nx.as_tensor(puzzle)
    if puzzle.ndim == 3:
        return nx.reshape(clf(nx.reshape(puzzle, (1,) + puzzle.shape)), (clf.num_perms,))
    return clf(puzzle)


def clone_architecture(clf: JigsawClassifier, seed: int) -> JigsawClassifier:
    return JigsawClassifier(clf.in_channels, clf.grid, clf.num_perms, clf.size, seed=seed, hidden=clf.hidden,
                            subcells=clf.subcells)


# --- checkpoints -------------------------------------------------------------
def checkpoint_bytes(modules: Iterable[Module]) -> bytes:
    values = np.concatenate([m.flat() for m in modules]).astype("<f8")
    return _HEADER.pack(MAGIC, VERSION, values.size) + values.tobytes()


def save_checkpoint(path, *modules: Module) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(modules))
    return path


def read_checkpoint(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    magic, version, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version} at byte 4, expected {VERSION}")
    need = _HEADER.size + 8 * count
    if len(raw) != need:
        raise FormatError(f"{path}: truncated or oversized payload, ends at byte {len(raw)}, expected {need}")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)


def load_checkpoint(path, *modules: Module) -> None:
    values = read_checkpoint(path)
    total = sum(m.num_parameters() for m in modules)
    if values.size != total:
        raise FormatError(f"{path}: holds {values.size} values, architecture needs {total}")
    pos = 0
    for m in modules:
        m.load_flat(values[pos:pos + m.num_parameters()])
        pos += m.num_parameters()
