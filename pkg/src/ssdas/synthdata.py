"""Procedural two-domain segmentation benchmark.

Each image holds 1-4 non-overlapping filled shapes (circle, square, triangle)
on a textured background; the mask is the exact rasterisation.  The target
domain renders the same kind of scenes through an appearance shift: hue
rotation about the grey axis, a brightness offset and additive Gaussian
noise.  Images are 8-bit RGB (``[N, H, W, 3]``), masks 8-bit class indices.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Tuple

import numpy as np

from .nets import FormatError

SHAPES = ("background", "circle", "square", "triangle")
BASE_COLORS = (
    (0.50, 0.50, 0.48),
    (0.85, 0.30, 0.25),
    (0.30, 0.75, 0.30),
    (0.30, 0.40, 0.85),
)
# Per unit of --shift.
HUE_PER_SHIFT = 90.0
NOISE_PER_SHIFT = 0.08
BRIGHTNESS_PER_SHIFT = -0.12


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    height: int = 32
    width: int = 32
    num_classes: int = 4
    colors: Tuple[Tuple[float, float, float], ...] = BASE_COLORS
    color_jitter: float = 0.10
    texture_amp: float = 0.06
    texture_freq: float = 0.35
    hue_shift: float = 0.0  # degrees
    noise_std: float = 0.0
    brightness: float = 0.0
    min_size: int = 4
    max_size: int = 7
    max_shapes: int = 4
    # Each foreground class keeps to its own horizontal band (top to bottom
    # in class order), a scene layout shared by both domains.
    layout_bands: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in 2..{len(SHAPES)}")
        if self.height < 2 * self.max_size + 2 or self.width < 2 * self.max_size + 2:
            raise ValueError("image too small for the shape size range")
        if len(self.colors) < self.num_classes:
            raise ValueError("one base colour per class required")

    def appearance(self) -> dict:
        return {"hue_shift": self.hue_shift, "noise_std": self.noise_std, "brightness": self.brightness}


def shifted(spec: DomainSpec, magnitude: float, seed: int) -> DomainSpec:
    """Target-domain spec: same scenes statistics, appearance moved by ``magnitude``."""
    return replace(spec, seed=seed, hue_shift=HUE_PER_SHIFT * magnitude,
                   noise_std=NOISE_PER_SHIFT * magnitude,
                   brightness=BRIGHTNESS_PER_SHIFT * magnitude)


@dataclass
class Domain:
    images: np.ndarray  # uint8 [N, H, W, 3]
    masks: np.ndarray  # uint8 [N, H, W]
    spec: DomainSpec

    def __len__(self) -> int:
        return self.images.shape[0]


def _shape_mask(kind: int, cy: int, cx: int, s: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 1:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= s * s
    if kind == 2:
        return (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= s)
    top = cy - s
    depth = yy - top
    return (depth >= 0) & (depth <= 2 * s) & (2 * np.abs(xx - cx) <= depth)


def _hue_matrix(degrees: float) -> np.ndarray:
    """Rotation about the (1,1,1) axis of RGB space."""
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    k = 1.0 / 3.0
    r = np.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
        [k * (1 - c) + r * s, c + k * (1 - c), k * (1 - c) - r * s],
        [k * (1 - c) - r * s, k * (1 - c) + r * s, c + k * (1 - c)],
    ])


def render(spec: DomainSpec, index: int, retries: int = 60) -> Tuple[np.ndarray, np.ndarray]:
    """One image/mask pair, deterministic in ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.height, spec.width
    mask = np.zeros((h, w), dtype=np.uint8)
    blocked = np.zeros((h, w), dtype=bool)
    fg = spec.num_classes - 1
    count = int(rng.integers(1, spec.max_shapes + 1))
    kinds = [1 + index % fg] + [int(rng.integers(1, fg + 1)) for _ in range(count - 1)]
    placed = 0
    for j, kind in enumerate(kinds):
        for _ in range(retries):
            s = int(rng.integers(spec.min_size, spec.max_size + 1))
            if spec.layout_bands:
                lo = s + (h - 2 * s) * (kind - 1) // fg
                hi = s + (h - 2 * s) * kind // fg
                cy = int(rng.integers(lo, max(hi, lo + 1)))
            else:
                cy = int(rng.integers(s, h - s))
            cx = int(rng.integers(s, w - s))
            m = _shape_mask(kind, cy, cx, s, h, w)
            if not (m & blocked).any():
                break
        else:
            if j == 0:
                raise GenerationError(f"cannot place a shape in image {index} after {retries} tries")
            continue
        mask[m] = kind
        grown = m.copy()
        grown[1:] |= m[:-1]
        grown[:-1] |= m[1:]
        grown[:, 1:] |= grown[:, :-1]
        grown[:, :-1] |= grown[:, 1:]
        blocked |= grown
        placed += 1

    colors = np.asarray(spec.colors[:spec.num_classes], dtype=np.float64)
    img = np.empty((h, w, 3))
    img[:] = colors[0] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
    for region in np.unique(mask):
        if region == 0:
            continue
        # one jittered colour per class and image
        img[mask == region] = colors[region] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
    yy, xx = np.mgrid[0:h, 0:w]
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * spec.texture_freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    img += spec.texture_amp * wave[..., None]

    if spec.hue_shift:
        img = img @ _hue_matrix(spec.hue_shift).T
    img = img + spec.brightness
    if spec.noise_std:
        img = img + rng.normal(0.0, spec.noise_std, img.shape)
    img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return img, mask


def generate_domain(spec: DomainSpec, count: int) -> Domain:
    pairs = [render(spec, i) for i in range(count)]
    images = np.stack([p[0] for p in pairs]) if pairs else np.zeros((0, spec.height, spec.width, 3), np.uint8)
    masks = np.stack([p[1] for p in pairs]) if pairs else np.zeros((0, spec.height, spec.width), np.uint8)
    return Domain(images, masks, spec)


def to_float(images: np.ndarray) -> np.ndarray:
    """uint8 ``[N,H,W,3]`` -> float64 ``[N,3,H,W]`` in [0, 1]."""
    return np.ascontiguousarray(np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2) / 255.0)


# --- k-shot split ------------------------------------------------------------------
@dataclass
class DatasetSplit:
    source: Domain
    target: Domain
    labeled: np.ndarray
    unlabeled: np.ndarray
    validation: np.ndarray

    @property
    def k(self) -> int:
        return int(self.labeled.size)

    @property
    def num_classes(self) -> int:
        return self.source.spec.num_classes

    def arrays(self) -> dict:
        """Float training arrays; unlabeled target labels are kept only for audits."""
        t = self.target
        return {
            "xs": to_float(self.source.images),
            "ys": self.source.masks.astype(np.int64),
            "xt": to_float(t.images[self.labeled]),
            "yt": t.masks[self.labeled].astype(np.int64),
            "xtu": to_float(t.images[self.unlabeled]),
            "xval": to_float(t.images[self.validation]),
            "yval": t.masks[self.validation].astype(np.int64),
        }

    def index_document(self) -> dict:
        return {
            "k": self.k,
            "labeled": self.labeled.tolist(),
            "unlabeled": self.unlabeled.tolist(),
            "validation": self.validation.tolist(),
        }


def make_split(source: Domain, target: Domain, k: int, seed: int, n_val: int = 50) -> DatasetSplit:
    """Fixed validation subset, ``k`` labeled shots, the rest unlabeled.

    Validation is drawn independently of ``k`` and shots for larger ``k`` are
    supersets of those for smaller ``k`` under the same seed.
    """
    n = len(target)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n_val < 0 or k > n - n_val:
        raise ValueError(f"k={k} too large for {n} target images with {n_val} held out")
    val_rng, shot_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    order = val_rng.permutation(n)
    validation = np.sort(order[:n_val])
    rest = np.sort(order[n_val:])
    rest = rest[shot_rng.permutation(rest.size)]
    labeled = rest[:k]
    unlabeled = np.sort(rest[k:])
    return DatasetSplit(source, target, labeled, unlabeled, validation)


def build_benchmark(shift: float = 1.0, k: int = 1, seed: int = 0, n_source: int = 200,
                    n_unlabeled: int = 200, n_val: int = 50, max_k: int = 20,
                    base: DomainSpec = DomainSpec()) -> DatasetSplit:
    """Default benchmark: 200 source images, target pool 200 + 50 + ``max_k``."""
    src_spec = replace(base, seed=2 * seed + 1)
    tgt_spec = shifted(base, shift, seed=2 * seed + 2)
    source = generate_domain(src_spec, n_source)
    target = generate_domain(tgt_spec, n_unlabeled + n_val + max(max_k, k))
    return make_split(source, target, k, seed, n_val=n_val)


# --- netpbm I/O --------------------------------------------------------------------
def _write_pnm(path, magic: bytes, w: int, h: int, payload: bytes) -> Path:
    path = Path(path)
    path.write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + payload)
    return path


def write_image(path, image: np.ndarray) -> Path:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be uint8 [H, W, 3]")
    return _write_pnm(path, b"P6", image.shape[1], image.shape[0], image.tobytes())


def write_mask(path, mask: np.ndarray) -> Path:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise ValueError("mask must be [H, W] with values in 0..255")
    return _write_pnm(path, b"P5", mask.shape[1], mask.shape[0], mask.astype(np.uint8).tobytes())


def _parse_pnm(raw: bytes, magic: bytes, channels: int, name: str) -> np.ndarray:
    if raw[:2] != magic:
        raise FormatError(f"{name}: expected {magic.decode()} magic at byte 0, found {raw[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{name}: malformed header at byte {pos}")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(f"{name}: missing separator after header at byte {pos}")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{name}: maxval {maxval} unsupported (need 255) near byte {pos}")
    need = w * h * channels
    if len(raw) - pos < need:
        raise FormatError(f"{name}: truncated payload at byte {len(raw)}, expected {pos + need}")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return data.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_image(path) -> np.ndarray:
    return _parse_pnm(Path(path).read_bytes(), b"P6", 3, str(path))


def read_mask(path) -> np.ndarray:
    return _parse_pnm(Path(path).read_bytes(), b"P5", 1, str(path))


# --- dataset directories --------------------------------------------------------------
def write_dataset(root, split: DatasetSplit, extra: dict = None) -> Path:
    """``<root>/{source,target}/{images,masks}/NNNN.{ppm,pgm}`` plus ``split.json``."""
    root = Path(root)
    for name, dom in (("source", split.source), ("target", split.target)):
        (root / name / "images").mkdir(parents=True, exist_ok=True)
        (root / name / "masks").mkdir(parents=True, exist_ok=True)
        for i in range(len(dom)):
            write_image(root / name / "images" / f"{i:04d}.ppm", dom.images[i])
            write_mask(root / name / "masks" / f"{i:04d}.pgm", dom.masks[i])
    doc = split.index_document()
    doc["source_spec"] = asdict(split.source.spec)
    doc["target_spec"] = asdict(split.target.spec)
    doc.update(extra or {})
    (root / "split.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return root


def _spec_from(doc: dict) -> DomainSpec:
    doc = dict(doc)
    doc["colors"] = tuple(tuple(c) for c in doc["colors"])
    return DomainSpec(**doc)


def _read_domain(folder: Path, spec: DomainSpec) -> Domain:
    imgs = sorted((folder / "images").glob("*.ppm"))
    msks = sorted((folder / "masks").glob("*.pgm"))
    if not imgs or len(imgs) != len(msks):
        raise FileNotFoundError(f"{folder}: missing or unmatched image/mask files")
    return Domain(np.stack([read_image(p) for p in imgs]), np.stack([read_mask(p) for p in msks]), spec)


def read_dataset(root) -> DatasetSplit:
    root = Path(root)
    meta = root / "split.json"
    if not meta.exists():
        raise FileNotFoundError(f"{meta} not found")
    doc = json.loads(meta.read_text())
    source = _read_domain(root / "source", _spec_from(doc["source_spec"]))
    target = _read_domain(root / "target", _spec_from(doc["target_spec"]))
    return DatasetSplit(source, target, np.asarray(doc["labeled"], dtype=np.int64),
                        np.asarray(doc["unlabeled"], dtype=np.int64),
                        np.asarray(doc["validation"], dtype=np.int64))
