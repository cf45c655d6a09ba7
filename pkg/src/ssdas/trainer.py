"""Bidirectional training loop.

Every epoch runs three phases in order: supervised segmentation on labeled
source plus labeled target, image-level jigsaw alignment on whole predicted
maps, and region-level jigsaw alignment on ``r x r`` crops of them.  Each
alignment phase scores source, labeled-target and unlabeled-target puzzles,
weights the source term by cross-domain similarity and the progressive
removal mask, and splits the unlabeled term by the progressive admission mask.

Random streams are independent per purpose, so switching alignment off
leaves the supervised trajectory bit-identical to a plain source+target run.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import alignment as al
from . import metrics
from . import numerics as nx
from .alignment import EpochProgress
from .config import ConfigError, ExperimentConfig
from .jigsaw import PermutationSet, build_permutation_set
from .nets import JigsawClassifier, SegModel
from .optim import OptimizerState, poly_lr, step_module

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "lr", "loss_sup", "loss_jig_s", "loss_jig_t", "loss_unlabeled", "frozen_jt", "miou_target")


class NumericalError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass
class TrainData:
    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray
    yt: np.ndarray
    xtu: np.ndarray
    xval: np.ndarray
    yval: np.ndarray
    num_classes: int
    source_ids: Optional[np.ndarray] = None
    unlabeled_ids: Optional[np.ndarray] = None

    @classmethod
    def from_split(cls, split) -> "TrainData":
        a = split.arrays()
        return cls(num_classes=split.num_classes, source_ids=np.arange(len(split.source)),
                   unlabeled_ids=split.unlabeled, **a)

    @property
    def image_size(self) -> int:
        return self.xs.shape[-1]


@dataclass
class LevelState:
    name: str
    pset: PermutationSet
    J_s: JigsawClassifier
    J_t: JigsawClassifier
    opt_s: OptimizerState
    opt_t: OptimizerState
    acda: bool
    pida: bool
    rng: np.random.Generator
    crop: int = 1
    sums: Dict[str, float] = field(default_factory=lambda: {"s": 0.0, "t": 0.0, "u": 0.0, "n": 0})
    prev_means: Optional[tuple] = None

    def reset(self) -> None:
        self.sums = {"s": 0.0, "t": 0.0, "u": 0.0, "n": 0}

    def close_epoch(self) -> None:
        n = self.sums["n"]
        if n:
            self.prev_means = (self.sums["s"] / n, self.sums["t"] / n)


@dataclass
class TrainState:
    config: ExperimentConfig
    G: SegModel
    opt_g: OptimizerState
    levels: Dict[str, LevelState]
    rng_sup: np.random.Generator
    steps_per_epoch: int
    max_iter: int
    iteration: int = 0
    progress: Optional[EpochProgress] = None
    scope_audit: Optional[list] = None
    mask_rows: Optional[dict] = None

    def lr(self, iteration: Optional[int] = None) -> float:
        it = self.iteration if iteration is None else iteration
        return poly_lr(self.config.base_lr, min(it, self.max_iter), self.max_iter, self.config.lr_power)

    @property
    def J_s(self):
        return self.levels["image"].J_s

    @property
    def J_t(self):
        return self.levels["image"].J_t


@dataclass
class TrainResult:
    model: SegModel
    state: TrainState
    rows: List[dict]
    pretrain_rows: List[dict]
    metrics: dict


# --- helpers --------------------------------------------------------------------
def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NumericalError(f"{what} is not finite ({value})")
    return value


def batches(order: np.ndarray, size: int) -> List[np.ndarray]:
    return [order[i:i + size] for i in range(0, len(order), size)]


def check_config(config: ExperimentConfig, data: TrainData) -> None:
    config.validate()
    size = data.image_size
    if data.xs.shape[-2] != size:
        raise ConfigError("image_size", "only square images are supported")
    if size != config.image_size:
        raise ConfigError("image_size", f"config says {config.image_size}, data has {size}")
    if size % config.n_image:
        raise ConfigError("n_image", f"image size {size} not divisible by {config.n_image}")
    if size % (config.r * config.n_region):
        raise ConfigError("r", f"image size {size} not divisible by r*n_region={config.r * config.n_region}")
    if len(data.xt) < 1 or len(data.xs) < 1 or len(data.xtu) < 1:
        raise ConfigError("k", "source, labeled target and unlabeled target must be non-empty")
    if config.N > math.factorial(config.n_image ** 2):
        raise ConfigError("N", f"more classes than permutations of a {config.n_image}x{config.n_image} grid")
    if config.N_region > math.factorial(config.n_region ** 2):
        raise ConfigError("N_region", f"more classes than permutations of a {config.n_region}x{config.n_region} grid")


def init_state(config: ExperimentConfig, data: TrainData) -> TrainState:
    check_config(config, data)
    ss = np.random.SeedSequence(config.seed)
    (s_g, s_sup, s_img, s_reg) = ss.spawn(4)
    G = SegModel(data.num_classes, seed=int(s_g.generate_state(1)[0]))
    spe = len(batches(np.arange(len(data.xs)), config.batch_size))
    total_epochs = config.epochs_pre + config.max_epoch
    opt = lambda: OptimizerState(config.momentum, config.weight_decay, config.base_lr)
    levels = {}
    size = data.image_size
    specs = (("image", config.image_level, config.acda_image, config.pida_image, config.n_image, config.N, 1, s_img),
             ("region", config.region_level, config.acda_region, config.pida_region, config.n_region,
              config.N_region, config.r, s_reg))
    for name, on, acda, pida, n, N, crop, seq in specs:
        if not on:
            continue
        s_init_s, s_init_t, s_perm, s_rng = seq.spawn(4)
        pset = build_permutation_set(n, N, int(s_perm.generate_state(1)[0]) % (2 ** 31))
        side = size // crop
        J_s = JigsawClassifier(data.num_classes, n, N, (side, side), seed=int(s_init_s.generate_state(1)[0]))
        J_t = JigsawClassifier(data.num_classes, n, N, (side, side), seed=int(s_init_t.generate_state(1)[0]))
        levels[name] = LevelState(name, pset, J_s, J_t, opt(), opt(), acda, pida,
                                  np.random.default_rng(s_rng), crop=crop)
    return TrainState(config, G, opt(), levels, np.random.default_rng(s_sup), spe, max(1, total_epochs * spe),
                      mask_rows={"source": [], "target": []} if config.dump_masks else None)


def crop_regions(seg_map, r: int, n: int = 1) -> list:
    """Row-major ``r x r`` tiling of a ``[C,H,W]`` map."""
    h, w = seg_map.shape[-2:]
    if h % r or w % r or (h // r) % n or (w // r) % n:
        raise ValueError(f"{h}x{w} map cannot be cut into {r}x{r} regions divisible by {n}")
    rh, rw = h // r, w // r
    return [seg_map[..., i * rh:(i + 1) * rh, j * rw:(j + 1) * rw] for i in range(r) for j in range(r)]


def crop_batch(P: nx.Tensor, r: int) -> nx.Tensor:
    """``[B,C,H,W]`` -> ``[B*r*r, C, H/r, W/r]``, regions row-major within each map."""
    if r == 1:
        return P
    b, c, h, w = P.shape
    if h % r or w % r:
        raise ValueError(f"{h}x{w} map not divisible into {r}x{r} regions")
    t = nx.reshape(P, (b, c, r, h // r, r, w // r))
    t = nx.transpose(t, (0, 2, 4, 1, 3, 5))
    return nx.reshape(t, (b * r * r, c, h // r, w // r))


# --- supervised step ------------------------------------------------------------------
def supervised_loss(G: SegModel, xs, ys, xt, yt) -> nx.Tensor:
    if len(xs) == 0 or len(xt) == 0:
        raise ValueError("source and target batches must be non-empty")
    ns = len(xs)
    P = G(np.concatenate([xs, xt]))
    ls = nx.mean(nx.cross_entropy(P[:ns], ys, axis=1))
    lt = nx.mean(nx.cross_entropy(P[ns:], yt, axis=1))
    return ls + lt


def s_plus_t_step(state: TrainState, xs, ys, xt, yt) -> float:
    """One SGD step of G on pixel-averaged source CE plus target CE."""
    G = state.G
    G.zero_grad()
    loss = supervised_loss(G, xs, ys, xt, yt)
    value = _finite(loss.item(), "supervised loss")
    nx.backward(loss)
    step_module(state.opt_g, G, state.lr())
    state.iteration += 1
    return value


def supervised_phase(state: TrainState, data: TrainData) -> float:
    cfg = state.config
    order = state.rng_sup.permutation(len(data.xs))
    total = 0.0
    chunks = batches(order, cfg.batch_size)
    for idx in chunks:
        tgt = state.rng_sup.integers(0, len(data.xt), size=cfg.tgt_batch)
        total += s_plus_t_step(state, data.xs[idx], data.ys[idx], data.xt[tgt], data.yt[tgt])
    return total / len(chunks)


# --- alignment ------------------------------------------------------------------------
def _zero(*modules) -> None:
    for m in modules:
        m.zero_grad()


def alignment_step(state: TrainState, level: LevelState, P_s: nx.Tensor, P_t: nx.Tensor, P_tu: nx.Tensor,
                   lr: float, ids: Optional[tuple] = None) -> None:
    """Masked jigsaw update of G, J_s and J_t on already-cropped maps."""
    cfg = state.config
    lam = cfg.lambda_j
    J_s, J_t = level.J_s, level.J_t
    src = al.make_puzzles(P_s, level.pset, level.rng)
    tgt = al.make_puzzles(P_t, level.pset, level.rng)
    unl = al.make_puzzles(P_tu, level.pset, level.rng)
    ones_s = np.ones(len(src))

    cds = al.cds_map(src, J_s, J_t) if (level.acda or level.pida) else ones_s
    weight = cds if level.acda else ones_s
    m_rm = al.compute_m_rm(cds, state.progress) if level.pida else ones_s

    parts = {}
    labeled = al.labeled_flow_loss(src, tgt, J_s, J_t, weight, m_rm, lam, parts=parts)
    if level.pida:
        ent = al.jig_entropy(unl, J_t)
        m_add = al.compute_m_add(ent, state.progress)
        admitted, rest = al.unlabeled_flow_loss(unl, J_s, m_add, lam)
        unlabeled = admitted + rest
        if state.scope_audit is not None:
            _zero(state.G, J_s, J_t)
            nx.backward(rest)
            worst = max((float(np.abs(p.grad).max()) for p in J_s.parameters() if p.grad is not None), default=0.0)
            state.scope_audit.append(worst)
        if state.mask_rows is not None and ids is not None:
            state.mask_rows["target"].extend(
                (state.progress.epoch, i, e, m) for i, e, m in zip(ids[1], ent, m_add))
    else:
        unlabeled = al.acda_unlabeled_loss(unl, J_s, lam)
    if state.mask_rows is not None and ids is not None:
        state.mask_rows["source"].extend(
            (state.progress.epoch, i, c, m) for i, c, m in zip(ids[0], cds, m_rm))

    total = labeled + unlabeled
    _finite(total.item(), f"{level.name}-level alignment loss")
    _zero(state.G, J_s, J_t)
    nx.backward(total)
    step_module(state.opt_g, state.G, lr)
    step_module(level.opt_s, J_s, lr * cfg.jig_lr_mult)
    step_module(level.opt_t, J_t, lr * cfg.jig_lr_mult)

    level.sums["s"] += float(parts["source"].mean())
    level.sums["t"] += float(parts["target"].mean())
    level.sums["u"] += unlabeled.item()
    level.sums["n"] += 1


def alignment_phase(state: TrainState, level: LevelState, data: TrainData, start_iter: int) -> None:
    cfg = state.config
    rng = level.rng
    src_order = rng.permutation(len(data.xs))
    unl_order = rng.permutation(len(data.xtu))
    level.reset()
    for j, idx in enumerate(batches(src_order, cfg.batch_size)):
        u = unl_order[np.arange(j * cfg.batch_size, (j + 1) * cfg.batch_size) % len(unl_order)]
        t = rng.integers(0, len(data.xt), size=cfg.tgt_batch)
        ns, nt = len(idx), len(t)
        P = state.G(np.concatenate([data.xs[idx], data.xt[t], data.xtu[u]]))
        P_s, P_t, P_tu = (crop_batch(x, level.crop) for x in (P[:ns], P[ns:ns + nt], P[ns + nt:]))
        ids = None
        if level.name == "image" and data.source_ids is not None and data.unlabeled_ids is not None:
            ids = (data.source_ids[idx], data.unlabeled_ids[u])
        alignment_step(state, level, P_s, P_t, P_tu, state.lr(start_iter + j), ids=ids)
    level.close_epoch()


def jigsaw_pretrain_phase(state: TrainState, level: LevelState, data: TrainData, start_iter: int) -> None:
    """Unmasked jigsaw training of J_s / J_t on maps of the current G (G untouched)."""
    cfg = state.config
    rng = level.rng
    level.reset()
    for j, idx in enumerate(batches(rng.permutation(len(data.xs)), cfg.batch_size)):
        t = rng.integers(0, len(data.xt), size=cfg.tgt_batch)
        with nx.no_grad():
            P_s = crop_batch(state.G(data.xs[idx]), level.crop)
            P_t = crop_batch(state.G(data.xt[t]), level.crop)
        src = al.make_puzzles(P_s, level.pset, rng)
        tgt = al.make_puzzles(P_t, level.pset, rng)
        ls = al.puzzle_loss(src, level.J_s)
        lt = al.puzzle_loss(tgt, level.J_t)
        loss = (nx.mean(ls) + nx.mean(lt)) * cfg.lambda_j
        _finite(loss.item(), f"{level.name}-level pretraining loss")
        _zero(level.J_s, level.J_t)
        nx.backward(loss)
        lr = state.lr(start_iter + j) * cfg.jig_lr_mult
        step_module(level.opt_s, level.J_s, lr)
        step_module(level.opt_t, level.J_t, lr)
        level.sums["s"] += float(ls.data.mean())
        level.sums["t"] += float(lt.data.mean())
        level.sums["n"] += 1
    level.close_epoch()


def pretrain(state: TrainState, data: TrainData, epochs_pre: int) -> List[dict]:
    """Supervised warm-up of G with jigsaw classifiers fitted to its maps."""
    rows = []
    for e in range(epochs_pre):
        start = state.iteration
        lr = state.lr()
        sup = supervised_phase(state, data)
        for level in state.levels.values():
            jigsaw_pretrain_phase(state, level, data, start)
        rows.append({"epoch": e, "lr": lr, "loss_sup": sup})
    return rows


def maybe_freeze_jt(state: TrainState) -> None:
    """Freeze each level's J_t for the coming epoch iff its last mean loss is below J_s's."""
    for level in state.levels.values():
        if level.prev_means is None:
            level.J_t.frozen = False
        else:
            mean_s, mean_t = level.prev_means
            level.J_t.frozen = bool(mean_t < mean_s)


def evaluate_target(state: TrainState, data: TrainData) -> float:
    return metrics.miou(metrics.predict(state.G, data.xval), data.yval, data.num_classes).miou


def _row(state: TrainState, epoch: int, lr: float, sup: float, miou: Optional[float]) -> dict:
    row = {"epoch": epoch, "lr": lr, "loss_sup": sup, "loss_jig_s": None, "loss_jig_t": None,
           "loss_unlabeled": None, "frozen_jt": None, "miou_target": miou}
    if state.levels:
        n = sum(l.sums["n"] for l in state.levels.values())
        if n:
            row["loss_jig_s"] = sum(l.sums["s"] for l in state.levels.values()) / n
            row["loss_jig_t"] = sum(l.sums["t"] for l in state.levels.values()) / n
            row["loss_unlabeled"] = sum(l.sums["u"] for l in state.levels.values()) / n
        lead = state.levels.get("image") or state.levels["region"]
        row["frozen_jt"] = int(lead.J_t.frozen)
    return row


def run_epoch(state: TrainState, data: TrainData, epoch: int, evaluate: bool = True) -> dict:
    cfg = state.config
    state.progress = EpochProgress(epoch, cfg.max_epoch)
    maybe_freeze_jt(state)
    start = state.iteration
    lr = state.lr()
    sup = supervised_phase(state, data)
    for name in ("image", "region"):
        if name in state.levels:
            alignment_phase(state, state.levels[name], data, start)
    miou = evaluate_target(state, data) if evaluate else None
    return _row(state, epoch, lr, sup, miou)


def _should_eval(cfg: ExperimentConfig, epoch: int) -> bool:
    return (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.max_epoch - 1


def train(config: ExperimentConfig, data: TrainData, audit_scope: bool = False) -> TrainResult:
    """Pretrain, then ``max_epoch`` epochs of supervised -> image -> region phases."""
    state = init_state(config, data)
    if audit_scope:
        state.scope_audit = []
    pre_rows = pretrain(state, data, config.epochs_pre)
    rows = []
    for epoch in range(config.max_epoch):
        rows.append(run_epoch(state, data, epoch, evaluate=_should_eval(config, epoch)))
        log.debug("epoch %d %s", epoch, rows[-1])
    final = metrics.evaluate(state.G, data.xval, data.yval, data.num_classes)
    return TrainResult(state.G, state, rows, pre_rows, final)


def train_s_plus_t(config: ExperimentConfig, data: TrainData) -> TrainResult:
    """Supervised-only reference run (no jigsaw classifiers at all)."""
    check_config(config, data)
    ss = np.random.SeedSequence(config.seed)
    s_g, s_sup, _, _ = ss.spawn(4)
    G = SegModel(data.num_classes, seed=int(s_g.generate_state(1)[0]))
    spe = len(batches(np.arange(len(data.xs)), config.batch_size))
    total = max(1, (config.epochs_pre + config.max_epoch) * spe)
    state = TrainState(config, G, OptimizerState(config.momentum, config.weight_decay, config.base_lr), {},
                       np.random.default_rng(s_sup), spe, total)
    pre_rows = []
    for e in range(config.epochs_pre):
        lr = state.lr()
        pre_rows.append({"epoch": e, "lr": lr, "loss_sup": supervised_phase(state, data)})
    rows = []
    for epoch in range(config.max_epoch):
        lr = state.lr()
        sup = supervised_phase(state, data)
        miou = evaluate_target(state, data) if _should_eval(config, epoch) else None
        rows.append(_row(state, epoch, lr, sup, miou))
    final = metrics.evaluate(G, data.xval, data.yval, data.num_classes)
    return TrainResult(G, state, rows, pre_rows, final)


def write_curves(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in rows:
            w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in CURVE_COLUMNS])
    return path
