"""Two-phase training and full-grid evaluation.

Phase one trains the teacher on all four modalities with the soft Dice loss.
Phase two freezes it and trains a student under uniformly sampled modality
dropout with the joint objective

    lambda1 * MS-TKD + lambda2 * logit + lambda3 * GSME + lambda4 * Dice,

alternating one discriminator step with each student step when the GSME term
is active.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .data import (
    ModalityMask,
    REGIONS,
    VolumeCase,
    apply_modality_mask,
    augment,
    modality_combinations,
)
from .distill import LossWeights, logit_loss, ms_tkd_loss
from .gsme import Discriminator, StyleFeatures, discriminator_loss, generator_loss, gsme_loss
from .metrics import MetricsRow, binarize, dice, hd95
from .net import ForwardTrace, NetConfig, Network

logger = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5
COMPONENTS = ("ms_tkd", "logit", "gsme", "dice")


@dataclass(frozen=True)
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    epochs: int = 30
    batch_size: int = 1
    seed: int = 0
    use_ms_tkd: bool = True
    use_gsme: bool = True
    use_slkd: bool = True
    use_logit_mse: bool = True
    augment: bool = True
    disc_hidden: int = 32

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")

    @property
    def distills(self) -> bool:
        return self.use_ms_tkd or self.use_gsme or self.use_slkd or self.use_logit_mse

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"]["dims"] = list(self.net.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        net = NetConfig(**d.pop("net", {}))
        weights = LossWeights(**d.pop("weights", {}))
        return cls(net=net, weights=weights, **d)

    def without_distillation(self) -> "TrainConfig":
        return replace(self, use_ms_tkd=False, use_gsme=False, use_slkd=False, use_logit_mse=False)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def soft_dice_loss(logits: Tensor, label: np.ndarray) -> Tensor:
    """``1 - mean_c (2 sum(p g) + s) / (sum(p) + sum(g) + s)`` with ``p = sigmoid(logits)``."""
    label = np.asarray(label, dtype=np.float64)
    if logits.shape != label.shape:
        raise ad.ShapeError(f"logits {logits.shape} vs label {label.shape}")
    c = logits.shape[0]
    p = ad.reshape(ad.sigmoid(logits), (c, -1))
    g = label.reshape(c, -1)
    inter = ad.sum(p * Tensor(g), 1)
    denom = ad.sum(p, 1) + Tensor(g.sum(axis=1) + DICE_SMOOTH)
    ratio = (inter * 2.0 + DICE_SMOOTH) / denom
    return 1.0 - ad.mean(ratio)


def compute_components(
    cfg: TrainConfig,
    trace_m: ForwardTrace,
    label: np.ndarray,
    trace_f: Optional[ForwardTrace] = None,
    adv: Optional[Tensor] = None,
) -> "OrderedDict[str, Tensor]":
    """Unweighted component losses; disabled terms are constant zeros."""
    w = cfg.weights
    zero = Tensor(0.0)
    comps: "OrderedDict[str, Tensor]" = OrderedDict((k, zero) for k in COMPONENTS)
    if cfg.use_ms_tkd:
        comps["ms_tkd"] = ms_tkd_loss(trace_f, trace_m, w)
    if cfg.use_slkd or cfg.use_logit_mse:
        comps["logit"] = logit_loss(trace_f.logits, trace_m.logits, w, use_kl=cfg.use_slkd, use_mse=cfg.use_logit_mse)
    if cfg.use_gsme:
        comps["gsme"] = gsme_loss(StyleFeatures.from_trace(trace_f), StyleFeatures.from_trace(trace_m), adv, w)
    comps["dice"] = soft_dice_loss(trace_m.logits, label)
    return comps


def total_loss(components: Dict[str, Tensor], w: LossWeights) -> Tensor:
    lam = (w.lambda1, w.lambda2, w.lambda3, w.lambda4)
    out = None
    for name, coef in zip(COMPONENTS, lam):
        term = components[name] * coef
        out = term if out is None else out + term
    return out


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def adam_step(
    param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
    lr: float, beta1: float, beta2: float, eps: float = 1e-8,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update; returns ``(param, m, v)`` as new arrays."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ad.ShapeError(f"adam_step shapes differ: {param.shape}, {grad.shape}, {m.shape}, {v.shape}")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, params: Dict[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.m[k], self.v[k] = adam_step(
                p.data, g, self.m[k], self.v[k], self.t, self.lr, self.beta1, self.beta2, self.eps
            )


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------


@dataclass
class TrainLog:
    phase: str
    rows: List[Dict[str, float]] = field(default_factory=list)
    mask_counts: Dict[str, int] = field(default_factory=dict)
    teacher_forward_calls: int = 0

    @property
    def totals(self) -> List[float]:
        return [r["total"] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", *COMPONENTS, "total"])
        for r in self.rows:
            writer.writerow([r["epoch"]] + [f"{r[k]:.10f}" for k in (*COMPONENTS, "total")])
        return buf.getvalue()

    def histogram_csv(self) -> str:
        lines = ["mask_bits,count"]
        lines += [f"{m.bits},{self.mask_counts.get(m.bits, 0)}" for m in modality_combinations()]
        return "\n".join(lines) + "\n"


def _epoch_row(epoch: int, sums: Dict[str, float], n: int) -> Dict[str, float]:
    row = {"epoch": epoch}
    row.update({k: sums[k] / n for k in (*COMPONENTS, "total")})
    return row


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_teacher(cfg: TrainConfig, cases: Sequence[VolumeCase],
                  on_epoch: Optional[Callable[[Dict[str, float]], None]] = None) -> Tuple[Network, TrainLog]:
    """Train on full-modality inputs with the soft Dice loss only."""
    if not cases:
        raise ValueError("teacher training needs a non-empty training split")
    rng = np.random.default_rng(cfg.seed)
    net = Network(cfg.net, seed=cfg.seed)
    opt = Adam(net.params, cfg.lr, cfg.beta1, cfg.beta2)
    log = TrainLog("teacher")
    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys((*COMPONENTS, "total"), 0.0)
        for i in rng.permutation(len(cases)):
            case = augment(cases[i], rng) if cfg.augment else cases[i]
            try:
                loss = soft_dice_loss(net(case.image).logits, case.label)
                net.zero_grad()
                loss.backward()
                opt.step()
            except NumericError as exc:
                raise NumericError(f"teacher diverged at epoch {epoch}, case {case.id}: {exc}") from exc
            sums["dice"] += loss.item()
            sums["total"] += loss.item()
        row = _epoch_row(epoch, sums, len(cases))
        log.rows.append(row)
        logger.info("teacher epoch %d loss %.5f", epoch, row["total"])
        if on_epoch:
            on_epoch(row)
    return net, log


def student_seed(seed: int) -> int:
    return seed + 7919


def train_student(cfg: TrainConfig, cases: Sequence[VolumeCase], teacher: Network,
                  on_epoch: Optional[Callable[[Dict[str, float]], None]] = None,
                  ) -> Tuple[Network, Discriminator, TrainLog]:
    """Distil a frozen teacher into a student that sees random modality subsets."""
    if not cases:
        raise ValueError("student training needs a non-empty training split")
    if teacher.cfg != cfg.net:
        raise ValueError(f"teacher architecture {teacher.cfg} differs from configured {cfg.net}")
    teacher = teacher.frozen()
    rng = np.random.default_rng(student_seed(cfg.seed))
    student = Network(cfg.net, seed=student_seed(cfg.seed))
    c2 = cfg.net.channels[2]
    disc = Discriminator(c2 + cfg.net.embed_dim, cfg.disc_hidden, seed=student_seed(cfg.seed) + 1)
    opt = Adam(student.params, cfg.lr, cfg.beta1, cfg.beta2)
    d_opt = Adam(disc.params, cfg.lr, cfg.beta1, cfg.beta2)
    combos = modality_combinations()
    log = TrainLog("student", mask_counts={m.bits: 0 for m in combos})

    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys((*COMPONENTS, "total"), 0.0)
        for i in rng.permutation(len(cases)):
            case = augment(cases[i], rng) if cfg.augment else cases[i]
            mask = combos[int(rng.integers(len(combos)))]
            log.mask_counts[mask.bits] += 1
            try:
                trace_f = None
                if cfg.distills:
                    trace_f = teacher(case.image)
                    log.teacher_forward_calls += 1
                trace_m = student(apply_modality_mask(case, mask))
                adv = None
                if cfg.use_gsme:
                    loss_d = discriminator_loss(disc, trace_f.fused, trace_m.fused)
                    disc.zero_grad()
                    loss_d.backward()
                    d_opt.step()
                    adv = generator_loss(disc, trace_m.fused)
                comps = compute_components(cfg, trace_m, case.label, trace_f, adv)
                loss = total_loss(comps, cfg.weights)
                student.zero_grad()
                loss.backward()
                opt.step()
                disc.zero_grad()
            except NumericError as exc:
                raise NumericError(
                    f"student diverged at epoch {epoch}, case {case.id}, mask {mask.bits}: {exc}"
                ) from exc
            for k in COMPONENTS:
                sums[k] += comps[k].item()
            sums["total"] += loss.item()
        row = _epoch_row(epoch, sums, len(cases))
        log.rows.append(row)
        logger.info("student epoch %d total %.5f", epoch, row["total"])
        if on_epoch:
            on_epoch(row)
    return student, disc, log


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

Predictor = Callable[[np.ndarray, ModalityMask, VolumeCase], np.ndarray]


def network_predictor(net: Network, threshold: float = 0.5) -> Predictor:
    frozen = net.frozen()

    def predict(image: np.ndarray, mask: ModalityMask, case: VolumeCase) -> np.ndarray:
        return binarize(frozen(image).logits.data, threshold)

    return predict


def oracle_predictor(image: np.ndarray, mask: ModalityMask, case: VolumeCase) -> np.ndarray:
    return case.label > 0.5


def _nanmean(values: Sequence[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(predictor, cases: Sequence[VolumeCase],
             masks: Optional[Sequence[ModalityMask]] = None) -> List[MetricsRow]:
    """Mean Dice / HD95 per (mask, region) in table order, then one ``avg`` row per region.

    ``predictor`` is a :class:`Network` or a callable ``(image, mask, case) -> binary (3, H, W, D)``.
    """
    if not cases:
        raise ValueError("evaluation needs a non-empty test split")
    if isinstance(predictor, Network):
        predictor = network_predictor(predictor)
    masks = list(masks) if masks is not None else modality_combinations()
    rows: List[MetricsRow] = []
    for mask in masks:
        per_region = {r: ([], []) for r in REGIONS}
        for case in cases:
            pred = predictor(apply_modality_mask(case, mask), mask, case)
            gt = case.label > 0.5
            for ri, region in enumerate(REGIONS):
                per_region[region][0].append(dice(pred[ri], gt[ri]))
                per_region[region][1].append(hd95(pred[ri], gt[ri]))
        for region in REGIONS:
            d, h = per_region[region]
            rows.append(MetricsRow(mask.bits, region, float(np.mean(d)), _nanmean(h)))
    for region in REGIONS:
        sel = [r for r in rows if r.region == region]
        rows.append(MetricsRow("avg", region, float(np.mean([r.dice for r in sel])), _nanmean([r.hd95 for r in sel])))
    return rows


def mean_dice(rows: Sequence[MetricsRow], region: str = "WT") -> float:
    for r in rows:
        if r.mask == "avg" and r.region == region:
            return r.dice
    sel = [r.dice for r in rows if r.region == region]
    return float(np.mean(sel))
