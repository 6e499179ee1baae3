"""Global style matching: Gram-pair feature matching plus an adversarial feature discriminator."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distill import LossWeights

D_CLAMP = 1e-6


@dataclass
class StyleFeatures:
    """Encoder, transformer and decoder features flattened to ``(channels, S)`` on a shared grid."""

    f_enc: Tensor
    f_t: Tensor
    f_dec: Tensor

    def __post_init__(self):
        lengths = {self.f_enc.shape[-1], self.f_t.shape[-1], self.f_dec.shape[-1]}
        if any(t.ndim != 2 for t in (self.f_enc, self.f_t, self.f_dec)) or len(lengths) != 1:
            raise ad.ShapeError(
                f"style features need a shared spatial length, got "
                f"{self.f_enc.shape}, {self.f_t.shape}, {self.f_dec.shape}"
            )

    @classmethod
    def from_trace(cls, trace) -> "StyleFeatures":
        return cls(trace.f_enc_grid, trace.f_t, trace.f_dec)

    def detach(self) -> "StyleFeatures":
        return StyleFeatures(self.f_enc.detach(), self.f_t.detach(), self.f_dec.detach())


def gram_pairs(s: StyleFeatures) -> Tuple[Tensor, Tensor, Tensor]:
    """Cross-Gram products ``(enc.dec^T, enc.t^T, dec.t^T)``."""
    m1 = ad.matmul(s.f_enc, ad.transpose(s.f_dec))
    m2 = ad.matmul(s.f_enc, ad.transpose(s.f_t))
    m3 = ad.matmul(s.f_dec, ad.transpose(s.f_t))
    return m1, m2, m3


def gram_match_loss(s_f: StyleFeatures, s_m: StyleFeatures, theta: float = 1.0) -> Tensor:
    """``sum_i theta / (4 n_i^2) * ||M_i^f - M_i^m||^2`` with ``n_i^2 = rows_i * cols_i``."""
    total = None
    for mf, mm in zip(gram_pairs(s_f.detach()), gram_pairs(s_m)):
        if mf.shape != mm.shape:
            raise ad.ShapeError(f"Gram shapes differ: teacher {mf.shape}, student {mm.shape}")
        n_sq = mf.shape[0] * mf.shape[1]
        term = ad.square(mm - mf).sum() * (theta / (4.0 * n_sq))
        total = term if total is None else total + term
    return total


def gsme_loss(s_f: StyleFeatures, s_m: StyleFeatures, adv: Tensor, w: LossWeights) -> Tensor:
    return adv * w.epsilon + gram_match_loss(s_f, s_m, w.theta)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------


class Discriminator:
    """Three-layer perceptron on the spatially averaged fused feature; sigmoid output."""

    def __init__(self, in_features: int, hidden: int = 32, seed: int = 0,
                 params: Optional[Dict[str, np.ndarray]] = None):
        if params is None:
            rng = np.random.default_rng(seed)
            params = OrderedDict()
            for name, (fan_in, fan_out) in (("d1", (in_features, hidden)), ("d2", (hidden, hidden)), ("d3", (hidden, 1))):
                a = math.sqrt(1.0 / fan_in)
                params[name + ".w"] = rng.uniform(-a, a, size=(fan_in, fan_out))
                params[name + ".b"] = np.zeros(fan_out)
        # tensors are adopted as-is so callers can differentiate through the weights
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(
            (k, v if isinstance(v, Tensor) else Tensor(v, requires_grad=True)) for k, v in params.items()
        )

    @property
    def in_features(self) -> int:
        return self.params["d1.w"].shape[0]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def logit(self, fused: Tensor) -> Tensor:
        p = self.params
        x = ad.reshape(ad.reduce(fused, 1, "mean"), (1, fused.shape[0]))
        h = ad.leaky_relu(ad.linear(x, p["d1.w"], p["d1.b"]), 0.2)
        h = ad.leaky_relu(ad.linear(h, p["d2.w"], p["d2.b"]), 0.2)
        return ad.reshape(ad.linear(h, p["d3.w"], p["d3.b"]), ())

    def __call__(self, fused: Tensor) -> Tensor:
        """Probability that ``fused`` came from the full-modality teacher, clamped to ``[1e-6, 1 - 1e-6]``."""
        return _clamped(ad.sigmoid(self.logit(fused)))


def _clamped(p: Tensor) -> Tensor:
    # clip values into (eps, 1 - eps); gradient passes through unchanged
    clipped = np.clip(p.data, D_CLAMP, 1.0 - D_CLAMP)
    return p + Tensor(clipped - p.data)


def discriminator_loss(d: Discriminator, fused_f: Tensor, fused_m: Tensor) -> Tensor:
    """``-[log D(teacher) + log(1 - D(student))]``; both inputs are treated as constants."""
    if fused_f.shape != fused_m.shape:
        raise ad.ShapeError(f"fused features differ: {fused_f.shape} vs {fused_m.shape}")
    d_f = d(fused_f.detach())
    d_m = d(fused_m.detach())
    return -(ad.log(d_f) + ad.log(1.0 - d_m))


def generator_loss(d: Discriminator, fused_m: Tensor) -> Tensor:
    """Non-saturating student objective ``-log D(student)``."""
    return -ad.log(d(fused_m))


def adversarial_loss(d: Discriminator, fused_f: Tensor, fused_m: Tensor) -> Tuple[Tensor, Tensor]:
    """Return ``(loss_d, loss_g)``: the discriminator's objective and the student's."""
    return discriminator_loss(d, fused_f, fused_m), generator_loss(d, fused_m)


def literal_adversarial_value(d_teacher: float, d_student: float) -> float:
    """The literal reported value ``log(1 - D(f_teacher)) + log(D(f_student))``, clamped."""
    pf = min(max(d_teacher, D_CLAMP), 1.0 - D_CLAMP)
    pm = min(max(d_student, D_CLAMP), 1.0 - D_CLAMP)
    return math.log(1.0 - pf) + math.log(pm)


def separation(d: Discriminator, fused_f: Tensor, fused_m: Tensor) -> float:
    """``D(teacher) - D(student)``: how well the discriminator tells the two apart."""
    return d(fused_f.detach()).item() - d(fused_m.detach()).item()
