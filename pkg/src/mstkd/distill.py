"""Attention/token distillation and dual-mode logit distillation.

All losses take the teacher side first and treat it as a constant: teacher
tensors are detached before use, so no gradient reaches the teacher even if
its trace was recorded with a tape.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence, Tuple

from . import autodiff as ad
from .autodiff import Tensor

STD_GUARD = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    lambda_mse: float = 1.0
    lambda_kd: float = 1.0
    tau: float = 1.0
    epsilon: float = 1.0
    theta: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ad.ShapeError(f"{what}: teacher shape {a.shape} != student shape {b.shape}")


def _expand_over_heads(t: Tensor, n: int) -> Tensor:
    return ad.broadcast_to(ad.reshape(t, (1,) + t.shape), (n,) + t.shape)


def extreme_value_sequences(attn: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Re-weight a ``(heads, N, N)`` attention stack by its per-position head max, min and mean."""
    if attn.ndim != 3:
        raise ad.ShapeError(f"attention stack must be (heads, N, N), got {attn.shape}")
    n = attn.shape[0]
    a_max = _expand_over_heads(ad.reduce(attn, 0, "max"), n)
    a_min = _expand_over_heads(ad.reduce(attn, 0, "min"), n)
    a_mean = _expand_over_heads(ad.reduce(attn, 0, "mean"), n)
    return a_max * attn, a_min * attn, a_mean * attn


def _mean_sq(pairs: Sequence[Tuple[Tensor, Tensor]]) -> Tensor:
    total, count = None, 0
    for f, m in pairs:
        s = ad.square(m - f.detach()).sum()
        total = s if total is None else total + s
        count += f.size
    return total * (1.0 / count)


def evd_loss(attn_f: Sequence[Tensor], attn_m: Sequence[Tensor]) -> Tensor:
    """Mean squared gap of the extreme-value sequences, pooled over all blocks."""
    if len(attn_f) != len(attn_m):
        raise ad.ShapeError(f"teacher has {len(attn_f)} attention blocks, student {len(attn_m)}")
    pairs = []
    for af, am in zip(attn_f, attn_m):
        _check_same(af, am, "attention")
        pairs.extend(zip(extreme_value_sequences(af.detach()), extreme_value_sequences(am)))
    return _mean_sq(pairs)


def token_loss(tokens_f: Sequence[Tensor], tokens_m: Sequence[Tensor]) -> Tensor:
    if len(tokens_f) != len(tokens_m):
        raise ad.ShapeError(f"teacher has {len(tokens_f)} token blocks, student {len(tokens_m)}")
    for zf, zm in zip(tokens_f, tokens_m):
        _check_same(zf, zm, "tokens")
    return _mean_sq(list(zip(tokens_f, tokens_m)))


def ms_tkd_loss(trace_f, trace_m, w: LossWeights) -> Tensor:
    """``alpha * EVD + beta * token MSE`` between teacher and student traces."""
    return evd_loss(trace_f.attn, trace_m.attn) * w.alpha + token_loss(trace_f.tokens, trace_m.tokens) * w.beta


def logit_mse(l_f: Tensor, l_m: Tensor) -> Tensor:
    _check_same(l_f, l_m, "logits")
    return ad.mean(ad.square(l_m - l_f.detach()))


def standardize(logits: Tensor, tau: float) -> Tensor:
    """Per-voxel Z-score across the class axis (axis 0), divided by ``tau``.

    ``(l - mean) / ((std + 1e-7) * tau)`` with the population standard
    deviation; a constant class vector maps to zeros.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    logits = ad.as_tensor(logits)
    shape = logits.shape
    mu = ad.broadcast_to(ad.reshape(ad.reduce(logits, 0, "mean"), (1,) + shape[1:]), shape)
    centred = logits - mu
    sigma = ad.sqrt(ad.reduce(ad.square(centred), 0, "mean"))
    denom = ad.broadcast_to(ad.reshape(sigma + STD_GUARD, (1,) + shape[1:]), shape)
    return centred / (denom * tau)


def std_kl_loss(l_f: Tensor, l_m: Tensor, tau: float) -> Tensor:
    """KL(q_teacher || q_student) over classes of the standardised logits, averaged over voxels."""
    _check_same(l_f, l_m, "logits")
    q_f = ad.softmax(standardize(l_f.detach(), tau), 0).detach()
    log_q_f = ad.log_softmax(standardize(l_f.detach(), tau), 0).detach()
    log_q_m = ad.log_softmax(standardize(l_m, tau), 0)
    n_vox = l_f.size // l_f.shape[0]
    return (q_f * (log_q_f - log_q_m)).sum() * (1.0 / n_vox)


def logit_loss(l_f: Tensor, l_m: Tensor, w: LossWeights, use_kl: bool = True, use_mse: bool = True) -> Tensor:
    """``lambda_mse * MSE + lambda_kd * tau^2 * KL``; either term can be switched off."""
    _check_same(l_f, l_m, "logits")
    terms = []
    if use_mse:
        terms.append(logit_mse(l_f, l_m) * w.lambda_mse)
    if use_kl:
        terms.append(std_kl_loss(l_f, l_m, w.tau) * (w.lambda_kd * w.tau**2))
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out
