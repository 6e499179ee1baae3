"""Encoder / transformer / decoder segmentation backbone.

The same architecture serves as teacher and student.  A forward pass returns a
:class:`ForwardTrace` holding the logits together with every intermediate the
distillation losses read: per-block attention maps and token features, and the
encoder, transformer and decoder style features.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_SLOPE = 0.01
HEAD_PRIOR = 0.1
HEAD_BIAS = math.log(HEAD_PRIOR / (1.0 - HEAD_PRIOR))


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 4
    base_channels: int = 4
    dims: Tuple[int, int, int] = (16, 16, 16)
    patch: int = 1
    embed_dim: int = 32
    heads: int = 4
    blocks: int = 3
    out_regions: int = 3

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3:
            raise ValueError(f"dims must have three extents, got {self.dims}")
        for name in ("in_channels", "base_channels", "patch", "embed_dim", "heads", "blocks", "out_regions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if any(d % (8 * self.patch) for d in self.dims):
            raise ValueError(f"dims {self.dims} must be divisible by 8 * patch = {8 * self.patch}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def token_grid(self) -> Tuple[int, int, int]:
        return tuple(d // (8 * self.patch) for d in self.dims)

    @property
    def seq_len(self) -> int:
        return sequence_length(self.dims, self.patch)

    @property
    def channels(self) -> Tuple[int, int, int, int]:
        c = self.base_channels
        return (c, 4 * c, 16 * c, 32 * c)


def sequence_length(dims: Sequence[int], patch: int) -> int:
    """Token count ``(H/8)(W/8)(D/8) / P^3`` for input extents ``dims``."""
    h, w, d = (n // 8 for n in dims)
    if any(n % 8 for n in dims) or any(n % patch for n in (h, w, d)):
        raise ValueError(f"extents {tuple(dims)} do not tile into {patch}^3 patches at 1/8 scale")
    return (h * w * d) // patch**3


@dataclass
class ForwardTrace:
    logits: Tensor
    attn: List[Tensor]
    tokens: List[Tensor]
    f_enc: Tensor
    f_enc_grid: Tensor
    f_t: Tensor
    f_dec: Tensor
    fused: Tensor

    def detach(self) -> "ForwardTrace":
        return ForwardTrace(
            logits=self.logits.detach(),
            attn=[a.detach() for a in self.attn],
            tokens=[z.detach() for z in self.tokens],
            f_enc=self.f_enc.detach(),
            f_enc_grid=self.f_enc_grid.detach(),
            f_t=self.f_t.detach(),
            f_dec=self.f_dec.detach(),
            fused=self.fused.detach(),
        )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def param_shapes(cfg: NetConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    c0, c1, c2, c3 = cfg.channels
    k, p = cfg.embed_dim, cfg.patch
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["enc0.w"] = (c0, cfg.in_channels, 3, 3, 3)
    shapes["enc1.w"] = (c1, c0, 3, 3, 3)
    shapes["enc2.w"] = (c2, c1, 3, 3, 3)
    shapes["enc3.w"] = (c3, c2, 3, 3, 3)
    shapes["embed.w"] = (c3 * p**3, k)
    shapes["embed.b"] = (k,)
    shapes["pos"] = (cfg.seq_len, k)
    for i in range(cfg.blocks):
        b = f"blk{i}."
        shapes[b + "ln1.g"] = (k,)
        shapes[b + "ln1.b"] = (k,)
        for m in ("q", "k", "v", "o"):
            shapes[b + m + ".w"] = (k, k)
            shapes[b + m + ".b"] = (k,)
        shapes[b + "ln2.g"] = (k,)
        shapes[b + "ln2.b"] = (k,)
        shapes[b + "mlp1.w"] = (k, 2 * k)
        shapes[b + "mlp1.b"] = (2 * k,)
        shapes[b + "mlp2.w"] = (2 * k, k)
        shapes[b + "mlp2.b"] = (k,)
    for i in range(cfg.blocks - 1):
        shapes[f"proj{i}.w"] = (k, k, 3, 3, 3)
    fused = c2 + k + (cfg.blocks - 1) * k
    shapes["dec0.w"] = (c2, fused, 3, 3, 3)
    shapes["dec1.w"] = (c1, 2 * c2, 3, 3, 3)
    shapes["dec2.w"] = (c0, 2 * c1, 3, 3, 3)
    shapes["dec3.w"] = (c0, 2 * c0, 3, 3, 3)
    shapes["head.w"] = (cfg.out_regions, c0, 1, 1, 1)
    shapes["head.b"] = (cfg.out_regions,)
    return shapes


def init_params(cfg: NetConfig, seed: int) -> "OrderedDict[str, np.ndarray]":
    """Uniform ``[-a, a]`` with ``a = sqrt(1 / fan_in)``; biases zero, layer-norm gains one.

    The segmentation head's bias starts at ``logit(HEAD_PRIOR)`` so every voxel
    begins as probable background instead of a coin flip.
    """
    rng = np.random.default_rng(seed)
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            out[name] = np.ones(shape)
        elif name.endswith(".b"):
            out[name] = np.full(shape, HEAD_BIAS) if name == "head.b" else np.zeros(shape)
        else:
            fan_in = shape[-1] if name == "pos" else int(np.prod(shape[1:])) if len(shape) == 5 else shape[0]
            a = math.sqrt(1.0 / fan_in)
            out[name] = rng.uniform(-a, a, size=shape)
    return out


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _conv_block(x: Tensor, w: Tensor, stride: int) -> Tensor:
    y = ad.conv3d(x, w, stride=stride, padding=1)
    return ad.leaky_relu(ad.normalize(y, (2, 3, 4)), _SLOPE)


def encoder_forward(x: Tensor, p: Dict[str, Tensor]) -> Tuple[List[Tensor], Tensor, Tensor]:
    """Return ``(skips, bottleneck, f_enc)`` for an NCDHW input with ``N = 1``.

    ``skips`` are the outputs at full, 1/2 and 1/4 scale; ``f_enc`` is the
    global max pool of the 1/4-scale (penultimate) feature map.
    """
    if x.shape[1] != p["enc0.w"].shape[1]:
        raise ad.ShapeError(f"encoder expects {p['enc0.w'].shape[1]} input channels, got {x.shape[1]}")
    e0 = _conv_block(x, p["enc0.w"], 1)
    e1 = _conv_block(e0, p["enc1.w"], 2)
    e2 = _conv_block(e1, p["enc2.w"], 2)
    e3 = _conv_block(e2, p["enc3.w"], 2)
    f_enc = ad.global_max_pool(ad.reshape(e2, e2.shape[1:]))
    return [e0, e1, e2], e3, f_enc


def patch_embed(features: Tensor, weight: Tensor, bias: Tensor, patch: int) -> Tensor:
    """Cut a ``(1, C, h, w, d)`` map into ``patch^3`` chunks and project each to the embedding width.

    Tokens are ordered row-major over the chunk grid; within a chunk the
    flattened layout is ``(C, P, P, P)``.
    """
    _, c, h, w, d = features.shape
    if h % patch or w % patch or d % patch:
        raise ValueError(f"feature extents {(h, w, d)} not divisible by patch {patch}")
    gh, gw, gd = h // patch, w // patch, d // patch
    x = ad.reshape(features, (c, gh, patch, gw, patch, gd, patch))
    x = ad.transpose(x, (1, 3, 5, 0, 2, 4, 6))
    x = ad.reshape(x, (gh * gw * gd, c * patch**3))
    return ad.linear(x, weight, bias)


def msa_block(z: Tensor, p: Dict[str, Tensor], prefix: str, heads: int) -> Tuple[Tensor, Tensor]:
    """Pre-norm transformer block; returns ``(z_out, A)`` with ``A`` of shape ``(heads, N, N)``."""
    n_tok, k = z.shape
    if k % heads:
        raise ValueError(f"embedding width {k} not divisible by {heads} heads")
    kh = k // heads
    h = ad.layer_norm(z, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    q = ad.linear(h, p[prefix + "q.w"], p[prefix + "q.b"])
    key = ad.linear(h, p[prefix + "k.w"], p[prefix + "k.b"])
    v = ad.linear(h, p[prefix + "v.w"], p[prefix + "v.b"])
    scale = 1.0 / math.sqrt(kh)
    attn, outs = [], []
    for i in range(heads):
        cols = (slice(None), slice(i * kh, (i + 1) * kh))
        scores = ad.matmul(q[cols], ad.transpose(key[cols])) * scale
        a = ad.softmax(scores, axis=1)
        attn.append(a)
        outs.append(ad.matmul(a, v[cols]))
    z = z + ad.linear(ad.concat(outs, axis=1), p[prefix + "o.w"], p[prefix + "o.b"])
    h = ad.layer_norm(z, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    h = ad.relu(ad.linear(h, p[prefix + "mlp1.w"], p[prefix + "mlp1.b"]))
    z = z + ad.linear(h, p[prefix + "mlp2.w"], p[prefix + "mlp2.b"])
    return z, ad.stack(attn, 0)


def _tokens_to_grid(z: Tensor, grid: Tuple[int, int, int]) -> Tensor:
    k = z.shape[1]
    return ad.reshape(ad.transpose(z), (1, k) + tuple(grid))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class Network:
    """Parameter container plus the forward pass.

    With ``trainable=False`` the parameters carry no gradient flag, so a
    forward pass records no tape (used for the frozen teacher).
    """

    def __init__(self, cfg: NetConfig, params: Optional[Dict[str, np.ndarray]] = None,
                 seed: int = 0, trainable: bool = True):
        self.cfg = cfg
        arrays = init_params(cfg, seed) if params is None else params
        expected = param_shapes(cfg)
        if list(arrays) != list(expected):
            missing = set(expected) ^ set(arrays)
            raise ValueError(f"parameter names do not match the architecture: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            if tuple(np.shape(arrays[name])) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {np.shape(arrays[name])}")
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(
            (name, Tensor(arr, requires_grad=trainable)) for name, arr in arrays.items()
        )

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def frozen(self) -> "Network":
        return Network(self.cfg, self.state_dict(), trainable=False)

    def save(self, path: Union[str, Path]) -> None:
        ad.save_checkpoint(path, self.params)

    @classmethod
    def load(cls, path: Union[str, Path], cfg: NetConfig, trainable: bool = False) -> "Network":
        return cls(cfg, ad.load_checkpoint(path), trainable=trainable)

    def forward(self, x: Union[Tensor, np.ndarray]) -> ForwardTrace:
        cfg, p = self.cfg, self.params
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[0] != cfg.in_channels:
            raise ad.ShapeError(f"expected input ({cfg.in_channels}, H, W, D), got {x.shape}")
        if tuple(x.shape[1:]) != cfg.dims:
            raise ad.ShapeError(f"input extents {x.shape[1:]} differ from configured {cfg.dims}")
        grid = cfg.token_grid
        s = int(np.prod(grid))

        skips, bottleneck, f_enc = encoder_forward(ad.reshape(x, (1,) + x.shape), p)
        z = patch_embed(bottleneck, p["embed.w"], p["embed.b"], cfg.patch) + p["pos"]

        attn, tokens = [], []
        for i in range(cfg.blocks):
            z, a = msa_block(z, p, f"blk{i}.", cfg.heads)
            attn.append(a)
            tokens.append(z)

        f_t = _tokens_to_grid(tokens[-1], grid)
        c2 = f_enc.shape[0]
        enc_b = ad.broadcast_to(ad.reshape(f_enc, (1, c2, 1, 1, 1)), (1, c2) + grid)
        fused = ad.concat([enc_b, f_t], axis=1)
        side = [
            _conv_block(_tokens_to_grid(tokens[i], grid), p[f"proj{i}.w"], 1)
            for i in range(cfg.blocks - 1)
        ]
        h = _conv_block(ad.concat([fused] + side, axis=1), p["dec0.w"], 1)
        f_dec = h
        if cfg.patch > 1:
            h = ad.upsample3d(h, cfg.patch)

        e0, e1, e2 = skips
        h = _conv_block(ad.concat([ad.upsample3d(h, 2), e2], axis=1), p["dec1.w"], 1)
        h = _conv_block(ad.concat([ad.upsample3d(h, 2), e1], axis=1), p["dec2.w"], 1)
        h = _conv_block(ad.concat([ad.upsample3d(h, 2), e0], axis=1), p["dec3.w"], 1)
        logits = ad.conv3d(h, p["head.w"], p["head.b"])
        logits = ad.reshape(logits, logits.shape[1:])

        enc_grid = ad.avg_pool3d(e2, 2 * cfg.patch)
        return ForwardTrace(
            logits=logits,
            attn=attn,
            tokens=tokens,
            f_enc=f_enc,
            f_enc_grid=ad.reshape(enc_grid, (c2, s)),
            f_t=ad.reshape(f_t, (f_t.shape[1], s)),
            f_dec=ad.reshape(f_dec, (f_dec.shape[1], s)),
            fused=ad.reshape(fused, (fused.shape[1], s)),
        )

    __call__ = forward
