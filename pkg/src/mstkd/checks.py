"""Self-contained property suite behind ``mstkd check``.

Each check returns its worst observed error and passes when that error is
within the stated tolerance (``tolerance == 0`` means exact equality).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .autodiff.gradcheck import analytic_grad, numerical_grad, relative_error
from .distill import LossWeights, extreme_value_sequences, logit_loss, ms_tkd_loss, std_kl_loss
from .gsme import Discriminator, StyleFeatures, discriminator_loss, generator_loss, gram_match_loss
from .metrics import dice, hd95
from .net import msa_block
from .train import soft_dice_loss

SEED = 20240611
INSTANCES = 20


@dataclass(frozen=True)
class Check:
    family: str
    name: str
    tolerance: float
    run: Callable[[], float]


@dataclass(frozen=True)
class CheckResult:
    family: str
    name: str
    tolerance: float
    worst: float
    passed: bool
    error: Optional[str] = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        tol = "exact" if self.tolerance == 0 else f"< {self.tolerance:.0e}"
        detail = f" ({self.error})" if self.error else ""
        return f"{status}  {self.family:<14} {self.name:<22} worst={self.worst:.3e}  tol {tol}{detail}"


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _rand(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-2.0, 2.0, size=shape)


def _shape(rng: np.random.Generator) -> Tuple[int, ...]:
    return tuple(int(v) for v in rng.integers(1, 4, size=int(rng.integers(1, 4))))


def _worst_grad_error(cases: Iterator[Tuple[Callable[..., Tensor], List[np.ndarray]]]) -> float:
    worst = 0.0
    for f, inputs in cases:
        for a, n in zip(analytic_grad(f, inputs), numerical_grad(f, inputs)):
            worst = max(worst, relative_error(a, n))
    return worst


def _contract(y: Tensor, w: np.ndarray) -> Tensor:
    return (y * Tensor(w)).sum()


def _unary(op: Callable[[Tensor], Tensor], positive: bool = False) -> Callable[[], float]:
    def run() -> float:
        rng = np.random.default_rng(SEED)

        def cases():
            for _ in range(INSTANCES):
                x = _rand(rng, _shape(rng))
                if positive:
                    x = np.abs(x) + 0.2
                w = rng.normal(size=op(Tensor(x)).shape)
                yield (lambda t, w=w: _contract(op(t), w)), [x]

        return _worst_grad_error(cases())

    return run


def _axis(op: Callable[[Tensor, int], Tensor], min_extent: int = 1) -> Callable[[], float]:
    def run() -> float:
        rng = np.random.default_rng(SEED + 1)

        def cases():
            for _ in range(INSTANCES):
                shape = tuple(max(s, min_extent) for s in _shape(rng))
                axis = int(rng.integers(0, len(shape)))
                x = _rand(rng, shape)
                w = rng.normal(size=op(Tensor(x), axis).shape)
                yield (lambda t, a=axis, w=w: _contract(op(t, a), w)), [x]

        return _worst_grad_error(cases())

    return run


def _binary(op: Callable[[Tensor, Tensor], Tensor]) -> Callable[[], float]:
    def run() -> float:
        rng = np.random.default_rng(SEED + 2)

        def cases():
            for _ in range(INSTANCES):
                shape = _shape(rng)
                w = rng.normal(size=shape)
                yield (lambda a, b, w=w: _contract(op(a, b), w)), [_rand(rng, shape), _rand(rng, shape)]

        return _worst_grad_error(cases())

    return run


def _matmul() -> float:
    rng = np.random.default_rng(SEED + 3)

    def cases():
        for _ in range(INSTANCES):
            m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
            w = rng.normal(size=(m, n))
            yield (lambda a, b, w=w: _contract(ad.matmul(a, b), w)), [_rand(rng, (m, k)), _rand(rng, (k, n))]

    return _worst_grad_error(cases())


def _conv3d() -> float:
    rng = np.random.default_rng(SEED + 4)

    def cases():
        for _ in range(INSTANCES):
            k, stride = int(rng.choice([1, 3])), int(rng.choice([1, 2]))
            pad = 1 if k == 3 else 0
            cin, cout = (int(v) for v in rng.integers(1, 3, size=2))
            x = _rand(rng, (1, cin) + tuple(int(v) for v in rng.integers(2, 5, size=3)))
            wt, b = _rand(rng, (cout, cin, k, k, k)), _rand(rng, (cout,))
            g = rng.normal(size=ad.conv3d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, padding=pad).shape)
            yield (lambda xx, ww, bb, s=stride, p=pad, g=g: _contract(ad.conv3d(xx, ww, bb, stride=s, padding=p), g)), [x, wt, b]

    return _worst_grad_error(cases())


def _resample(op: str) -> Callable[[], float]:
    def run() -> float:
        rng = np.random.default_rng(SEED + 5)

        def cases():
            for _ in range(INSTANCES):
                f = int(rng.choice([2, 3]))
                if op == "upsample":
                    x = _rand(rng, (2,) + tuple(int(v) for v in rng.integers(1, 3, size=3)))
                    fn = lambda t, f=f: ad.upsample3d(t, f)
                else:
                    x = _rand(rng, (2,) + tuple(f * int(v) for v in rng.integers(1, 3, size=3)))
                    fn = lambda t, f=f: ad.avg_pool3d(t, f)
                w = rng.normal(size=fn(Tensor(x)).shape)
                yield (lambda t, fn=fn, w=w: _contract(fn(t), w)), [x]

        return _worst_grad_error(cases())

    return run


def _attn(rng: np.random.Generator, n: int, N: int) -> np.ndarray:
    a = rng.random((n, N, N)) + 0.05
    return a / a.sum(axis=2, keepdims=True)


def _ms_tkd_grad() -> float:
    rng = np.random.default_rng(SEED + 6)
    w = LossWeights(alpha=0.7, beta=1.3)

    def cases():
        for _ in range(INSTANCES):
            tf = SimpleNamespace(attn=[Tensor(_attn(rng, 2, 3)) for _ in range(2)],
                                 tokens=[Tensor(rng.normal(size=(3, 4))) for _ in range(2)])
            inputs = [_attn(rng, 2, 3) for _ in range(2)] + [rng.normal(size=(3, 4)) for _ in range(2)]
            f = lambda a0, a1, z0, z1, tf=tf: ms_tkd_loss(tf, SimpleNamespace(attn=[a0, a1], tokens=[z0, z1]), w)
            yield f, inputs

    return _worst_grad_error(cases())


def _logit_grad() -> float:
    rng = np.random.default_rng(SEED + 7)
    w = LossWeights(lambda_mse=0.5, lambda_kd=1.5, tau=2.0)

    def cases():
        for _ in range(INSTANCES):
            lf = Tensor(rng.normal(size=(3, 2, 2, 1)) * 3)
            yield (lambda x, lf=lf: logit_loss(lf, x, w)), [rng.normal(size=(3, 2, 2, 1)) * 3]

    return _worst_grad_error(cases())


def _gsme_grad() -> float:
    rng = np.random.default_rng(SEED + 8)

    def cases():
        for _ in range(INSTANCES):
            sf = StyleFeatures(*(Tensor(rng.normal(size=(c, 4))) for c in (3, 2, 2)))
            inputs = [rng.normal(size=(c, 4)) for c in (3, 2, 2)]
            yield (lambda a, b, c, sf=sf: gram_match_loss(sf, StyleFeatures(a, b, c), 1.3)), inputs

    return _worst_grad_error(cases())


def _adversarial_grad() -> float:
    rng = np.random.default_rng(SEED + 9)

    def cases():
        for _ in range(INSTANCES):
            d = Discriminator(3, hidden=5, seed=int(rng.integers(1 << 30)))
            xf = Tensor(rng.normal(size=(3, 4)))
            yield (lambda x, d=d: generator_loss(d, x)), [rng.normal(size=(3, 4))]
            names = list(d.params)
            xm = Tensor(rng.normal(size=(3, 4)))

            def f_d(*arrays, names=names, xf=xf, xm=xm):
                return discriminator_loss(Discriminator(3, hidden=5, params=dict(zip(names, arrays))), xf, xm)

            yield f_d, [v.data.copy() for v in d.params.values()]

    return _worst_grad_error(cases())


def _dice_grad() -> float:
    rng = np.random.default_rng(SEED + 10)

    def cases():
        for _ in range(INSTANCES):
            label = (rng.random((3, 2, 2, 2)) < 0.4).astype(float)
            yield (lambda x, label=label: soft_dice_loss(x, label)), [rng.normal(size=(3, 2, 2, 2))]

    return _worst_grad_error(cases())


# ---------------------------------------------------------------------------
# invariances and oracles
# ---------------------------------------------------------------------------


def _kl_affine() -> float:
    rng = np.random.default_rng(SEED + 11)
    worst = 0.0
    for _ in range(100):
        l = rng.uniform(-100, 100, size=(3, 2, 2, 2))
        a = rng.uniform(0.1, 10.0, size=(1, 2, 2, 2))
        b = rng.uniform(-100, 100, size=(1, 2, 2, 2))
        worst = max(worst, abs(std_kl_loss(Tensor(l), Tensor(a * l + b), float(rng.uniform(0.5, 4.0))).item()))
    return worst


_NEIGHBOURS = [d for d in itertools.product((-1, 0, 1), repeat=3) if sum(map(abs, d)) == 1]


def _boundary_points(mask: np.ndarray) -> List[Tuple[int, int, int]]:
    pts = []
    for p in zip(*np.nonzero(mask)):
        for d in _NEIGHBOURS:
            q = tuple(a + b for a, b in zip(p, d))
            if any(c < 0 or c >= n for c, n in zip(q, mask.shape)) or not mask[q]:
                pts.append(p)
                break
    return pts


def brute_hd95(pred: np.ndarray, gt: np.ndarray) -> float:
    """All-pairs reference for :func:`mstkd.metrics.hd95`."""
    if not pred.any() or not gt.any():
        return float("nan")
    bp, bg = _boundary_points(pred), _boundary_points(gt)
    dists = sorted([min(math.dist(p, g) for g in bg) for p in bp] + [min(math.dist(g, p) for p in bp) for g in bg])
    return dists[max(math.ceil(0.95 * len(dists)), 1) - 1]


def brute_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    total = int(pred.sum()) + int(gt.sum())
    return 1.0 if total == 0 else 2.0 * int(np.sum(pred & gt)) / total


def _metric_oracles(n_pairs: int = 200) -> float:
    rng = np.random.default_rng(SEED + 12)
    worst = 0.0
    for _ in range(n_pairs):
        p = rng.random((8, 8, 8)) < rng.uniform(0.02, 0.5)
        g = rng.random((8, 8, 8)) < rng.uniform(0.02, 0.5)
        worst = max(worst, abs(dice(p, g) - brute_dice(p, g)))
        h, hb = hd95(p, g), brute_hd95(p, g)
        if math.isnan(h) != math.isnan(hb):
            return math.inf
        if not math.isnan(h):
            worst = max(worst, abs(h - hb))
    return worst


def _evd_identities() -> float:
    rng = np.random.default_rng(SEED + 13)
    worst = 0.0
    c = 0.3
    for ev in extreme_value_sequences(Tensor(np.full((4, 3, 3), c))):
        worst = max(worst, float(np.max(np.abs(ev.data - c * c))))
    a = _attn(rng, 1, 5)
    for ev in extreme_value_sequences(Tensor(a)):
        worst = max(worst, float(np.max(np.abs(ev.data - a * a))))
    trace = SimpleNamespace(attn=[Tensor(_attn(rng, 4, 8)) for _ in range(3)],
                            tokens=[Tensor(rng.normal(size=(8, 32))) for _ in range(3)])
    return max(worst, abs(ms_tkd_loss(trace, trace, LossWeights()).item()))


def _gram_oracle() -> float:
    rng = np.random.default_rng(SEED + 14)
    worst = 0.0
    for _ in range(INSTANCES):
        sf, sm = (StyleFeatures(*(Tensor(rng.normal(size=(c, 5))) for c in (3, 4, 2))) for _ in range(2))
        expected = 0.0
        for x, y in (("f_enc", "f_dec"), ("f_enc", "f_t"), ("f_dec", "f_t")):
            af, bf = getattr(sf, x).data, getattr(sf, y).data
            am, bm = getattr(sm, x).data, getattr(sm, y).data
            sq = 0.0
            for i in range(af.shape[0]):
                for j in range(bf.shape[0]):
                    mf = sum(af[i, k] * bf[j, k] for k in range(5))
                    mm = sum(am[i, k] * bm[j, k] for k in range(5))
                    sq += (mf - mm) ** 2
            expected += sq / (4.0 * af.shape[0] * bf.shape[0])
        worst = max(worst, abs(gram_match_loss(sf, sm).item() - expected))
    return worst


def _attention_rows() -> float:
    rng = np.random.default_rng(SEED + 15)
    k, worst = 8, 0.0
    for _ in range(INSTANCES):
        p = {}
        for m in ("q", "k", "v", "o"):
            p[f"b.{m}.w"], p[f"b.{m}.b"] = Tensor(rng.normal(size=(k, k))), Tensor(np.zeros(k))
        for ln in ("ln1", "ln2"):
            p[f"b.{ln}.g"], p[f"b.{ln}.b"] = Tensor(np.ones(k)), Tensor(np.zeros(k))
        p["b.mlp1.w"], p["b.mlp1.b"] = Tensor(rng.normal(size=(k, 2 * k))), Tensor(np.zeros(2 * k))
        p["b.mlp2.w"], p["b.mlp2.b"] = Tensor(rng.normal(size=(2 * k, k))), Tensor(np.zeros(k))
        z = Tensor(rng.normal(size=(int(rng.integers(1, 10)), k)) * rng.uniform(0.1, 20))
        _, a = msa_block(z, p, "b.", 4)
        worst = max(worst, float(np.max(np.abs(a.data.sum(axis=2) - 1.0))))
    return worst


def all_checks() -> List[Check]:
    g = 1e-4
    checks = [
        Check("gradients", "exp", g, _unary(ad.exp)),
        Check("gradients", "log", g, _unary(ad.log, positive=True)),
        Check("gradients", "sqrt", g, _unary(ad.sqrt, positive=True)),
        Check("gradients", "square", g, _unary(ad.square)),
        Check("gradients", "sigmoid", g, _unary(ad.sigmoid)),
        Check("gradients", "leaky_relu", g, _unary(lambda t: ad.leaky_relu(t, 0.1))),
        Check("gradients", "add", g, _binary(ad.add)),
        Check("gradients", "mul", g, _binary(ad.mul)),
        Check("gradients", "div", g, _binary(lambda a, b: ad.div(a, ad.square(b) + 0.5))),
        Check("gradients", "matmul", g, _matmul),
        Check("gradients", "softmax", g, _axis(ad.softmax)),
        Check("gradients", "log_softmax", g, _axis(ad.log_softmax)),
        Check("gradients", "normalize", g, _axis(ad.normalize, min_extent=3)),
        Check("gradients", "reduce_max", g, _axis(lambda t, a: ad.reduce(t, a, "max"))),
        Check("gradients", "reduce_min", g, _axis(lambda t, a: ad.reduce(t, a, "min"))),
        Check("gradients", "reduce_mean", g, _axis(lambda t, a: ad.reduce(t, a, "mean"))),
        Check("gradients", "concat", g, _axis(lambda t, a: ad.concat([t, ad.square(t)], a))),
        Check("gradients", "conv3d", g, _conv3d),
        Check("gradients", "upsample3d", g, _resample("upsample")),
        Check("gradients", "avg_pool3d", g, _resample("avg_pool")),
        Check("gradients", "ms_tkd_loss", g, _ms_tkd_grad),
        Check("gradients", "logit_loss", g, _logit_grad),
        Check("gradients", "gram_match_loss", g, _gsme_grad),
        Check("gradients", "adversarial", g, _adversarial_grad),
        Check("gradients", "soft_dice_loss", g, _dice_grad),
        Check("kl-invariance", "std_kl_affine", 1e-9, _kl_affine),
        Check("metric-oracles", "dice_hd95_200_pairs", 0.0, _metric_oracles),
        Check("evd-identities", "closed_forms", 0.0, _evd_identities),
        Check("gram-oracle", "double_loop", 1e-12, _gram_oracle),
        Check("attention", "rows_sum_to_one", 1e-6, _attention_rows),
    ]
    return checks


def run_checks(checks: Optional[List[Check]] = None, families: Optional[List[str]] = None) -> List[CheckResult]:
    results = []
    for c in checks if checks is not None else all_checks():
        if families and c.family not in families:
            continue
        try:
            worst = float(c.run())
            ok = worst == 0.0 if c.tolerance == 0 else worst < c.tolerance
            results.append(CheckResult(c.family, c.name, c.tolerance, worst, ok))
        except Exception as exc:  # a crashing check is a failing check
            results.append(CheckResult(c.family, c.name, c.tolerance, math.inf, False, f"{type(exc).__name__}: {exc}"))
    return results


def summary(results: List[CheckResult]) -> Dict[str, int]:
    return {"families": len({r.family for r in results}), "checks": len(results),
            "failed": sum(not r.passed for r in results)}
