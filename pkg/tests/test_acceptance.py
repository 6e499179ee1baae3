"""Acceptance suite: one PASS/FAIL line per criterion (see the terminal summary).

The desk benchmark trains 3 teachers and 15 students; expect about 25 minutes
on one core.  Deselect it with ``-m "not slow"``.
"""

import json
import time

import numpy as np
import pytest

from mstkd.autodiff import Tensor
from mstkd.benchmark import ABLATIONS, format_results, run_seed, verdicts
from mstkd.checks import run_checks
from mstkd.cli import main as cli_main
from mstkd.cli import markdown_table
from mstkd.data import modality_combinations
from mstkd.gsme import StyleFeatures, gram_match_loss, gram_pairs
from mstkd.metrics import MetricsRow
from mstkd.net import NetConfig, patch_embed

TABLE1_ORDER = ["0001", "0010", "0100", "1000", "0011", "0110", "1100", "0101",
                "1001", "1010", "1110", "1101", "1011", "0111", "1111"]


def _family(name):
    results = run_checks(families=[name])
    worst = max(r.worst for r in results)
    failed = [r.name for r in results if not r.passed]
    return results, worst, failed


def test_gradient_suite(criterion):
    t0 = time.perf_counter()
    results, worst, failed = _family("gradients")
    elapsed = time.perf_counter() - t0
    names = {r.name for r in results}
    losses = {"ms_tkd_loss", "logit_loss", "gram_match_loss", "adversarial", "soft_dice_loss"}
    ok = not failed and losses <= names and elapsed < 120
    criterion("gradient suite: ops and losses vs central differences, rel < 1e-4, 20 instances, < 2 min", ok,
              f"{len(results)} checks, worst {worst:.2e}, {elapsed:.0f}s, failed {failed}")


def test_logit_standardization_invariance(criterion):
    _, worst, failed = _family("kl-invariance")
    criterion("std-KL(l, a*l+b) < 1e-9 over 100 draws", not failed, f"worst {worst:.2e}")


def test_evd_identities(criterion):
    _, worst, failed = _family("evd-identities")
    criterion("EVD closed forms exact and MS-TKD(teacher, teacher) = 0", not failed and worst == 0.0,
              f"worst {worst:.1e}")


def test_gram_oracle_and_permutation(criterion):
    _, worst, failed = _family("gram-oracle")
    rng = np.random.default_rng(11)
    exact = True
    for _ in range(50):
        a, b = ([rng.integers(-9, 10, size=(c, 6)).astype(float) for c in (4, 5, 3)] for _ in range(2))
        perm = rng.permutation(6)
        style = lambda fs, p=slice(None): StyleFeatures(*(Tensor(f[:, p]) for f in fs))
        exact &= all(np.array_equal(x.data, y.data) for x, y in zip(gram_pairs(style(a)), gram_pairs(style(a, perm))))
        exact &= gram_match_loss(style(a), style(b)).item() == gram_match_loss(style(a, perm), style(b, perm)).item()
    criterion("GSME loss matches double-loop oracle to 1e-12; Gram pairs permutation invariant",
              not failed and exact, f"oracle worst {worst:.1e}, permutation exact {exact}")


def test_metric_oracles_and_table_layout(criterion):
    _, worst, failed = _family("metric-oracles")
    combos = [m.bits for m in modality_combinations()]
    rows = [MetricsRow(b, r, 0.5, 1.0) for b in combos for r in ("WT", "TC", "ET")]
    header = markdown_table(rows, "dice").splitlines()[0].strip("|").split("|")
    layout = combos == TABLE1_ORDER and len(header) == 1 + 15 + 1 and header[-1].strip() == "Avg"
    criterion("Dice/HD95 equal brute force on 200 8^3 pairs; 15 columns in table order", not failed and layout,
              f"worst {worst}, layout {layout}")


def test_attention_contract(criterion):
    _, worst, failed = _family("attention")
    configs = [NetConfig(), NetConfig(dims=(16, 16, 16), patch=2), NetConfig(dims=(8, 16, 24)),
               NetConfig(dims=(32, 16, 16), patch=2), NetConfig(dims=(48, 48, 16), patch=2, embed_dim=12, heads=3)]
    n_ok = True
    for cfg in configs:
        h, w, d = cfg.dims
        expected = (h * w * d) // (8**3 * cfg.patch**3)
        feat = Tensor(np.zeros((1, 2) + tuple(n // 8 for n in cfg.dims)))
        tokens = patch_embed(feat, Tensor(np.zeros((2 * cfg.patch**3, 3))), Tensor(np.zeros(3)), cfg.patch)
        n_ok &= cfg.seq_len == expected == tokens.shape[0]
    criterion("attention rows sum to 1 +- 1e-6; N formula on 5 configs", not failed and n_ok,
              f"worst row error {worst:.1e}")


def test_determinism(criterion, tmp_path):
    tiny = {"net": {"base_channels": 1, "embed_dim": 4, "heads": 2}, "epochs": 2, "lr": 1e-3, "seed": 5}
    (tmp_path / "cfg.json").write_text(json.dumps(tiny))
    outputs = []
    for run in ("a", "b"):
        root = tmp_path / run
        data, cfg = str(root / "data"), str(tmp_path / "cfg.json")
        assert cli_main(["gen-data", "--cases", "6", "--dims", "8", "--seed", "2", "--out", data]) == 0
        assert cli_main(["train", "--data", data, "--config", cfg, "--out", str(root / "t")]) == 0
        assert cli_main(["train", "--phase", "student", "--data", data, "--config", cfg,
                         "--teacher", str(root / "t" / "teacher.ckpt"), "--out", str(root / "s")]) == 0
        assert cli_main(["eval", "--data", data, "--checkpoint", str(root / "s" / "student.ckpt"),
                         "--out", str(root / "e")]) == 0
        outputs.append([(root / p).read_bytes() for p in
                        ("t/train_log.csv", "t/teacher.ckpt", "s/train_log.csv", "s/student.ckpt", "e/eval.csv")])
    criterion("identical seeds give byte-identical training logs and evaluation CSVs", outputs[0] == outputs[1])


@pytest.mark.slow
def test_desk_benchmark(criterion):
    results = [run_seed(seed) for seed in (0, 1, 2)]
    print(format_results(results))
    v = verdicts(results)
    detail = {
        "teacher_wt_at_least_0.7": ", ".join(f"{r.teacher_full_wt:.3f}" for r in results),
        "teacher_within_30_cpu_minutes": ", ".join(f"{r.teacher_seconds:.0f}s" for r in results),
        "trained_beats_untrained_by_0.2": ", ".join(f"{r.wt['dice_only'] - r.untrained_wt:+.3f}" for r in results),
        "full_beats_dice_only": ", ".join(f"{r.wt['full'] - r.wt['dice_only']:+.4f}" for r in results),
    }
    for name in ABLATIONS:
        detail[f"full_at_least_{name}"] = ", ".join(f"{r.wt['full'] - r.wt[name]:+.4f}" for r in results)
    for name, ok in v.items():
        criterion(f"desk benchmark: {name}", ok, f"per seed {detail[name]}", hard=False)
    failed = [k for k, ok in v.items() if not ok]
    assert not failed, f"benchmark claims failed: {failed}"
