import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstkd.data import (
    AugmentParams,
    ModalityMask,
    apply_augmentation,
    apply_modality_mask,
    augment,
    generate_case,
    generate_dataset,
    make_split,
    modality_combinations,
    nesting_holds,
    read_dataset,
    write_dataset,
)

GOLDEN = Path(__file__).parent / "golden" / "case_seed7.json"


def _valid(case):
    assert nesting_holds(case.label)
    assert set(np.unique(case.label)) <= {0.0, 1.0}
    assert case.image.min() >= 0.0 and case.image.max() <= 1.0


def test_generate_deterministic():
    a, b = generate_case(3), generate_case(3)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.label, b.label)
    assert not np.array_equal(a.image, generate_case(4).image)


def test_golden_seed7():
    golden = json.loads(GOLDEN.read_text())
    case = generate_case(golden["seed"], golden["dims"])
    wt = int(case.label[0].sum())
    assert 32 <= wt <= 2048
    for i, region in enumerate(("WT", "TC", "ET")):
        assert int(case.label[i].sum()) == golden["voxels"][region]
    np.testing.assert_allclose(case.image.reshape(4, -1).mean(axis=1), golden["channel_means"], rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), dims=st.sampled_from([(16, 16, 16), (8, 16, 24), (24, 8, 8)]))
def test_generated_cases_are_valid(seed, dims):
    case = generate_case(seed, dims)
    assert case.image.shape == (4,) + dims and case.label.shape == (3,) + dims
    _valid(case)
    assert case.label[0].sum() > 0


@pytest.mark.parametrize("dims", [(15, 16, 16), (16, 16), (0, 8, 8)])
def test_bad_dims(dims):
    with pytest.raises(ValueError):
        generate_case(0, dims)


def test_modality_masks():
    case = generate_case(1)
    np.testing.assert_array_equal(apply_modality_mask(case, ModalityMask.full()), case.image)
    flair = apply_modality_mask(case, ModalityMask.from_bits("1000"))
    assert not flair[1:].any() and np.array_equal(flair[0], case.image[0])
    t1_t2 = apply_modality_mask(case, ModalityMask.from_bits("0101"))
    assert [bool(t1_t2[i].any()) for i in range(4)] == [False, True, False, True]
    with pytest.raises(ValueError):
        apply_modality_mask(case, ModalityMask.from_bits("0000"))
    with pytest.raises(ValueError):
        ModalityMask.from_bits("10")


def test_combinations_table_order():
    combos = modality_combinations()
    assert len(combos) == 15
    assert combos[0].present == (False, False, False, True)
    assert combos[-1] == ModalityMask.full()
    expected = {m for m in itertools.product((False, True), repeat=4) if any(m)}
    assert {c.present for c in combos} == expected
    assert [c.count for c in combos] == [1] * 4 + [2] * 6 + [3] * 4 + [4]


def test_augment_identity_and_involution():
    case = generate_case(2)
    same = apply_augmentation(case, AugmentParams())
    np.testing.assert_array_equal(same.image, case.image)
    flip = AugmentParams(flips=(False, True, False))
    twice = apply_augmentation(apply_augmentation(case, flip), flip)
    np.testing.assert_array_equal(twice.image, case.image)
    np.testing.assert_array_equal(twice.label, case.label)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), aug_seed=st.integers(0, 2**32 - 1))
def test_augment_preserves_invariants(seed, aug_seed):
    case = generate_case(seed)
    out = augment(case, aug_seed)
    _valid(out)
    assert out.image.shape == case.image.shape
    # image and label move together: the WT voxels keep their FLAIR evidence where no padding intervened
    again = augment(case, aug_seed)
    np.testing.assert_array_equal(out.image, again.image)


def test_augment_moves_image_and_label_together():
    case = generate_case(5)
    params = AugmentParams(flips=(True, False, True), rot_k=1, rot_axes=(1, 2), shift=(0, 0, 0))
    out = apply_augmentation(case, params)
    # without a shift the map is a voxel permutation, so label/intensity pairs are preserved as a multiset
    before = sorted(zip(case.label[0].ravel(), case.image[0].ravel()))
    after = sorted(zip(out.label[0].ravel(), out.image[0].ravel()))
    assert before == after


def test_make_split():
    train, test = make_split(10, 0.8, 0)
    assert (len(train), len(test)) == (8, 2)
    assert make_split(10, 0.8, 0) == (train, test)
    assert sorted(train + test) == list(range(10))
    with pytest.raises(ValueError):
        make_split(2, 0.1, 0)
    with pytest.raises(ValueError):
        make_split(10, 1.0, 0)


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(6, (16, 16, 16), seed=4, train_fraction=0.5)
    write_dataset(tmp_path / "a", ds)
    write_dataset(tmp_path / "b", generate_dataset(6, (16, 16, 16), seed=4, train_fraction=0.5))
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    back = read_dataset(tmp_path / "a")
    assert back.train_ids == ds.train_ids and back.test_ids == ds.test_ids
    for c in ds.cases:
        np.testing.assert_array_equal(back.get(c.id).image, c.image)
    index = [json.loads(line) for line in (tmp_path / "a" / "index.jsonl").read_text().splitlines()]
    assert set(index[0]) == {"id", "seed", "dims", "split"}


def test_generator_throughput():
    t0 = time.perf_counter()
    generate_dataset(100, (16, 16, 16), seed=0)
    assert time.perf_counter() - t0 < 10.0
