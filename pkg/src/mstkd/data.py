"""Synthetic four-modality volumes with nested tumour regions.

Each case is a brain-shaped ellipsoid holding one to three ellipsoidal lesions.
A lesion has three concentric shells: whole tumour (WT), tumour core (TC) and
enhancing tumour (ET), so ``ET <= TC <= WT`` holds voxelwise by construction.
Every modality renders the four tissue classes with its own contrast (see
``CONTRAST``), so each modality subset carries different region evidence.

Contrast table (intensity before bias field and noise)::

              background  edema(WT-TC)  core(TC-ET)  enhancing(ET)
    FLAIR        0.15        0.85          0.65          0.60
    T1           0.45        0.40          0.15          0.30
    T1Gd         0.45        0.40          0.20          0.90
    T2           0.30        0.70          0.90          0.55
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .autodiff import io as tio

MODALITIES = ("FLAIR", "T1", "T1Gd", "T2")
REGIONS = ("WT", "TC", "ET")

CONTRAST = np.array([
    [0.15, 0.85, 0.65, 0.60],
    [0.45, 0.40, 0.15, 0.30],
    [0.45, 0.40, 0.20, 0.90],
    [0.30, 0.70, 0.90, 0.55],
])
TC_SCALE = 0.65
ET_SCALE = 0.38
NOISE_SIGMA = 0.04
BIAS_AMPLITUDE = 0.06


@dataclass(frozen=True)
class ModalityMask:
    present: Tuple[bool, bool, bool, bool]

    def __post_init__(self):
        present = tuple(bool(p) for p in self.present)
        if len(present) != 4:
            raise ValueError(f"modality mask needs 4 entries, got {len(present)}")
        object.__setattr__(self, "present", present)

    @classmethod
    def from_bits(cls, bits: str) -> "ModalityMask":
        if len(bits) != 4 or set(bits) - {"0", "1"}:
            raise ValueError(f"mask bits must be four 0/1 characters, got {bits!r}")
        return cls(tuple(b == "1" for b in bits))

    @classmethod
    def full(cls) -> "ModalityMask":
        return cls((True, True, True, True))

    @property
    def bits(self) -> str:
        return "".join("1" if p else "0" for p in self.present)

    @property
    def label(self) -> str:
        return "+".join(m for m, p in zip(MODALITIES, self.present) if p) or "none"

    @property
    def count(self) -> int:
        return sum(self.present)


# Column order of the Dice/HD95 comparison tables, read left to right.
_TABLE_ORDER = (
    "0001", "0010", "0100", "1000",
    "0011", "0110", "1100", "0101", "1001", "1010",
    "1110", "1101", "1011", "0111",
    "1111",
)


def modality_combinations() -> List[ModalityMask]:
    """The 15 non-empty modality subsets in table-column order (bits are FLAIR, T1, T1Gd, T2)."""
    return [ModalityMask.from_bits(b) for b in _TABLE_ORDER]


@dataclass
class VolumeCase:
    id: str
    image: np.ndarray
    label: np.ndarray
    seed: Optional[int] = None

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.image.shape[1:])


def check_dims(dims: Sequence[int]) -> Tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 or d % 8 for d in dims):
        raise ValueError(f"volume extents must be positive multiples of 8, got {dims}")
    return dims


def _bias_field(rng: np.random.Generator, coords: np.ndarray, dims) -> np.ndarray:
    field = np.zeros(dims)
    for _ in range(2):
        k = rng.uniform(0.5, 1.5, size=3) * np.pi / np.array(dims)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.cos(np.tensordot(k, coords, axes=1) + phase)
    return BIAS_AMPLITUDE * field / 2.0


def generate_case(seed: int, dims: Sequence[int] = (16, 16, 16), case_id: Optional[str] = None) -> VolumeCase:
    dims = check_dims(dims)
    rng = np.random.default_rng(seed)
    coords = np.indices(dims, dtype=np.float64)
    centre = (np.array(dims, dtype=np.float64) - 1) / 2
    dims_arr = np.array(dims, dtype=np.float64)

    brain_q = (((coords - centre[:, None, None, None]) / (0.47 * dims_arr[:, None, None, None])) ** 2).sum(0)
    brain = brain_q <= 1.0

    q_min = np.full(dims, np.inf)
    for _ in range(int(rng.integers(1, 4))):
        semi = rng.uniform(0.14, 0.26, size=3) * dims_arr
        rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        r = semi.max()
        lo = np.maximum(np.ceil(centre - 0.47 * dims_arr + r * 0.8), 0)
        hi = np.minimum(np.floor(centre + 0.47 * dims_arr - r * 0.8), dims_arr - 1)
        # thin axes leave no margin for the lesion; pin it to the centre there
        squeeze = lo > hi
        lo[squeeze] = hi[squeeze] = np.floor(centre[squeeze])
        c = np.array([rng.integers(int(a), int(b) + 1) for a, b in zip(lo, hi)], dtype=np.float64)
        rel = np.tensordot(rot.T, coords - c[:, None, None, None], axes=1)
        q = ((rel / semi[:, None, None, None]) ** 2).sum(0)
        q_min = np.minimum(q_min, q)

    wt = (q_min <= 1.0) & brain
    tc = (q_min <= TC_SCALE**2) & brain
    et = (q_min <= ET_SCALE**2) & brain

    tissue = np.zeros(dims, dtype=np.int64)
    tissue[wt] = 1
    tissue[tc] = 2
    tissue[et] = 3

    image = np.empty((4,) + dims)
    for m in range(4):
        vol = CONTRAST[m][tissue]
        vol = ndimage.gaussian_filter(vol, 0.6, mode="nearest")
        vol = vol + _bias_field(rng, coords, dims) + rng.normal(0.0, NOISE_SIGMA, size=dims)
        vol[~brain] = 0.0
        image[m] = np.clip(vol, 0.0, 1.0)

    label = np.stack([wt, tc, et]).astype(np.float64)
    return VolumeCase(id=case_id or f"case_{seed}", image=image, label=label, seed=int(seed))


def apply_modality_mask(case: Union[VolumeCase, np.ndarray], mask: ModalityMask) -> np.ndarray:
    """Zero-fill the absent modality channels."""
    if mask.count == 0:
        raise ValueError("a modality mask must keep at least one modality")
    image = case.image if isinstance(case, VolumeCase) else case
    out = image.copy()
    for i, present in enumerate(mask.present):
        if not present:
            out[i] = 0.0
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    flips: Tuple[bool, bool, bool] = (False, False, False)
    rot_k: int = 0
    rot_axes: Tuple[int, int] = (0, 1)
    shift: Tuple[int, int, int] = (0, 0, 0)


def draw_augmentation(rng: np.random.Generator, dims: Sequence[int], max_shift: int = 2) -> AugmentParams:
    flips = tuple(bool(b) for b in rng.integers(0, 2, size=3))
    square_pairs = [p for p in itertools.combinations(range(3), 2) if dims[p[0]] == dims[p[1]]]
    if square_pairs:
        axes = square_pairs[int(rng.integers(len(square_pairs)))]
        k = int(rng.integers(0, 4))
    else:
        axes, k = (0, 1), 0
    shift = tuple(int(s) for s in rng.integers(-max_shift, max_shift + 1, size=3))
    return AugmentParams(flips=flips, rot_k=k, rot_axes=axes, shift=shift)


def _shift_with_pad(vol: np.ndarray, shift: Sequence[int]) -> np.ndarray:
    out = np.zeros_like(vol)
    src, dst = [slice(None)], [slice(None)]
    for s, n in zip(shift, vol.shape[1:]):
        if s >= 0:
            src.append(slice(0, n - s))
            dst.append(slice(s, n))
        else:
            src.append(slice(-s, n))
            dst.append(slice(0, n + s))
    out[tuple(dst)] = vol[tuple(src)]
    return out


def _transform(vol: np.ndarray, params: AugmentParams) -> np.ndarray:
    for ax, f in enumerate(params.flips):
        if f:
            vol = np.flip(vol, axis=ax + 1)
    if params.rot_k % 4:
        a, b = params.rot_axes
        vol = np.rot90(vol, params.rot_k, axes=(a + 1, b + 1))
    if any(params.shift):
        vol = _shift_with_pad(vol, params.shift)
    return np.ascontiguousarray(vol)


def apply_augmentation(case: VolumeCase, params: AugmentParams) -> VolumeCase:
    """Apply one flip / rotation / crop-with-pad draw identically to image and label."""
    return VolumeCase(case.id, _transform(case.image, params), _transform(case.label, params), case.seed)


def augment(case: VolumeCase, seed: Union[int, np.random.Generator]) -> VolumeCase:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return apply_augmentation(case, draw_augmentation(rng, case.dims))


# ---------------------------------------------------------------------------
# splits and on-disk datasets
# ---------------------------------------------------------------------------


def make_split(n_cases: int, train_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """Seeded shuffle of ``range(n_cases)`` cut into (train, test) index lists."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(round(n_cases * train_fraction))
    if n_train == 0 or n_train == n_cases:
        raise ValueError(f"{n_cases} cases at fraction {train_fraction} leave one side empty")
    order = np.random.default_rng(seed).permutation(n_cases)
    return sorted(int(i) for i in order[:n_train]), sorted(int(i) for i in order[n_train:])


def case_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


@dataclass
class Dataset:
    cases: List[VolumeCase]
    train_ids: List[str]
    test_ids: List[str]
    dims: Tuple[int, int, int] = (16, 16, 16)
    seed: int = 0
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {c.id: c for c in self.cases}

    def get(self, case_id: str) -> VolumeCase:
        return self._by_id[case_id]

    @property
    def train(self) -> List[VolumeCase]:
        return [self._by_id[i] for i in self.train_ids]

    @property
    def test(self) -> List[VolumeCase]:
        return [self._by_id[i] for i in self.test_ids]


def generate_dataset(n_cases: int, dims: Sequence[int], seed: int, train_fraction: float = 0.8) -> Dataset:
    dims = check_dims(dims)
    cases = [generate_case(case_seed(seed, i), dims, case_id=f"case_{i:04d}") for i in range(n_cases)]
    train_idx, test_idx = make_split(n_cases, train_fraction, seed)
    return Dataset(
        cases=cases,
        train_ids=[cases[i].id for i in train_idx],
        test_ids=[cases[i].id for i in test_idx],
        dims=dims,
        seed=seed,
    )


INDEX_NAME = "index.jsonl"


def write_dataset(root: Union[str, Path], ds: Dataset) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    split = {i: "train" for i in ds.train_ids} | {i: "test" for i in ds.test_ids}
    lines = []
    for c in ds.cases:
        tio.save_tensor(root / f"{c.id}_image.bin", c.image)
        tio.save_tensor(root / f"{c.id}_label.bin", c.label)
        lines.append(json.dumps({"id": c.id, "seed": c.seed, "dims": list(ds.dims), "split": split[c.id]}))
    (root / INDEX_NAME).write_text("\n".join(lines) + "\n")
    return root


def read_dataset(root: Union[str, Path]) -> Dataset:
    root = Path(root)
    index = root / INDEX_NAME
    if not index.exists():
        raise FileNotFoundError(f"no dataset index at {index}")
    cases, train, test, dims = [], [], [], None
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        dims = tuple(rec["dims"])
        image = tio.load_tensor(root / f"{rec['id']}_image.bin")
        label = tio.load_tensor(root / f"{rec['id']}_label.bin")
        cases.append(VolumeCase(rec["id"], image, label, rec.get("seed")))
        (train if rec["split"] == "train" else test).append(rec["id"])
    return Dataset(cases=cases, train_ids=train, test_ids=test, dims=dims or (16, 16, 16))


def nesting_holds(label: np.ndarray) -> bool:
    wt, tc, et = (label[i] > 0.5 for i in range(3))
    return bool(np.all(tc <= wt) and np.all(et <= tc))


def iter_masked(cases: Iterable[VolumeCase], mask: ModalityMask):
    for c in cases:
        yield c, apply_modality_mask(c, mask)
