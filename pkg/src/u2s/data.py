"""Synthetic confusable-pair datasets, CSV ingestion, and frame sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

_PATTERN_STREAM = 101
_TRAIN_NOISE_STREAM = 202
_TEST_NOISE_STREAM = 303


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a synthetic set where selected class pairs differ only
    inside a small planted patch and all other class pairs differ globally."""

    num_classes: int
    confusable_pairs: tuple[tuple[int, int], ...]
    train_per_class: int
    test_per_class: int
    grid: tuple[int, int, int]  # (T, H, W)
    signal_scale: float = 1.0
    noise_scale: float = 0.0
    patch: tuple[int, int] = (2, 2)  # (height, width)
    seed: int = 0

    def validate(self) -> None:
        t, h, w = self.grid
        ph, pw = self.patch
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(t, h, w) < 1:
            raise ValueError(f"grid extents must be positive, got {self.grid}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("samples per class must be >= 1")
        if ph < 1 or pw < 1 or ph > h or pw > w:
            raise ValueError(f"discriminant patch {self.patch} does not fit inside (H, W)=({h}, {w})")
        seen: set[int] = set()
        for pair in self.confusable_pairs:
            if len(pair) != 2 or pair[0] == pair[1]:
                raise ValueError(f"confusable pair must name two distinct classes, got {pair}")
            for m in pair:
                if not 0 <= m < self.num_classes:
                    raise ValueError(f"confusable pair {pair} references invalid class {m}")
                if m in seen:
                    raise ValueError(f"class {m} appears in more than one confusable pair")
                seen.add(m)


@dataclass
class Sample:
    frames: np.ndarray  # (T, 1, H, W)
    label: int


@dataclass(frozen=True)
class SamplingPlan:
    num_segments: int
    mode: str  # "train_random" | "test_fixed"

    def validate(self) -> None:
        if self.num_segments < 1:
            raise ValueError(f"num_segments must be >= 1, got {self.num_segments}")
        if self.mode not in ("train_random", "test_fixed"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")


def default_class_names(num_classes: int) -> list[str]:
    return [f"class_{m:02d}" for m in range(num_classes)]


PATCH_ALIGN = 4  # matches the networks' input-pixels-per-feature-cell stride
FIELD_FRACTION = 0.5  # class-wide field amplitude relative to signal_scale
MARKER_BOOST = 1.5  # shared patch-marker amplitude relative to signal_scale
# pair difficulty must vary for interclass similarity to track accuracy;
# pair k's discriminant amplitude cycles through this spread
DISCRIMINANT_SPREAD = (0.6, 0.9, 1.3, 1.8)


def _prototypes(spec: DatasetSpec) -> tuple[np.ndarray, dict[tuple[int, int], tuple[int, int, int]]]:
    """Class prototypes plus the (t, row, col) patch location planted per pair.

    Each class-wide pattern is a weak field covering the whole grid plus a
    strong localized marker; a confusable pair shares both exactly, and only
    the class discriminant written inside the marker's patch tells the two
    apart. Patch offsets are multiples of PATCH_ALIGN so the patch stays
    aligned to the networks' pooled feature grid.
    """
    t, h, w = spec.grid
    ph, pw = spec.patch
    rng = np.random.default_rng((spec.seed, _PATTERN_STREAM))
    protos = np.zeros((spec.num_classes, t, 1, h, w))
    locations: dict[tuple[int, int], tuple[int, int, int]] = {}

    def place(grid: np.ndarray) -> tuple[int, int, int]:
        t_star = int(rng.integers(t))
        r0 = PATCH_ALIGN * int(rng.integers((h - ph) // PATCH_ALIGN + 1))
        c0 = PATCH_ALIGN * int(rng.integers((w - pw) // PATCH_ALIGN + 1))
        grid[t_star, 0, r0 : r0 + ph, c0 : c0 + pw] += rng.normal(
            0.0, MARKER_BOOST * spec.signal_scale, (ph, pw)
        )
        return t_star, r0, c0

    paired: set[int] = set()
    for k, (a, b) in enumerate(spec.confusable_pairs):
        shared = rng.normal(0.0, FIELD_FRACTION * spec.signal_scale, (t, 1, h, w))
        locations[(a, b)] = place(shared)  # pair marker, identical for both classes
        t_star, r0, c0 = locations[(a, b)]
        difficulty = DISCRIMINANT_SPREAD[k % len(DISCRIMINANT_SPREAD)]
        for m in (a, b):
            protos[m] = shared
            protos[m, t_star, 0, r0 : r0 + ph, c0 : c0 + pw] += rng.normal(
                0.0, difficulty * spec.signal_scale, (ph, pw)
            )
            paired.add(m)
    for m in range(spec.num_classes):
        if m not in paired:
            own = rng.normal(0.0, FIELD_FRACTION * spec.signal_scale, (t, 1, h, w))
            place(own)  # lone classes get a marker too, for comparable energy
            protos[m] = own
    return protos, locations


def planted_patches(spec: DatasetSpec) -> dict[tuple[int, int], tuple[int, int, int]]:
    """(t, row, col) of the planted patch for each confusable pair."""
    spec.validate()
    return _prototypes(spec)[1]


def generate_confusable_dataset(spec: DatasetSpec) -> tuple[list[Sample], list[Sample]]:
    """Build the (train, test) lists; a pure function of the spec."""
    spec.validate()
    protos, _ = _prototypes(spec)
    t, h, w = spec.grid

    def draw(count_per_class: int, stream: int) -> list[Sample]:
        rng = np.random.default_rng((spec.seed, stream))
        out = []
        for m in range(spec.num_classes):
            for _ in range(count_per_class):
                noise = rng.normal(0.0, 1.0, (t, 1, h, w))
                out.append(Sample(frames=protos[m] + spec.noise_scale * noise, label=m))
        return out

    return draw(spec.train_per_class, _TRAIN_NOISE_STREAM), draw(
        spec.test_per_class, _TEST_NOISE_STREAM
    )


def sample_frame_indices(source_len: int, plan: SamplingPlan, rng: np.random.Generator) -> list[int]:
    """One frame index per equal subsection, shared offset within a clip.

    Train mode draws a single uniform offset used in every subsection; test
    mode uses the centered offset floor(len/segments/2). When source_len is
    not divisible the tail remainder is never sampled.
    """
    plan.validate()
    if source_len < plan.num_segments:
        raise ValueError(
            f"source length {source_len} is shorter than {plan.num_segments} segments"
        )
    seg_len = source_len // plan.num_segments
    if plan.mode == "train_random":
        offset = int(rng.integers(seg_len))
    else:
        offset = seg_len // 2
    return [i * seg_len + offset for i in range(plan.num_segments)]


def iterate_minibatches(data, batch_size: int, shuffle_seed):
    """Yield index arrays covering ``data`` exactly once, short tail kept."""
    n = len(data)
    if n == 0:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def stack_batch(
    samples: list[Sample],
    indices: np.ndarray,
    plan: SamplingPlan | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Assemble (inputs, labels) arrays; optionally frame-subsample each clip."""
    frames = []
    labels = np.empty(len(indices), dtype=np.intp)
    for row, i in enumerate(indices):
        s = samples[int(i)]
        clip = s.frames
        # segments == clip length is the identity in both modes; skip the copy
        if plan is not None and plan.num_segments != clip.shape[0]:
            clip = clip[sample_frame_indices(clip.shape[0], plan, rng)]
        frames.append(clip)
        labels[row] = s.label
    return np.stack(frames), labels


# ---------------------------------------------------------------------------
# CSV ingestion: headerless, one row per sample, label first, frames row-major


def save_dataset_csv(path, samples: list[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            values = ",".join(repr(float(v)) for v in s.frames.reshape(-1))
            fh.write(f"{s.label},{values}\n")


def load_dataset_csv(path, grid: tuple[int, int, int], num_classes: int) -> list[Sample]:
    t, h, w = grid
    expect = t * h * w
    path = Path(path)
    samples: list[Sample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != expect + 1:
                raise ValueError(
                    f"{path}:{lineno}: expected {expect + 1} columns (label + {expect} values), "
                    f"got {len(cells)}"
                )
            label = int(cells[0])
            if not 0 <= label < num_classes:
                raise ValueError(f"{path}:{lineno}: label {label} out of range [0, {num_classes})")
            frames = np.array([float(c) for c in cells[1:]]).reshape(t, 1, h, w)
            samples.append(Sample(frames=frames, label=label))
    if not samples:
        raise ValueError(f"{path}: no samples found")
    return samples
