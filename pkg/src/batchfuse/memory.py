# Copyright 2025 Martin Becker
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Quadratic memory model, warm-up probing, feasibility and packing.

The model is ``M = beta0 + beta1 * B * L + beta2 * B * L^2`` for batch size
``B`` and sequence length ``L``. It is linear in its coefficients, so it is
fitted as linear least squares on the features ``(1, B L, B L^2)``.
"""
import csv
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from itertools import product
from pathlib import Path
from typing import Callable, Final, Iterable, Sequence

import numpy as np
from scipy.optimize import nnls

from batchfuse._checks import (
    _check_count,
    _check_gigabytes,
    _check_real,
    _check_sequence,
)
from batchfuse._exceptions import ConfigError, FitError, _CheckError
from batchfuse.reporting import write_csv, write_json


logger = logging.getLogger(__name__)

MIN_DISTINCT_FEATURES: Final[int] = 3
MAX_EXACT_PACKING_ITEMS: Final[int] = 30
PACKING_RESOLUTION_GB: Final[float] = 0.01
DEFAULT_FLOOR_GB: Final[float] = 0.01


class FitMode(str, Enum):
    UNCONSTRAINED = "unconstrained"
    NONNEGATIVE = "nonnegative"


@dataclass(frozen=True)
class MemSample:
    batch_size: int
    seq_len: int
    memory_gb: float

    def __post_init__(self) -> None:
        _check_count(self.batch_size, name="batch_size")
        _check_count(self.seq_len, name="seq_len")
        _check_real(self.memory_gb, name="memory_gb", gt=0)


@dataclass(frozen=True)
class MemoryModel:
    beta0: float
    beta1: float
    beta2: float
    rmse: float = 0.0
    sample_count: int = 0
    floor_gb: float = DEFAULT_FLOOR_GB

    def __post_init__(self) -> None:
        for name in ("beta0", "beta1", "beta2"):
            object.__setattr__(self, name, _check_real(getattr(self, name), name=name))
        _check_real(self.rmse, name="rmse", ge=0)
        _check_count(self.sample_count, name="sample_count", ge=0)
        _check_real(self.floor_gb, name="floor_gb", gt=0)

    @property
    def coefficients(self) -> tuple[float, float, float]:
        return (self.beta0, self.beta1, self.beta2)

    def raw(self, batch_size: int, seq_len: int) -> float:
        tokens = batch_size * seq_len
        return self.beta0 + self.beta1 * tokens + self.beta2 * tokens * seq_len

    def predict(self, batch_size: int, seq_len: int) -> float:
        return predict(self, batch_size, seq_len)


def _features(batch_size: np.ndarray, seq_len: np.ndarray) -> np.ndarray:
    tokens = batch_size * seq_len
    return np.column_stack([np.ones_like(tokens), tokens, tokens * seq_len])


def fit(
    samples: Sequence[MemSample],
    mode: FitMode | str = FitMode.UNCONSTRAINED,
    floor_gb: float = DEFAULT_FLOOR_GB,
) -> MemoryModel:
    mode = FitMode(mode)
    _check_sequence(samples, type_=MemSample, name="samples")

    batch_size = np.array([s.batch_size for s in samples], dtype=np.float64)
    seq_len = np.array([s.seq_len for s in samples], dtype=np.float64)
    memory = np.array([s.memory_gb for s in samples], dtype=np.float64)
    design = _features(batch_size, seq_len)

    distinct = len(np.unique(design[:, 1]))
    if len(samples) < MIN_DISTINCT_FEATURES or distinct < MIN_DISTINCT_FEATURES:
        raise FitError(
            f"fitting needs at least {MIN_DISTINCT_FEATURES} samples with distinct "
            f"B*L, got {len(samples)} samples with {distinct} distinct B*L"
        )

    # Columns span ~10 orders of magnitude, solve on unit-scaled columns
    scale = np.abs(design).max(axis=0)
    scaled = design / scale
    if np.linalg.matrix_rank(scaled) < design.shape[1]:
        raise FitError(
            "samples do not determine all coefficients, vary the sequence "
            "length as well as the batch size"
        )

    if mode is FitMode.NONNEGATIVE:
        solution, _ = nnls(scaled, memory)
    else:
        solution, *_ = np.linalg.lstsq(scaled, memory, rcond=None)
    beta = solution / scale

    residuals = memory - design @ beta
    model = MemoryModel(
        beta0=float(beta[0]),
        beta1=float(beta[1]),
        beta2=float(beta[2]),
        rmse=float(np.sqrt(np.mean(residuals**2))),
        sample_count=len(samples),
        floor_gb=floor_gb,
    )
    logger.debug("fitted %s memory model %s", mode.value, model)

    return model


def predict(model: MemoryModel, batch_size: int, seq_len: int) -> float:
    _check_count(batch_size, name="batch_size")
    _check_count(seq_len, name="seq_len")

    memory = model.raw(batch_size, seq_len)
    if memory <= 0:
        logger.warning(
            "memory model predicts %.4g GB for B=%d, L=%d (out of domain), "
            "clamping to %.4g GB",
            memory,
            batch_size,
            seq_len,
            model.floor_gb,
        )
        return model.floor_gb

    return memory


def relative_change(old: MemoryModel, new: MemoryModel) -> float:
    """Largest relative change of any coefficient."""
    return max(
        abs(b - a) / max(abs(a), 1e-300)
        for a, b in zip(old.coefficients, new.coefficients)
    )


# ==============================================================================
# Feasibility and packing
# ==============================================================================
@dataclass(frozen=True)
class PackingQuery:
    memories: tuple[float, ...]
    budget_gb: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "memories", tuple(float(m) for m in self.memories))
        _check_sequence(self.memories, type_=float, name="memories", ge=0)
        _check_gigabytes(self.budget_gb, name="budget_gb")

    def total(self, subset: Iterable[int]) -> float:
        return sum(self.memories[index] for index in set(subset))


def feasible_sets(query: PackingQuery) -> Callable[[Iterable[int]], bool]:
    """Predicate over index subsets: does the subset fit the budget?"""

    def is_feasible(subset: Iterable[int]) -> bool:
        return query.total(subset) <= query.budget_gb

    return is_feasible


def max_packing(query: PackingQuery, mode: str = "auto") -> tuple[int, ...]:
    """Indices of a feasible subset with the largest total memory.

    ``exact`` solves the subset sum at 0.01 GB resolution (item sizes are
    rounded up, so the result is feasible at full precision); ``greedy``
    packs first-fit in descending size; ``auto`` picks exact when allowed.
    """
    n = len(query.memories)
    if mode == "auto":
        mode = "exact" if n <= MAX_EXACT_PACKING_ITEMS else "greedy"
    if mode == "greedy":
        return _greedy_packing(query)
    if mode != "exact":
        raise _CheckError(
            f"\n  - `mode` must be `exact`, `greedy` or `auto`, got `{mode}`"
        )
    if n > MAX_EXACT_PACKING_ITEMS:
        raise _CheckError(
            f"\n  - exact packing needs `len(memories) <= {MAX_EXACT_PACKING_ITEMS}`, "
            f"got {n}"
        )

    units = [math.ceil(m / PACKING_RESOLUTION_GB - 1e-9) for m in query.memories]
    # No subset sums past the total, however large the budget
    capacity = min(
        math.floor(query.budget_gb / PACKING_RESOLUTION_GB + 1e-9), sum(units)
    )

    reachable = np.zeros(capacity + 1, dtype=bool)
    reachable[0] = True
    # taken[i, s]: sum s first became reachable by adding item i
    taken = np.zeros((n, capacity + 1), dtype=bool)
    for index, size in enumerate(units):
        if size == 0 or size > capacity:
            continue
        shifted = np.zeros_like(reachable)
        shifted[size:] = reachable[:-size]
        taken[index] = shifted & ~reachable
        reachable |= shifted

    chosen = [index for index, size in enumerate(units) if size == 0]
    remaining = int(np.flatnonzero(reachable).max())
    for index in range(n - 1, -1, -1):
        if remaining == 0:
            break
        if taken[index, remaining]:
            chosen.append(index)
            remaining -= units[index]

    return tuple(sorted(chosen))


def _greedy_packing(query: PackingQuery) -> tuple[int, ...]:
    order = sorted(range(len(query.memories)), key=lambda i: -query.memories[i])
    chosen, total = [], 0.0
    for index in order:
        if total + query.memories[index] <= query.budget_gb:
            chosen.append(index)
            total += query.memories[index]

    return tuple(sorted(chosen))


# ==============================================================================
# Warm-up and profiling
# ==============================================================================
def warmup_plan(
    batch_sizes: Sequence[int],
    seq_lens: Sequence[int],
) -> list[tuple[int, int]]:
    """Probe points ``(B, L)`` covering the cross product of the inputs."""
    for name, values in (("batch_sizes", batch_sizes), ("seq_lens", seq_lens)):
        _check_sequence(values, type_=int, name=name, ge=1)
        if len(values) == 0:
            raise _CheckError(f"\n  - `{name}` must not be empty")

    plan = list(product(sorted(set(batch_sizes)), sorted(set(seq_lens))))
    distinct = len({b * l for b, l in plan})
    if distinct < MIN_DISTINCT_FEATURES:
        logger.warning(
            "warm-up plan has %d distinct B*L value(s), fitting needs at least %d",
            distinct,
            MIN_DISTINCT_FEATURES,
        )
    elif len(set(seq_lens)) < 2:
        logger.warning(
            "warm-up plan uses a single sequence length, beta2 is not identifiable"
        )

    return plan


@dataclass(frozen=True)
class MemoryProfile:
    """Synthetic device whose true memory follows ``truth`` plus noise."""

    truth: MemoryModel
    noise_gb: float = 0.0
    batch_sizes: tuple[int, ...] = (1, 2, 4)
    seq_lens: tuple[int, ...] = (128, 256, 512)
    refit_every: int = 1
    mode: FitMode = FitMode.UNCONSTRAINED

    def __post_init__(self) -> None:
        _check_real(self.noise_gb, name="noise_gb", ge=0)
        _check_sequence(self.batch_sizes, type_=int, name="batch_sizes", ge=1)
        _check_sequence(self.seq_lens, type_=int, name="seq_lens", ge=1)
        _check_count(self.refit_every, name="refit_every")
        object.__setattr__(self, "mode", FitMode(self.mode))

    def observe(
        self,
        rng: np.random.Generator,
        batch_size: int,
        seq_len: int,
    ) -> MemSample:
        memory = self.truth.raw(batch_size, seq_len)
        if self.noise_gb > 0:
            memory += rng.normal(0.0, self.noise_gb)

        return MemSample(batch_size, seq_len, max(memory, self.truth.floor_gb))


# ==============================================================================
# Files
# ==============================================================================
SAMPLE_COLUMNS: Final[tuple[str, str, str]] = ("B_t", "L_n", "M_gb")


def read_samples_csv(path: str | Path) -> list[MemSample]:
    path = Path(path)
    try:
        with path.open(newline="") as f:
            reader = csv.DictReader(f)
            missing = set(SAMPLE_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ConfigError(f"{path}: missing column(s) {sorted(missing)}")
            return [
                MemSample(int(row["B_t"]), int(row["L_n"]), float(row["M_gb"]))
                for row in reader
            ]
    except FileNotFoundError as e:
        raise ConfigError(f"sample file not found: {path}") from e
    except ValueError as e:
        raise ConfigError(f"{path}: malformed sample row ({e})") from e
    except ConfigError:
        raise
    except _CheckError as e:
        raise ConfigError(f"{path}: invalid sample{e}") from e


def write_samples_csv(path: str | Path, samples: Iterable[MemSample]) -> None:
    write_csv(
        path,
        SAMPLE_COLUMNS,
        ((s.batch_size, s.seq_len, s.memory_gb) for s in samples),
    )


def model_to_dict(model: MemoryModel) -> dict[str, float | int]:
    return {
        "beta0": model.beta0,
        "beta1": model.beta1,
        "beta2": model.beta2,
        "rmse": model.rmse,
        "sample_count": model.sample_count,
    }


def write_model_json(path: str | Path, model: MemoryModel) -> None:
    write_json(path, model_to_dict(model))


def read_model_json(path: str | Path) -> MemoryModel:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
        return MemoryModel(
            beta0=raw["beta0"],
            beta1=raw["beta1"],
            beta2=raw["beta2"],
            rmse=raw.get("rmse", 0.0),
            sample_count=raw.get("sample_count", 0),
        )
    except FileNotFoundError as e:
        raise ConfigError(f"memory model file not found: {path}") from e
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ConfigError(f"{path}: malformed memory model ({e!r})") from e
    except _CheckError as e:
        raise ConfigError(f"{path}: invalid memory model{e}") from e
