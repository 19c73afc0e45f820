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
"""Jobs, datasets as sequence-length profiles, and workload generation/ingestion."""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import truncnorm

from batchfuse._checks import (
    _check_count,
    _check_lengths,
    _check_real,
    _check_scalar,
    _check_seed,
    _check_sequence,
)
from batchfuse._exceptions import ConfigError, StateError, _CheckError
from batchfuse.reporting import write_jsonl
from batchfuse.seeding import make_rng


logger = logging.getLogger(__name__)


# ==============================================================================
# Datasets
# ==============================================================================
@dataclass(frozen=True)
class DataItem:
    length: int

    def __post_init__(self) -> None:
        _check_count(self.length, name="length")


@dataclass(frozen=True)
class DatasetProfile:
    items: tuple[DataItem, ...]
    name: str = "dataset"

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))
        _check_sequence(self.items, type_=DataItem, name="items")
        if len(self.items) == 0:
            raise _CheckError("\n  - `items` must not be empty")

    @classmethod
    def from_lengths(cls, lengths: Iterable[int], name: str = "dataset"):
        lengths = _check_lengths(list(lengths), name="lengths")
        return cls(items=tuple(DataItem(length) for length in lengths), name=name)

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(item.length for item in self.items)

    @cached_property
    def ascending(self) -> tuple[DataItem, ...]:
        return tuple(sorted(self.items, key=lambda item: item.length))

    @cached_property
    def descending(self) -> tuple[DataItem, ...]:
        return tuple(sorted(self.items, key=lambda item: -item.length))

    def __len__(self) -> int:
        return len(self.items)


# ==============================================================================
# Jobs
# ==============================================================================
class JobStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    STOPPED = "stopped"
    COMPLETED = "completed"


class ItemOrder(str, Enum):
    SEQUENTIAL = "sequential"
    # Length-sorted consumption (OptimalBatch), hostile to convergence
    SHORTEST_FIRST = "shortest"
    LONGEST_FIRST = "longest"


@dataclass(frozen=True)
class JobSpec:
    id: str
    priority: int
    submit_time: float
    dataset: DatasetProfile
    batch_size: int
    true_iterations: int
    lora_rank: int = 8
    early_stop_iteration: int | None = None
    memory_gb: float | None = None
    loss_stream: tuple[float, ...] | None = None
    accuracy_stream: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        _check_scalar(self.id, type_=str, name="id")
        _check_count(self.priority, name="priority")
        _check_real(self.submit_time, name="submit_time", ge=0)
        _check_scalar(self.dataset, type_=DatasetProfile, name="dataset")
        _check_count(self.batch_size, name="batch_size")
        _check_count(self.true_iterations, name="true_iterations")
        _check_count(self.lora_rank, name="lora_rank")
        _check_scalar(
            self.early_stop_iteration,
            type_=int | None,
            name="early_stop_iteration",
            ge=1,
            le=self.true_iterations,
        )
        if self.memory_gb is not None:
            _check_real(self.memory_gb, name="memory_gb", ge=0)
        for name in ("loss_stream", "accuracy_stream"):
            stream = getattr(self, name)
            if stream is not None:
                # NaN entries are meaningful here, only the type is checked
                object.__setattr__(self, name, tuple(float(x) for x in stream))


@dataclass
class JobState:
    spec: JobSpec
    status: JobStatus = JobStatus.PENDING
    iterations_done: int = 0
    cursor: int = 0
    items_consumed: int = 0
    start_time: float | None = None
    finish_time: float | None = None

    @property
    def job_id(self) -> str:
        return self.spec.id

    @property
    def is_active(self) -> bool:
        return self.status in (JobStatus.PENDING, JobStatus.RUNNING)


def next_candidate_batch(
    state: JobState,
    order: ItemOrder = ItemOrder.SEQUENTIAL,
) -> tuple[DataItem, ...]:
    """Peek at the job's next batch without advancing its cursor.

    Batches never straddle an epoch boundary: the last batch of an epoch may
    be short, and a cursor at the end of the dataset wraps to the start.
    """
    if not state.is_active:
        raise StateError(
            f"job `{state.job_id}` is {state.status.value} and has no next batch"
        )

    items = _ordered_items(state.spec.dataset, order)
    start = 0 if state.cursor >= len(items) else state.cursor

    return items[start : start + state.spec.batch_size]


def commit_batch(state: JobState, count: int, now: float) -> None:
    if not state.is_active:
        raise StateError(f"cannot commit a batch to {state.status.value} job")
    if state.iterations_done >= state.spec.true_iterations:
        raise StateError(
            f"job `{state.job_id}` already ran all "
            f"{state.spec.true_iterations} iterations"
        )
    _check_count(count, name="count")

    start = 0 if state.cursor >= len(state.spec.dataset) else state.cursor
    if start + count > len(state.spec.dataset):
        raise StateError(
            f"cannot commit {count} items at cursor {start} of "
            f"{len(state.spec.dataset)}"
        )

    if state.start_time is None:
        state.start_time = now
    state.status = JobStatus.RUNNING
    state.cursor = start + count
    state.items_consumed += count
    state.iterations_done += 1


def finish(state: JobState, status: JobStatus, now: float) -> None:
    if status not in (JobStatus.STOPPED, JobStatus.COMPLETED):
        raise StateError(f"`{status.value}` is not a terminal status")
    if not state.is_active:
        raise StateError(f"job `{state.job_id}` already finished")
    if state.start_time is not None and now < state.start_time:
        raise StateError(f"finish time {now} precedes start {state.start_time}")

    state.status = status
    state.finish_time = now


def _ordered_items(dataset: DatasetProfile, order: ItemOrder) -> tuple[DataItem, ...]:
    if order is ItemOrder.SHORTEST_FIRST:
        return dataset.ascending
    if order is ItemOrder.LONGEST_FIRST:
        return dataset.descending

    return dataset.items


# ==============================================================================
# Synthetic generation
# ==============================================================================
class LengthFamily(str, Enum):
    UNIFORM = "uniform"
    NORMAL_TRUNCATED = "normal-truncated"
    EMPIRICAL_HISTOGRAM = "empirical-histogram"


@dataclass(frozen=True)
class LengthDistribution:
    family: LengthFamily = LengthFamily.UNIFORM
    low: int = 1
    high: int = 512
    mean: float | None = None
    std: float | None = None
    histogram: Mapping[int, int] | None = None

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "family", LengthFamily(self.family))
            _check_count(self.low, name="low")
            _check_count(self.high, name="high", ge=self.low)
            if self.family is LengthFamily.NORMAL_TRUNCATED:
                _check_real(self.mean, name="mean")
                _check_real(self.std, name="std", gt=0)
            if self.family is LengthFamily.EMPIRICAL_HISTOGRAM:
                if not self.histogram:
                    raise _CheckError("\n  - `histogram` must not be empty")
                histogram = {int(k): int(v) for k, v in self.histogram.items()}
                _check_sequence(list(histogram), type_=int, name="histogram", ge=1)
                _check_sequence(
                    list(histogram.values()), type_=int, name="histogram", ge=0
                )
                if sum(histogram.values()) == 0:
                    raise _CheckError("\n  - `histogram` counts must not all be 0")
                object.__setattr__(self, "histogram", dict(sorted(histogram.items())))
        except ValueError as e:
            raise ConfigError(f"\n  - unknown length family: {e}") from e
        except ConfigError:
            raise
        except _CheckError as e:
            raise ConfigError(f"invalid length distribution:{e}") from e

    def sample(
        self,
        rng: np.random.Generator,
        count: int,
        max_length: int,
    ) -> list[int]:
        if self.family is LengthFamily.UNIFORM:
            lengths = rng.integers(self.low, self.high + 1, size=count)
        elif self.family is LengthFamily.NORMAL_TRUNCATED:
            # truncnorm takes the bounds in standard deviations
            a = (self.low - self.mean) / self.std
            b = (self.high - self.mean) / self.std
            lengths = np.rint(
                truncnorm.rvs(
                    a, b, loc=self.mean, scale=self.std, size=count, random_state=rng
                )
            )
        else:
            lengths = self._sample_histogram(rng, count)

        return [int(length) for length in np.clip(lengths, 1, max_length)]

    def _sample_histogram(self, rng: np.random.Generator, count: int) -> np.ndarray:
        population = np.repeat(
            np.fromiter(self.histogram.keys(), dtype=np.int64),
            np.fromiter(self.histogram.values(), dtype=np.int64),
        )
        # Without replacement, one shuffled copy of the histogram at a time
        copies = -(-count // population.size)
        blocks = [rng.permutation(population) for _ in range(copies)]

        return np.concatenate(blocks)[:count]


@dataclass(frozen=True)
class WorkloadConfig:
    jobs: tuple[JobSpec, ...] = ()
    num_jobs: int = 0
    items_per_job: int = 64
    lengths: LengthDistribution = field(default_factory=LengthDistribution)
    max_length: int = 2048
    seed: int = 0
    batch_size: int = 2
    lora_rank: int = 8
    priority_range: tuple[int, int] = (1, 1)
    iteration_range: tuple[int, int] = (10, 10)
    early_stop_fraction: float = 0.0
    submit_spread: float = 0.0
    memory_range: tuple[float, float] | None = None
    name_prefix: str = "job"

    def __post_init__(self) -> None:
        object.__setattr__(self, "jobs", tuple(self.jobs))
        try:
            _check_sequence(self.jobs, type_=JobSpec, name="jobs")
            _check_count(self.num_jobs, name="num_jobs", ge=0)
            _check_count(self.items_per_job, name="items_per_job")
            _check_scalar(self.lengths, type_=LengthDistribution, name="lengths")
            _check_count(self.max_length, name="max_length")
            _check_seed(self.seed)
            _check_count(self.batch_size, name="batch_size")
            _check_count(self.lora_rank, name="lora_rank")
            _check_sequence(
                self.priority_range, type_=int, name="priority_range", length=2, ge=1
            )
            _check_sequence(
                self.iteration_range, type_=int, name="iteration_range", length=2, ge=1
            )
            _check_real(
                self.early_stop_fraction, name="early_stop_fraction", ge=0, le=1
            )
            _check_real(self.submit_spread, name="submit_spread", ge=0)
            if self.memory_range is not None:
                _check_sequence(
                    self.memory_range,
                    type_=float | int,
                    name="memory_range",
                    length=2,
                    ge=0,
                )
            for name in ("priority_range", "iteration_range", "memory_range"):
                bounds = getattr(self, name)
                if bounds is not None and bounds[0] > bounds[1]:
                    raise _CheckError(f"\n  - `{name}` must be ordered, got {bounds}")
        except _CheckError as e:
            raise ConfigError(f"invalid workload configuration:{e}") from e

        ids = [job.id for job in self.jobs]
        if len(set(ids)) != len(ids):
            raise ConfigError("invalid workload configuration: duplicate job ids")


def generate_workload(config: WorkloadConfig) -> list[JobSpec]:
    jobs = list(config.jobs)
    for index in range(config.num_jobs):
        # One generator per job keeps jobs independent of `num_jobs`
        rng = make_rng(config.seed, "job", index)
        jobs.append(_generate_job(config, index, rng))

    ids = [job.id for job in jobs]
    if len(set(ids)) != len(ids):
        raise ConfigError("generated job ids collide with explicit jobs")

    logger.debug("generated %d jobs (%d explicit)", len(jobs), len(config.jobs))
    return jobs


def _generate_job(
    config: WorkloadConfig,
    index: int,
    rng: np.random.Generator,
) -> JobSpec:
    lengths = config.lengths.sample(rng, config.items_per_job, config.max_length)
    low, high = config.iteration_range
    iterations = int(rng.integers(low, high + 1))
    priority = int(rng.integers(config.priority_range[0], config.priority_range[1] + 1))

    early_stop_iteration = None
    if iterations > 1 and rng.random() < config.early_stop_fraction:
        early_stop_iteration = int(rng.integers(1, iterations))

    memory_gb = None
    if config.memory_range is not None:
        # Hundredths of a GB, the resolution of the packing DP
        memory_gb = round(float(rng.uniform(*config.memory_range)), 2)

    submit_time = 0.0
    if config.submit_spread > 0:
        submit_time = round(float(rng.uniform(0, config.submit_spread)), 3)

    name = f"{config.name_prefix}{index}"
    return JobSpec(
        id=name,
        priority=priority,
        submit_time=submit_time,
        dataset=DatasetProfile.from_lengths(lengths, name=f"{name}-data"),
        batch_size=config.batch_size,
        true_iterations=iterations,
        lora_rank=config.lora_rank,
        early_stop_iteration=early_stop_iteration,
        memory_gb=memory_gb,
    )


# ==============================================================================
# Files
# ==============================================================================
def load_histogram(path: str | Path) -> dict[int, int]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"histogram file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e

    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object mapping length to count")
    try:
        return {int(length): int(count) for length, count in raw.items()}
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: lengths and counts must be integers") from e


def job_to_record(job: JobSpec) -> dict[str, Any]:
    record: dict[str, Any] = {
        "id": job.id,
        "priority": job.priority,
        "submit_time": job.submit_time,
        "batch_size": job.batch_size,
        "lora_rank": job.lora_rank,
        "true_iterations": job.true_iterations,
        "dataset": {"name": job.dataset.name, "lengths": list(job.dataset.lengths)},
    }
    optional = {
        "early_stop_iteration": job.early_stop_iteration,
        "memory_gb": job.memory_gb,
        "loss_stream": None if job.loss_stream is None else list(job.loss_stream),
        "accuracy_stream": (
            None if job.accuracy_stream is None else list(job.accuracy_stream)
        ),
    }
    record.update({k: v for k, v in optional.items() if v is not None})

    return record


def job_from_record(
    record: Mapping[str, Any],
    base_dir: Path | None = None,
    seed: int = 0,
) -> JobSpec:
    try:
        record = dict(record)
        dataset = _dataset_from_record(
            record.pop("dataset"), base_dir, seed, record["id"]
        )
        return JobSpec(dataset=dataset, **record)
    except KeyError as e:
        raise ConfigError(f"missing field {e}") from e
    except TypeError as e:
        raise ConfigError(f"unexpected field: {e}") from e


def _dataset_from_record(
    record: Mapping[str, Any],
    base_dir: Path | None,
    seed: int,
    job_id: str,
) -> DatasetProfile:
    name = record.get("name", f"{job_id}-data")
    if "lengths" in record:
        return DatasetProfile.from_lengths(record["lengths"], name=name)

    if "histogram" in record:
        histogram = record["histogram"]
    elif "histogram_file" in record:
        histogram = load_histogram((base_dir or Path(".")) / record["histogram_file"])
    else:
        raise ConfigError(
            f"dataset of job `{job_id}` needs `lengths`, `histogram` or "
            "`histogram_file`"
        )

    distribution = LengthDistribution(
        family=LengthFamily.EMPIRICAL_HISTOGRAM,
        high=max(int(length) for length in histogram),
        histogram=histogram,
    )
    count = record.get("count", sum(int(c) for c in histogram.values()))
    rng = make_rng(record.get("seed", seed), "dataset", job_id)
    max_length = record.get("max_length", 1 << 30)
    lengths = distribution.sample(rng, count, max_length=max_length)

    return DatasetProfile.from_lengths(lengths, name=name)


def load_workload(path: str | Path, seed: int = 0) -> list[JobSpec]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError as e:
        raise ConfigError(f"workload file not found: {path}") from e

    jobs = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            jobs.append(job_from_record(json.loads(line), path.parent, seed))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{lineno}: not valid JSON ({e})") from e
        except _CheckError as e:
            raise ConfigError(f"{path}:{lineno}: {e}") from e

    if len(set(job.id for job in jobs)) != len(jobs):
        raise ConfigError(f"{path}: duplicate job ids")

    return jobs


def save_workload(path: str | Path, jobs: Sequence[JobSpec]) -> None:
    write_jsonl(path, (job_to_record(job) for job in jobs))