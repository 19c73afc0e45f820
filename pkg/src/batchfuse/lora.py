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
"""Dense LoRA forward pass and the BatchFusion fused forward.

Layout is fixed repo-wide: sequences are rows, so an input batch of one
sequence is ``x`` of shape ``(seq_len, k)``, the pretrained weight ``W0`` is
``(d, k)``, and the LoRA matrices are ``A: (r, k)`` and ``B: (d, r)``. The
single-job output is ``h = x W0^T + (x A^T) B^T`` of shape ``(seq_len, d)``.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, NamedTuple, Sequence

import torch

from batchfuse._checks import _check_count, _check_lengths, _check_scalar
from batchfuse._exceptions import NumericError, RoutingError, ShapeError, _CheckError
from batchfuse.seeding import temp_seed


DTYPE = torch.float64


# ==============================================================================
# Checks
# ==============================================================================
def _check_matrix(matrix: torch.Tensor, name: str) -> torch.Tensor:
    _check_scalar(matrix, type_=torch.Tensor, name=name)
    if matrix.dim() != 2 or 0 in matrix.shape:
        raise ShapeError(
            f"\n  - `{name}` must be a non-empty 2-D matrix, got shape "
            f"{tuple(matrix.shape)}"
        )
    if not torch.isfinite(matrix).all():
        raise NumericError(f"\n  - `{name}` must only contain finite entries")

    return matrix


def _check_inner(left: str, left_dim: int, right: str, right_dim: int) -> None:
    if left_dim != right_dim:
        raise ShapeError(
            f"\n  - `{left}` and `{right}` must agree on the shared dimension, "
            f"got {left_dim} and {right_dim}"
        )


# ==============================================================================
# Types
# ==============================================================================
@dataclass(frozen=True)
class AdapterWeights:
    job_id: str
    a: torch.Tensor  # (r, k)
    b: torch.Tensor  # (d, r)

    def __post_init__(self) -> None:
        _check_matrix(self.a, "a")
        _check_matrix(self.b, "b")
        _check_inner("b", self.b.shape[1], "a", self.a.shape[0])
        if self.rank > min(self.d, self.k):
            raise ShapeError(
                f"\n  - `rank <= min(d, k)` not satisfied, got rank {self.rank} "
                f"with d={self.d}, k={self.k}"
            )

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @property
    def k(self) -> int:
        return self.a.shape[1]


@dataclass(frozen=True)
class JobBatch:
    job_id: str
    sequences: tuple[torch.Tensor, ...]  # each (seq_len, k)

    def __post_init__(self) -> None:
        object.__setattr__(self, "sequences", tuple(self.sequences))
        if len(self.sequences) == 0:
            raise ShapeError(f"\n  - batch of job `{self.job_id}` has no sequences")
        for index, sequence in enumerate(self.sequences):
            _check_matrix(sequence, f"sequences[{index}]")
            _check_inner(
                "sequences[0]", self.sequences[0].shape[1],
                f"sequences[{index}]", sequence.shape[1],
            )

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(sequence.shape[0] for sequence in self.sequences)

    @property
    def k(self) -> int:
        return self.sequences[0].shape[1]


class PaddingStats(NamedTuple):
    total_tokens: int
    padding_tokens: int

    @property
    def padding_ratio(self) -> float:
        if self.total_tokens == 0:
            return 0.0
        return self.padding_tokens / self.total_tokens


def padding_stats(lengths: Sequence[int]) -> PaddingStats:
    """Token accounting of aligning ``lengths`` to their maximum."""
    lengths = _check_lengths(lengths)
    max_len = max(lengths)

    return PaddingStats(
        total_tokens=len(lengths) * max_len,
        padding_tokens=sum(max_len - length for length in lengths),
    )


@dataclass(frozen=True)
class FusedBatch:
    data: torch.Tensor  # (num_sequences, max_len, k), padding rows are 0
    routing: tuple[str, ...]  # job id per sequence
    padding_mask: torch.Tensor  # (num_sequences, max_len), True marks padding
    lengths: tuple[int, ...]

    @property
    def max_len(self) -> int:
        return self.data.shape[1]

    @property
    def total_tokens(self) -> int:
        return self.data.shape[0] * self.data.shape[1]

    @property
    def padding_tokens(self) -> int:
        return int(self.padding_mask.sum().item())

    @property
    def padding_ratio(self) -> float:
        return self.padding_tokens / self.total_tokens

    @property
    def job_ids(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.routing))


# ==============================================================================
# Forward passes
# ==============================================================================
def lora_forward(
    w0: torch.Tensor,
    adapter: AdapterWeights,
    x: torch.Tensor,
) -> torch.Tensor:
    _check_matrix(w0, "w0")
    _check_matrix(x, "x")
    _check_inner("w0", w0.shape[1], "x", x.shape[1])
    _check_inner("w0", w0.shape[1], "adapter.a", adapter.k)
    _check_inner("w0", w0.shape[0], "adapter.b", adapter.d)

    # W0 x + B (A x), low-rank product first
    return x @ w0.T + (x @ adapter.a.T) @ adapter.b.T


def fuse(batches: Sequence[JobBatch]) -> FusedBatch:
    """Concatenate job batches into one aligned block.

    Sequences keep their input order (job order, then sequence order within
    the job) and are zero-padded at the end to the longest sequence.
    """
    if len(batches) == 0:
        raise _CheckError("\n  - `batches` must contain at least one job batch")
    for batch in batches:
        _check_scalar(batch, type_=JobBatch, name="batches[...]")
        _check_inner("batches[0]", batches[0].k, f"batch of `{batch.job_id}`", batch.k)

    sequences = [sequence for batch in batches for sequence in batch.sequences]
    routing = tuple(batch.job_id for batch in batches for _ in batch.sequences)
    lengths = tuple(sequence.shape[0] for sequence in sequences)
    max_len = max(lengths)

    data = torch.zeros(len(sequences), max_len, batches[0].k, dtype=DTYPE)
    padding_mask = torch.ones(len(sequences), max_len, dtype=torch.bool)
    for index, sequence in enumerate(sequences):
        data[index, : sequence.shape[0]] = sequence
        padding_mask[index, : sequence.shape[0]] = False

    return FusedBatch(
        data=data, routing=routing, padding_mask=padding_mask, lengths=lengths
    )


def fused_forward(
    w0: torch.Tensor,
    adapters: Mapping[str, AdapterWeights],
    fused: FusedBatch,
) -> dict[str, list[torch.Tensor]]:
    """Shared-base forward over a fused batch, split back per job.

    The base projection runs once over the whole block, each adapter only
    over its own rows. Outputs are restricted to real (non-padding) rows:
    ``result[job_id][i]`` has shape ``(lengths_i, d)``.
    """
    _check_matrix(w0, "w0")
    _check_inner("w0", w0.shape[1], "fused.data", fused.data.shape[2])
    missing = [job_id for job_id in fused.job_ids if job_id not in adapters]
    if missing:
        raise RoutingError(f"no adapter for routed job(s) `{'`, `'.join(missing)}`")

    # Two large launches: one base matmul over the block, one add
    base = fused.data @ w0.T
    delta = torch.zeros_like(base)
    for job_id in fused.job_ids:
        adapter = adapters[job_id]
        _check_inner("w0", w0.shape[0], f"adapter of `{job_id}`", adapter.d)
        _check_inner("w0", w0.shape[1], f"adapter of `{job_id}`", adapter.k)
        rows = torch.tensor([r == job_id for r in fused.routing])
        # Two small launches per job
        delta[rows] = (fused.data[rows] @ adapter.a.T) @ adapter.b.T
    h = base + delta

    outputs: dict[str, list[torch.Tensor]] = {job_id: [] for job_id in fused.job_ids}
    for index, (job_id, length) in enumerate(zip(fused.routing, fused.lengths)):
        outputs[job_id].append(h[index, :length])

    return outputs


# ==============================================================================
# Kernel launches
# ==============================================================================
class LaunchMode(str, Enum):
    PER_JOB = "per_job"
    FUSED = "fused"


class LaunchCount(NamedTuple):
    small: int
    large: int

    @property
    def total(self) -> int:
        return self.small + self.large


def count_launches(num_jobs: int, mode: LaunchMode | str) -> LaunchCount:
    """Kernel launches of one LoRA layer forward for ``num_jobs`` jobs.

    Per job, unfused training launches three multiplications and one
    addition. Fusion keeps the two low-rank multiplications per job and
    merges the base multiplication and the addition into two large launches.
    """
    _check_count(num_jobs, name="num_jobs")
    mode = LaunchMode(mode)
    if mode is LaunchMode.PER_JOB:
        return LaunchCount(small=4 * num_jobs, large=0)

    return LaunchCount(small=2 * num_jobs, large=2)


# ==============================================================================
# Random instances
# ==============================================================================
def random_adapter(
    job_id: str,
    d: int,
    k: int,
    rank: int,
    seed: int | None = None,
) -> AdapterWeights:
    _check_count(d, name="d")
    _check_count(k, name="k")
    _check_count(rank, name="rank")
    with temp_seed(seed):
        a = torch.randn(rank, k, dtype=DTYPE)
        b = torch.randn(d, rank, dtype=DTYPE)

    return AdapterWeights(job_id=job_id, a=a, b=b)


def random_job_batch(
    job_id: str,
    lengths: Sequence[int],
    k: int,
    seed: int | None = None,
) -> JobBatch:
    lengths = _check_lengths(lengths)
    _check_count(k, name="k")
    with temp_seed(seed):
        sequences = tuple(torch.randn(length, k, dtype=DTYPE) for length in lengths)

    return JobBatch(job_id=job_id, sequences=sequences)
