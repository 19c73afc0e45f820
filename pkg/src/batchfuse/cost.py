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
"""Closed-form memory and kernel-launch costs of sharing one base model."""
from dataclasses import dataclass

from batchfuse._checks import _check_count, _check_gigabytes, _check_real
from batchfuse._exceptions import _CheckError
from batchfuse.lora import LaunchMode, count_launches


@dataclass(frozen=True)
class MemoryFootprint:
    w_p: float  # pretrained weights, GB
    w_l: float  # one LoRA adapter, GB
    w_e: float  # per-job training overhead, GB

    def __post_init__(self) -> None:
        _check_gigabytes(self.w_p, name="w_p")
        _check_gigabytes(self.w_l, name="w_l")
        _check_gigabytes(self.w_e, name="w_e")


@dataclass(frozen=True)
class CostReport:
    k: int
    total_no_share: float
    total_shared: float
    memory_saved: float
    launch_saving_fraction: float


def memory_cost(footprint: MemoryFootprint, k: int, shared: bool) -> float:
    """Total memory of ``k`` jobs; sharing saves ``(k - 1) * w_p`` up to rounding."""
    _check_count(k, name="k")
    if shared:
        return footprint.w_p + k * (footprint.w_l + footprint.w_e)

    return k * (footprint.w_p + footprint.w_l + footprint.w_e)


def launch_saving(k: int, large_weight: float = 1.0) -> float:
    """Fraction of kernel-launch cost saved by fusing ``k`` jobs.

    ``large_weight`` is the cost of a large launch relative to a small one;
    at the default of 1 this is ``(2k - 2) / 4k``.
    """
    _check_count(k, name="k")
    _check_real(large_weight, name="large_weight", ge=0)
    per_job = count_launches(k, LaunchMode.PER_JOB)
    fused = count_launches(k, LaunchMode.FUSED)
    fused_cost = fused.small + fused.large * large_weight

    return (per_job.small - fused_cost) / per_job.small


def cost_report(footprint: MemoryFootprint, k: int) -> CostReport:
    _check_count(k, name="k")

    return CostReport(
        k=k,
        total_no_share=memory_cost(footprint, k, shared=False),
        total_shared=memory_cost(footprint, k, shared=True),
        memory_saved=(k - 1) * footprint.w_p,
        launch_saving_fraction=launch_saving(k),
    )


def max_concurrent_jobs(
    footprint: MemoryFootprint,
    budget_gb: float,
    shared: bool,
) -> int:
    """Largest number of jobs whose total memory fits ``budget_gb`` (0 if none)."""
    budget_gb = _check_gigabytes(budget_gb, name="budget_gb")
    fixed = footprint.w_p if shared else 0.0
    per_job = footprint.w_l + footprint.w_e + (0.0 if shared else footprint.w_p)
    if fixed + per_job > budget_gb:
        return 0
    if per_job == 0:
        raise _CheckError("\n  - per-job memory is 0, any number of jobs fits")

    k = int((budget_gb - fixed) // per_job)
    # Floor division can land one off at exact boundaries
    while memory_cost(footprint, k + 1, shared) <= budget_gb:
        k += 1
    while k > 0 and memory_cost(footprint, k, shared) > budget_gb:
        k -= 1

    return k
