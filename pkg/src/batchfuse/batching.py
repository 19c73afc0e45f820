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
"""Choosing which jobs contribute to the next fused batch."""
from dataclasses import dataclass
from itertools import combinations
from typing import Final, Iterable, Mapping, Sequence

from batchfuse._checks import _check_count, _check_lengths, _check_real
from batchfuse._exceptions import _CheckError
from batchfuse.lora import padding_stats
from batchfuse.workload import DataItem, ItemOrder, JobState, next_candidate_batch


MAX_BRUTE_FORCE_CANDIDATES: Final[int] = 20


@dataclass(frozen=True)
class BatchCandidate:
    job_id: str
    item_lengths: tuple[int, ...]
    priority: int = 1
    submit_time: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "item_lengths", tuple(self.item_lengths))
        _check_lengths(self.item_lengths, name="item_lengths")

    @classmethod
    def from_state(
        cls,
        state: JobState,
        order: ItemOrder = ItemOrder.SEQUENTIAL,
    ) -> "BatchCandidate":
        return cls(
            job_id=state.job_id,
            item_lengths=tuple(
                item.length for item in next_candidate_batch(state, order)
            ),
            priority=state.spec.priority,
            submit_time=state.spec.submit_time,
        )

    @property
    def max_len(self) -> int:
        return max(self.item_lengths)

    @property
    def token_count(self) -> int:
        return sum(self.item_lengths)

    def padding_at(self, max_len: int) -> int:
        return len(self.item_lengths) * max_len - self.token_count


@dataclass(frozen=True)
class SelectionResult:
    chosen: tuple[str, ...]
    fused_max_len: int
    padding_tokens: int
    total_tokens: int

    @property
    def padding_ratio(self) -> float:
        if self.total_tokens == 0:
            return 0.0
        return self.padding_tokens / self.total_tokens

    def added_padding(self, candidate: BatchCandidate) -> int:
        """Padding tokens that joining ``candidate`` adds to this selection."""
        if self.fused_max_len == 0:
            return candidate.padding_at(candidate.max_len)

        fused = max(self.fused_max_len, candidate.max_len)
        items = self.total_tokens // self.fused_max_len
        return candidate.padding_at(fused) + items * (fused - self.fused_max_len)


def _tie_key(candidate: BatchCandidate) -> tuple[int, float, str]:
    return (-candidate.priority, candidate.submit_time, candidate.job_id)


def _arrival_key(candidate: BatchCandidate) -> tuple[float, str]:
    return (candidate.submit_time, candidate.job_id)


def _result(chosen: Sequence[BatchCandidate]) -> SelectionResult:
    if len(chosen) == 0:
        return SelectionResult(
            chosen=(), fused_max_len=0, padding_tokens=0, total_tokens=0
        )

    stats = padding_stats([length for c in chosen for length in c.item_lengths])
    return SelectionResult(
        chosen=tuple(c.job_id for c in chosen),
        fused_max_len=max(c.max_len for c in chosen),
        padding_tokens=stats.padding_tokens,
        total_tokens=stats.total_tokens,
    )


def _check_candidates(
    candidates: Iterable[BatchCandidate],
    m: int,
) -> list[BatchCandidate]:
    _check_count(m, name="m")
    candidates = list(candidates)
    ids = [c.job_id for c in candidates]
    if len(set(ids)) != len(ids):
        raise _CheckError("\n  - candidates must have distinct job ids")

    return candidates


# ==============================================================================
# Strategies
# ==============================================================================
def select_fifo(candidates: Sequence[BatchCandidate], m: int) -> SelectionResult:
    candidates = _check_candidates(candidates, m)
    arrival = sorted(candidates, key=_arrival_key)

    return _result(arrival[:m])


def select_priority(candidates: Sequence[BatchCandidate], m: int) -> SelectionResult:
    candidates = _check_candidates(candidates, m)

    return _result(sorted(candidates, key=_tie_key)[:m])


def select_minpad(
    candidates: Sequence[BatchCandidate],
    m: int,
    memory: Mapping[str, float] | None = None,
    budget: float | None = None,
) -> SelectionResult:
    """Minimum-padding subset of size ``min(m, len(candidates))``.

    Every subset has some batch maximum ``L``. For each observed ``L`` the
    cheapest subset among candidates no longer than ``L`` takes the ``size``
    smallest per-candidate paddings at ``L``; that sum bounds the subset's
    true padding from above and equals it for the optimal subset's own
    maximum. The minimum over all ``L`` is therefore exact.

    With ``memory`` and ``budget`` each anchor instead takes candidates in
    padding order while they fit the budget, and the size shrinks until some
    anchor is feasible. This keeps the selection feasible but is no longer
    guaranteed to be the minimum.
    """
    candidates = _check_candidates(candidates, m)
    if (memory is None) != (budget is None):
        raise _CheckError("\n  - `memory` and `budget` must be given together")
    if memory is not None:
        _check_real(budget, name="budget", ge=0)
        missing = [c.job_id for c in candidates if c.job_id not in memory]
        if missing:
            raise _CheckError(
                f"\n  - `memory` has no estimate for `{'`, `'.join(missing)}`"
            )

    for size in range(min(m, len(candidates)), 0, -1):
        best = _minpad_of_size(candidates, size, memory, budget)
        if best is not None:
            return best

    return _result(())


def _minpad_of_size(
    candidates: Sequence[BatchCandidate],
    size: int,
    memory: Mapping[str, float] | None,
    budget: float | None,
) -> SelectionResult | None:
    best_key = None
    best = None
    for anchor in sorted({c.max_len for c in candidates}):
        eligible = [c for c in candidates if c.max_len <= anchor]
        if len(eligible) < size:
            continue

        ranked = sorted(eligible, key=lambda c: (c.padding_at(anchor), _tie_key(c)))
        if memory is None:
            picked = ranked[:size]
        else:
            picked, used = [], 0.0
            for candidate in ranked:
                if len(picked) == size:
                    break
                if used + memory[candidate.job_id] <= budget:
                    picked.append(candidate)
                    used += memory[candidate.job_id]
            if len(picked) < size:
                continue

        chosen = sorted(picked, key=_tie_key)
        result = _result(chosen)
        key = (
            result.padding_tokens,
            result.fused_max_len,
            tuple(_tie_key(c) for c in chosen),
        )
        if best_key is None or key < best_key:
            best_key, best = key, result

    return best


def brute_force_min_padding(
    candidates: Sequence[BatchCandidate],
    m: int,
) -> SelectionResult:
    """Exhaustive minimum-padding search, a reference for `select_minpad`."""
    candidates = _check_candidates(candidates, m)
    if len(candidates) > MAX_BRUTE_FORCE_CANDIDATES:
        raise _CheckError(
            f"\n  - `len(candidates) <= {MAX_BRUTE_FORCE_CANDIDATES}` not "
            f"satisfied, got {len(candidates)}"
        )

    size = min(m, len(candidates))
    if size == 0:
        return _result(())

    best_key = None
    best = None
    for subset in combinations(sorted(candidates, key=_tie_key), size):
        result = _result(subset)
        key = (
            result.padding_tokens,
            result.fused_max_len,
            tuple(_tie_key(c) for c in subset),
        )
        if best_key is None or key < best_key:
            best_key, best = key, result

    return best


def select_optimal_batch(
    states: Sequence[JobState],
    mode: ItemOrder | str,
) -> dict[str, tuple[DataItem, ...]]:
    """Next items of every job when each job consumes its data length-sorted.

    Sorted consumption minimizes padding but feeds every job its data in
    monotone length order, which is known to hurt convergence.
    """
    mode = ItemOrder(mode)
    if mode is ItemOrder.SEQUENTIAL:
        raise _CheckError("\n  - `mode` must be `shortest` or `longest`")

    return {
        state.job_id: next_candidate_batch(state, mode)
        for state in states
        if state.is_active
    }
