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
"""Which jobs run concurrently under the memory budget.

Strategies: M1 FIFO, M2 priority, M3 MinPad and M4 adaptive (priority
window, memory estimate, predicted iterations, shortest job first).
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

from batchfuse._checks import _check_count, _check_real, _check_scalar
from batchfuse._exceptions import ConfigError, StateError
from batchfuse.batching import (
    BatchCandidate,
    SelectionResult,
    select_fifo,
    select_minpad,
    select_priority,
)
from batchfuse.memory import MemoryModel, PackingQuery, max_packing, relative_change
from batchfuse.progress import Predictor, StopEvent, predict_iterations
from batchfuse.workload import ItemOrder, JobState, next_candidate_batch


logger = logging.getLogger(__name__)


class Strategy(str, Enum):
    FIFO = "M1"
    PRIORITY = "M2"
    MINPAD = "M3"
    ADAPTIVE = "M4"

    @classmethod
    def parse(cls, value: "Strategy | str") -> "Strategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            pass
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ConfigError(
                f"unknown strategy `{value}`, expected one of "
                f"{', '.join(s.value for s in cls)} or "
                f"{', '.join(s.name.lower() for s in cls)}"
            ) from None


class Reason(str, Enum):
    EMPTY_QUEUE = "empty_queue"
    BUDGET_EXHAUSTED = "budget_exhausted"
    EXCEEDS_BUDGET = "exceeds_budget"
    MEMORY_SKIP = "memory_skip"
    CONCURRENCY_LIMIT = "concurrency_limit"
    OUTSIDE_WINDOW = "outside_window"
    SJF_ORDER = "sjf_order"
    PACKED = "packed"


@dataclass(frozen=True)
class SchedulerConfig:
    strategy: Strategy = Strategy.ADAPTIVE
    m_mem: float = 80.0
    max_concurrent: int = 8
    top_k: int = 1
    # Use the exact packing of the window instead of the greedy admission
    pack: bool = False
    # Relative coefficient change of a refit that triggers rescheduling
    refit_epsilon: float = 0.01

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        _check_real(self.m_mem, name="m_mem", gt=0)
        _check_count(self.max_concurrent, name="max_concurrent")
        _check_count(self.top_k, name="top_k")
        _check_scalar(self.pack, type_=bool, name="pack")
        _check_real(self.refit_epsilon, name="refit_epsilon", ge=0)


@dataclass(frozen=True)
class ScheduleDecision:
    strategy: Strategy
    selected: tuple[str, ...]
    estimated_memory: Mapping[str, float]
    predicted_iterations: Mapping[str, int]
    reasons: tuple[tuple[str, Reason], ...] = ()

    @property
    def total_memory(self) -> float:
        return sum(self.estimated_memory[job_id] for job_id in self.selected)

    @property
    def is_empty(self) -> bool:
        return len(self.selected) == 0

    def to_record(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "selected": list(self.selected),
            "total_memory_gb": self.total_memory,
            "estimated_memory_gb": {k: self.estimated_memory[k] for k in self.selected},
            "predicted_iterations": dict(self.predicted_iterations),
            "reasons": [[job_id, reason.value] for job_id, reason in self.reasons],
        }


@dataclass(frozen=True)
class ModelUpdate:
    old: MemoryModel | None
    new: MemoryModel


@dataclass(frozen=True)
class JobArrival:
    job_id: str


# ==============================================================================
# Estimates
# ==============================================================================
def estimate_memory(
    state: JobState,
    model: MemoryModel | None,
    prefer_model: bool,
    order: ItemOrder = ItemOrder.SEQUENTIAL,
) -> float:
    """Memory of a job's next iteration, from the fitted model or the job's
    static estimate, whichever the strategy prefers and is available."""
    static = state.spec.memory_gb
    if model is not None and (prefer_model or static is None):
        items = next_candidate_batch(state, order)
        return model.predict(len(items), max(item.length for item in items))
    if static is not None:
        return static

    raise ConfigError(
        f"job `{state.job_id}` has no static memory estimate and no memory "
        "model is available"
    )


def _ordered_by(
    select: Callable[[Sequence[BatchCandidate], int], SelectionResult],
    runnable: Sequence[JobState],
    order: ItemOrder,
) -> list[JobState]:
    if not runnable:
        return []

    by_id = {s.job_id: s for s in runnable}
    candidates = [BatchCandidate.from_state(s, order) for s in runnable]

    return [by_id[job_id] for job_id in select(candidates, len(candidates)).chosen]


# ==============================================================================
# Scheduling
# ==============================================================================
def schedule(
    queue: Sequence[JobState],
    config: SchedulerConfig,
    mem_model: MemoryModel | None = None,
    predictor: Predictor | None = None,
    early_stopping: bool = True,
    order: ItemOrder = ItemOrder.SEQUENTIAL,
) -> ScheduleDecision:
    for state in queue:
        if not state.is_active:
            raise StateError(
                f"job `{state.job_id}` is {state.status.value} and cannot be scheduled"
            )

    strategy = config.strategy
    prefer_model = strategy is Strategy.ADAPTIVE
    memory = {
        s.job_id: estimate_memory(s, mem_model, prefer_model, order) for s in queue
    }

    predicted: dict[str, int] = {}
    if predictor is not None:
        for state in queue:
            total = predict_iterations(predictor, state.spec, early_stopping)
            # Remaining, not total, iterations drive the SJF order
            predicted[state.job_id] = max(total - state.iterations_done, 0)
    elif strategy is Strategy.ADAPTIVE:
        raise ConfigError("the adaptive strategy needs an iteration predictor")

    reasons: list[tuple[str, Reason]] = []
    if not queue:
        reasons.append(("", Reason.EMPTY_QUEUE))
        return ScheduleDecision(strategy, (), memory, predicted, tuple(reasons))

    # Jobs that cannot fit even alone never enter a candidate set
    runnable = []
    for state in queue:
        if memory[state.job_id] > config.m_mem:
            reasons.append((state.job_id, Reason.EXCEEDS_BUDGET))
        else:
            runnable.append(state)

    if strategy is Strategy.FIFO:
        ordered = _ordered_by(select_fifo, runnable, order)
    elif strategy is Strategy.PRIORITY:
        ordered = _ordered_by(select_priority, runnable, order)
    elif strategy is Strategy.MINPAD:
        ordered = _minpad_order(runnable, memory, config, order)
    else:
        ordered = _adaptive_order(runnable, memory, predicted, config, reasons, order)

    selected = _admit(ordered, memory, config, reasons)
    if not selected:
        reasons.append(("", Reason.BUDGET_EXHAUSTED))

    decision = ScheduleDecision(
        strategy, tuple(selected), memory, predicted, tuple(reasons)
    )
    logger.debug(
        "%s selected %s (%.3f of %.3f GB)",
        strategy.value,
        decision.selected,
        decision.total_memory,
        config.m_mem,
    )
    return decision


def _admit(
    ordered: Sequence[JobState],
    memory: Mapping[str, float],
    config: SchedulerConfig,
    reasons: list[tuple[str, Reason]],
) -> list[str]:
    selected: list[str] = []
    total = 0.0
    for state in ordered:
        if len(selected) == config.max_concurrent:
            reasons.append((state.job_id, Reason.CONCURRENCY_LIMIT))
            continue
        if total + memory[state.job_id] <= config.m_mem:
            selected.append(state.job_id)
            total += memory[state.job_id]
        else:
            reasons.append((state.job_id, Reason.MEMORY_SKIP))

    return selected


def _minpad_order(
    runnable: Sequence[JobState],
    memory: Mapping[str, float],
    config: SchedulerConfig,
    order: ItemOrder,
) -> list[JobState]:
    if not runnable:
        return []

    # M: how many jobs fit at once, counting the smallest estimates first
    m, total = 0, 0.0
    for job_memory in sorted(memory[s.job_id] for s in runnable):
        if m == config.max_concurrent or total + job_memory > config.m_mem:
            break
        m, total = m + 1, total + job_memory

    by_id = {s.job_id: s for s in runnable}
    candidates = [BatchCandidate.from_state(s, order) for s in runnable]
    result = select_minpad(candidates, m, memory=memory, budget=config.m_mem)

    # Leftover budget goes to the other jobs, least added padding first
    chosen = set(result.chosen)
    rest = sorted(
        (c for c in candidates if c.job_id not in chosen),
        key=lambda c: (
            result.added_padding(c),
            -c.priority,
            c.submit_time,
            c.job_id,
        ),
    )

    return [by_id[job_id] for job_id in (*result.chosen, *(c.job_id for c in rest))]


def _adaptive_order(
    runnable: Sequence[JobState],
    memory: Mapping[str, float],
    predicted: Mapping[str, int],
    config: SchedulerConfig,
    reasons: list[tuple[str, Reason]],
    order: ItemOrder,
) -> list[JobState]:
    queue = _ordered_by(select_priority, runnable, order)
    window = queue[: config.top_k]
    reasons.extend((s.job_id, Reason.OUTSIDE_WINDOW) for s in queue[config.top_k :])

    if config.pack:
        query = PackingQuery(tuple(memory[s.job_id] for s in window), config.m_mem)
        packed = set(max_packing(query))
        # Rounding to the packing grid can reject a job that fits exactly
        if packed:
            window = [s for i, s in enumerate(window) if i in packed]
            reasons.extend((s.job_id, Reason.PACKED) for s in window)

    # Stable sort keeps priority order among equal predictions
    ordered = sorted(window, key=lambda s: predicted[s.job_id])
    reasons.extend((s.job_id, Reason.SJF_ORDER) for s in ordered)

    return ordered


# ==============================================================================
# Stateful front end
# ==============================================================================
@dataclass
class Scheduler:
    config: SchedulerConfig
    memory_model: MemoryModel | None = None
    predictor: Predictor | None = None
    early_stopping: bool = True
    order: ItemOrder = ItemOrder.SEQUENTIAL
    dirty: bool = True
    retired: set[str] = field(default_factory=set)

    def schedule(self, queue: Sequence[JobState]) -> ScheduleDecision:
        live = [s for s in queue if s.job_id not in self.retired and s.is_active]
        decision = schedule(
            live,
            self.config,
            self.memory_model,
            self.predictor,
            self.early_stopping,
            self.order,
        )
        self.dirty = False

        return decision

    def on_event(self, event: StopEvent | ModelUpdate | JobArrival) -> bool:
        """Record an event; returns whether it triggers rescheduling."""
        if isinstance(event, StopEvent):
            # A job leaves the queue only once it has finished
            self.retired.add(event.job_id)
            self.dirty = True
        elif isinstance(event, ModelUpdate):
            changed = (
                event.old is None
                or relative_change(event.old, event.new) > self.config.refit_epsilon
            )
            self.memory_model = event.new
            if changed:
                logger.debug("memory model changed, rescheduling")
                self.dirty = True
            return changed
        elif isinstance(event, JobArrival):
            self.dirty = True
        else:
            raise TypeError(f"unknown scheduler event `{event!r}`")

        return True
