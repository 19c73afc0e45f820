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
"""Discrete-event simulation of fused multi-job LoRA fine-tuning.

Time advances one fused iteration at a time. At each iteration boundary the
scheduler picks the running set, every running job contributes its next
batch, the iteration is charged by the iteration-time model, and finished
jobs release their memory before the next boundary.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from statistics import fmean
from typing import Any, Iterable, Mapping, Sequence

import torch

from batchfuse._checks import _check_count, _check_real, _check_scalar, _check_seed
from batchfuse._exceptions import ConfigError, _CheckError
from batchfuse.batching import select_optimal_batch
from batchfuse.lora import (
    AdapterWeights,
    DTYPE,
    LaunchMode,
    PaddingStats,
    count_launches,
    fuse,
    fused_forward,
    padding_stats,
    random_adapter,
    random_job_batch,
)
from batchfuse.memory import MemoryModel, MemoryProfile, MemSample, fit, warmup_plan
from batchfuse.progress import (
    Predictor,
    StopCause,
    StopEvent,
    StopPolicy,
    stop_event_for,
)
from batchfuse.scheduler import (
    JobArrival,
    ModelUpdate,
    ScheduleDecision,
    Scheduler,
    SchedulerConfig,
    Strategy,
)
from batchfuse.seeding import derive_seed, make_rng, temp_seed
from batchfuse.workload import (
    DataItem,
    ItemOrder,
    JobSpec,
    JobState,
    JobStatus,
    commit_batch,
    finish,
    next_candidate_batch,
)


logger = logging.getLogger(__name__)


# ==============================================================================
# Configuration
# ==============================================================================
class ExecutionMode(str, Enum):
    # One fused batch over all running jobs
    FUSED = "fused"
    # Running jobs train side by side, each padded on its own
    PARALLEL = "parallel"
    # One job at a time
    SEQUENTIAL = "sequential"


@dataclass(frozen=True)
class IterationTimeModel:
    """Duration of one iteration: ``base + per_token * tokens + per_launch *
    launches``, in itime."""

    base: float = 1.0
    per_token: float = 0.0
    per_launch: float = 0.0

    def __post_init__(self) -> None:
        _check_real(self.base, name="base", ge=0)
        _check_real(self.per_token, name="per_token", ge=0)
        _check_real(self.per_launch, name="per_launch", ge=0)
        if self.base + self.per_token + self.per_launch == 0:
            raise ConfigError(
                "iteration time model charges nothing, time cannot advance"
            )

    def duration(self, tokens: int, launches: int) -> float:
        return self.base + self.per_token * tokens + self.per_launch * launches


@dataclass(frozen=True)
class SimConfig:
    jobs: tuple[JobSpec, ...]
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    iteration_time: IterationTimeModel = field(default_factory=IterationTimeModel)
    seed: int = 0
    # Simulated time after which unfinished jobs are abandoned, `None` to run
    # until every job finishes
    horizon: float | None = None
    early_stopping: bool = True
    stop_policy: StopPolicy = StopPolicy()
    # Defaults to a perfect predictor when the adaptive strategy needs one
    predictor: Predictor | None = None
    memory_model: MemoryModel | None = None
    memory_profile: MemoryProfile | None = None
    # Iterations each job runs FIFO before the strategy takes over
    warmup_iterations: int = 0
    item_order: ItemOrder = ItemOrder.SEQUENTIAL
    execution_mode: ExecutionMode = ExecutionMode.FUSED
    # Width of the embeddings pushed through the real fused forward pass,
    # `None` for accounting only
    compute_dim: int | None = None
    reschedule_every_iteration: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "jobs", tuple(self.jobs))
        object.__setattr__(self, "item_order", ItemOrder(self.item_order))
        object.__setattr__(self, "execution_mode", ExecutionMode(self.execution_mode))
        try:
            _check_scalar(self.scheduler, type_=SchedulerConfig, name="scheduler")
            _check_scalar(
                self.iteration_time, type_=IterationTimeModel, name="iteration_time"
            )
            _check_seed(self.seed)
            if self.horizon is not None:
                _check_real(self.horizon, name="horizon", gt=0)
            _check_scalar(self.early_stopping, type_=bool, name="early_stopping")
            _check_count(self.warmup_iterations, name="warmup_iterations", ge=0)
            _check_scalar(self.compute_dim, type_=int | None, name="compute_dim", ge=1)
            _check_scalar(
                self.reschedule_every_iteration,
                type_=bool,
                name="reschedule_every_iteration",
            )
        except ConfigError:
            raise
        except _CheckError as e:
            raise ConfigError(f"invalid simulation configuration:{e}") from e

        ids = [job.id for job in self.jobs]
        if len(set(ids)) != len(ids):
            raise ConfigError("invalid simulation configuration: duplicate job ids")
        if self.memory_model is None and self.memory_profile is None:
            unsized = [job.id for job in self.jobs if job.memory_gb is None]
            if unsized:
                raise ConfigError(
                    f"job(s) `{'`, `'.join(unsized)}` have no static memory and "
                    "neither a memory model nor a memory profile is configured"
                )
        fused = self.execution_mode is ExecutionMode.FUSED
        if self.compute_dim is not None and not fused:
            raise ConfigError("`compute_dim` is only supported in fused execution")

    def with_strategy(self, strategy: Strategy | str) -> "SimConfig":
        return replace(self, scheduler=replace(self.scheduler, strategy=strategy))


# ==============================================================================
# Traces
# ==============================================================================
class EventKind(str, Enum):
    JOB_SUBMITTED = "job_submitted"
    SCHEDULED = "scheduled"
    ITERATION_DONE = "iteration_done"
    STOPPED = "stopped"
    COMPLETED = "completed"
    MEMORY_SAMPLE = "memory_sample"
    MODEL_UPDATED = "model_updated"


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: EventKind
    job_id: str | None = None
    data: Mapping[str, Any] = field(default_factory=dict)

    def to_record(self) -> dict[str, Any]:
        record = {"time": self.time, "kind": self.kind.value}
        if self.job_id is not None:
            record["job_id"] = self.job_id
        record.update(self.data)

        return record


@dataclass(frozen=True)
class SimTrace:
    events: tuple[SimEvent, ...]
    strategy: Strategy
    m_mem: float
    execution_mode: ExecutionMode = ExecutionMode.FUSED
    truncated: bool = False
    # Jobs consumed their data length-sorted
    convergence_hostile: bool = False
    decisions: tuple[tuple[float, ScheduleDecision], ...] = ()

    def of_kind(self, *kinds: EventKind) -> list[SimEvent]:
        return [event for event in self.events if event.kind in kinds]

    def decision_records(self) -> list[dict[str, Any]]:
        return [
            {"time": time, **decision.to_record()} for time, decision in self.decisions
        ]


# ==============================================================================
# Engine
# ==============================================================================
class _FusedCompute:
    """Pushes every iteration's batches through the real fused forward pass."""

    def __init__(self, dim: int, seed: int) -> None:
        self._dim = dim
        self._seed = seed
        with temp_seed(derive_seed(seed, "base")):
            self._w0 = torch.randn(dim, dim, dtype=DTYPE)
        self._adapters: dict[str, AdapterWeights] = {}

    def step(
        self,
        batches: Mapping[str, Sequence[DataItem]],
        specs: Mapping[str, JobSpec],
        iteration: int,
    ) -> PaddingStats:
        job_batches = []
        for job_id, items in batches.items():
            if job_id not in self._adapters:
                rank = min(specs[job_id].lora_rank, self._dim)
                seed = derive_seed(self._seed, "adapter", job_id)
                self._adapters[job_id] = random_adapter(
                    job_id, self._dim, self._dim, rank, seed
                )
            lengths = [item.length for item in items]
            seed = derive_seed(self._seed, "tokens", job_id, iteration)
            job_batches.append(random_job_batch(job_id, lengths, self._dim, seed))

        fused = fuse(job_batches)
        fused_forward(self._w0, self._adapters, fused)

        return PaddingStats(fused.total_tokens, fused.padding_tokens)


class _Simulation:
    def __init__(self, config: SimConfig) -> None:
        self.config = config
        scheduler_config = config.scheduler
        if config.execution_mode is ExecutionMode.SEQUENTIAL:
            scheduler_config = replace(scheduler_config, max_concurrent=1)

        predictor = config.predictor
        if predictor is None and scheduler_config.strategy is Strategy.ADAPTIVE:
            predictor = Predictor(seed=config.seed, policy=config.stop_policy)

        self.scheduler = Scheduler(
            scheduler_config,
            config.memory_model,
            predictor,
            config.early_stopping,
            config.item_order,
        )
        self.warmup_scheduler = Scheduler(
            replace(scheduler_config, strategy=Strategy.FIFO),
            config.memory_model,
            None,
            config.early_stopping,
            config.item_order,
        )

        self.states = {job.id: JobState(job) for job in config.jobs}
        self.specs = {job.id: job for job in config.jobs}
        self.stops = {
            job.id: (
                stop_event_for(job, config.stop_policy)
                if config.early_stopping
                else None
            )
            for job in config.jobs
        }
        self.pending = sorted(config.jobs, key=lambda job: (job.submit_time, job.id))
        self.arrived: list[str] = []

        self.events: list[SimEvent] = []
        self.decisions: list[tuple[float, ScheduleDecision]] = []
        self.now = 0.0
        self.iteration = 0
        self.running: tuple[str, ...] = ()
        self.running_memory: dict[str, float] = {}

        self.samples: list[MemSample] = []
        self.memory_rng = make_rng(config.seed, "memory-profile")
        self.compute = (
            None
            if config.compute_dim is None
            else _FusedCompute(config.compute_dim, config.seed)
        )

    # --------------
    # Event helpers
    # --------------
    def emit(
        self,
        kind: EventKind,
        job_id: str | None = None,
        time: float | None = None,
        **data: Any,
    ) -> None:
        time = self.now if time is None else time
        self.events.append(SimEvent(time, kind, job_id, data))

    def arrive(self, until: float) -> None:
        while self.pending and self.pending[0].submit_time <= until:
            job = self.pending.pop(0)
            self.arrived.append(job.id)
            self.emit(
                EventKind.JOB_SUBMITTED,
                job.id,
                time=job.submit_time,
                priority=job.priority,
            )
            self.scheduler.on_event(JobArrival(job.id))

    def set_model(self, model: MemoryModel) -> bool:
        old = self.scheduler.memory_model
        changed = self.scheduler.on_event(ModelUpdate(old, model))
        self.warmup_scheduler.memory_model = model
        self.emit(
            EventKind.MODEL_UPDATED,
            beta=list(model.coefficients),
            rmse=model.rmse,
            samples=model.sample_count,
            rescheduled=changed,
        )
        return changed

    # ---------
    # Phases
    # ---------
    def probe_memory(self) -> None:
        profile = self.config.memory_profile
        for batch_size, seq_len in warmup_plan(profile.batch_sizes, profile.seq_lens):
            self.samples.append(profile.observe(self.memory_rng, batch_size, seq_len))
        self.set_model(fit(self.samples, profile.mode))

    def queue(self) -> list[JobState]:
        states = (self.states[job_id] for job_id in self.arrived)
        return [state for state in states if state.is_active]

    def decide(self, queue: list[JobState]) -> None:
        warming = [
            s for s in queue if s.iterations_done < self.config.warmup_iterations
        ]
        if warming:
            decision = self.warmup_scheduler.schedule(warming)
        elif (
            self.config.reschedule_every_iteration
            or self.scheduler.dirty
            or not self.running
        ):
            decision = self.scheduler.schedule(queue)
        else:
            return
        self.decisions.append((self.now, decision))

        for job_id in decision.selected:
            if job_id not in self.running:
                self.emit(EventKind.SCHEDULED, job_id)
        self.running = decision.selected
        self.running_memory = {
            job_id: decision.estimated_memory[job_id] for job_id in decision.selected
        }

    def step(self) -> None:
        order = self.config.item_order
        if order is ItemOrder.SEQUENTIAL:
            batches = {
                job_id: next_candidate_batch(self.states[job_id])
                for job_id in self.running
            }
        else:
            running = [self.states[job_id] for job_id in self.running]
            batches = select_optimal_batch(running, order)
        lengths = {
            job_id: [item.length for item in items] for job_id, items in batches.items()
        }
        mode = self.config.execution_mode
        if mode is ExecutionMode.FUSED:
            if self.compute is not None:
                stats = self.compute.step(batches, self.specs, self.iteration)
            else:
                stats = padding_stats([n for job in lengths.values() for n in job])
            launches = count_launches(len(batches), LaunchMode.FUSED).total
        else:
            per_job = [padding_stats(job) for job in lengths.values()]
            stats = PaddingStats(
                sum(s.total_tokens for s in per_job),
                sum(s.padding_tokens for s in per_job),
            )
            launches = count_launches(len(batches), LaunchMode.PER_JOB).total

        duration = self.config.iteration_time.duration(stats.total_tokens, launches)
        start, end = self.now, self.now + duration
        self.emit(
            EventKind.MEMORY_SAMPLE,
            memory_gb=sum(self.running_memory.values()),
            duration=duration,
            m_mem=self.scheduler.config.m_mem,
        )
        for job_id, items in batches.items():
            commit_batch(self.states[job_id], len(items), start)

        self.arrive(end)
        self.now = end
        self.iteration += 1
        self.emit(
            EventKind.ITERATION_DONE,
            jobs=list(self.running),
            tokens=stats.total_tokens,
            padding_tokens=stats.padding_tokens,
            launches=launches,
            start=start,
            duration=duration,
        )

        self.retire(batches)
        if self.config.memory_profile is not None:
            self.profile(lengths)

    def retire(self, batches: Mapping[str, Sequence[DataItem]]) -> None:
        for job_id in batches:
            state = self.states[job_id]
            stop = self.stops[job_id]
            if stop is not None and state.iterations_done == stop.iteration:
                event, status, kind = stop, JobStatus.STOPPED, EventKind.STOPPED
            elif state.iterations_done == state.spec.true_iterations:
                event = StopEvent(job_id, state.iterations_done, StopCause.COMPLETED)
                status, kind = JobStatus.COMPLETED, EventKind.COMPLETED
            else:
                continue

            finish(state, status, self.now)
            logger.debug("%s %s at iteration %d", job_id, kind.value, event.iteration)
            self.emit(
                kind,
                job_id,
                cause=event.cause.value,
                iterations=state.iterations_done,
                priority=state.spec.priority,
                submit_time=state.spec.submit_time,
                start_time=state.start_time,
                finish_time=state.finish_time,
            )
            self.scheduler.on_event(event)
            self.running_memory.pop(job_id, None)
        self.running = tuple(j for j in self.running if self.states[j].is_active)

    def profile(self, lengths: Mapping[str, list[int]]) -> None:
        profile = self.config.memory_profile
        fused_len = max(n for job in lengths.values() for n in job)
        for job_lengths in lengths.values():
            seq_len = (
                fused_len
                if self.config.execution_mode is ExecutionMode.FUSED
                else max(job_lengths)
            )
            sample = profile.observe(self.memory_rng, len(job_lengths), seq_len)
            self.samples.append(sample)
        if self.iteration % profile.refit_every == 0:
            self.set_model(fit(self.samples, profile.mode))

    # ----------
    # Main loop
    # ----------
    def run(self) -> SimTrace:
        config = self.config
        if config.item_order is not ItemOrder.SEQUENTIAL:
            logger.warning(
                "jobs consume their data %s-first, which is known to hurt convergence",
                config.item_order.value,
            )
        if config.memory_profile is not None:
            self.probe_memory()

        truncated = False
        while True:
            self.arrive(self.now)
            queue = self.queue()
            if not queue and not self.pending:
                break
            if config.horizon is not None and self.now >= config.horizon:
                truncated = True
                break
            if not queue:
                self.now = self.pending[0].submit_time
                continue

            self.decide(queue)
            if not self.running:
                if self.pending:
                    self.now = max(self.now, self.pending[0].submit_time)
                    continue
                # Nothing left fits the budget and nothing else will arrive
                truncated = True
                break
            self.step()

        if truncated:
            unfinished = [s.job_id for s in self.states.values() if s.is_active]
            logger.warning(
                "simulation truncated at t=%g with %d unfinished job(s)",
                self.now,
                len(unfinished),
            )

        return SimTrace(
            events=tuple(self.events),
            strategy=config.scheduler.strategy,
            m_mem=config.scheduler.m_mem,
            execution_mode=config.execution_mode,
            truncated=truncated,
            convergence_hostile=config.item_order is not ItemOrder.SEQUENTIAL,
            decisions=tuple(self.decisions),
        )


def run(config: SimConfig) -> SimTrace:
    return _Simulation(config).run()


# ==============================================================================
# Metrics
# ==============================================================================
@dataclass(frozen=True)
class JobMetrics:
    job_id: str
    priority: int
    submit_time: float
    start_time: float
    finish_time: float
    status: JobStatus
    iterations: int

    @property
    def turnaround(self) -> float:
        return self.finish_time - self.submit_time

    @property
    def waiting(self) -> float:
        return self.start_time - self.submit_time

    @property
    def virtual_turnaround(self) -> float:
        return self.turnaround * self.priority


@dataclass(frozen=True)
class MetricsReport:
    jobs: tuple[JobMetrics, ...] = ()
    mean_turnaround: float = 0.0
    mean_waiting: float = 0.0
    mean_virtual_turnaround: float = 0.0
    total_tokens: int = 0
    padding_tokens: int = 0
    padding_ratio: float = 0.0
    total_throughput: float = 0.0
    effective_throughput: float = 0.0
    job_throughput: float = 0.0
    end_to_end_latency: float = 0.0
    busy_time: float = 0.0
    utilization: float = 0.0
    peak_memory_gb: float = 0.0
    mean_memory_gb: float = 0.0
    memory_occupancy: float = 0.0
    total_iterations: int = 0
    partial: bool = False
    empty: bool = False

    def aggregates(self) -> dict[str, float | int | bool]:
        return {
            name: getattr(self, name)
            for name in self.__dataclass_fields__
            if name != "jobs"
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            **self.aggregates(),
            "jobs": {
                job.job_id: {
                    "priority": job.priority,
                    "status": job.status.value,
                    "iterations": job.iterations,
                    "submit_time": job.submit_time,
                    "start_time": job.start_time,
                    "finish_time": job.finish_time,
                    "turnaround": job.turnaround,
                    "waiting": job.waiting,
                    "virtual_turnaround": job.virtual_turnaround,
                }
                for job in self.jobs
            },
        }


def metrics(trace: SimTrace) -> MetricsReport:
    iterations = trace.of_kind(EventKind.ITERATION_DONE)
    if not iterations:
        return MetricsReport(partial=trace.truncated, empty=True)

    jobs = tuple(
        JobMetrics(
            job_id=event.job_id,
            priority=event.data["priority"],
            submit_time=event.data["submit_time"],
            start_time=event.data["start_time"],
            finish_time=event.data["finish_time"],
            status=JobStatus(event.kind.value),
            iterations=event.data["iterations"],
        )
        for event in trace.of_kind(EventKind.STOPPED, EventKind.COMPLETED)
    )
    submitted = trace.of_kind(EventKind.JOB_SUBMITTED)
    first_submit = min(event.time for event in submitted)
    latency = max(event.time for event in iterations) - first_submit

    total = sum(event.data["tokens"] for event in iterations)
    padding = sum(event.data["padding_tokens"] for event in iterations)
    busy = sum(event.data["duration"] for event in iterations)

    samples = trace.of_kind(EventKind.MEMORY_SAMPLE)
    peak = max(event.data["memory_gb"] for event in samples)
    weighted = sum(e.data["memory_gb"] * e.data["duration"] for e in samples)
    mean_memory = weighted / busy if busy > 0 else 0.0

    def _mean(values: Iterable[float]) -> float:
        values = list(values)
        return fmean(values) if values else 0.0

    return MetricsReport(
        jobs=jobs,
        mean_turnaround=_mean(job.turnaround for job in jobs),
        mean_waiting=_mean(job.waiting for job in jobs),
        mean_virtual_turnaround=_mean(job.virtual_turnaround for job in jobs),
        total_tokens=total,
        padding_tokens=padding,
        padding_ratio=padding / total,
        total_throughput=total / latency,
        effective_throughput=(total - padding) / latency,
        job_throughput=len(jobs) / latency,
        end_to_end_latency=latency,
        busy_time=busy,
        utilization=busy / latency,
        peak_memory_gb=peak,
        mean_memory_gb=mean_memory,
        memory_occupancy=mean_memory / trace.m_mem,
        total_iterations=sum(len(event.data["jobs"]) for event in iterations),
        partial=trace.truncated,
    )


# ==============================================================================
# Strategy comparison
# ==============================================================================
def run_strategies(
    config: SimConfig,
    strategies: Sequence[Strategy | str],
    workers: int = 1,
) -> dict[Strategy, SimTrace]:
    """Run the same workload under each strategy.

    Runs share nothing, so ``workers > 1`` spreads them over processes
    without changing any result.
    """
    _check_count(workers, name="workers")
    strategies = [Strategy.parse(s) for s in strategies]
    if len(set(strategies)) != len(strategies):
        raise ConfigError("each strategy may only be compared once")

    configs = [config.with_strategy(strategy) for strategy in strategies]
    if workers == 1 or len(configs) == 1:
        traces = [run(c) for c in configs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(configs))) as pool:
            traces = list(pool.map(run, configs))

    return dict(zip(strategies, traces))


def compare_strategies(
    config: SimConfig,
    strategies: Sequence[Strategy | str],
    workers: int = 1,
) -> dict[Strategy, MetricsReport]:
    traces = run_strategies(config, strategies, workers)

    return {strategy: metrics(trace) for strategy, trace in traces.items()}


def comparison_rows(
    reports: Mapping[Strategy, MetricsReport],
) -> list[tuple[str, str, float | int | bool]]:
    return [
        (strategy.value, name, value)
        for strategy, report in reports.items()
        for name, value in report.aggregates().items()
    ]
