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
"""Early stopping, iteration-count prediction and the throughput model."""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Final, Sequence

from batchfuse._checks import (
    _check_count,
    _check_lengths,
    _check_probability,
    _check_seed,
)
from batchfuse._exceptions import _CheckError
from batchfuse._messages import _BUG_MESSAGE
from batchfuse.seeding import make_rng
from batchfuse.workload import JobSpec


logger = logging.getLogger(__name__)

IDENTITY_TOLERANCE: Final[float] = 1e-12


# ==============================================================================
# Early stopping
# ==============================================================================
class StopCause(str, Enum):
    NAN_LOSS = "nan_loss"
    ACCURACY_DECLINE = "accuracy_decline"
    COMPLETED = "completed"


@dataclass(frozen=True)
class StopEvent:
    job_id: str
    iteration: int
    cause: StopCause

    def __post_init__(self) -> None:
        _check_count(self.iteration, name="iteration")
        object.__setattr__(self, "cause", StopCause(self.cause))


@dataclass(frozen=True)
class StopPolicy:
    # Consecutive non-improving accuracy evaluations before stopping
    patience: int = 3

    def __post_init__(self) -> None:
        _check_count(self.patience, name="patience")


def detect_stop(
    losses: Sequence[float] | None = None,
    accuracies: Sequence[float] | None = None,
    policy: StopPolicy = StopPolicy(),
    job_id: str = "",
) -> StopEvent | None:
    """First early-stopping event in per-iteration loss/accuracy streams.

    Iterations are 1-based; an event at iteration ``i`` only depends on the
    first ``i`` observations.
    """
    nan_at = None
    for iteration, loss in enumerate(losses or (), start=1):
        if not math.isfinite(loss):
            nan_at = iteration
            break

    decline_at = None
    best = -math.inf
    stale = 0
    for iteration, accuracy in enumerate(accuracies or (), start=1):
        if math.isfinite(accuracy) and accuracy > best:
            best, stale = accuracy, 0
        else:
            stale += 1
        if stale >= policy.patience:
            decline_at = iteration
            break

    if nan_at is not None and (decline_at is None or nan_at <= decline_at):
        return StopEvent(job_id, nan_at, StopCause.NAN_LOSS)
    if decline_at is not None:
        return StopEvent(job_id, decline_at, StopCause.ACCURACY_DECLINE)

    return None


def stop_event_for(job: JobSpec, policy: StopPolicy = StopPolicy()) -> StopEvent | None:
    """The early stop a job will hit, from its scripted streams if it has any,
    else from its declared early-stop iteration."""
    if job.loss_stream is not None or job.accuracy_stream is not None:
        event = detect_stop(job.loss_stream, job.accuracy_stream, policy, job.id)
        if event is not None and event.iteration <= job.true_iterations:
            return event
        return None

    if job.early_stop_iteration is not None:
        return StopEvent(job.id, job.early_stop_iteration, StopCause.ACCURACY_DECLINE)

    return None


def stop_iteration(
    job: JobSpec,
    policy: StopPolicy = StopPolicy(),
    early_stopping: bool = True,
) -> int:
    """Iterations the job actually runs: its stop point, or all of them."""
    event = stop_event_for(job, policy) if early_stopping else None

    return job.true_iterations if event is None else event.iteration


# ==============================================================================
# Prediction
# ==============================================================================
@dataclass(frozen=True)
class Predictor:
    """Synthetic early-stopping oracle that is right with probability
    ``accuracy``; wrong guesses are uniform over the other iteration counts."""

    accuracy: float = 1.0
    seed: int = 0
    policy: StopPolicy = StopPolicy()

    def __post_init__(self) -> None:
        _check_probability(self.accuracy, name="accuracy")
        _check_seed(self.seed)


def predict_iterations(
    predictor: Predictor,
    job: JobSpec,
    early_stopping: bool = True,
) -> int:
    truth = stop_iteration(job, predictor.policy, early_stopping)
    # Per-job generator: predictions do not depend on query order
    rng = make_rng(predictor.seed, "predict", job.id)
    hit = rng.random() < predictor.accuracy
    if job.true_iterations == 1:
        return truth

    guess = int(rng.integers(1, job.true_iterations))
    if guess >= truth:
        guess += 1

    return truth if hit else guess


# ==============================================================================
# Throughput model
# ==============================================================================
@dataclass(frozen=True)
class ThroughputScenario:
    lengths: tuple[int, ...]  # actual iterations of all N candidate jobs
    k: int  # concurrent slots
    accuracy: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "lengths", tuple(self.lengths))
        _check_lengths(self.lengths, name="lengths")
        _check_count(self.k, name="k")
        if self.k > self.n:
            raise _CheckError(
                f"\n  - `k <= N` not satisfied, got k={self.k}, N={self.n}"
            )
        _check_probability(self.accuracy, name="accuracy")

    @property
    def n(self) -> int:
        return len(self.lengths)

    @property
    def top_k_sum(self) -> int:
        return sum(sorted(self.lengths, reverse=True)[: self.k])


@dataclass(frozen=True)
class ThroughputGain:
    tau: float
    eta: float
    t_e: float
    t_w: float
    t_a: float


def throughput_with_prediction(scenario: ThroughputScenario) -> float:
    return scenario.accuracy * scenario.k * scenario.n / sum(scenario.lengths)


def throughput_worst(scenario: ThroughputScenario) -> float:
    return scenario.n / scenario.top_k_sum


def throughput_gain(scenario: ThroughputScenario) -> ThroughputGain:
    t_e = throughput_with_prediction(scenario)
    t_w = throughput_worst(scenario)
    t_a = (t_e + t_w) / 2
    tau = scenario.accuracy * scenario.k * scenario.top_k_sum / sum(scenario.lengths)
    eta = (tau - 1) / (tau + 1)

    eta_direct = (t_e - t_a) / t_a
    if abs(eta - eta_direct) > IDENTITY_TOLERANCE:
        raise RuntimeError(
            f"throughput gain {eta_direct!r} disagrees with its closed form "
            f"{eta!r} for {scenario}{_BUG_MESSAGE}"
        )

    return ThroughputGain(tau=tau, eta=eta, t_e=t_e, t_w=t_w, t_a=t_a)
