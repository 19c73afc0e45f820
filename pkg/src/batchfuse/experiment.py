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
"""Experiment specs: one JSON document naming a workload, the simulation
settings and the strategies to compare. Paths inside a spec are relative to
the spec file. See ``docs/schema.rst`` for the full schema."""
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Final, Mapping

from batchfuse._exceptions import ConfigError, _CheckError
from batchfuse.memory import FitMode, MemoryModel, MemoryProfile, read_model_json
from batchfuse.progress import Predictor, StopPolicy
from batchfuse.reporting import write_json
from batchfuse.scheduler import SchedulerConfig, Strategy
from batchfuse.simulator import ExecutionMode, IterationTimeModel, SimConfig
from batchfuse.workload import (
    JobSpec,
    LengthDistribution,
    WorkloadConfig,
    generate_workload,
    load_histogram,
    load_workload,
)


logger = logging.getLogger(__name__)

REPORT_FORMATS: Final[frozenset[str]] = frozenset({"json", "csv"})
MANIFEST_NAME: Final[str] = "experiment.json"

_TOP_LEVEL_KEYS: Final[frozenset[str]] = frozenset(
    {
        "name",
        "workload",
        "strategies",
        "output_dir",
        "formats",
        "workers",
        "seed",
        "scheduler",
        "iteration_time",
        "horizon",
        "early_stopping",
        "stop_policy",
        "predictor",
        "memory_model",
        "memory_profile",
        "warmup_iterations",
        "item_order",
        "execution_mode",
        "compute_dim",
        "reschedule_every_iteration",
    }
)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    sim: SimConfig
    strategies: tuple[Strategy, ...]
    output_dir: Path
    formats: tuple[str, ...] = ("json", "csv")
    workers: int = 1
    source: Path | None = None

    @property
    def run_dir(self) -> Path:
        return self.output_dir / self.name


@dataclass(frozen=True)
class Overrides:
    seed: int | None = None
    strategies: tuple[str, ...] = ()
    top_k: int | None = None
    m_mem: float | None = None
    output_dir: Path | None = None


def load_experiment(
    path: str | Path,
    overrides: Overrides = Overrides(),
) -> ExperimentSpec:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"experiment spec not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: an experiment spec is a JSON object")

    unknown = sorted(set(raw) - _TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")

    try:
        return _build(raw, path.resolve().parent, overrides, path)
    except ConfigError as e:
        if str(path) in str(e):
            raise
        raise ConfigError(f"{path}: {e}") from e
    except _CheckError as e:
        raise ConfigError(f"{path}: invalid value{e}") from e
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{path}: malformed spec ({e!r})") from e


def _build(
    raw: Mapping[str, Any],
    base_dir: Path,
    overrides: Overrides,
    source: Path,
) -> ExperimentSpec:
    if "name" not in raw or "workload" not in raw:
        raise ConfigError("`name` and `workload` are required")
    name = raw["name"]
    if not isinstance(name, str) or not name or "/" in name:
        raise ConfigError(f"`name` must be a non-empty file name, got {name!r}")

    seed = raw.get("seed", 0) if overrides.seed is None else overrides.seed
    jobs = _workload(raw["workload"], base_dir, seed)

    scheduler = SchedulerConfig(**raw.get("scheduler", {}))
    if overrides.top_k is not None:
        scheduler = replace(scheduler, top_k=overrides.top_k)
    if overrides.m_mem is not None:
        scheduler = replace(scheduler, m_mem=overrides.m_mem)

    strategies = overrides.strategies or tuple(raw.get("strategies", ("M4",)))
    strategies = tuple(Strategy.parse(s) for s in strategies)
    if not strategies or len(set(strategies)) != len(strategies):
        raise ConfigError("`strategies` must be non-empty and distinct")

    predictor = None
    if "predictor" in raw:
        predictor = Predictor(
            seed=seed,
            policy=StopPolicy(**raw.get("stop_policy", {})),
            **raw["predictor"],
        )

    sim = SimConfig(
        jobs=tuple(jobs),
        scheduler=scheduler,
        iteration_time=IterationTimeModel(**raw.get("iteration_time", {})),
        seed=seed,
        horizon=raw.get("horizon"),
        early_stopping=raw.get("early_stopping", True),
        stop_policy=StopPolicy(**raw.get("stop_policy", {})),
        predictor=predictor,
        memory_model=_memory_model(raw.get("memory_model"), base_dir),
        memory_profile=_memory_profile(raw.get("memory_profile")),
        warmup_iterations=raw.get("warmup_iterations", 0),
        item_order=raw.get("item_order", "sequential"),
        execution_mode=ExecutionMode(raw.get("execution_mode", "fused")),
        compute_dim=raw.get("compute_dim"),
        reschedule_every_iteration=raw.get("reschedule_every_iteration", True),
    )

    formats = tuple(raw.get("formats", ("json", "csv")))
    if not set(formats) <= REPORT_FORMATS:
        raise ConfigError(
            f"`formats` must be drawn from {sorted(REPORT_FORMATS)}, "
            f"got {list(formats)}"
        )
    output_dir = overrides.output_dir or base_dir / raw.get("output_dir", "out")

    return ExperimentSpec(
        name=name,
        sim=sim,
        strategies=strategies,
        output_dir=Path(output_dir),
        formats=formats,
        workers=raw.get("workers", 1),
        source=source.resolve(),
    )


def _workload(value: Any, base_dir: Path, seed: int) -> list[JobSpec]:
    if isinstance(value, str):
        return load_workload(base_dir / value, seed=seed)
    if not isinstance(value, dict) or "generate" not in value:
        raise ConfigError("`workload` must be a file path or {\"generate\": {...}}")

    generate = dict(value["generate"])
    lengths = dict(generate.pop("lengths", {}))
    if "histogram_file" in lengths:
        lengths["histogram"] = load_histogram(base_dir / lengths.pop("histogram_file"))
    for key in ("priority_range", "iteration_range", "memory_range"):
        if generate.get(key) is not None:
            generate[key] = tuple(generate[key])

    return generate_workload(
        WorkloadConfig(lengths=LengthDistribution(**lengths), seed=seed, **generate)
    )


def _memory_model(value: Any, base_dir: Path) -> MemoryModel | None:
    if value is None:
        return None
    if isinstance(value, str):
        return read_model_json(base_dir / value)

    return MemoryModel(**value)


def _memory_profile(value: Mapping[str, Any] | None) -> MemoryProfile | None:
    if value is None:
        return None
    value = dict(value)
    truth = MemoryModel(**value.pop("truth"))
    for key in ("batch_sizes", "seq_lens"):
        if key in value:
            value[key] = tuple(value[key])

    mode = FitMode(value.pop("mode", "unconstrained"))

    return MemoryProfile(truth=truth, mode=mode, **value)


def claim_run_dir(spec: ExperimentSpec) -> Path:
    """Create the experiment's output directory, refusing a name already
    taken by a different spec in the same output directory."""
    run_dir = spec.run_dir
    manifest = run_dir / MANIFEST_NAME
    if manifest.exists():
        try:
            owner = json.loads(manifest.read_text()).get("spec")
        except (json.JSONDecodeError, AttributeError):
            owner = None
        if owner != str(spec.source):
            raise ConfigError(
                f"experiment name `{spec.name}` is already used in "
                f"{spec.output_dir} by {owner or 'an unknown spec'}"
            )

    write_json(
        manifest,
        {
            "name": spec.name,
            "spec": str(spec.source),
            "strategies": [s.value for s in spec.strategies],
        },
    )
    logger.info("writing experiment `%s` to %s", spec.name, run_dir)

    return run_dir
