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
"""Command-line front end.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
configuration error. Log verbosity comes from ``-v`` or the environment
variable ``BATCHFUSE_LOG_LEVEL``.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Final, Sequence

from batchfuse import __version__
from batchfuse._exceptions import BatchFuseError, ConfigError, _CheckError
from batchfuse.cost import MemoryFootprint, cost_report, max_concurrent_jobs
from batchfuse.experiment import Overrides, claim_run_dir, load_experiment
from batchfuse.memory import (
    FitMode,
    fit,
    model_to_dict,
    read_samples_csv,
    warmup_plan,
    write_model_json,
)
from batchfuse.progress import ThroughputScenario, throughput_gain
from batchfuse.reporting import write_csv, write_json, write_jsonl
from batchfuse.simulator import (
    JobMetrics,
    comparison_rows,
    metrics,
    run_strategies,
)


logger = logging.getLogger(__name__)

LOG_LEVEL_ENV: Final[str] = "BATCHFUSE_LOG_LEVEL"
LOG_FORMAT: Final[str] = "{asctime} {levelname:<7} {name}: {message}"

JOB_COLUMNS: Final[tuple[str, ...]] = (
    "job_id",
    "priority",
    "status",
    "iterations",
    "submit_time",
    "start_time",
    "finish_time",
    "turnaround",
    "waiting",
    "virtual_turnaround",
)


# ==============================================================================
# Setup
# ==============================================================================
def _setup_logging(verbose: int) -> None:
    if verbose:
        level = logging.DEBUG if verbose > 1 else logging.INFO
    else:
        name = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
        level = logging.getLevelName(name)
        if not isinstance(level, int):
            raise ConfigError(
                f"{LOG_LEVEL_ENV} must be DEBUG, INFO, WARNING or ERROR, got `{name}`"
            )

    logging.basicConfig(format=LOG_FORMAT, style="{", level=level)
    logging.getLogger("batchfuse").setLevel(level)


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got `{text}`"
        ) from None


def _strategy_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _gb(value: float) -> str:
    return f"{round(value, 6)!r} GB"


def _print_json(value: Any) -> None:
    print(json.dumps(value, sort_keys=True, indent=2))


# ==============================================================================
# Commands
# ==============================================================================
def cmd_simulate(args: argparse.Namespace) -> int:
    overrides = Overrides(
        seed=args.seed,
        strategies=tuple(s for group in args.strategy or () for s in group),
        top_k=args.topk,
        m_mem=args.mmem,
        output_dir=args.out,
    )
    spec = load_experiment(args.spec, overrides)
    run_dir = claim_run_dir(spec)

    traces = run_strategies(spec.sim, spec.strategies, workers=spec.workers)
    reports = {}
    for strategy, trace in traces.items():
        report = metrics(trace)
        reports[strategy] = report
        strategy_dir = run_dir / strategy.value
        write_jsonl(strategy_dir / "trace.jsonl", (e.to_record() for e in trace.events))
        write_jsonl(strategy_dir / "decisions.jsonl", trace.decision_records())
        if "json" in spec.formats:
            write_json(strategy_dir / "metrics.json", report.to_dict())
        if "csv" in spec.formats:
            write_csv(
                strategy_dir / "metrics.csv",
                ("metric", "value"),
                report.aggregates().items(),
            )
            jobs_csv = strategy_dir / "jobs.csv"
            write_csv(jobs_csv, JOB_COLUMNS, map(_job_row, report.jobs))
        if report.partial:
            logger.warning(
                "%s: metrics are partial, the run was truncated", strategy.value
            )

    if len(reports) > 1:
        write_csv(
            run_dir / "comparison.csv",
            ("strategy", "metric", "value"),
            comparison_rows(reports),
        )

    if args.json:
        _print_json(
            {
                "name": spec.name,
                "run_dir": str(run_dir),
                "strategies": {s.value: r.aggregates() for s, r in reports.items()},
            }
        )
    else:
        print(
            f"{'strategy':<8} {'mean_TT':>10} {'mean_WT':>10} {'mean_VTT':>10} "
            f"{'delta':>7} {'T_e':>10} {'latency':>10}"
        )
        for strategy, r in reports.items():
            print(
                f"{strategy.value:<8} {r.mean_turnaround:>10.3f} "
                f"{r.mean_waiting:>10.3f} {r.mean_virtual_turnaround:>10.3f} "
                f"{r.padding_ratio:>7.4f} {r.effective_throughput:>10.3f} "
                f"{r.end_to_end_latency:>10.3f}"
            )
        print(f"artifacts written to {run_dir}")

    return 0


def _job_row(job: JobMetrics) -> tuple:
    return (
        job.job_id,
        job.priority,
        job.status.value,
        job.iterations,
        job.submit_time,
        job.start_time,
        job.finish_time,
        job.turnaround,
        job.waiting,
        job.virtual_turnaround,
    )


def cmd_fit_mem(args: argparse.Namespace) -> int:
    samples = read_samples_csv(args.samples)
    model = fit(samples, FitMode(args.mode))
    if args.out is not None:
        write_model_json(args.out, model)

    if args.json:
        _print_json(model_to_dict(model))
    else:
        print(f"beta0: {model.beta0!r}")
        print(f"beta1: {model.beta1!r}")
        print(f"beta2: {model.beta2!r}")
        print(f"rmse: {model.rmse!r}")
        print(f"samples: {model.sample_count}")

    return 0


def cmd_cost(args: argparse.Namespace) -> int:
    footprint = MemoryFootprint(w_p=args.wp, w_l=args.wl, w_e=args.we)
    report = cost_report(footprint, args.k)
    result = {
        "k": report.k,
        "total_no_share_gb": report.total_no_share,
        "total_shared_gb": report.total_shared,
        "memory_saved_gb": report.memory_saved,
        "launch_saving": report.launch_saving_fraction,
    }
    if args.budget is not None:
        result["max_jobs_no_share"] = max_concurrent_jobs(footprint, args.budget, False)
        result["max_jobs_shared"] = max_concurrent_jobs(footprint, args.budget, True)

    if args.json:
        _print_json(result)
        return 0

    print(f"k: {report.k}")
    print(f"total_no_share: {_gb(report.total_no_share)}")
    print(f"total_shared: {_gb(report.total_shared)}")
    print(f"memory_saved: {_gb(report.memory_saved)}")
    print(f"launch_saving: {report.launch_saving_fraction * 100:.1f}%")
    if args.budget is not None:
        print(f"max_jobs_no_share: {result['max_jobs_no_share']}")
        print(f"max_jobs_shared: {result['max_jobs_shared']}")

    return 0


def cmd_throughput(args: argparse.Namespace) -> int:
    scenario = ThroughputScenario(
        lengths=tuple(args.lengths), k=args.k, accuracy=args.accuracy
    )
    gain = throughput_gain(scenario)
    result = {
        "tau": gain.tau,
        "eta": gain.eta,
        "t_e": gain.t_e,
        "t_w": gain.t_w,
        "t_a": gain.t_a,
    }

    if args.json:
        _print_json(result)
    else:
        for name, value in result.items():
            print(f"{name}: {value!r}")

    return 0


def cmd_warmup_plan(args: argparse.Namespace) -> int:
    plan = warmup_plan(args.batch_sizes, args.seq_lens)

    if args.json:
        _print_json([{"B_t": b, "L_n": n} for b, n in plan])
    else:
        print("B_t,L_n")
        for batch_size, seq_len in plan:
            print(f"{batch_size},{seq_len}")

    return 0


# ==============================================================================
# Entry points
# ==============================================================================
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--json", action="store_true", help="print machine-readable JSON on stdout"
    )
    common.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help=f"-v for info, -vv for debug logging (overrides {LOG_LEVEL_ENV})",
    )

    parser = argparse.ArgumentParser(
        prog="batchfuse",
        description="Schedule and simulate fused multi-job LoRA fine-tuning.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser(
        "simulate", parents=[common], help="run an experiment spec"
    )
    simulate.add_argument("--spec", type=Path, required=True)
    simulate.add_argument("--out", type=Path, help="output directory")
    simulate.add_argument("--seed", type=int)
    simulate.add_argument(
        "--strategy",
        type=_strategy_list,
        action="append",
        help="M1..M4 or fifo/priority/minpad/adaptive, comma-separated",
    )
    simulate.add_argument("--topk", type=int)
    simulate.add_argument("--mmem", type=float, help="memory budget in GB")
    simulate.set_defaults(handler=cmd_simulate)

    fit_mem = commands.add_parser(
        "fit-mem", parents=[common], help="fit the memory model to samples"
    )
    fit_mem.add_argument("samples", type=Path, help="CSV with columns B_t,L_n,M_gb")
    fit_mem.add_argument(
        "--mode",
        choices=[m.value for m in FitMode],
        default=FitMode.UNCONSTRAINED.value,
    )
    fit_mem.add_argument("--out", type=Path, help="model JSON to write")
    fit_mem.set_defaults(handler=cmd_fit_mem)

    cost = commands.add_parser(
        "cost", parents=[common], help="memory and kernel-launch savings"
    )
    cost.add_argument("--k", type=int, required=True, help="number of jobs")
    cost.add_argument("--wp", type=float, required=True, help="base weights, GB")
    cost.add_argument("--wl", type=float, default=0.0, help="one adapter, GB")
    cost.add_argument("--we", type=float, default=0.0, help="per-job overhead, GB")
    cost.add_argument("--budget", type=float, help="device memory, GB")
    cost.set_defaults(handler=cmd_cost)

    throughput = commands.add_parser(
        "throughput", parents=[common], help="throughput gain of SJF with prediction"
    )
    throughput.add_argument("--lengths", type=_int_list, required=True)
    throughput.add_argument("--k", type=int, required=True)
    throughput.add_argument("--accuracy", type=float, default=1.0)
    throughput.set_defaults(handler=cmd_throughput)

    plan = commands.add_parser(
        "warmup-plan", parents=[common], help="memory probe points"
    )
    plan.add_argument("--batch-sizes", type=_int_list, default=[1, 2, 4, 8])
    plan.add_argument("--seq-lens", type=_int_list, default=[128, 256, 512, 1024])
    plan.set_defaults(handler=cmd_warmup_plan)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    try:
        _setup_logging(args.verbose)
        return args.handler(args)
    except _CheckError as e:
        print(f"batchfuse: error: {e}", file=sys.stderr)
        return 2
    except (BatchFuseError, RuntimeError, OSError) as e:
        logger.debug("runtime failure", exc_info=True)
        print(f"batchfuse: failed: {e}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())
