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
import pytest

from batchfuse.seeding import MAX_SEED, MIN_SEED
from batchfuse.workload import DatasetProfile, JobSpec, JobState


@pytest.fixture(
    scope="session",
    params=(
        0.0,
        MIN_SEED - 1,
        MAX_SEED + 1,
        "zero",
        lambda: 0,
    ),
    ids=(
        "0.0",
        "MIN_SEED - 1",
        "MAX_SEED + 1",
        "zero",
        "lambda: 0",
    ),
)
def non_seed(request):
    yield request.param


@pytest.fixture(scope="session")
def make_job():
    def make_job(
        id="J1",
        lengths=(8, 8),
        priority=1,
        submit_time=0.0,
        batch_size=None,
        true_iterations=4,
        memory_gb=1.0,
        **kwargs,
    ):
        return JobSpec(
            id=id,
            priority=priority,
            submit_time=submit_time,
            dataset=DatasetProfile.from_lengths(lengths),
            batch_size=len(lengths) if batch_size is None else batch_size,
            true_iterations=true_iterations,
            memory_gb=memory_gb,
            **kwargs,
        )

    return make_job


@pytest.fixture(scope="session")
def make_state(make_job):
    def make_state(**kwargs):
        return JobState(make_job(**kwargs))

    return make_state
