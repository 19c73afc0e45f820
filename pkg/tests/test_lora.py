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
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from batchfuse._exceptions import NumericError, RoutingError, ShapeError, _CheckError
from batchfuse.lora import (
    DTYPE,
    AdapterWeights,
    FusedBatch,
    JobBatch,
    LaunchCount,
    LaunchMode,
    count_launches,
    fuse,
    fused_forward,
    lora_forward,
    padding_stats,
    random_adapter,
    random_job_batch,
)
from batchfuse.seeding import temp_seed


def tensor(rows):
    return torch.tensor(rows, dtype=DTYPE)


def zero_adapter(job_id, d, k, rank=1):
    a = torch.zeros(rank, k, dtype=DTYPE)
    b = torch.zeros(d, rank, dtype=DTYPE)

    return AdapterWeights(job_id, a, b)


# ==============================================================================
# Single job
# ==============================================================================
def test_lora_forward_zero_adapter_is_identity():
    x = tensor([[0.3, -1.2]])

    h = lora_forward(torch.eye(2, dtype=DTYPE), zero_adapter("a", 2, 2), x)

    torch.testing.assert_close(h, x)


def test_lora_forward_scalar():
    adapter = AdapterWeights("a", a=tensor([[1.0]]), b=tensor([[3.0]]))

    h = lora_forward(tensor([[2.0]]), adapter, tensor([[5.0]]))

    assert h.item() == 25.0


def test_lora_forward_matches_merged_weights():
    with temp_seed(0):
        w0 = torch.randn(4, 4, dtype=DTYPE)
        x = torch.randn(3, 4, dtype=DTYPE)
    adapter = random_adapter("a", d=4, k=4, rank=2, seed=1)

    merged = x @ (w0 + adapter.b @ adapter.a).T

    h = lora_forward(w0, adapter, x)

    torch.testing.assert_close(h, merged, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize(
    ("w0", "x", "error", "match"),
    (
        pytest.param(
            torch.ones(2, 3, dtype=DTYPE),
            torch.ones(1, 2, dtype=DTYPE),
            ShapeError,
            "`w0` and `x` must agree",
            id="inner mismatch",
        ),
        pytest.param(
            torch.ones(2, 2, dtype=DTYPE),
            torch.ones(2, dtype=DTYPE),
            ShapeError,
            "non-empty 2-D matrix",
            id="vector input",
        ),
        pytest.param(
            torch.ones(2, 2, dtype=DTYPE),
            tensor([[1.0, float("nan")]]),
            NumericError,
            "finite entries",
            id="nan input",
        ),
    ),
)
def test_lora_forward_invalid(w0, x, error, match):
    with pytest.raises(error, match=match):
        lora_forward(w0, zero_adapter("a", 2, 2), x)


def test_adapter_rank_bounded():
    with pytest.raises(ShapeError, match=r"`rank <= min\(d, k\)`"):
        AdapterWeights(
            "a", a=torch.ones(3, 2, dtype=DTYPE), b=torch.ones(4, 3, dtype=DTYPE)
        )


def test_shape_error_is_a_usage_error():
    assert issubclass(ShapeError, _CheckError)
    assert issubclass(NumericError, _CheckError)


# ==============================================================================
# Fusion
# ==============================================================================
@pytest.mark.parametrize(
    ("jobs", "max_len", "total", "padding"),
    (
        pytest.param([[5, 5]], 5, 10, 0, id="equal lengths"),
        pytest.param([[3], [5]], 5, 10, 2, id="two single sequences"),
        pytest.param(
            [[6, 4], [3, 5], [2, 6], [1, 4]], 6, 48, 17, id="four jobs of two"
        ),
    ),
)
def test_fuse_accounting(jobs, max_len, total, padding):
    batches = [
        random_job_batch(f"J{i}", lengths, k=3, seed=i)
        for i, lengths in enumerate(jobs)
    ]

    fused = fuse(batches)

    assert fused.max_len == max_len
    assert fused.total_tokens == total
    assert fused.padding_tokens == padding
    assert fused.padding_ratio == padding / total
    assert padding_stats([n for lengths in jobs for n in lengths]) == (total, padding)


def test_fuse_layout():
    batches = [
        random_job_batch("a", [2, 1], k=2, seed=0),
        random_job_batch("b", [3], k=2, seed=1),
    ]

    fused = fuse(batches)

    assert fused.routing == ("a", "a", "b")
    assert fused.lengths == (2, 1, 3)
    assert fused.job_ids == ("a", "b")
    assert fused.padding_mask.tolist() == [
        [False, False, True],
        [False, True, True],
        [False, False, False],
    ]
    torch.testing.assert_close(fused.data[1, 0], batches[0].sequences[1][0])
    assert torch.count_nonzero(fused.data[fused.padding_mask]) == 0


def test_fuse_empty():
    with pytest.raises(_CheckError, match="at least one job batch"):
        fuse([])


def test_fuse_embedding_mismatch():
    batches = [
        random_job_batch("a", [2], k=2, seed=0),
        random_job_batch("b", [2], k=3, seed=0),
    ]

    with pytest.raises(ShapeError, match="must agree"):
        fuse(batches)


def test_fused_forward_scalar_jobs():
    w0 = tensor([[2.0]])
    adapters = {
        "scaled": AdapterWeights("scaled", a=tensor([[1.0]]), b=tensor([[3.0]])),
        "base": zero_adapter("base", 1, 1),
    }
    fused = fuse(
        [JobBatch("scaled", (tensor([[5.0]]),)), JobBatch("base", (tensor([[7.0]]),))]
    )

    outputs = fused_forward(w0, adapters, fused)

    assert outputs["scaled"][0].item() == 25.0
    assert outputs["base"][0].item() == 14.0


def test_fused_forward_zero_adapters_is_base_model():
    with temp_seed(3):
        w0 = torch.randn(5, 4, dtype=DTYPE)
    batch = random_job_batch("a", [3, 1, 2], k=4, seed=4)

    outputs = fused_forward(w0, {"a": zero_adapter("a", 5, 4)}, fuse([batch]))

    for h, x in zip(outputs["a"], batch.sequences):
        torch.testing.assert_close(h, x @ w0.T)


def test_fused_forward_missing_adapter():
    fused = fuse(
        [
            random_job_batch("a", [2], k=2, seed=0),
            random_job_batch("b", [2], k=2, seed=0),
        ]
    )

    with pytest.raises(RoutingError, match="`b`"):
        fused_forward(torch.eye(2, dtype=DTYPE), {"a": zero_adapter("a", 2, 2)}, fused)


@st.composite
def fusion_instances(draw):
    d = draw(st.integers(1, 16))
    k = draw(st.integers(1, 16))
    num_jobs = draw(st.integers(1, 6))
    seed = draw(st.integers(0, 2**16))
    jobs = []
    for index in range(num_jobs):
        rank = draw(st.integers(1, min(4, d, k)))
        lengths = draw(st.lists(st.integers(1, 8), min_size=1, max_size=3))
        jobs.append((f"J{index}", rank, lengths))

    return d, k, seed, jobs


def _instance(d, k, seed, jobs):
    with temp_seed(seed):
        w0 = torch.randn(d, k, dtype=DTYPE)
    adapters = {
        job_id: random_adapter(job_id, d, k, rank, seed=seed + i)
        for i, (job_id, rank, _) in enumerate(jobs)
    }
    batches = [
        random_job_batch(job_id, lengths, k, seed=seed + 100 + i)
        for i, (job_id, _, lengths) in enumerate(jobs)
    ]

    return w0, adapters, batches


@settings(max_examples=100, deadline=None)
@given(fusion_instances())
def test_fused_forward_equals_per_job(instance):
    w0, adapters, batches = _instance(*instance)

    outputs = fused_forward(w0, adapters, fuse(batches))

    for batch in batches:
        assert len(outputs[batch.job_id]) == len(batch.sequences)
        for h, x in zip(outputs[batch.job_id], batch.sequences):
            expected = lora_forward(w0, adapters[batch.job_id], x)
            torch.testing.assert_close(h, expected, rtol=1e-9, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(fusion_instances())
def test_padding_rows_do_not_leak(instance):
    w0, adapters, batches = _instance(*instance)
    fused = fuse(batches)
    noisy = fused.data.clone()
    noisy[fused.padding_mask] = 1e3
    tampered = FusedBatch(noisy, fused.routing, fused.padding_mask, fused.lengths)

    clean = fused_forward(w0, adapters, fused)
    dirty = fused_forward(w0, adapters, tampered)

    for job_id in clean:
        for a, b in zip(clean[job_id], dirty[job_id]):
            torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-12)


# ==============================================================================
# Kernel launches
# ==============================================================================
@pytest.mark.parametrize(
    ("num_jobs", "mode", "expected"),
    (
        pytest.param(5, LaunchMode.PER_JOB, LaunchCount(20, 0), id="k=5 per job"),
        pytest.param(5, LaunchMode.FUSED, LaunchCount(10, 2), id="k=5 fused"),
        pytest.param(1, "fused", LaunchCount(2, 2), id="k=1 fused"),
    ),
)
def test_count_launches(num_jobs, mode, expected):
    assert count_launches(num_jobs, mode) == expected


def test_count_launches_zero_jobs():
    with pytest.raises(_CheckError, match="`num_jobs >= 1`"):
        count_launches(0, LaunchMode.FUSED)
