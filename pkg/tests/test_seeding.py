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
import random

import numpy as np
import pytest
import torch

from batchfuse._exceptions import _CheckError
from batchfuse.seeding import MAX_SEED, derive_seed, make_rng, temp_seed


@pytest.mark.parametrize(
    ("set_global_seed", "draw", "all_equal"),
    (
        pytest.param(
            random.seed,
            lambda: [random.random() for _ in range(10)],
            lambda a, b: a == b,
            id="random",
        ),
        pytest.param(
            np.random.seed,
            lambda: np.random.rand(10),
            lambda a, b: np.array_equal(a, b),
            id="numpy",
        ),
        pytest.param(
            torch.manual_seed,
            lambda: torch.rand(10),
            lambda a, b: torch.equal(a, b),
            id="torch",
        ),
    ),
)
class TestTempSeed:
    def test_same_seeds(self, set_global_seed, draw, all_equal):
        set_global_seed(42)
        with temp_seed(0):
            a = draw()
        with temp_seed(0):
            b = draw()

        assert all_equal(a, b)

    def test_different_seeds(self, set_global_seed, draw, all_equal):
        set_global_seed(42)
        with temp_seed(0):
            a = draw()
        with temp_seed(1):
            b = draw()

        assert not all_equal(a, b)

    def test_none_as_seed(self, set_global_seed, draw, all_equal):
        set_global_seed(42)
        a = draw()

        set_global_seed(42)
        with temp_seed(None):
            b = draw()

        assert all_equal(a, b)

    def test_global_state_restored(self, set_global_seed, draw, all_equal):
        set_global_seed(42)
        draw()
        a = draw()

        set_global_seed(42)
        draw()
        with temp_seed(0):
            draw()
        b = draw()

        assert all_equal(a, b)


def test_temp_seed_seed_arg_invalid(non_seed):
    with pytest.raises(_CheckError):
        temp_seed(non_seed)


# ==============================================================================
# Derived seeds
# ==============================================================================
def test_derive_seed_is_stable():
    assert derive_seed(7, "job", 3) == derive_seed(7, "job", 3)


@pytest.mark.parametrize(
    ("a", "b"),
    (
        pytest.param((7, "job", 3), (7, "job", 4), id="key"),
        pytest.param((7, "job", 3), (8, "job", 3), id="root"),
        pytest.param((7, "job", 3), (7, 3, "job"), id="key order"),
        pytest.param((7, "1"), (7, 1), id="key type"),
    ),
)
def test_derive_seed_separates_streams(a, b):
    assert derive_seed(*a) != derive_seed(*b)


def test_derive_seed_is_a_valid_seed():
    for root in (0, 1, MAX_SEED):
        assert 0 <= derive_seed(root, "x") <= MAX_SEED


def test_derive_seed_requires_a_seed():
    with pytest.raises(TypeError, match="must not be `None`"):
        derive_seed(None, "x")


def test_make_rng_reproducible():
    a = make_rng(3, "predict", "J1").random(5)
    b = make_rng(3, "predict", "J1").random(5)
    c = make_rng(3, "predict", "J2").random(5)

    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
