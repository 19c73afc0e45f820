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
import math
from types import NoneType

import pytest

from batchfuse._checks import (
    _check_count,
    _check_gigabytes,
    _check_lengths,
    _check_probability,
    _check_real,
    _check_scalar,
    _check_seed,
    _check_sequence,
)
from batchfuse._exceptions import BatchFuseError, _CheckError
from batchfuse.seeding import MAX_SEED, MIN_SEED


# ==============================================================================
# Test special checks
# ==============================================================================
@pytest.mark.parametrize(
    "seed",
    (
        pytest.param(1, id="1"),
        pytest.param(MIN_SEED, id="MIN_SEED"),
        pytest.param(MAX_SEED, id="MAX_SEED"),
        pytest.param(None, id="None"),
    ),
)
def test_check_seed_satisfied(seed):
    assert _check_seed(seed) == seed


def test_check_seed_not_satisfied(non_seed):
    with pytest.raises(_CheckError):
        _check_seed(non_seed)


def test_check_error_is_a_batchfuse_error():
    assert issubclass(_CheckError, BatchFuseError)


@pytest.mark.parametrize(
    ("count", "ge"),
    (
        pytest.param(1, 1, id="1 >= 1"),
        pytest.param(0, 0, id="0 >= 0"),
        pytest.param(10**9, 1, id="large"),
    ),
)
def test_check_count_satisfied(count, ge):
    assert _check_count(count, ge=ge) == count


@pytest.mark.parametrize(
    "count",
    (
        pytest.param(0, id="0"),
        pytest.param(-1, id="-1"),
        pytest.param(1.0, id="1.0"),
        pytest.param("1", id="'1'"),
    ),
)
def test_check_count_not_satisfied(count):
    with pytest.raises(_CheckError, match="`batch_size"):
        _check_count(count, name="batch_size")


@pytest.mark.parametrize(
    "real",
    (
        pytest.param(0, id="0"),
        pytest.param(2.5, id="2.5"),
        pytest.param(-1e300, id="-1e300"),
    ),
)
def test_check_real_returns_float(real):
    result = _check_real(real)

    assert isinstance(result, float)
    assert result == real


@pytest.mark.parametrize(
    "real",
    (
        pytest.param(math.nan, id="nan"),
        pytest.param(math.inf, id="inf"),
        pytest.param(-math.inf, id="-inf"),
    ),
)
def test_check_real_not_finite(real):
    with pytest.raises(_CheckError, match="`real` must be finite"):
        _check_real(real)


def test_check_real_operators():
    with pytest.raises(_CheckError, match=r"`m_mem > 0` not satisfied, got `0`"):
        _check_real(0, name="m_mem", gt=0)


def test_check_gigabytes_not_negative():
    assert _check_gigabytes(0) == 0.0
    with pytest.raises(_CheckError, match=r"`w_p >= 0` not satisfied"):
        _check_gigabytes(-0.5, name="w_p")


@pytest.mark.parametrize(
    ("probability", "satisfied"),
    (
        pytest.param(1, True, id="1"),
        pytest.param(0.5, True, id="0.5"),
        pytest.param(1e-9, True, id="1e-9"),
        pytest.param(0, False, id="0"),
        pytest.param(1.01, False, id="1.01"),
    ),
)
def test_check_probability(probability, satisfied):
    if satisfied:
        assert _check_probability(probability) == probability
    else:
        with pytest.raises(_CheckError):
            _check_probability(probability)


def test_check_lengths_satisfied():
    assert _check_lengths([1, 5, 3]) == [1, 5, 3]


@pytest.mark.parametrize(
    ("lengths", "match"),
    (
        pytest.param([], "must not be empty", id="empty"),
        pytest.param([3, 0], r"`lengths\[1\] >= 1` not satisfied", id="zero"),
        pytest.param([3, 2.0], r"`lengths\[1\]` must be of type", id="float"),
    ),
)
def test_check_lengths_not_satisfied(lengths, match):
    with pytest.raises(_CheckError, match=match):
        _check_lengths(lengths)


# ==============================================================================
# Test general checks
# ==============================================================================
@pytest.mark.parametrize(
    ("scalar", "type_"),
    (
        pytest.param(True, bool, id="bool"),
        pytest.param(1, int, id="int"),
        pytest.param(1.0, float | int, id="float (float | int)"),
        pytest.param(None, NoneType, id="None (NoneType)"),
        pytest.param(None, int | None, id="None (int | None)"),
    ),
)
def test_check_scalar_type_condition_satisfied(scalar, type_):
    assert _check_scalar(scalar, type_) == scalar


@pytest.mark.parametrize(
    ("scalar", "type_"),
    (
        pytest.param(True, float, id="bool vs. float"),
        pytest.param(1.0, (bool, int), id="float vs. (bool, int)"),
        pytest.param(1.0, int | None, id="float vs. int | None"),
    ),
)
def test_check_scalar_type_condition_not_satisfied(scalar, type_):
    match = "`scalar` must be of type `.*`, got `.*` of type `.*`"
    with pytest.raises(_CheckError, match=match):
        _check_scalar(scalar, type_)


@pytest.mark.parametrize(
    ("op_key", "op_arg", "scalar", "satisfied"),
    (
        pytest.param("ge", 1, 1, True, id="1 >= 1"),
        pytest.param("gt", 1, 1, False, id="not 1 > 1"),
        pytest.param("le", 2.0, 2, True, id="2 <= 2.0"),
        pytest.param("lt", 2, 2, False, id="not 2 < 2"),
        pytest.param("eq", 0, 0, True, id="0 == 0"),
        pytest.param("ne", 0, 0, False, id="not 0 != 0"),
        pytest.param("in_", (1, 2), 2, True, id="2 in (1, 2)"),
        pytest.param("not_in", (1, 2), 2, False, id="not 2 not in (1, 2)"),
    ),
)
def test_check_scalar_operator_condition(op_key, op_arg, scalar, satisfied):
    if satisfied:
        assert _check_scalar(scalar, int, **{op_key: op_arg}) == scalar
    else:
        with pytest.raises(_CheckError, match="not satisfied"):
            _check_scalar(scalar, int, **{op_key: op_arg})


def test_check_scalar_lists_every_violation():
    with pytest.raises(_CheckError) as excinfo:
        _check_scalar(5, int, name="top_k", lt=3, in_=(1, 2))

    assert str(excinfo.value).count("\n  - ") == 2


def test_check_scalar_unsupported_operator():
    with pytest.raises(TypeError, match="^unsupported operator keyword"):
        _check_scalar(0, int, gte=0)


@pytest.mark.parametrize(
    "type_",
    (
        pytest.param(0, id="0"),
        pytest.param("zero", id="zero"),
        pytest.param(None, id="None"),
    ),
)
def test_check_scalar_type_arg_invalid(type_):
    match = "^`type_` must be a type, a tuple of types, or a union, got `.*`$"
    with pytest.raises(TypeError, match=match):
        _check_scalar(0, type_)


def test_check_scalar_incomparable_operator_is_a_bug():
    with pytest.raises(TypeError, match="please report it"):
        _check_scalar("a", str, ge=0)


@pytest.mark.parametrize(
    "sequence",
    (
        pytest.param([1, 2], id="list"),
        pytest.param((1, 2), id="tuple"),
        pytest.param(range(1, 3), id="range"),
    ),
)
def test_check_sequence_satisfied(sequence):
    assert _check_sequence(sequence, int, length=2, ge=1) == sequence


@pytest.mark.parametrize(
    ("sequence", "match"),
    (
        pytest.param("12", "must be a sequence", id="str"),
        pytest.param({1, 2}, "must be a sequence", id="set"),
        pytest.param(5, "must be a sequence", id="int"),
        pytest.param([1, 2, 3], "must have length `2`", id="length"),
        pytest.param([1, 0], r"`sequence\[1\] >= 1` not satisfied", id="element"),
    ),
)
def test_check_sequence_not_satisfied(sequence, match):
    with pytest.raises(_CheckError, match=match):
        _check_sequence(sequence, int, length=2, ge=1)
