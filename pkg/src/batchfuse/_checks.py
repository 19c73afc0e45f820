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
import operator
from types import NoneType, UnionType
from typing import Any, Final, Sequence, get_args

from batchfuse._exceptions import _CheckError
from batchfuse._messages import _BUG_MESSAGE


# ==============================================================================
# Special checks
# ==============================================================================
def _check_seed(seed: int | None) -> int | None:
    # Import locally to avoid a circular import
    # We want all check functions to come from this module
    from batchfuse.seeding import MAX_SEED, MIN_SEED

    return _check_scalar(
        scalar=seed,
        type_=int | None,
        name="seed",
        ge=MIN_SEED,
        le=MAX_SEED,
    )


def _check_count(count: int, name: str = "count", ge: int = 1) -> int:
    return _check_scalar(scalar=count, type_=int, name=name, ge=ge)


def _check_real(
    real: float | int,
    name: str = "real",
    **operators: Any,
) -> float:
    real = _check_scalar(scalar=real, type_=float | int, name=name, **operators)
    if not math.isfinite(real):
        raise _CheckError(f"\n  - `{name}` must be finite, got `{real}`")

    return float(real)


def _check_gigabytes(gigabytes: float | int, name: str = "gigabytes") -> float:
    return _check_real(gigabytes, name=name, ge=0)


def _check_probability(probability: float | int, name: str = "probability") -> float:
    return _check_real(probability, name=name, gt=0, le=1)


def _check_lengths(lengths: Sequence[int], name: str = "lengths") -> Sequence[int]:
    lengths = _check_sequence(sequence=lengths, type_=int, name=name, ge=1)
    if len(lengths) == 0:
        raise _CheckError(f"\n  - `{name}` must not be empty")

    return lengths


# ==============================================================================
# General checks
# ==============================================================================
# The second argument of `isinstance()` must be of this type
__TYPE_TYPE = type | UnionType | tuple[Any, ...]

# Keyword -> (symbol shown in messages, predicate(value, argument))
__OPERATORS: Final = {
    "ge": (">=", operator.ge),
    "gt": (">", operator.gt),
    "le": ("<=", operator.le),
    "lt": ("<", operator.lt),
    "eq": ("==", operator.eq),
    "ne": ("!=", operator.ne),
    "in_": ("in", lambda value, arg: value in arg),
    "not_in": ("not in", lambda value, arg: value not in arg),
}


def _check_scalar(
    scalar: Any,
    type_: __TYPE_TYPE,
    name: str = "scalar",
    **operators: Any,
) -> Any:
    __validate_check_args(type_, name, operators)

    if scalar is None and __allows_none(type_):
        return scalar

    violations = []

    is_instance = isinstance(scalar, type_)
    if not is_instance:
        violations.append(
            f"`{name}` must be of type {__describe_type(type_)}, got `{scalar}` "
            f"of type `{type(scalar).__qualname__}`"
        )

    for op_key, op_arg in operators.items():
        symbol, predicate = __OPERATORS[op_key]
        try:
            satisfied = predicate(scalar, op_arg)
        except TypeError as e:
            if not is_instance:
                # Follows from the type violation already reported
                continue
            raise TypeError(
                f"`{symbol}` (`{op_key}`) cannot compare `{name}` of type "
                f"`{type(scalar).__qualname__}` with `{op_arg}`: {e}{_BUG_MESSAGE}"
            ) from e

        if not satisfied:
            violations.append(
                f"`{name} {symbol} {op_arg}` not satisfied, got `{scalar}`"
            )

    __raise_violations(violations)
    return scalar


def _check_sequence(
    sequence: Sequence[Any],
    type_: __TYPE_TYPE,
    name: str = "sequence",
    length: int | None = None,
    **operators: Any,
) -> Sequence[Any]:
    __validate_check_args(type_, name, operators)

    # Strings are sequences, but never the sequences we validate
    if not isinstance(sequence, Sequence) or isinstance(sequence, str):
        __raise_violations(
            [
                f"`{name}` must be a sequence with elements of type "
                f"{__describe_type(type_)}, got `{sequence}`"
            ]
        )

    message = ""
    if length is not None and len(sequence) != length:
        message = (
            f"\n  - `{name}` must have length `{length}`, but "
            f"`len({name}) = {len(sequence)}`"
        )

    for index, element in enumerate(sequence):
        try:
            _check_scalar(element, type_, name=f"{name}[{index}]", **operators)
        except _CheckError as e:
            message = f"{message}{e}"

    if message:
        raise _CheckError(message)

    return sequence


# ------------------------------------------------------------------------------
# Helpers
# ------------------------------------------------------------------------------
def __raise_violations(violations: list[str]) -> None:
    if violations:
        raise _CheckError("".join(f"\n  - {v}" for v in violations))


def __validate_check_args(
    type_: __TYPE_TYPE, name: str, operators: dict[str, Any]
) -> None:
    try:
        isinstance(object(), type_)
    except TypeError:
        raise TypeError(
            f"`type_` must be a type, a tuple of types, or a union, got `{type_}`"
        ) from None

    if not isinstance(name, str):
        raise TypeError(f"`name` must be a `str`, got `{name}`")

    unknown = [key for key in operators if key not in __OPERATORS]
    if unknown:
        raise TypeError(
            f"unsupported operator keyword(s) `{'`, `'.join(unknown)}`, "
            f"supported operator keywords are `{'`, `'.join(__OPERATORS)}`"
        )


def __allows_none(type_: __TYPE_TYPE) -> bool:
    if isinstance(type_, tuple):
        return NoneType in type_
    if isinstance(type_, UnionType):
        return NoneType in get_args(type_)
    return type_ is NoneType


def __describe_type(type_: __TYPE_TYPE) -> str:
    members = (type_,) if isinstance(type_, type) else type_
    if isinstance(members, UnionType):
        members = get_args(members)

    names = [f"`{member.__qualname__}`" for member in members]
    if len(names) == 1:
        return names[0]

    return f"{', '.join(names[:-1])} or {names[-1]}"
