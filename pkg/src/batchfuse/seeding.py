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
import zlib
from typing import Any, Final

import numpy as np
import torch

from batchfuse._checks import _check_seed


MIN_SEED: Final[int] = 0
MAX_SEED: Final[int] = 4294967295  # 2^32 - 1 (uint32)


def derive_seed(seed: int, *keys: Any) -> int:
    """Derive a sub-seed from ``seed`` and ``keys``.

    The result depends only on the values (not on call order or
    ``PYTHONHASHSEED``), so per-job and per-stream generators stay stable
    when jobs are added, removed, or visited in a different order.
    """
    seed = _check_seed(seed)
    if seed is None:
        raise TypeError("`seed` must not be `None` when deriving sub-seeds")

    derived = seed
    for key in keys:
        derived = zlib.crc32(f"{key!r}".encode(), derived)

    return derived


def make_rng(seed: int | None, *keys: Any) -> np.random.Generator:
    if seed is None:
        return np.random.default_rng()

    return np.random.default_rng(derive_seed(seed, *keys))


class temp_seed:
    _seed: int | None
    _random_state: tuple[Any, ...]
    _np_random_state: dict[str, Any]
    _torch_rng_state: torch.Tensor

    def __init__(self, seed: int | None) -> None:
        self._seed = _check_seed(seed)

    def __enter__(self) -> None:
        if self._seed is not None:
            # Store random states
            self._random_state = random.getstate()
            self._np_random_state = np.random.get_state()
            self._torch_rng_state = torch.get_rng_state()

            # Seed everything we draw from on the host
            random.seed(self._seed)
            np.random.seed(self._seed)
            torch.manual_seed(self._seed)

    def __exit__(self, exc_type, exc_value, traceback) -> None:
        if self._seed is not None:
            # Restore random states
            random.setstate(self._random_state)
            np.random.set_state(self._np_random_state)
            torch.set_rng_state(self._torch_rng_state)
