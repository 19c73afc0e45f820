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
class BatchFuseError(Exception):
    pass


# Raised by `_checks` on invalid arguments (a usage error)
class _CheckError(BatchFuseError):
    pass


class ConfigError(_CheckError):
    pass


class ShapeError(_CheckError):
    pass


class NumericError(_CheckError):
    pass


class FitError(_CheckError):
    pass


class RoutingError(BatchFuseError):
    pass


class StateError(BatchFuseError):
    pass
