"""Configuration encoding: raw values to fixed-dimension feature vectors.

Numeric parameters are min-max scaled to [0, 1] using the declared search
space bounds (after a log transform where the space says so); categorical
parameters are one-hot encoded over their declared choices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .benchmark import Benchmark, ParamSpec, SearchSpace


class EncodingError(ValueError):
    """A raw value cannot be encoded under the search space."""


@dataclass(frozen=True)
class Encoder:
    """Deterministic, stateless transform from raw configs to feature vectors.

    Scaling bounds come from the search space declaration, never from data,
    so encoding does not depend on what has been observed.
    """

    space: SearchSpace

    @property
    def dimension(self) -> int:
        return sum(
            1 if p.kind == "numeric" else len(p.choices) for p in self.space.params
        )


def build_encoder(space: SearchSpace) -> Encoder:
    return Encoder(space=space)


def _encode_numeric(spec: ParamSpec, value: Any) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise EncodingError(f"param {spec.name!r}: non-numeric value {value!r}")
    v = float(value)
    if not spec.low <= v <= spec.high:
        raise EncodingError(
            f"param {spec.name!r}: value {v} outside [{spec.low}, {spec.high}]"
        )
    if spec.log_scale:
        return (math.log(v) - math.log(spec.low)) / (
            math.log(spec.high) - math.log(spec.low)
        )
    return (v - spec.low) / (spec.high - spec.low)


def encode(encoder: Encoder, raw_config: Mapping[str, Any]) -> np.ndarray:
    """Encode one raw configuration to a float64 vector.

    Feature order follows the search space param order, with each
    categorical block in declared-choice order.
    """
    features: list[float] = []
    for spec in encoder.space.params:
        if spec.name not in raw_config:
            raise EncodingError(f"param {spec.name!r}: missing from config")
        value = raw_config[spec.name]
        if spec.kind == "numeric":
            features.append(_encode_numeric(spec, value))
        else:
            if value not in spec.choices:
                raise EncodingError(
                    f"param {spec.name!r}: unknown category {value!r} "
                    f"(choices: {list(spec.choices)})"
                )
            block = [0.0] * len(spec.choices)
            block[spec.choices.index(value)] = 1.0
            features.extend(block)
    return np.asarray(features, dtype=np.float64)


def encode_benchmark(encoder: Encoder, benchmark: Benchmark) -> np.ndarray:
    """Encode every benchmark configuration; row i is config i."""
    return np.stack(
        [encode(encoder, benchmark.config_mapping(i)) for i in range(benchmark.n_configs)]
    )


def normalize_budget(j: int, max_budget: int) -> float:
    """Map budget j in [1, B] to (0, 1] by dividing by B."""
    if not 1 <= j <= max_budget:
        raise ValueError(f"budget {j} outside [1, {max_budget}]")
    return j / max_budget
