"""Tabular learning-curve benchmarks with incremental budget accounting.

A benchmark is an immutable table of precomputed validation curves, one per
configuration, serving as the simulated objective. Continuing a
configuration from budget j to j + b is charged only the b extra epochs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple

import numpy as np

from .seeding import named_rng

META_FILENAME = "meta.json"
CURVES_FILENAME = "curves.jsonl"


class BenchmarkError(ValueError):
    """A benchmark directory or record violates the schema."""


@dataclass(frozen=True)
class ParamSpec:
    """One dimension of the search space."""

    name: str
    kind: str  # "numeric" | "categorical"
    low: float | None = None
    high: float | None = None
    log_scale: bool = False
    choices: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.name:
            raise BenchmarkError("param name must be non-empty")
        if self.kind == "numeric":
            if self.low is None or self.high is None:
                raise BenchmarkError(f"param {self.name!r}: numeric params need bounds")
            if not (math.isfinite(self.low) and math.isfinite(self.high)):
                raise BenchmarkError(f"param {self.name!r}: bounds must be finite")
            if not self.low < self.high:
                raise BenchmarkError(
                    f"param {self.name!r}: low {self.low} must be < high {self.high}"
                )
            if self.log_scale and self.low <= 0:
                raise BenchmarkError(
                    f"param {self.name!r}: log_scale requires low > 0, got {self.low}"
                )
        elif self.kind == "categorical":
            if not self.choices:
                raise BenchmarkError(f"param {self.name!r}: choices must be non-empty")
            if len(set(self.choices)) != len(self.choices):
                raise BenchmarkError(f"param {self.name!r}: duplicate choices")
        else:
            raise BenchmarkError(f"param {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class SearchSpace:
    """Ordered list of parameter specs."""

    params: tuple[ParamSpec, ...]

    def __post_init__(self) -> None:
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise BenchmarkError(f"duplicate param names: {names}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    def __getitem__(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def validate_value(self, spec: ParamSpec, value: Any) -> None:
        """Raise BenchmarkError if `value` is not a legal setting of `spec`."""
        if spec.kind == "numeric":
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise BenchmarkError(f"param {spec.name!r}: non-numeric value {value!r}")
            if not (spec.low <= float(value) <= spec.high):
                raise BenchmarkError(
                    f"param {spec.name!r}: value {value} outside "
                    f"[{spec.low}, {spec.high}]"
                )
        else:
            if value not in spec.choices:
                raise BenchmarkError(
                    f"param {spec.name!r}: unknown category {value!r} "
                    f"(choices: {list(spec.choices)})"
                )


@dataclass(frozen=True)
class Benchmark:
    """Immutable table of learning curves over a search space.

    `curves[i, j-1]` is the validation score (accuracy fraction in [0, 1],
    maximized) of configuration i after j epochs; every curve has length
    exactly `max_budget`. `epoch_seconds[i, j-1]` is the simulated duration
    of that epoch (defaults to 1.0).
    """

    name: str
    space: SearchSpace
    max_budget: int
    configs: tuple[tuple[Any, ...], ...]
    curves: np.ndarray
    epoch_seconds: np.ndarray

    def __post_init__(self) -> None:
        if self.max_budget < 1:
            raise BenchmarkError(f"max_budget must be >= 1, got {self.max_budget}")
        curves = np.asarray(self.curves, dtype=float)
        seconds = np.asarray(self.epoch_seconds, dtype=float)
        n = len(self.configs)
        if curves.shape != (n, self.max_budget):
            raise BenchmarkError(
                f"curves shape {curves.shape} != ({n}, {self.max_budget})"
            )
        if seconds.shape != (n, self.max_budget):
            raise BenchmarkError(
                f"epoch_seconds shape {seconds.shape} != ({n}, {self.max_budget})"
            )
        if not np.all(np.isfinite(curves)):
            bad = int(np.argwhere(~np.isfinite(curves))[0][0])
            raise BenchmarkError(f"config {bad}: non-finite score in curve")
        if curves.min() < 0.0 or curves.max() > 1.0:
            bad = int(np.argwhere((curves < 0.0) | (curves > 1.0))[0][0])
            raise BenchmarkError(f"config {bad}: score outside [0, 1]")
        if not np.all(np.isfinite(seconds)) or seconds.min() < 0.0:
            raise BenchmarkError("epoch_seconds must be finite and >= 0")
        for i, cfg in enumerate(self.configs):
            if len(cfg) != len(self.space.params):
                raise BenchmarkError(f"config {i}: wrong number of values")
            for spec, value in zip(self.space.params, cfg):
                try:
                    self.space.validate_value(spec, value)
                except BenchmarkError as exc:
                    raise BenchmarkError(f"config {i}: {exc}") from None
        curves.setflags(write=False)
        seconds.setflags(write=False)
        object.__setattr__(self, "curves", curves)
        object.__setattr__(self, "epoch_seconds", seconds)

    @property
    def n_configs(self) -> int:
        return len(self.configs)

    def config_mapping(self, config_index: int) -> dict[str, Any]:
        """Raw config values keyed by param name."""
        return dict(zip(self.space.names, self.configs[config_index]))

    def score(self, config_index: int, j: int) -> float:
        """Score of configuration `config_index` after `j` epochs (1-based)."""
        if not 1 <= j <= self.max_budget:
            raise ValueError(f"budget {j} outside [1, {self.max_budget}]")
        return float(self.curves[config_index, j - 1])

    def final_scores(self) -> np.ndarray:
        return self.curves[:, -1]


@dataclass
class BudgetLedger:
    """Per-run accounting of budget already spent on each configuration."""

    highest: dict[int, int] = field(default_factory=dict)
    cumulative_epochs: int = 0
    cumulative_seconds: float = 0.0

    def highest_budget(self, config_index: int) -> int:
        return self.highest.get(config_index, 0)


class QueryResult(NamedTuple):
    score: float
    incremental_epochs: int
    incremental_seconds: float


def query(
    benchmark: Benchmark, ledger: BudgetLedger, config_index: int, j: int
) -> QueryResult:
    """Evaluate configuration `config_index` at budget `j`.

    Only the epochs beyond the highest budget previously queried for this
    configuration are charged; re-reading an already-reached budget is free.
    """
    if not 0 <= config_index < benchmark.n_configs:
        raise ValueError(f"config_index {config_index} outside [0, {benchmark.n_configs})")
    if not 1 <= j <= benchmark.max_budget:
        raise ValueError(f"budget {j} outside [1, {benchmark.max_budget}]")
    previous = ledger.highest_budget(config_index)
    epochs = max(0, j - previous)
    seconds = float(benchmark.epoch_seconds[config_index, previous:j].sum()) if epochs else 0.0
    if epochs:
        ledger.highest[config_index] = j
        ledger.cumulative_epochs += epochs
        ledger.cumulative_seconds += seconds
    return QueryResult(benchmark.score(config_index, j), epochs, seconds)


def best_score(benchmark: Benchmark) -> float:
    """Best score at full budget over all configurations (the regret target)."""
    if benchmark.n_configs == 0:
        raise BenchmarkError("benchmark is empty")
    return float(benchmark.final_scores().max())


# ---------------------------------------------------------------------------
# loading / saving
# ---------------------------------------------------------------------------


def _space_from_meta(raw: list[dict[str, Any]]) -> SearchSpace:
    params = []
    for entry in raw:
        kind = entry.get("kind")
        if kind == "numeric":
            params.append(
                ParamSpec(
                    name=entry["name"],
                    kind="numeric",
                    low=float(entry["low"]),
                    high=float(entry["high"]),
                    log_scale=bool(entry.get("log_scale", False)),
                )
            )
        else:
            params.append(
                ParamSpec(
                    name=entry["name"],
                    kind=str(kind),
                    choices=tuple(entry.get("choices", ())),
                )
            )
    return SearchSpace(tuple(params))


def _space_to_meta(space: SearchSpace) -> list[dict[str, Any]]:
    out: list[dict[str, Any]] = []
    for p in space.params:
        if p.kind == "numeric":
            out.append(
                {
                    "name": p.name,
                    "kind": "numeric",
                    "low": p.low,
                    "high": p.high,
                    "log_scale": p.log_scale,
                }
            )
        else:
            out.append({"name": p.name, "kind": "categorical", "choices": list(p.choices)})
    return out


def load_benchmark(path: str | Path) -> Benchmark:
    """Load and validate a benchmark directory (meta.json + curves.jsonl)."""
    root = Path(path)
    meta_path = root / META_FILENAME
    curves_path = root / CURVES_FILENAME
    if not meta_path.is_file():
        raise BenchmarkError(f"missing {META_FILENAME} in {root}")
    if not curves_path.is_file():
        raise BenchmarkError(f"missing {CURVES_FILENAME} in {root}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BenchmarkError(f"{META_FILENAME}: invalid JSON: {exc}") from None

    for key in ("name", "max_budget", "space"):
        if key not in meta:
            raise BenchmarkError(f"{META_FILENAME}: missing key {key!r}")
    if meta.get("direction", "max") != "max":
        raise BenchmarkError(
            f"{META_FILENAME}: direction must be 'max' (scores are maximized accuracies); "
            f"got {meta.get('direction')!r}"
        )
    max_budget = int(meta["max_budget"])
    space = _space_from_meta(meta["space"])

    records: list[tuple[int, dict[str, Any]]] = []
    with curves_path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BenchmarkError(f"{CURVES_FILENAME}:{lineno}: invalid JSON: {exc}") from None
            if "id" not in rec or "config" not in rec or "curve" not in rec:
                raise BenchmarkError(f"{CURVES_FILENAME}:{lineno}: missing id/config/curve")
            records.append((int(rec["id"]), rec))
    if not records:
        raise BenchmarkError(f"{CURVES_FILENAME}: no records")

    records.sort(key=lambda item: item[0])
    ids = [rid for rid, _ in records]
    if ids != list(range(len(records))):
        raise BenchmarkError(f"ids must be contiguous 0..{len(records) - 1}, got {ids[:10]}...")

    names = space.names
    configs: list[tuple[Any, ...]] = []
    curves = np.empty((len(records), max_budget))
    seconds = np.ones((len(records), max_budget))
    for rid, rec in records:
        cfg = rec["config"]
        unknown = set(cfg) - set(names)
        if unknown:
            raise BenchmarkError(f"config {rid}: unknown param name(s) {sorted(unknown)}")
        missing = set(names) - set(cfg)
        if missing:
            raise BenchmarkError(f"config {rid}: missing param(s) {sorted(missing)}")
        configs.append(tuple(cfg[name] for name in names))
        curve = rec["curve"]
        if len(curve) != max_budget:
            raise BenchmarkError(
                f"config {rid}: curve length {len(curve)} != max_budget {max_budget}"
            )
        curves[rid] = curve
        if "epoch_seconds" in rec:
            es = rec["epoch_seconds"]
            if len(es) != max_budget:
                raise BenchmarkError(
                    f"config {rid}: epoch_seconds length {len(es)} != max_budget {max_budget}"
                )
            seconds[rid] = es

    try:
        return Benchmark(
            name=str(meta["name"]),
            space=space,
            max_budget=max_budget,
            configs=tuple(configs),
            curves=curves,
            epoch_seconds=seconds,
        )
    except BenchmarkError as exc:
        raise BenchmarkError(f"{root}: {exc}") from None


def save_benchmark(benchmark: Benchmark, path: str | Path) -> Path:
    """Write a benchmark to `path` in the directory format read by load_benchmark."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": benchmark.name,
        "max_budget": benchmark.max_budget,
        "metric": "val_accuracy",
        "direction": "max",
        "space": _space_to_meta(benchmark.space),
    }
    (root / META_FILENAME).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    with (root / CURVES_FILENAME).open("w", encoding="utf-8") as fh:
        for i in range(benchmark.n_configs):
            rec = {
                "id": i,
                "config": benchmark.config_mapping(i),
                "curve": benchmark.curves[i].tolist(),
                "epoch_seconds": benchmark.epoch_seconds[i].tolist(),
            }
            fh.write(json.dumps(rec) + "\n")
    return root


# ---------------------------------------------------------------------------
# synthetic benchmarks
# ---------------------------------------------------------------------------

SYNTH_SPACE = SearchSpace(
    (
        ParamSpec("learning_rate", "numeric", low=1e-4, high=1e-1, log_scale=True),
        ParamSpec("momentum", "numeric", low=0.0, high=0.99),
        ParamSpec("activation", "categorical", choices=("relu", "tanh", "gelu")),
    )
)

_ACTIVATION_BONUS = {"relu": 1.0, "tanh": 0.6, "gelu": 0.2}


def _quality(lr: np.ndarray, momentum: np.ndarray, activation: np.ndarray) -> np.ndarray:
    """Smooth latent quality in [0, 1] as a function of the raw configuration."""
    t_lr = (np.log(lr) - np.log(1e-4)) / (np.log(1e-1) - np.log(1e-4))
    t_mom = momentum / 0.99
    bonus = np.array([_ACTIVATION_BONUS[a] for a in activation])
    q = 0.55 * np.exp(-(((t_lr - 0.55) / 0.25) ** 2)) + 0.3 * t_mom + 0.15 * bonus
    return np.clip(q, 0.0, 1.0)


def synth_benchmark(
    n_configs: int,
    max_budget: int,
    crossing_fraction: float,
    noise_sd: float,
    seed: int,
    name: str | None = None,
) -> Benchmark:
    """Generate a deterministic saturating-curve benchmark.

    Curves follow y(j) = a * (1 - exp(-b * j / B)) + noise, clipped to [0, 1].
    Regular configurations have rate b coupled to asymptote a, which keeps
    their ranking identical across budgets. A `crossing_fraction` share of
    configurations instead get a slow start (small b) with a high asymptote,
    so their early rank is poor but their final rank is good.
    """
    if n_configs < 2:
        raise ValueError(f"n_configs must be >= 2, got {n_configs}")
    if max_budget < 2:
        raise ValueError(f"max_budget must be >= 2, got {max_budget}")
    if not 0.0 <= crossing_fraction <= 1.0:
        raise ValueError(f"crossing_fraction must be in [0, 1], got {crossing_fraction}")
    if noise_sd < 0.0:
        raise ValueError(f"noise_sd must be >= 0, got {noise_sd}")

    rng = named_rng(seed, "synth-benchmark")
    lr = np.exp(rng.uniform(np.log(1e-4), np.log(1e-1), size=n_configs))
    momentum = rng.uniform(0.0, 0.99, size=n_configs)
    activation = rng.choice(list(_ACTIVATION_BONUS), size=n_configs)
    q = _quality(lr, momentum, activation)

    # Crossing-ness is independent of the configuration itself: only the
    # observed curve prefix reveals it.
    n_cross = int(round(crossing_fraction * n_configs))
    cross_idx = rng.choice(n_configs, size=n_cross, replace=False)
    is_cross = np.zeros(n_configs, dtype=bool)
    is_cross[cross_idx] = True

    a = np.where(is_cross, 0.85 + 0.13 * q, 0.30 + 0.60 * q)
    b = np.where(is_cross, 2.5 + 1.0 * q, 3.0 + 5.0 * q)

    j = np.arange(1, max_budget + 1)
    curves = a[:, None] * (1.0 - np.exp(-b[:, None] * j[None, :] / max_budget))
    if noise_sd > 0:
        curves = curves + noise_sd * rng.standard_normal(curves.shape)
    curves = np.clip(curves, 0.0, 1.0)

    configs = tuple(
        (float(lr[i]), float(momentum[i]), str(activation[i])) for i in range(n_configs)
    )
    if name is None:
        name = f"synth-n{n_configs}-b{max_budget}-c{crossing_fraction:g}-s{seed}"
    return Benchmark(
        name=name,
        space=SYNTH_SPACE,
        max_budget=max_budget,
        configs=configs,
        curves=curves,
        epoch_seconds=np.ones_like(curves),
    )
