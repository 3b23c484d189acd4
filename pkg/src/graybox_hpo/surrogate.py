"""Learning-curve-aware deep-kernel Gaussian Process surrogate.

The surrogate predicts the validation score of a configuration at a budget
from three inputs: the encoded configuration, the normalized budget, and the
observed score curve up to the previous budget. A small feature extractor
(dense + 1-D conv + global max pool + dense) maps each input triple to a
256-dim latent vector; a squared-exponential kernel over latents defines the
GP. Kernel and extractor parameters are trained jointly by minimizing
y' K^-1 y + log|K| with Adam, warm-started between refits.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .seeding import named_rng

logger = logging.getLogger(__name__)

HIDDEN_UNITS = 128
LATENT_UNITS = 256
CONV_CHANNELS = 4
CONV_KERNEL = 3
LEAKY_SLOPE = 0.01

NOISE_FLOOR = 1e-4
INIT_NOISE = 1e-2
JITTER_INIT = 1e-6
JITTER_MAX = 1e-2
LEARNING_RATE = 0.1
BATCH_SIZE = 64
MAX_EPOCHS = 1000
PATIENCE = 10

# (encoded config, curve prefix, budget) triple used for kernel inputs,
# training observations and posterior queries alike.
InputTriple = tuple[np.ndarray, Sequence[float], int]


class NumericalError(RuntimeError):
    """Kernel matrix remained non-positive-definite at the maximum jitter."""


@dataclass(frozen=True)
class Observation:
    """One training record: score of config `config_index` at budget `j`.

    `curve_prefix` holds the scores previously observed for this config at
    budgets 1..j-1 (empty at j=1).
    """

    config_index: int
    x: np.ndarray
    curve_prefix: tuple[float, ...]
    j: int
    y: float

    def __post_init__(self) -> None:
        if self.j < 1:
            raise ValueError(f"budget {self.j} must be >= 1")
        if len(self.curve_prefix) != self.j - 1:
            raise ValueError(
                f"curve_prefix length {len(self.curve_prefix)} != j-1 = {self.j - 1}"
            )


class History:
    """Ordered observation set with per-config contiguous budgets.

    Budgets for each config must arrive as 1, 2, 3, ... and every
    observation's curve prefix must equal the scores already recorded for
    that config, which is exactly what a one-step-at-a-time optimizer
    produces.
    """

    def __init__(self, max_budget: int):
        if max_budget < 1:
            raise ValueError(f"max_budget must be >= 1, got {max_budget}")
        self.max_budget = max_budget
        self.observations: list[Observation] = []
        self._scores: dict[int, list[float]] = {}

    def __len__(self) -> int:
        return len(self.observations)

    def append(self, obs: Observation) -> None:
        if obs.j > self.max_budget:
            raise ValueError(f"budget {obs.j} exceeds max budget {self.max_budget}")
        seen = self._scores.setdefault(obs.config_index, [])
        if obs.j != len(seen) + 1:
            raise ValueError(
                f"config {obs.config_index}: expected budget {len(seen) + 1}, got {obs.j}"
            )
        if tuple(obs.curve_prefix) != tuple(seen):
            raise ValueError(
                f"config {obs.config_index}: curve_prefix does not match "
                f"previously observed scores"
            )
        self.observations.append(obs)
        seen.append(obs.y)

    def highest_budget(self, config_index: int) -> int:
        return len(self._scores.get(config_index, ()))

    def observed_scores(self, config_index: int) -> tuple[float, ...]:
        return tuple(self._scores.get(config_index, ()))

    def config_indices(self) -> tuple[int, ...]:
        return tuple(self._scores)

    def triples(self) -> list[InputTriple]:
        return [(o.x, o.curve_prefix, o.j) for o in self.observations]

    def targets(self) -> np.ndarray:
        return np.array([o.y for o in self.observations], dtype=np.float64)


@dataclass(frozen=True)
class PosteriorPrediction:
    """Posterior mean and variance of the score at one queried triple."""

    mean: float
    variance: float


class CurveFeatureExtractor(nn.Module):
    """Maps (config, normalized budget, curve prefix) to a 256-dim latent.

    [x, j/B] goes through a 128-unit dense layer; the curve prefix goes
    through a width-3 conv with 4 channels and a global max pool restricted
    to the valid positions; both are concatenated into a 256-unit dense
    output. An empty prefix is represented as a single zero so pooling is
    always defined.
    """

    def __init__(self, input_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.dense1 = nn.Linear(input_dim + 1, HIDDEN_UNITS)
        self.conv = nn.Conv1d(1, CONV_CHANNELS, CONV_KERNEL, padding=CONV_KERNEL // 2)
        self.dense2 = nn.Linear(HIDDEN_UNITS + CONV_CHANNELS, LATENT_UNITS)
        self.double()

    def forward(
        self, x: Tensor, j_norm: Tensor, curves: Tensor, lengths: Tensor, use_curve: bool
    ) -> Tensor:
        h = torch.nn.functional.leaky_relu(
            self.dense1(torch.cat([x, j_norm.unsqueeze(1)], dim=1)), LEAKY_SLOPE
        )
        if use_curve:
            c = torch.nn.functional.leaky_relu(self.conv(curves.unsqueeze(1)), LEAKY_SLOPE)
            # Pool only over the positions backed by real curve entries;
            # zero padding beyond `lengths` never reaches the max.
            valid = torch.arange(curves.shape[1]).unsqueeze(0) < lengths.unsqueeze(1)
            c = c.masked_fill(~valid.unsqueeze(1), float("-inf"))
            pooled = c.max(dim=2).values
        else:
            pooled = torch.zeros(
                (x.shape[0], CONV_CHANNELS), dtype=x.dtype, device=x.device
            )
        return self.dense2(torch.cat([h, pooled], dim=1))


class RbfKernel(nn.Module):
    """Squared-exponential kernel with learned scales and observation noise."""

    def __init__(self):
        super().__init__()
        self.log_lengthscale = nn.Parameter(torch.tensor(0.0, dtype=torch.float64))
        self.log_outputscale = nn.Parameter(torch.tensor(0.0, dtype=torch.float64))
        self.log_noise = nn.Parameter(
            torch.tensor(math.log(INIT_NOISE - NOISE_FLOOR), dtype=torch.float64)
        )

    @property
    def lengthscale(self) -> Tensor:
        return torch.exp(self.log_lengthscale)

    @property
    def outputscale(self) -> Tensor:
        return torch.exp(self.log_outputscale)

    @property
    def noise_variance(self) -> Tensor:
        # Smooth positivity transform keeps the noise above the floor
        # without killing its gradient.
        return NOISE_FLOOR + torch.exp(self.log_noise)

    def matrix(self, za: Tensor, zb: Tensor, symmetric: bool = False) -> Tensor:
        sq = (
            (za * za).sum(dim=1, keepdim=True)
            + (zb * zb).sum(dim=1).unsqueeze(0)
            - 2.0 * za @ zb.T
        ).clamp_min(0.0)
        if symmetric:
            eye = torch.eye(za.shape[0], dtype=za.dtype)
            sq = sq * (1.0 - eye)  # exact zeros on the diagonal
        return self.outputscale * torch.exp(-sq / (2.0 * self.lengthscale**2))


class SurrogateState(nn.Module):
    """Trainable surrogate parameters plus target-standardization constants."""

    def __init__(self, input_dim: int, use_curve: bool = True):
        super().__init__()
        self.extractor = CurveFeatureExtractor(input_dim)
        self.kernel = RbfKernel()
        self.input_dim = input_dim
        self.use_curve = use_curve
        self.y_mean = 0.0
        self.y_sd = 1.0
        self.fit_warning = False
        self.fit_epochs = 0


def init_state(
    input_dim: int, rng: np.random.Generator, use_curve: bool = True
) -> SurrogateState:
    """Fresh state with fan-in-scaled uniform extractor weights."""
    state = SurrogateState(input_dim, use_curve=use_curve)
    with torch.no_grad():
        for layer in (state.extractor.dense1, state.extractor.conv, state.extractor.dense2):
            weight = layer.weight
            fan_in = int(np.prod(weight.shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(weight.shape))))
            layer.bias.copy_(
                torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.bias.shape)))
            )
    return state


# ---------------------------------------------------------------------------
# batching and feature extraction
# ---------------------------------------------------------------------------


def _batch_tensors(
    items: Sequence[InputTriple], max_budget: int
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Stack input triples into padded batch tensors (x, j_norm, curves, lengths)."""
    n = len(items)
    dim = len(items[0][0])
    max_len = max(1, max(len(prefix) for _, prefix, _ in items))
    xs = np.zeros((n, dim))
    j_norm = np.zeros(n)
    curves = np.zeros((n, max_len))
    lengths = np.zeros(n, dtype=np.int64)
    for i, (x, prefix, j) in enumerate(items):
        if not 1 <= j <= max_budget:
            raise ValueError(f"budget {j} outside [1, {max_budget}]")
        xs[i] = x
        j_norm[i] = j / max_budget
        if len(prefix):
            curves[i, : len(prefix)] = prefix
            lengths[i] = len(prefix)
        else:
            lengths[i] = 1  # single zero stands in for the empty prefix
    return (
        torch.from_numpy(xs),
        torch.from_numpy(j_norm),
        torch.from_numpy(curves),
        torch.from_numpy(lengths),
    )


def _latents(state: SurrogateState, batch: tuple[Tensor, Tensor, Tensor, Tensor]) -> Tensor:
    xs, j_norm, curves, lengths = batch
    return state.extractor(xs, j_norm, curves, lengths, state.use_curve)


def extract_features(
    state: SurrogateState,
    x: np.ndarray,
    curve_prefix: Sequence[float],
    j_norm: float,
) -> np.ndarray:
    """Latent feature vector for a single input triple (j already normalized)."""
    if not 0.0 < j_norm <= 1.0:
        raise ValueError(f"j_norm {j_norm} outside (0, 1]")
    prefix = np.asarray(curve_prefix, dtype=np.float64)
    length = max(1, len(prefix))
    curves = np.zeros((1, length))
    curves[0, : len(prefix)] = prefix
    with torch.no_grad():
        z = state.extractor(
            torch.from_numpy(np.asarray(x, dtype=np.float64)).unsqueeze(0),
            torch.tensor([j_norm], dtype=torch.float64),
            torch.from_numpy(curves),
            torch.tensor([length]),
            state.use_curve,
        )
    return z.squeeze(0).numpy()


def kernel_matrix(
    state: SurrogateState, inputs: Sequence[InputTriple], max_budget: int
) -> np.ndarray:
    """Deep-kernel Gram matrix over the given input triples."""
    if not inputs:
        raise ValueError("inputs must be non-empty")
    with torch.no_grad():
        z = _latents(state, _batch_tensors(inputs, max_budget))
        return state.kernel.matrix(z, z, symmetric=True).numpy()


# ---------------------------------------------------------------------------
# marginal-likelihood objective
# ---------------------------------------------------------------------------


def _standardization(ys: np.ndarray) -> tuple[float, float]:
    """Mean/sd used to standardize targets; sd falls back to 1.0 when degenerate."""
    mean = float(np.mean(ys))
    sd = float(np.std(ys))
    if not math.isfinite(sd) or sd < 1e-12:
        sd = 1.0
    return mean, sd


def _chol_with_jitter(kn: Tensor) -> tuple[Tensor, float]:
    """Cholesky factor of kn + jitter*I, escalating jitter 1e-6 .. 1e-2."""
    if not torch.isfinite(kn).all():
        raise NumericalError("kernel matrix contains non-finite entries")
    n = kn.shape[0]
    eye = torch.eye(n, dtype=kn.dtype)
    jitter = JITTER_INIT
    while jitter <= JITTER_MAX * (1 + 1e-12):
        chol, info = torch.linalg.cholesky_ex(kn + jitter * eye)
        if int(info) == 0 and torch.isfinite(chol).all():
            return chol, jitter
        jitter *= 10.0
    raise NumericalError(f"matrix not positive definite up to jitter {JITTER_MAX}")


def _nll_tensor(
    state: SurrogateState,
    batch: tuple[Tensor, Tensor, Tensor, Tensor],
    y_std: Tensor,
) -> Tensor:
    """y' (K + noise I)^-1 y + log|K + noise I| on standardized targets."""
    z = _latents(state, batch)
    kn = state.kernel.matrix(z, z, symmetric=True) + state.kernel.noise_variance * torch.eye(
        z.shape[0], dtype=z.dtype
    )
    chol, _ = _chol_with_jitter(kn)
    w = torch.linalg.solve_triangular(chol, y_std.unsqueeze(1), upper=False)
    quad = (w**2).sum()
    logdet = 2.0 * torch.log(torch.diagonal(chol)).sum()
    return quad + logdet


def nll(state: SurrogateState, history: History) -> float:
    """Training objective on the full history (standardized on the fly)."""
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    ys = history.targets()
    mean, sd = _standardization(ys)
    batch = _batch_tensors(history.triples(), history.max_budget)
    y_std = torch.from_numpy((ys - mean) / sd)
    with torch.no_grad():
        return float(_nll_tensor(state, batch, y_std))


def nll_gradients(state: SurrogateState, history: History) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of the objective for every parameter tensor."""
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    ys = history.targets()
    mean, sd = _standardization(ys)
    batch = _batch_tensors(history.triples(), history.max_budget)
    y_std = torch.from_numpy((ys - mean) / sd)
    state.zero_grad(set_to_none=True)
    loss = _nll_tensor(state, batch, y_std)
    loss.backward()
    grads: dict[str, np.ndarray] = {}
    for name, param in state.named_parameters():
        if param.grad is None:
            grads[name] = np.zeros(tuple(param.shape))
        else:
            grads[name] = param.grad.detach().numpy().copy()
    state.zero_grad(set_to_none=True)
    return grads


def flatten_params(state: SurrogateState) -> np.ndarray:
    """All parameters as one flat vector (named_parameters order)."""
    return np.concatenate(
        [p.detach().numpy().ravel() for _, p in state.named_parameters()]
    )


def set_flat_params(state: SurrogateState, flat: np.ndarray) -> None:
    """Inverse of flatten_params."""
    offset = 0
    with torch.no_grad():
        for _, p in state.named_parameters():
            size = p.numel()
            chunk = flat[offset : offset + size].reshape(tuple(p.shape))
            p.copy_(torch.from_numpy(np.ascontiguousarray(chunk)))
            offset += size
    if offset != flat.size:
        raise ValueError(f"flat vector length {flat.size} != parameter count {offset}")


def flatten_gradients(state: SurrogateState, history: History) -> np.ndarray:
    """nll_gradients flattened to match flatten_params ordering."""
    grads = nll_gradients(state, history)
    return np.concatenate(
        [grads[name].ravel() for name, _ in state.named_parameters()]
    )


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def fit(
    history: History,
    warm_start: SurrogateState | None = None,
    seed: int = 0,
    use_curve: bool = True,
) -> SurrogateState:
    """Train the surrogate on `history` by Adam descent on the objective.

    Warm starts reuse the previous parameters; otherwise the extractor is
    seeded randomly. Full-batch when the history is small; beyond 64
    observations each step optimizes a sampled 64-observation subset while
    early stopping tracks the full-batch objective. Returns the best state
    seen; on a numerical failure, returns the last finite state with
    `fit_warning` set.
    """
    from .seeding import named_rng

    if len(history) == 0:
        raise ValueError("history must be non-empty")

    if warm_start is not None:
        state = copy.deepcopy(warm_start)
        state.fit_warning = False
    else:
        input_dim = len(history.observations[0].x)
        state = init_state(input_dim, named_rng(seed, "extractor-init"), use_curve=use_curve)
    batch_rng = named_rng(seed, "minibatch")

    ys = history.targets()
    state.y_mean, state.y_sd = _standardization(ys)
    y_std_np = (ys - state.y_mean) / state.y_sd
    y_std = torch.from_numpy(y_std_np)
    batch = _batch_tensors(history.triples(), history.max_budget)
    n = len(history)

    optimizer = torch.optim.Adam(state.parameters(), lr=LEARNING_RATE)
    best_nll = math.inf
    best_params = {k: v.detach().clone() for k, v in state.state_dict().items()}
    epochs_no_improve = 0
    epochs_run = 0

    def _subset(indices: np.ndarray):
        xs, j_norm, curves, lengths = batch
        idx = torch.from_numpy(indices)
        return (xs[idx], j_norm[idx], curves[idx], lengths[idx]), y_std[idx]

    try:
        for epoch in range(MAX_EPOCHS):
            epochs_run = epoch + 1
            if n <= BATCH_SIZE:
                loss = _nll_tensor(state, batch, y_std)
                current = float(loss)
            else:
                with torch.no_grad():
                    current = float(_nll_tensor(state, batch, y_std))
                sub_batch, sub_y = _subset(
                    np.sort(batch_rng.choice(n, size=BATCH_SIZE, replace=False))
                )
                loss = _nll_tensor(state, sub_batch, sub_y)

            if math.isfinite(current) and current < best_nll:
                best_nll = current
                best_params = {k: v.detach().clone() for k, v in state.state_dict().items()}
                epochs_no_improve = 0
            else:
                epochs_no_improve += 1
                if epochs_no_improve >= PATIENCE:
                    break

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
    except NumericalError as exc:
        logger.warning("surrogate fit stopped after numerical failure: %s", exc)
        state.fit_warning = True

    state.load_state_dict(best_params)
    state.fit_epochs = epochs_run
    return state


# ---------------------------------------------------------------------------
# posterior prediction
# ---------------------------------------------------------------------------


def predict(
    state: SurrogateState, history: History, queries: Sequence[InputTriple]
) -> list[PosteriorPrediction]:
    """Posterior mean/variance at each query triple, de-standardized."""
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    if not queries:
        return []
    ys = history.targets()
    y_std = torch.from_numpy((ys - state.y_mean) / state.y_sd)
    with torch.no_grad():
        z_train = _latents(state, _batch_tensors(history.triples(), history.max_budget))
        z_query = _latents(state, _batch_tensors(list(queries), history.max_budget))
        kernel = state.kernel
        kn = kernel.matrix(z_train, z_train, symmetric=True) + kernel.noise_variance * torch.eye(
            z_train.shape[0], dtype=z_train.dtype
        )
        chol, _ = _chol_with_jitter(kn)
        k_star = kernel.matrix(z_train, z_query)
        w = torch.linalg.solve_triangular(chol, k_star, upper=False)
        u = torch.linalg.solve_triangular(chol, y_std.unsqueeze(1), upper=False)
        mean_std = (w.T @ u).squeeze(1)
        var_std = (kernel.outputscale - (w**2).sum(dim=0)).clamp_min(0.0)
    mean = mean_std.numpy() * state.y_sd + state.y_mean
    variance = var_std.numpy() * state.y_sd**2
    return [
        PosteriorPrediction(float(m), float(v)) for m, v in zip(mean, variance)
    ]


def predict_without_curve(
    state: SurrogateState, history: History, queries: Sequence[InputTriple]
) -> list[PosteriorPrediction]:
    """Ablation path: identical pipeline with the curve branch zeroed out."""
    ablated = copy.deepcopy(state)
    ablated.use_curve = False
    return predict(ablated, history, queries)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_state(state: SurrogateState, path: str | Path) -> Path:
    """Serialize a state to a JSON checkpoint."""
    ext = state.extractor
    payload = {
        "dense1": {
            "weight": ext.dense1.weight.detach().numpy().tolist(),
            "bias": ext.dense1.bias.detach().numpy().tolist(),
        },
        "conv": {
            "weight": ext.conv.weight.detach().numpy().tolist(),
            "bias": ext.conv.bias.detach().numpy().tolist(),
        },
        "dense2": {
            "weight": ext.dense2.weight.detach().numpy().tolist(),
            "bias": ext.dense2.bias.detach().numpy().tolist(),
        },
        "kernel": {
            "log_lengthscale": float(state.kernel.log_lengthscale),
            "log_outputscale": float(state.kernel.log_outputscale),
            "log_noise": float(state.kernel.log_noise),
        },
        "y_mean": state.y_mean,
        "y_sd": state.y_sd,
        "input_dim": state.input_dim,
        "use_curve": state.use_curve,
    }
    out = Path(path)
    out.write_text(json.dumps(payload), encoding="utf-8")
    return out


def load_state(path: str | Path) -> SurrogateState:
    """Rebuild a state from a JSON checkpoint written by save_state."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    state = SurrogateState(int(payload["input_dim"]), use_curve=bool(payload["use_curve"]))
    with torch.no_grad():
        for name, layer in (
            ("dense1", state.extractor.dense1),
            ("conv", state.extractor.conv),
            ("dense2", state.extractor.dense2),
        ):
            layer.weight.copy_(torch.tensor(payload[name]["weight"], dtype=torch.float64))
            layer.bias.copy_(torch.tensor(payload[name]["bias"], dtype=torch.float64))
        kern = payload["kernel"]
        state.kernel.log_lengthscale.copy_(torch.tensor(kern["log_lengthscale"]))
        state.kernel.log_outputscale.copy_(torch.tensor(kern["log_outputscale"]))
        state.kernel.log_noise.copy_(torch.tensor(kern["log_noise"]))
    state.y_mean = float(payload["y_mean"])
    state.y_sd = float(payload["y_sd"])
    return state
