"""Covariance Matrix Adaptation Evolution Strategy with ask/tell interface.

Implements the standard strategy: log-decreasing recombination weights,
cumulative step-size adaptation, rank-1 plus rank-mu covariance update, with
learning rates derived from dimension and mu_eff. On top of the plain
strategy sit three engine-specific pieces: a logistic bounds codec mapping
the open parameter box to an unconstrained search space, a quadratic prior
penalty pulling candidates toward a prompt-derived anchor, and step-size
boosting when population embedding diversity collapses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BoundaryValue,
    CovarianceError,
    InvalidFitness,
    PopulationMismatch,
)
from .params import N_PARAMS, PARAM_BOUNDS, SwarmParams, normalize_params

_CONDITION_LIMIT = 1e14
_REPAIR_RIDGE = 1e-12
_BOUNDARY_NUDGE = 1e-6


class IdentityCodec:
    """No-op codec for benchmark objectives defined directly on z."""

    def __init__(self, dimension: int):
        self.dimension = dimension

    def encode(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64).copy()

    def decode(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64).copy()


class BoundsCodec:
    """Per-dimension logistic squash between the parameter bounds.

    decode maps all of R into the open box, so sampling never needs
    resampling or repair; encode is its exact inverse on interior points.
    """

    dimension = N_PARAMS

    def encode(self, params) -> np.ndarray:
        x = params.as_array() if isinstance(params, SwarmParams) else np.asarray(
            params, dtype=np.float64
        )
        z = np.empty(N_PARAMS)
        for i, (name, lo, hi, _) in enumerate(PARAM_BOUNDS):
            t = (x[i] - lo) / (hi - lo)
            if t <= 0.0 or t >= 1.0:
                raise BoundaryValue(f"{name}={x[i]} saturates [{lo}, {hi}]")
            z[i] = math.log(t / (1.0 - t))
        return z

    def decode(self, z) -> SwarmParams:
        z = np.asarray(z, dtype=np.float64)
        x = np.empty(N_PARAMS)
        for i, (_, lo, hi, _) in enumerate(PARAM_BOUNDS):
            x[i] = lo + (hi - lo) / (1.0 + math.exp(-z[i]))
        return SwarmParams(*x)

    def encode_nudged(self, params) -> np.ndarray:
        """encode, nudging boundary-saturated values inward first."""
        x = params.as_array() if isinstance(params, SwarmParams) else np.asarray(
            params, dtype=np.float64
        )
        x = x.copy()
        for i, (_, lo, hi, _) in enumerate(PARAM_BOUNDS):
            margin = _BOUNDARY_NUDGE * (hi - lo)
            x[i] = min(max(x[i], lo + margin), hi - margin)
        return self.encode(x)


@dataclass
class CmaConfig:
    population_size: int = 16
    sigma0: float = 0.3
    dimension: int = N_PARAMS
    max_generations: int = 200
    seed: int = 0
    prior_lambda: float = 0.05
    diversity_threshold: float = 0.05
    noise_boost: float = 1.3
    sigma_max: float = 1.0

    @property
    def mu(self) -> int:
        return self.population_size // 2

    def __post_init__(self):
        if not 2 <= self.mu < self.population_size:
            raise ValueError("need 2 <= mu < population_size")
        if not 0.0 < self.sigma0 <= self.sigma_max:
            raise ValueError("need 0 < sigma0 <= sigma_max")


class _Strategy:
    """Fixed strategy constants as functions of dimension and population."""

    def __init__(self, dimension: int, population_size: int):
        d = dimension
        lam = population_size
        mu = lam // 2
        w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        self.weights = w / w.sum()
        self.mu = mu
        self.mu_eff = 1.0 / float(self.weights @ self.weights)
        self.c_sigma = (self.mu_eff + 2.0) / (d + self.mu_eff + 5.0)
        # Half the textbook damping: the textbook value makes sigma lag the
        # optimal step size badly at small dimensions and short budgets
        # (measured ~0.09 vs attainable ~0.2 log-progress per generation on
        # the 10-d sphere). Halving keeps sigma tracking tight without
        # destabilizing valley-following (Rosenbrock margins stay >10x).
        self.d_sigma = 0.5 * (
            1.0
            + 2.0 * max(0.0, math.sqrt((self.mu_eff - 1.0) / (d + 1.0)) - 1.0)
            + self.c_sigma
        )
        self.c_c = (4.0 + self.mu_eff / d) / (d + 4.0 + 2.0 * self.mu_eff / d)
        self.c_1 = 2.0 / ((d + 1.3) ** 2 + self.mu_eff)
        self.c_mu = min(
            1.0 - self.c_1,
            2.0 * (self.mu_eff - 2.0 + 1.0 / self.mu_eff)
            / ((d + 2.0) ** 2 + self.mu_eff),
        )
        # E||N(0,I)||
        self.chi_n = math.sqrt(d) * (1.0 - 1.0 / (4.0 * d) + 1.0 / (21.0 * d * d))


@dataclass
class Candidate:
    z: np.ndarray
    params: object  # decoded: SwarmParams or raw vector (identity codec)
    loss: float | None = None


@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    C: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int
    rng: np.random.Generator
    config: CmaConfig
    codec: object
    strategy: _Strategy
    best_params: object = None
    best_loss: float = math.inf
    # eigendecomposition of C, refreshed by ask each generation
    _eig: tuple | None = field(default=None, repr=False)


def cma_init(theta_init, config: CmaConfig, codec=None) -> CmaState:
    """Fresh state centered on theta_init with isotropic covariance."""
    if codec is None:
        codec = (
            BoundsCodec() if config.dimension == N_PARAMS
            and isinstance(theta_init, SwarmParams)
            else IdentityCodec(config.dimension)
        )
    if isinstance(codec, BoundsCodec):
        mean = codec.encode_nudged(theta_init)
    else:
        mean = codec.encode(theta_init)
    d = config.dimension
    if mean.shape[0] != d:
        raise ValueError(f"theta_init dimension {mean.shape[0]} != {d}")
    return CmaState(
        mean=mean,
        sigma=config.sigma0,
        C=np.eye(d),
        p_sigma=np.zeros(d),
        p_c=np.zeros(d),
        generation=0,
        rng=np.random.Generator(np.random.PCG64(config.seed)),
        config=config,
        codec=codec,
        strategy=_Strategy(d, config.population_size),
    )


def _decompose(state: CmaState) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition with symmetry enforcement and conditioning repair."""
    C = 0.5 * (state.C + state.C.T)
    if not np.all(np.isfinite(C)):
        raise CovarianceError("covariance contains non-finite entries")
    eigvals, basis = np.linalg.eigh(C)
    if eigvals[0] <= 0.0 or eigvals[-1] / max(eigvals[0], 1e-300) > _CONDITION_LIMIT:
        C = C + (_REPAIR_RIDGE * np.trace(C)) * np.eye(C.shape[0])
        eigvals, basis = np.linalg.eigh(C)
        if eigvals[0] <= 0.0:
            raise CovarianceError(
                f"covariance not positive definite (min eigenvalue {eigvals[0]})"
            )
    state.C = C
    state._eig = (eigvals, basis)
    return eigvals, basis


def cma_ask(state: CmaState) -> list[Candidate]:
    """Sample the generation's population; deterministic given rng state."""
    eigvals, basis = _decompose(state)
    scale = np.sqrt(eigvals)
    out = []
    for _ in range(state.config.population_size):
        step = basis @ (scale * state.rng.standard_normal(state.config.dimension))
        z = state.mean + state.sigma * step
        out.append(Candidate(z=z, params=state.codec.decode(z)))
    return out


def cma_tell(state: CmaState, candidates: list[Candidate]) -> CmaState:
    """Rank candidates and update mean, paths, covariance, and step size."""
    cfg = state.config
    st = state.strategy
    d = cfg.dimension
    if len(candidates) != cfg.population_size:
        raise PopulationMismatch(
            f"expected {cfg.population_size} candidates, got {len(candidates)}"
        )
    losses = np.empty(len(candidates))
    for i, c in enumerate(candidates):
        if c.loss is None or not math.isfinite(c.loss):
            raise InvalidFitness(f"candidate {i} has loss {c.loss!r}")
        losses[i] = c.loss
    order = np.argsort(losses, kind="stable")  # ties resolved by index

    selected = np.stack([candidates[int(i)].z for i in order[:st.mu]])
    mean_old = state.mean
    mean_new = st.weights @ selected
    y_i = (selected - mean_old) / state.sigma
    y_w = (mean_new - mean_old) / state.sigma

    if state._eig is None:
        _decompose(state)
    eigvals, basis = state._eig
    inv_sqrt = basis @ ((basis / np.sqrt(eigvals)).T)

    c_s = st.c_sigma
    state.p_sigma = (1.0 - c_s) * state.p_sigma + math.sqrt(
        c_s * (2.0 - c_s) * st.mu_eff
    ) * (inv_sqrt @ y_w)
    ps_norm = float(np.linalg.norm(state.p_sigma))
    gen1 = state.generation + 1
    h_sigma = float(
        ps_norm / math.sqrt(1.0 - (1.0 - c_s) ** (2 * gen1)) / st.chi_n
        < 1.4 + 2.0 / (d + 1.0)
    )

    c_c = st.c_c
    state.p_c = (1.0 - c_c) * state.p_c + h_sigma * math.sqrt(
        c_c * (2.0 - c_c) * st.mu_eff
    ) * y_w

    rank_mu = (y_i * st.weights[:, None]).T @ y_i
    delta_h = (1.0 - h_sigma) * c_c * (2.0 - c_c)
    state.C = (
        (1.0 - st.c_1 - st.c_mu) * state.C
        + st.c_1 * (np.outer(state.p_c, state.p_c) + delta_h * state.C)
        + st.c_mu * rank_mu
    )

    state.sigma = min(
        state.sigma * math.exp((c_s / st.d_sigma) * (ps_norm / st.chi_n - 1.0)),
        cfg.sigma_max,
    )

    state.mean = mean_new
    best = candidates[int(order[0])]
    if best.loss < state.best_loss:
        state.best_loss = float(best.loss)
        state.best_params = best.params
    state.generation += 1
    state._eig = None
    return state


def prior_penalized_fitness(loss: float, params, theta_prompt,
                            prior_lambda: float) -> float:
    """Add a quadratic pull toward the prompt-derived anchor, measured in
    bounds-normalized coordinates so every dimension weighs equally."""
    if prior_lambda == 0.0:
        return loss
    delta = normalize_params(params) - normalize_params(theta_prompt)
    return loss + prior_lambda * float(delta @ delta)


def population_diversity(embeddings) -> float:
    """Mean pairwise cosine distance; 0 for a single embedding."""
    from .errors import EmptyInput

    n = len(embeddings)
    if n == 0:
        raise EmptyInput("no embeddings")
    if n == 1:
        return 0.0
    total = 0.0
    pairs = 0
    for i in range(n):
        for j in range(i + 1, n):
            total += 1.0 - float(
                np.dot(embeddings[i], embeddings[j])
            )
            pairs += 1
    return total / pairs


def apply_diversity_noise(state: CmaState, diversity: float,
                          config: CmaConfig) -> bool:
    """Boost step size and jiggle the mean when diversity collapses.

    Returns True when an injection happened (recorded per generation).
    """
    if diversity >= config.diversity_threshold:
        return False
    state.sigma = min(state.sigma * config.noise_boost, config.sigma_max)
    state.mean = state.mean + state.rng.standard_normal(
        config.dimension
    ) * (0.1 * state.sigma)
    return True
