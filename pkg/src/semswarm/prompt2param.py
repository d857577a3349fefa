"""Prompt-to-parameter mapping: a ridge head over frozen text embeddings.

A small bundled corpus of prompt/parameter pairs trains a closed-form
linear map from the 512-d text embedding space to the six behavior
coefficients. Encoding a prompt yields the starting configuration of a run
and the directional prior that keeps biasing the search afterwards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import DatasetTooSmall, DimensionError, EmptyPrompt, SingularSystem
from .params import SwarmParams, validate_params
from .semantic import EMBED_DIM

MIN_TRAINING_ENTRIES = 10
DEFAULT_RIDGE_LAMBDA = 0.1

# singular values below this fraction of the largest are treated as zero
_RANK_TOL = 1e-10


@dataclass(frozen=True)
class PromptParamDataset:
    entries: tuple  # of (prompt, SwarmParams)

    def __len__(self) -> int:
        return len(self.entries)

    @staticmethod
    def from_pairs(pairs) -> "PromptParamDataset":
        entries = []
        for prompt, raw in pairs:
            if not prompt:
                raise EmptyPrompt("dataset contains an empty prompt")
            params, _ = validate_params(raw)
            entries.append((prompt, params))
        return PromptParamDataset(tuple(entries))

    @staticmethod
    def from_json(text: str) -> "PromptParamDataset":
        rows = json.loads(text)
        return PromptParamDataset.from_pairs(
            (row["prompt"], row["params"]) for row in rows
        )


def bundled_dataset() -> PromptParamDataset:
    """The corpus shipped with the package."""
    text = resources.files("semswarm.data").joinpath(
        "prompt_params.json"
    ).read_text("utf-8")
    return PromptParamDataset.from_json(text)


@dataclass
class MappingModel:
    weights: np.ndarray  # (EMBED_DIM, 6)
    intercept: np.ndarray  # (6,)
    ridge_lambda: float
    training_loss: float  # mean squared error over the training set

    def predict(self, embedding) -> np.ndarray:
        e = np.asarray(embedding, dtype=np.float64).reshape(-1)
        if e.shape[0] != EMBED_DIM:
            raise DimensionError(f"embedding has {e.shape[0]} dims")
        return self.weights.T @ e + self.intercept


@dataclass(frozen=True)
class PromptEncoding:
    initial_params: SwarmParams  # starting configuration of the run
    prior_params: SwarmParams    # persistent directional prior


def train_mapping(dataset: PromptParamDataset, text_embedder,
                  ridge_lambda: float = DEFAULT_RIDGE_LAMBDA) -> MappingModel:
    """Closed-form ridge fit with an unpenalized intercept.

    Solves the regularized normal equations exactly through the SVD of the
    centered embedding matrix; at lambda=0 this is the minimum-norm
    least-squares solution.
    """
    if len(dataset) < MIN_TRAINING_ENTRIES:
        raise DatasetTooSmall(
            f"{len(dataset)} entries < {MIN_TRAINING_ENTRIES}"
        )
    if ridge_lambda < 0.0:
        raise ValueError("ridge_lambda must be >= 0")
    embeddings = []
    for prompt, _ in dataset.entries:
        e = np.asarray(text_embedder(prompt), dtype=np.float64).reshape(-1)
        if e.shape[0] != EMBED_DIM:
            raise DimensionError(
                f"text embedder returned {e.shape[0]} dims, expected {EMBED_DIM}"
            )
        embeddings.append(e)
    X = np.stack(embeddings)
    Y = np.stack([p.as_array() for _, p in dataset.entries])

    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean

    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    if s.size == 0 or s[0] <= 0.0:
        raise SingularSystem("all prompts embed identically; nothing to fit")
    keep = s > _RANK_TOL * s[0]
    if ridge_lambda == 0.0 and not np.any(keep):
        raise SingularSystem(
            "system is singular at lambda=0; use ridge_lambda > 0"
        )
    s_kept = s[keep]
    if ridge_lambda == 0.0:
        gain = 1.0 / s_kept
    else:
        gain = s_kept / (s_kept ** 2 + ridge_lambda)
    weights = Vt[keep].T @ (gain[:, None] * (U[:, keep].T @ Yc))
    intercept = y_mean - weights.T @ x_mean

    residual = X @ weights + intercept - Y
    training_loss = float(np.mean(residual ** 2))
    return MappingModel(weights, intercept, float(ridge_lambda), training_loss)


def encode_prompt(model: MappingModel, prompt: str, text_embedder) -> PromptEncoding:
    """Predict behavior coefficients for a prompt and clamp them into bounds.

    The initial configuration and the prior coincide at encoding time; the
    prior stays fixed while the optimizer's mean moves away from it.
    """
    if not prompt or not prompt.strip():
        raise EmptyPrompt("prompt is empty")
    prediction = model.predict(text_embedder(prompt))
    params, _ = validate_params(prediction)
    return PromptEncoding(initial_params=params, prior_params=params)
