"""The six behavioral coefficients the optimizer searches over."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameter

# (name, lower, upper, lower_open) per dimension. The search space the
# optimizer explores is exactly these six coefficients.
PARAM_BOUNDS = (
    ("neighbor_radius", 0.0, 0.5, True),
    ("max_speed", 0.001, 0.1, True),
    ("alignment_w", 0.0, 2.0, False),
    ("cohesion_w", 0.0, 2.0, False),
    ("separation_w", 0.0, 2.0, False),
    ("noise_sigma", 0.0, 0.05, False),
)

PARAM_NAMES = tuple(b[0] for b in PARAM_BOUNDS)
N_PARAMS = len(PARAM_BOUNDS)

# Open lower bounds are clamped to lo + OPEN_MARGIN * range so a validated
# vector never sits on an excluded endpoint.
OPEN_MARGIN = 1e-6


def _effective_lower(lo: float, hi: float, lower_open: bool) -> float:
    return lo + OPEN_MARGIN * (hi - lo) if lower_open else lo


@dataclass(frozen=True)
class SwarmParams:
    """Validated behavior coefficients; construct via validate_params."""

    neighbor_radius: float
    max_speed: float
    alignment_w: float
    cohesion_w: float
    separation_w: float
    noise_sigma: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [getattr(self, name) for name in PARAM_NAMES], dtype=np.float64
        )

    @staticmethod
    def from_array(values) -> "SwarmParams":
        params, _ = validate_params(values)
        return params


def validate_params(raw) -> tuple[SwarmParams, tuple[bool, ...]]:
    """Clamp a raw 6-vector into bounds.

    Returns the clamped params and a per-field flag that is True where
    clamping changed the value. NaN or infinite entries are rejected.
    """
    values = np.asarray(raw, dtype=np.float64).reshape(-1)
    if values.shape[0] != N_PARAMS:
        raise InvalidParameter(
            f"expected {N_PARAMS} parameters, got {values.shape[0]}"
        )
    clamped = []
    flags = []
    for value, (name, lo, hi, lower_open) in zip(values, PARAM_BOUNDS):
        value = float(value)
        if not math.isfinite(value):
            raise InvalidParameter(f"{name} is not finite: {value!r}")
        lo_eff = _effective_lower(lo, hi, lower_open)
        fixed = min(max(value, lo_eff), hi)
        clamped.append(fixed)
        flags.append(fixed != value)
    return SwarmParams(*clamped), tuple(flags)


def normalize_params(params) -> np.ndarray:
    """Map each dimension to [0, 1] by its bounds."""
    values = params.as_array() if isinstance(params, SwarmParams) else np.asarray(
        params, dtype=np.float64
    )
    out = np.empty(N_PARAMS)
    for i, (_, lo, hi, _) in enumerate(PARAM_BOUNDS):
        out[i] = (values[i] - lo) / (hi - lo)
    return out


def denormalize_params(unit) -> np.ndarray:
    """Inverse of normalize_params (no clamping)."""
    unit = np.asarray(unit, dtype=np.float64)
    out = np.empty(N_PARAMS)
    for i, (_, lo, hi, _) in enumerate(PARAM_BOUNDS):
        out[i] = lo + unit[i] * (hi - lo)
    return out
