"""Deterministic boids-style simulation on the unit torus."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import EmptyWorld
from .params import SwarmParams

# Seeded generator used everywhere; the identifier goes into run logs so a
# log records exactly which stream produced it.
RNG_ALGORITHM_ID = "pcg64"


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class Frame:
    """Positions/velocities snapshot of one step."""

    positions: np.ndarray
    velocities: np.ndarray

    def digest(self) -> int:
        """64-bit content hash, stable across runs."""
        import hashlib

        h = hashlib.blake2b(digest_size=8)
        h.update(np.ascontiguousarray(self.positions).tobytes())
        h.update(np.ascontiguousarray(self.velocities).tobytes())
        return int.from_bytes(h.digest(), "big")


@dataclass
class Trajectory:
    frames: list[Frame]
    params: SwarmParams

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class SwarmWorld:
    """Mutable simulation state, owned by a single stepping loop."""

    positions: np.ndarray
    velocities: np.ndarray
    rng: np.random.Generator
    step_count: int = 0

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    def frame(self) -> Frame:
        return Frame(self.positions.copy(), self.velocities.copy())


def init_world(params: SwarmParams, n_agents: int, seed) -> SwarmWorld:
    """Uniform random positions; velocities with uniform direction and
    magnitude uniform in (0, max_speed]."""
    if n_agents < 1:
        raise EmptyWorld("n_agents must be >= 1")
    rng = make_rng(seed)
    positions = rng.random((n_agents, 2))
    angles = rng.random(n_agents) * 2.0 * np.pi
    # 1 - u maps [0, 1) onto (0, 1], keeping speeds strictly positive
    speeds = (1.0 - rng.random(n_agents)) * params.max_speed
    velocities = np.column_stack(
        (speeds * np.cos(angles), speeds * np.sin(angles))
    )
    return SwarmWorld(positions, velocities, rng)


def neighbors_within(world: SwarmWorld, agent_index: int, radius: float) -> list[int]:
    """Indices j != agent_index closer than radius (toroidal), sorted."""
    n = world.n_agents
    if not 0 <= agent_index < n:
        raise IndexError(f"agent index {agent_index} out of range for {n} agents")
    if radius <= 0.0:
        return []
    n_cells = kernels.grid_cells_for_radius(radius)
    cell_start, order = kernels.build_grid(world.positions, n_cells)
    out = np.empty(max(n - 1, 1), np.int64)
    count = kernels.query_radius(
        world.positions, agent_index, radius, cell_start, order, n_cells, out
    )
    return sorted(int(j) for j in out[:count])


# Interaction table for a single-species world.
_SINGLE_SPECIES_MODE = np.array([[kernels.PAIR_FULL]], dtype=np.int8)


def step_world(world: SwarmWorld, params: SwarmParams) -> SwarmWorld:
    """Advance one synchronous step in place and return the world."""
    n = world.n_agents
    params_table = np.array(
        [[params.neighbor_radius, params.max_speed, params.alignment_w,
          params.cohesion_w, params.separation_w]]
    )
    species = np.zeros(n, np.int32)
    noise = world.rng.standard_normal((n, 2)) * params.noise_sigma
    n_cells = kernels.grid_cells_for_radius(params.neighbor_radius)
    cell_start, order = kernels.build_grid(world.positions, n_cells)
    out_pos = np.empty_like(world.positions)
    out_vel = np.empty_like(world.velocities)
    kernels.step_kernel(
        world.positions, world.velocities, species, params_table,
        _SINGLE_SPECIES_MODE, noise, n_cells, cell_start, order,
        out_pos, out_vel,
    )
    world.positions = out_pos
    world.velocities = out_vel
    world.step_count += 1
    return world


def run_simulation(params: SwarmParams, n_agents: int, steps: int, seed) -> Trajectory:
    """Run `steps` updates, recording every frame (steps + 1 total)."""
    world = init_world(params, n_agents, seed)
    frames = [world.frame()]
    for _ in range(steps):
        step_world(world, params)
        frames.append(world.frame())
    return Trajectory(frames, params)


def mean_nearest_neighbor_distance(positions: np.ndarray) -> float:
    """Mean over agents of the toroidal distance to the nearest other agent."""
    d = kernels.nearest_neighbor_distances(np.asarray(positions, dtype=np.float64))
    return float(d.mean())
