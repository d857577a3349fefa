"""Numba kernels: toroidal grid neighbor search and the swarm update rule.

All kernels iterate agents and neighbors in a fixed order so results are
reproducible run to run. The pair_mode table drives cross-species behavior
in the shared ecosystem; single-species worlds use a 1x1 table of PAIR_FULL.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

# Cross-species interaction modes.
PAIR_IGNORE = 0  # neighbor contributes nothing
PAIR_FULL = 1    # alignment + cohesion + separation (same species)
PAIR_MERGE = 2   # alignment + cohesion only
PAIR_REPEL = 3   # separation only, weight tripled

SEPARATION_RADIUS_FACTOR = 0.4
SEPARATION_EPS = 1e-6
REPEL_SEPARATION_BOOST = 3.0


def grid_cells_for_radius(radius: float) -> int:
    """Cell count per axis such that cell size >= radius."""
    if radius <= 0.0 or radius >= 1.0:
        return 1
    return max(1, int(1.0 / radius))


@njit(cache=True)
def build_grid(positions, n_cells):
    """Counting-sort agents into an n_cells x n_cells toroidal grid.

    Returns (cell_start, order): the agents of cell c = cx * n_cells + cy
    are order[cell_start[c]:cell_start[c + 1]], ascending by agent index.
    """
    n = positions.shape[0]
    n_total = n_cells * n_cells
    cell_of = np.empty(n, np.int64)
    cell_start = np.zeros(n_total + 1, np.int64)
    for i in range(n):
        cx = int(positions[i, 0] * n_cells)
        cy = int(positions[i, 1] * n_cells)
        if cx >= n_cells:
            cx = n_cells - 1
        if cy >= n_cells:
            cy = n_cells - 1
        c = cx * n_cells + cy
        cell_of[i] = c
        cell_start[c + 1] += 1
    for c in range(n_total):
        cell_start[c + 1] += cell_start[c]
    order = np.empty(n, np.int64)
    fill = cell_start[:-1].copy()
    for i in range(n):
        c = cell_of[i]
        order[fill[c]] = i
        fill[c] += 1
    return cell_start, order


@njit(cache=True)
def _axis_neighbors(c, n_cells, out):
    """Distinct wrapped cells {c-1, c, c+1} mod n_cells; returns the count."""
    count = 0
    for d in range(-1, 2):
        w = (c + d) % n_cells
        seen = False
        for t in range(count):
            if out[t] == w:
                seen = True
                break
        if not seen:
            out[count] = w
            count += 1
    return count


@njit(cache=True)
def query_radius(positions, agent, radius, cell_start, order, n_cells, out):
    """Indices j != agent with toroidal distance < radius, into out.

    Cell size must be >= radius for the 3x3 neighborhood to be complete.
    Returns the neighbor count; out must have room for n - 1 entries.
    """
    r2 = radius * radius
    px = positions[agent, 0]
    py = positions[agent, 1]
    cx = int(px * n_cells)
    cy = int(py * n_cells)
    if cx >= n_cells:
        cx = n_cells - 1
    if cy >= n_cells:
        cy = n_cells - 1
    xs = np.empty(3, np.int64)
    ys = np.empty(3, np.int64)
    nx = _axis_neighbors(cx, n_cells, xs)
    ny = _axis_neighbors(cy, n_cells, ys)
    count = 0
    for a in range(nx):
        for b in range(ny):
            c = xs[a] * n_cells + ys[b]
            for t in range(cell_start[c], cell_start[c + 1]):
                j = order[t]
                if j == agent:
                    continue
                dx = positions[j, 0] - px
                dy = positions[j, 1] - py
                if dx > 0.5:
                    dx -= 1.0
                elif dx < -0.5:
                    dx += 1.0
                if dy > 0.5:
                    dy -= 1.0
                elif dy < -0.5:
                    dy += 1.0
                if dx * dx + dy * dy < r2:
                    out[count] = j
                    count += 1
    return count


@njit(cache=True, parallel=True)
def step_kernel(positions, velocities, species, params_table, pair_mode,
                noise, n_cells, cell_start, order, out_pos, out_vel):
    """One synchronous swarm update into out_pos/out_vel.

    params_table rows are (neighbor_radius, max_speed, alignment_w,
    cohesion_w, separation_w) per species; noise is pre-drawn per agent.
    The grid must have been built with cell size >= max neighbor_radius.
    """
    n = positions.shape[0]
    for i in prange(n):
        s = species[i]
        radius = params_table[s, 0]
        max_speed = params_table[s, 1]
        align_w = params_table[s, 2]
        cohesion_w = params_table[s, 3]
        separation_w = params_table[s, 4]
        r2 = radius * radius
        r_sep = SEPARATION_RADIUS_FACTOR * radius
        r_sep2 = r_sep * r_sep

        px = positions[i, 0]
        py = positions[i, 1]
        cx = int(px * n_cells)
        cy = int(py * n_cells)
        if cx >= n_cells:
            cx = n_cells - 1
        if cy >= n_cells:
            cy = n_cells - 1
        xs = np.empty(3, np.int64)
        ys = np.empty(3, np.int64)
        nx = _axis_neighbors(cx, n_cells, xs)
        ny = _axis_neighbors(cy, n_cells, ys)

        flock_count = 0
        align_x = 0.0
        align_y = 0.0
        coh_x = 0.0
        coh_y = 0.0
        sep_x = 0.0
        sep_y = 0.0
        for a in range(nx):
            for b in range(ny):
                c = xs[a] * n_cells + ys[b]
                for t in range(cell_start[c], cell_start[c + 1]):
                    j = order[t]
                    if j == i:
                        continue
                    mode = pair_mode[s, species[j]]
                    if mode == PAIR_IGNORE:
                        continue
                    dx = positions[j, 0] - px
                    dy = positions[j, 1] - py
                    if dx > 0.5:
                        dx -= 1.0
                    elif dx < -0.5:
                        dx += 1.0
                    if dy > 0.5:
                        dy -= 1.0
                    elif dy < -0.5:
                        dy += 1.0
                    d2 = dx * dx + dy * dy
                    if d2 >= r2:
                        continue
                    if mode != PAIR_REPEL:
                        flock_count += 1
                        align_x += velocities[j, 0]
                        align_y += velocities[j, 1]
                        coh_x += dx
                        coh_y += dy
                    if mode != PAIR_MERGE and d2 < r_sep2:
                        w = 1.0 / max(d2, SEPARATION_EPS)
                        if mode == PAIR_REPEL:
                            w *= REPEL_SEPARATION_BOOST
                        # steer away: direction p_i - p_j = (-dx, -dy)
                        sep_x -= dx * w
                        sep_y -= dy * w

        vx = velocities[i, 0]
        vy = velocities[i, 1]
        if flock_count > 0:
            inv = 1.0 / flock_count
            vx += align_w * (align_x * inv - velocities[i, 0])
            vy += align_w * (align_y * inv - velocities[i, 1])
            vx += cohesion_w * coh_x * inv
            vy += cohesion_w * coh_y * inv
        vx += separation_w * sep_x + noise[i, 0]
        vy += separation_w * sep_y + noise[i, 1]

        speed2 = vx * vx + vy * vy
        limit2 = max_speed * max_speed
        if speed2 > limit2:
            f = max_speed / np.sqrt(speed2)
            vx *= f
            vy *= f
        out_vel[i, 0] = vx
        out_vel[i, 1] = vy

        qx = (px + vx) % 1.0
        qy = (py + vy) % 1.0
        # float mod can round up to exactly 1.0; keep positions in [0, 1)
        if qx >= 1.0:
            qx -= 1.0
        if qy >= 1.0:
            qy -= 1.0
        out_pos[i, 0] = qx
        out_pos[i, 1] = qy


@njit(cache=True)
def nearest_neighbor_distances(positions):
    """Toroidal distance to each agent's nearest neighbor, O(n^2)."""
    n = positions.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for j in range(n):
            if j == i:
                continue
            dx = positions[j, 0] - positions[i, 0]
            dy = positions[j, 1] - positions[i, 1]
            if dx > 0.5:
                dx -= 1.0
            elif dx < -0.5:
                dx += 1.0
            if dy > 0.5:
                dy -= 1.0
            elif dy < -0.5:
                dy += 1.0
            d2 = dx * dx + dy * dy
            if d2 < best:
                best = d2
        out[i] = np.sqrt(best)
    return out
