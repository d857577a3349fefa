"""Shared world where finalized lifeforms coexist, and the history-mining
that turns their accumulated parameters into global meta-rules.

Cross-species behavior is driven by prompt-embedding affinity: near-aligned
species flock together, opposed species repel at triple separation, and
pairs in between simply ignore each other. Every epoch, aligned species that
drift close may hybridize, and extracted meta-rules pull everyone's
parameters gently toward the population mean along dominant directions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    CapacityExceeded,
    DimensionError,
    InsufficientData,
    TooManyClusters,
)
from .params import (
    N_PARAMS,
    SwarmParams,
    denormalize_params,
    normalize_params,
    validate_params,
)
from .semantic import cosine_similarity
from .swarm import make_rng

log = logging.getLogger(__name__)

EPOCH_STEPS = 600
MERGE_AFFINITY = 0.8
REPEL_AFFINITY = 0.2
HYBRID_PROBABILITY = 0.25
HYBRID_CENTROID_RANGE = 0.1
SPAWN_DISC_RADIUS = 0.1
DEFAULT_CAPACITY = 50_000
META_RULE_RATE = 0.1  # fraction of projected deviation removed per epoch
META_RULE_MIN_RATIO = 0.2

# Fixed per-species display palette (RGB), cycled by color index.
PALETTE = (
    (236, 244, 255), (255, 170, 80), (120, 220, 160), (130, 170, 255),
    (255, 120, 150), (180, 255, 100), (255, 230, 90), (170, 130, 255),
    (90, 230, 230), (255, 140, 220), (200, 200, 140), (140, 255, 210),
    (255, 190, 130), (160, 190, 255), (230, 140, 120), (120, 255, 140),
)


@dataclass
class Lifeform:
    id: str
    params: SwarmParams
    prompt_embedding: np.ndarray
    owner: str
    n_agents: int
    color_index: int


@dataclass
class MetaRule:
    component: np.ndarray  # unit 6-vector in normalized parameter space
    explained_variance_ratio: float
    strength: float
    created_epoch: int


@dataclass
class EcosystemWorld:
    capacity: int = DEFAULT_CAPACITY
    seed: int = 0
    positions: np.ndarray = field(
        default_factory=lambda: np.empty((0, 2), dtype=np.float64))
    velocities: np.ndarray = field(
        default_factory=lambda: np.empty((0, 2), dtype=np.float64))
    species: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.int32))
    lifeforms: list[Lifeform] = field(default_factory=list)
    meta_rules: list[MetaRule] = field(default_factory=list)
    step_count: int = 0
    epoch: int = 0
    _next_id: int = 0

    def __post_init__(self):
        self.rng = make_rng(self.seed)

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    def lifeform_by_id(self, lifeform_id: str) -> Lifeform | None:
        for lf in self.lifeforms:
            if lf.id == lifeform_id:
                return lf
        return None


def _affinity_modes(lifeforms) -> np.ndarray:
    """Species-pair interaction table from prompt-embedding affinity."""
    n = len(lifeforms)
    modes = np.full((n, n), kernels.PAIR_IGNORE, dtype=np.int8)
    for i in range(n):
        modes[i, i] = kernels.PAIR_FULL
        for j in range(i + 1, n):
            a = cosine_similarity(
                lifeforms[i].prompt_embedding, lifeforms[j].prompt_embedding
            )
            if a >= MERGE_AFFINITY:
                mode = kernels.PAIR_MERGE
            elif a <= REPEL_AFFINITY:
                mode = kernels.PAIR_REPEL
            else:
                mode = kernels.PAIR_IGNORE
            modes[i, j] = modes[j, i] = mode
    return modes


def admit_lifeform(world: EcosystemWorld, params: SwarmParams,
                   prompt_embedding, owner: str, n_agents: int) -> Lifeform:
    """Spawn a species in a random disc and register it."""
    if world.n_agents + n_agents > world.capacity:
        raise CapacityExceeded(
            f"{world.n_agents} + {n_agents} agents exceeds {world.capacity}"
        )
    center = world.rng.random(2)
    angles = world.rng.random(n_agents) * 2.0 * np.pi
    radii = SPAWN_DISC_RADIUS * np.sqrt(world.rng.random(n_agents))
    positions = (center + np.column_stack(
        (radii * np.cos(angles), radii * np.sin(angles))
    )) % 1.0
    headings = world.rng.random(n_agents) * 2.0 * np.pi
    speeds = (1.0 - world.rng.random(n_agents)) * params.max_speed
    velocities = np.column_stack(
        (speeds * np.cos(headings), speeds * np.sin(headings))
    )
    species_index = len(world.lifeforms)
    lifeform = Lifeform(
        id=f"lf{world._next_id:04d}",
        params=params,
        prompt_embedding=np.asarray(prompt_embedding, dtype=np.float64),
        owner=owner,
        n_agents=n_agents,
        color_index=species_index % len(PALETTE),
    )
    world._next_id += 1
    world.positions = np.vstack([world.positions, positions])
    world.velocities = np.vstack([world.velocities, velocities])
    world.species = np.concatenate(
        [world.species, np.full(n_agents, species_index, dtype=np.int32)]
    )
    world.lifeforms.append(lifeform)
    return lifeform


def _params_table(lifeforms) -> np.ndarray:
    return np.array([
        [lf.params.neighbor_radius, lf.params.max_speed,
         lf.params.alignment_w, lf.params.cohesion_w, lf.params.separation_w]
        for lf in lifeforms
    ])


def _species_centroid(world, species_index: int) -> np.ndarray | None:
    mask = world.species == species_index
    if not np.any(mask):
        return None
    pts = world.positions[mask]
    out = np.empty(2)
    for axis in (0, 1):
        ang = pts[:, axis] * (2.0 * np.pi)
        out[axis] = (np.arctan2(np.sin(ang).mean(), np.cos(ang).mean())
                     / (2.0 * np.pi)) % 1.0
    return out


def _toroidal_distance(a, b) -> float:
    d = np.abs(a - b)
    d = np.minimum(d, 1.0 - d)
    return float(np.hypot(d[0], d[1]))


def _maybe_hybridize(world: EcosystemWorld) -> None:
    """Aligned species whose flocks overlap may spawn a blended child."""
    existing = list(enumerate(world.lifeforms))
    for i, a in existing:
        for j, b in existing[i + 1:]:
            affinity = cosine_similarity(a.prompt_embedding, b.prompt_embedding)
            if affinity < MERGE_AFFINITY:
                continue
            ca = _species_centroid(world, i)
            cb = _species_centroid(world, j)
            if ca is None or cb is None:
                continue
            if _toroidal_distance(ca, cb) >= HYBRID_CENTROID_RANGE:
                continue
            if world.rng.random() >= HYBRID_PROBABILITY:
                continue
            blend = world.rng.random(N_PARAMS)
            raw = blend * a.params.as_array() + (1.0 - blend) * b.params.as_array()
            params, _ = validate_params(raw)
            embedding = a.prompt_embedding + b.prompt_embedding
            embedding = embedding / np.linalg.norm(embedding)
            count = max(1, min(a.n_agents, b.n_agents) // 2)
            if world.n_agents + count > world.capacity:
                continue
            child = admit_lifeform(
                world, params, embedding, f"hybrid:{a.id}+{b.id}", count
            )
            log.info("hybrid %s spawned from %s + %s", child.id, a.id, b.id)


def ecosystem_step(world: EcosystemWorld) -> EcosystemWorld:
    """One shared step; species interact per the affinity rule table."""
    if world.n_agents == 0:
        world.step_count += 1
        return world
    lifeforms = world.lifeforms
    params_table = _params_table(lifeforms)
    modes = _affinity_modes(lifeforms)
    sigmas = np.array([lf.params.noise_sigma for lf in lifeforms])
    noise = world.rng.standard_normal((world.n_agents, 2))
    noise *= sigmas[world.species][:, None]
    max_radius = float(params_table[:, 0].max())
    n_cells = kernels.grid_cells_for_radius(max_radius)
    cell_start, order = kernels.build_grid(world.positions, n_cells)
    out_pos = np.empty_like(world.positions)
    out_vel = np.empty_like(world.velocities)
    kernels.step_kernel(
        world.positions, world.velocities, world.species, params_table,
        modes, noise, n_cells, cell_start, order, out_pos, out_vel,
    )
    world.positions = out_pos
    world.velocities = out_vel
    world.step_count += 1
    if world.step_count % EPOCH_STEPS == 0:
        world.epoch += 1
        _maybe_hybridize(world)
        if world.meta_rules:
            apply_meta_rules(world, world.meta_rules)
    return world


# --- history mining ----------------------------------------------------------

def jacobi_eigh(matrix, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues desc, eigenvectors as columns).
    """
    A = np.array(matrix, dtype=np.float64)
    d = A.shape[0]
    V = np.eye(d)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(d - 1):
            for q in range(p + 1, d):
                off = max(off, abs(A[p, q]))
        if off <= tol * max(1.0, float(np.abs(np.diag(A)).max())):
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(d)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                A = rot.T @ A @ rot
                V = V @ rot
    eigvals = np.diag(A).copy()
    idx = np.argsort(eigvals)[::-1]
    return eigvals[idx], V[:, idx]


def pca(data, k: int):
    """Top-k principal components of mean-centered data via Jacobi.

    Sign convention: each component's largest-magnitude entry is positive.
    Returns (components (k, d), explained_variance_ratios (k,)).
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InsufficientData("need at least 2 rows")
    n, d = X.shape
    if k > d:
        raise DimensionError(f"k={k} exceeds dimension {d}")
    Xc = X - X.mean(axis=0)
    cov = (Xc.T @ Xc) / (n - 1)
    eigvals, vectors = jacobi_eigh(cov)
    total = float(np.trace(cov))
    components = np.empty((k, d))
    ratios = np.empty(k)
    for i in range(k):
        v = vectors[:, i].copy()
        pivot = int(np.argmax(np.abs(v)))
        if v[pivot] < 0:
            v = -v
        components[i] = v
        ratios[i] = max(0.0, float(eigvals[i])) / total if total > 1e-15 else 0.0
    return components, ratios


def kmeans(data, k: int, seed=0):
    """Standard k-means with D^2-weighted seeding and Lloyd iterations.

    Empty clusters are repaired by stealing the point farthest from its
    centroid. Returns (assignments, centroids, inertia).
    """
    X = np.asarray(data, dtype=np.float64)
    n = X.shape[0]
    if k > n:
        raise TooManyClusters(f"k={k} > {n} rows")
    rng = make_rng(seed)
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[int(rng.integers(n))]
    for c in range(1, k):
        d2 = np.min(
            ((X[:, None, :] - centroids[None, :c, :]) ** 2).sum(axis=2), axis=1
        )
        total = d2.sum()
        if total <= 0.0:
            centroids[c] = X[int(rng.integers(n))]
            continue
        target = rng.random() * total
        centroids[c] = X[int(np.searchsorted(np.cumsum(d2), target))]

    assignments = np.full(n, -1, dtype=np.int64)
    for _ in range(100):
        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assignments = np.argmin(d2, axis=1)
        for c in range(k):
            members = new_assignments == c
            if not np.any(members):
                dist_own = d2[np.arange(n), new_assignments]
                victim = int(np.argmax(dist_own))
                new_assignments[victim] = c
                members = new_assignments == c
            centroids[c] = X[members].mean(axis=0)
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
    d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    inertia = float(d2[np.arange(n), assignments].sum())
    return assignments, centroids, inertia


def extract_meta_rules(lifeforms, max_rules: int = 3,
                       epoch: int = 0) -> list[MetaRule]:
    """Mine the population's parameter history for dominant directions.

    Clusters are logged as themes; principal components with enough
    explained variance become mean-reversion rules.
    """
    if len(lifeforms) < 3:
        return []
    data = np.stack([normalize_params(lf.params) for lf in lifeforms])
    k = min(4, len(lifeforms) // 3)
    if k >= 1:
        assignments, centroids, inertia = kmeans(data, k, seed=len(lifeforms))
        log.info(
            "population themes: %d clusters, sizes %s, inertia %.4f",
            k, np.bincount(assignments, minlength=k).tolist(), inertia,
        )
    components, ratios = pca(data, min(N_PARAMS, data.shape[0] - 1, 6))
    rules = []
    for component, ratio in zip(components, ratios):
        if ratio < META_RULE_MIN_RATIO:
            continue
        rules.append(MetaRule(
            component=component,
            explained_variance_ratio=float(ratio),
            strength=float(ratio),
            created_epoch=epoch,
        ))
        if len(rules) == max_rules:
            break
    return rules


def apply_meta_rules(world: EcosystemWorld, rules) -> EcosystemWorld:
    """One epoch of mean-reversion along each rule's component.

    Per-dimension movement is capped at 10% of the bound range per epoch.
    """
    if not rules or not world.lifeforms:
        return world
    normalized = np.stack(
        [normalize_params(lf.params) for lf in world.lifeforms]
    )
    mean = normalized.mean(axis=0)
    for i, lf in enumerate(world.lifeforms):
        delta = np.zeros(N_PARAMS)
        deviation = normalized[i] - mean
        for rule in rules:
            projected = float(deviation @ rule.component)
            delta -= rule.strength * META_RULE_RATE * projected * rule.component
        delta = np.clip(delta, -META_RULE_RATE, META_RULE_RATE)
        params, _ = validate_params(denormalize_params(normalized[i] + delta))
        lf.params = params
    return world


def world_state(world: EcosystemWorld) -> dict:
    """JSON-friendly registry + rules snapshot for the UI."""
    return {
        "step_count": world.step_count,
        "epoch": world.epoch,
        "n_agents": world.n_agents,
        "capacity": world.capacity,
        "lifeforms": [
            {
                "id": lf.id,
                "owner": lf.owner,
                "n_agents": lf.n_agents,
                "color_index": lf.color_index,
                "color": list(PALETTE[lf.color_index]),
                "params": list(lf.params.as_array()),
            }
            for lf in world.lifeforms
        ],
        "meta_rules": [
            {
                "component": [float(x) for x in rule.component],
                "explained_variance_ratio": rule.explained_variance_ratio,
                "strength": rule.strength,
                "created_epoch": rule.created_epoch,
            }
            for rule in world.meta_rules
        ],
    }


def render_world_png(world: EcosystemWorld, size: int = 448) -> bytes:
    """Species-colored snapshot of the shared world."""
    from .render import ImageRGB, encode_png

    canvas = np.zeros((size, size, 3), dtype=np.float64)
    for idx in range(world.n_agents):
        color = PALETTE[world.lifeforms[world.species[idx]].color_index]
        cx = int(np.floor(world.positions[idx, 0] * size + 0.5)) % size
        cy = int(np.floor(world.positions[idx, 1] * size + 0.5)) % size
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                w = np.exp(-(dx * dx + dy * dy) / 2.0)
                row, col = (cy + dy) % size, (cx + dx) % size
                for ch in range(3):
                    value = color[ch] * w
                    if value > canvas[row, col, ch]:
                        canvas[row, col, ch] = value
    return encode_png(ImageRGB.from_array(canvas.astype(np.uint8)))
