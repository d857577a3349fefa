"""Embedding contract and fitness arithmetic.

Images and prompts meet in one unit-norm 512-d vector space; fitness is
cosine similarity, reported as loss = 1 - similarity. Two providers exist:
a deterministic oracle built from swarm behavior statistics (model-free,
suitable for CI) and a remote client speaking the embedding wire protocol.
"""

from __future__ import annotations

import base64
import hashlib
import math
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (
    DimensionError,
    EmbedServiceError,
    EmptyInput,
    EmptyPrompt,
    InsufficientAgents,
    ProtocolError,
)

EMBED_DIM = 512

# Oracle constants, versioned: changing any of these changes every oracle
# embedding, so bump ORACLE_VERSION when touching them.
ORACLE_VERSION = 1
ORACLE_BIAS_DIM = 6
ORACLE_HASH_DIMS = (7, 71)  # half-open range for keyword-miss prompts

# Raw statistic -> [-1, 1] affine squash ranges (lo maps to -1, hi to +1,
# clipped outside).
ORACLE_STAT_RANGES = (
    ("nn_distance", 0.0, 0.05),
    ("polarization", 0.0, 1.0),
    ("angular_momentum", -1.0, 1.0),
    ("occupancy_entropy", 0.0, 1.0),
    ("speed_ratio", 0.0, 1.0),
    ("radial_spread", 0.0, 0.4),
)

# Keyword -> target squashed statistics, same order as ORACLE_STAT_RANGES.
ORACLE_KEYWORDS = {
    "cluster": (-1.0, 0.0, 0.0, -1.0, 0.0, -1.0),
    "scatter": (1.0, 0.0, 0.0, 1.0, 0.0, 1.0),
    "flow": (0.0, 1.0, 0.0, 0.0, 1.0, 0.0),
    "spin": (0.0, 0.0, 1.0, 0.0, 0.0, 0.0),
    "still": (0.0, 0.0, 0.0, 0.0, -1.0, 0.0),
    "fast": (0.0, 0.0, 0.0, 0.0, 1.0, 0.0),
}

_OCCUPANCY_GRID = 8
_EPS = 1e-12


def normalize_embedding(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.shape[0] != EMBED_DIM:
        raise DimensionError(f"expected {EMBED_DIM} dims, got {v.shape[0]}")
    norm = math.sqrt(float(v @ v))
    if norm < _EPS:
        raise ProtocolError("zero-norm embedding")
    return v / norm


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.clip(a @ b, -1.0, 1.0))


@dataclass(frozen=True)
class SemanticScore:
    loss: float
    similarity: float


def semantic_loss(frame_embeddings, prompt_embedding) -> SemanticScore:
    """Cosine between the normalized mean frame embedding and the prompt."""
    if len(frame_embeddings) == 0:
        raise EmptyInput("no frame embeddings")
    mean = np.zeros(EMBED_DIM)
    for e in frame_embeddings:
        e = np.asarray(e, dtype=np.float64).reshape(-1)
        if e.shape[0] != EMBED_DIM:
            raise DimensionError(f"expected {EMBED_DIM} dims, got {e.shape[0]}")
        mean += e
    norm = math.sqrt(float(mean @ mean))
    if norm < _EPS:
        # frames cancel out; nothing aligns with anything
        similarity = 0.0
    else:
        similarity = cosine_similarity(mean / norm, prompt_embedding)
    return SemanticScore(loss=1.0 - similarity, similarity=similarity)


def _squash(value: float, lo: float, hi: float) -> float:
    s = 2.0 * (value - lo) / (hi - lo) - 1.0
    return min(1.0, max(-1.0, s))


def _toroidal_centroid(positions) -> tuple[float, float]:
    """Circular-mean centroid; well defined for any point cloud on the torus."""
    out = []
    for axis in (0, 1):
        ang = positions[:, axis] * (2.0 * math.pi)
        s = math.fsum(np.sin(ang).tolist())
        c = math.fsum(np.cos(ang).tolist())
        out.append((math.atan2(s, c) / (2.0 * math.pi)) % 1.0)
    return out[0], out[1]


def _wrap_delta(d: np.ndarray) -> np.ndarray:
    d = np.where(d > 0.5, d - 1.0, d)
    return np.where(d < -0.5, d + 1.0, d)


def behavior_statistics(positions, velocities, max_speed: float) -> np.ndarray:
    """The six raw behavior statistics of one frame.

    Reductions use math.fsum (exactly rounded) so results are bit-identical
    across platforms.
    """
    positions = np.asarray(positions, dtype=np.float64)
    velocities = np.asarray(velocities, dtype=np.float64)
    n = positions.shape[0]
    if n < 2:
        raise InsufficientAgents("need at least 2 agents for statistics")

    nn = kernels.nearest_neighbor_distances(positions)
    nn_distance = math.fsum(nn.tolist()) / n

    speeds = np.sqrt(velocities[:, 0] ** 2 + velocities[:, 1] ** 2)
    safe = np.maximum(speeds, _EPS)
    moving = speeds > _EPS
    ux = np.where(moving, velocities[:, 0] / safe, 0.0)
    uy = np.where(moving, velocities[:, 1] / safe, 0.0)
    px = math.fsum(ux.tolist()) / n
    py = math.fsum(uy.tolist()) / n
    polarization = math.hypot(px, py)

    cx, cy = _toroidal_centroid(positions)
    rx = _wrap_delta(positions[:, 0] - cx)
    ry = _wrap_delta(positions[:, 1] - cy)
    radii = np.sqrt(rx * rx + ry * ry)
    cross = (rx * velocities[:, 1] - ry * velocities[:, 0]) / (
        (radii + _EPS) * (speeds + _EPS)
    )
    angular_momentum = math.fsum(cross.tolist()) / n

    # occupancy is binned relative to the centroid so the statistic is
    # invariant under global translation on the torus
    rel_x = (positions[:, 0] - cx) % 1.0
    rel_y = (positions[:, 1] - cy) % 1.0
    cells_x = np.minimum((rel_x * _OCCUPANCY_GRID).astype(np.int64),
                         _OCCUPANCY_GRID - 1)
    cells_y = np.minimum((rel_y * _OCCUPANCY_GRID).astype(np.int64),
                         _OCCUPANCY_GRID - 1)
    counts = np.bincount(cells_x * _OCCUPANCY_GRID + cells_y,
                         minlength=_OCCUPANCY_GRID ** 2)
    probs = counts[counts > 0] / n
    entropy = -math.fsum((probs * np.log(probs)).tolist())
    occupancy_entropy = entropy / math.log(_OCCUPANCY_GRID ** 2)

    speed_ratio = math.fsum(speeds.tolist()) / (n * max_speed)
    radial_spread = math.fsum(radii.tolist()) / n

    return np.array([
        nn_distance, polarization, angular_momentum,
        occupancy_entropy, speed_ratio, radial_spread,
    ])


def squash_statistics(stats) -> np.ndarray:
    return np.array([
        _squash(float(stats[i]), lo, hi)
        for i, (_, lo, hi) in enumerate(ORACLE_STAT_RANGES)
    ])


def _stats_to_embedding(squashed) -> np.ndarray:
    v = np.zeros(EMBED_DIM)
    v[:6] = squashed
    v[ORACLE_BIAS_DIM] = 1.0
    return normalize_embedding(v)


def oracle_embed_image(positions, velocities, max_speed: float) -> np.ndarray:
    """Deterministic stand-in for a visual encoder: squashed behavior
    statistics in dims 0-5, bias 1 in dim 6, rest zero, unit norm."""
    stats = behavior_statistics(positions, velocities, max_speed)
    return _stats_to_embedding(squash_statistics(stats))


def oracle_embed_text(prompt: str) -> np.ndarray:
    """Keyword-table text encoder sharing the oracle image basis."""
    if not prompt or not prompt.strip():
        raise EmptyPrompt("prompt is empty")
    words = [w for w in "".join(
        ch if ch.isalpha() else " " for ch in prompt.lower()
    ).split() if w]
    rows = [ORACLE_KEYWORDS[w] for w in words if w in ORACLE_KEYWORDS]
    if rows:
        target = np.array(rows, dtype=np.float64).mean(axis=0)
        return _stats_to_embedding(target)
    # no behavior keyword: deterministic hash spread over reserved dims
    lo, hi = ORACLE_HASH_DIMS
    digest = hashlib.shake_256(prompt.encode("utf-8")).digest(hi - lo)
    v = np.zeros(EMBED_DIM)
    v[lo:hi] = np.frombuffer(digest, dtype=np.uint8) / 127.5 - 1.0
    return normalize_embedding(v)


class RemoteEmbedClient:
    """HTTP client for the embedding wire protocol.

    POST {endpoint}/v1/embed with {"kind": "text"|"image", "data": ...};
    transient failures retried with exponential backoff, in-flight requests
    bounded, responses cached by payload digest.
    """

    def __init__(self, endpoint: str, timeout: float = 10.0,
                 max_retries: int = 3, backoff: float = 0.25,
                 max_in_flight: int = 8, cache_size: int = 1024):
        import requests

        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._session = requests.Session()
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._cache: OrderedDict[bytes, np.ndarray] = OrderedDict()
        self._cache_size = cache_size
        self._cache_lock = threading.Lock()

    def embed_text(self, prompt: str) -> np.ndarray:
        if not prompt:
            raise EmptyPrompt("prompt is empty")
        return self._embed("text", prompt, prompt.encode("utf-8"))

    def embed_image(self, png_bytes: bytes) -> np.ndarray:
        data = base64.b64encode(png_bytes).decode("ascii")
        return self._embed("image", data, png_bytes)

    def _embed(self, kind: str, data: str, payload: bytes) -> np.ndarray:
        key = hashlib.sha256(kind.encode() + b"\x00" + payload).digest()
        with self._cache_lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        vec = self._request(kind, data)
        with self._cache_lock:
            self._cache[key] = vec
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return vec

    def _request(self, kind: str, data: str) -> np.ndarray:
        import requests

        url = f"{self.endpoint}/v1/embed"
        body = {"kind": kind, "data": data}
        last_error = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._gate:
                    resp = self._session.post(url, json=body, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code != 200:
                last_error = EmbedServiceError(
                    f"status {resp.status_code} from {url}"
                )
                continue
            try:
                payload = resp.json()
            except ValueError as exc:
                raise ProtocolError(f"non-JSON response from {url}") from exc
            values = payload.get("embedding")
            if not isinstance(values, list) or len(values) != EMBED_DIM:
                raise ProtocolError(
                    f"embedding length {len(values) if isinstance(values, list) else 'missing'}"
                    f" != {EMBED_DIM}"
                )
            vec = np.asarray(values, dtype=np.float64)
            if not np.all(np.isfinite(vec)):
                raise ProtocolError("non-finite embedding values")
            return normalize_embedding(vec)
        raise EmbedServiceError(
            f"embed request failed after {self.max_retries} retries: {last_error}"
        )


def remote_embed(endpoint: str, kind: str, payload: bytes) -> np.ndarray:
    """One-shot wire-protocol call; payload is utf-8 text or PNG bytes."""
    client = RemoteEmbedClient(endpoint)
    if kind == "text":
        return client.embed_text(payload.decode("utf-8"))
    if kind == "image":
        return client.embed_image(payload)
    raise ValueError(f"unknown kind {kind!r}")
