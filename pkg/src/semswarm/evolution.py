"""The closed loop: prompt -> params -> simulate -> render -> embed -> score
-> adapt, generation after generation, with branching and prompt refinement.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import render, semantic, swarm
from .cmaes import (
    BoundsCodec,
    CmaConfig,
    CmaState,
    apply_diversity_noise,
    cma_ask,
    cma_init,
    cma_tell,
    population_diversity,
    prior_penalized_fitness,
)
from .errors import EmbedServiceError, EmptyPrompt, ParseError
from .params import SwarmParams, validate_params
from .prompt2param import MappingModel, PromptEncoding, encode_prompt

RUN_LOG_VERSION = 1

# stream tag separating branch seeds from evaluation seeds
_BRANCH_STREAM = 0x42


@dataclass
class EvolutionConfig:
    n_agents: int = 512
    sim_steps: int = 240
    frames_per_eval: int = 3
    generations: int = 30
    cma: CmaConfig = field(default_factory=CmaConfig)
    embedder: str = "oracle"  # "oracle" | "remote"
    endpoint: str | None = None
    run_seed: int = 0
    workers: int = 4
    image_size: int = render.DEFAULT_IMAGE_SIZE
    trail_decay: float = render.DEFAULT_TRAIL_DECAY
    trail_window: int = 8

    def __post_init__(self):
        if min(self.n_agents, self.generations + 1, self.frames_per_eval,
               self.workers, self.image_size) < 1 or self.sim_steps < 0:
            raise ValueError("config values must be positive")
        if self.embedder not in ("oracle", "remote"):
            raise ValueError(f"unknown embedder {self.embedder!r}")
        if self.embedder == "remote" and not self.endpoint:
            raise ValueError("remote embedder requires an endpoint")


@dataclass
class GenerationRecord:
    generation: int
    losses: list[float]
    best_params: SwarmParams
    best_loss: float
    diversity: float
    noise_injected: bool
    best_frame_digest: int
    wall_ms: int
    candidate_params: list[list[float]]  # per-candidate decode, for branching


@dataclass
class RunHistory:
    prompt: str
    prompt_revisions: list[tuple[int, str]]
    prior_params: SwarmParams
    records: list[GenerationRecord]
    config: EvolutionConfig
    rng_algorithm_id: str = swarm.RNG_ALGORITHM_ID
    parent: dict | None = None  # {"run_id", "generation", "candidate"}

    def best_so_far(self) -> tuple[SwarmParams, float]:
        best = min(self.records, key=lambda r: r.best_loss)
        return best.best_params, best.best_loss


def derive_seed(run_seed: int, *parts: int) -> int:
    """Stable 64-bit seed from the run seed and position indices."""
    seq = np.random.SeedSequence([run_seed & 0xFFFFFFFFFFFFFFFF, *parts])
    return int(seq.generate_state(1, np.uint64)[0])


class OracleProvider:
    """Model-free embedding provider built on swarm behavior statistics."""

    name = "oracle"

    def embed_text(self, prompt: str) -> np.ndarray:
        return semantic.oracle_embed_text(prompt)

    def embed_frames(self, trajectory, indices) -> list[np.ndarray]:
        max_speed = trajectory.params.max_speed
        return [
            semantic.oracle_embed_image(
                trajectory.frames[i].positions,
                trajectory.frames[i].velocities,
                max_speed,
            )
            for i in indices
        ]


class RemoteProvider:
    """Renders frames with trails and posts PNGs over the wire protocol."""

    name = "remote"

    def __init__(self, client: semantic.RemoteEmbedClient, image_size: int,
                 trail_decay: float, trail_window: int):
        self.client = client
        self.image_size = image_size
        self.trail_decay = trail_decay
        self.trail_window = trail_window

    def embed_text(self, prompt: str) -> np.ndarray:
        return self.client.embed_text(prompt)

    def embed_frames(self, trajectory, indices) -> list[np.ndarray]:
        out = []
        for i in indices:
            start = max(0, i - self.trail_window)
            image = render.render_trail_sequence(
                (f.positions for f in trajectory.frames[start:i + 1]),
                self.image_size, self.trail_decay,
            )
            out.append(self.client.embed_image(render.encode_png(image)))
        return out


def make_provider(config: EvolutionConfig):
    if config.embedder == "oracle":
        return OracleProvider()
    client = semantic.RemoteEmbedClient(config.endpoint)
    return RemoteProvider(
        client, config.image_size, config.trail_decay, config.trail_window
    )


@dataclass
class CandidateEval:
    loss: float  # prior-penalized, what the optimizer sees
    raw_loss: float
    best_frame_embedding: np.ndarray
    frame_digest: int


def evaluate_candidate(candidate, prompt_embedding, prior_params,
                       config: EvolutionConfig, provider,
                       generation: int, index: int) -> CandidateEval:
    """Simulate, embed selected frames, and score one candidate."""
    eval_seed = derive_seed(config.run_seed, generation, index)
    trajectory = swarm.run_simulation(
        candidate.params, config.n_agents, config.sim_steps, eval_seed
    )
    indices = render.select_frames(trajectory, config.frames_per_eval)
    embeddings = provider.embed_frames(trajectory, indices)
    score = semantic.semantic_loss(embeddings, prompt_embedding)
    sims = [semantic.cosine_similarity(e, prompt_embedding) for e in embeddings]
    best_frame = int(np.argmax(sims))
    loss = prior_penalized_fitness(
        score.loss, candidate.params, prior_params, config.cma.prior_lambda
    )
    return CandidateEval(
        loss=loss,
        raw_loss=score.loss,
        best_frame_embedding=embeddings[best_frame],
        frame_digest=trajectory.frames[indices[-1]].digest(),
    )


class EvolutionRun:
    """One live run: owns the optimizer state and the growing history."""

    def __init__(self, prompt: str, config: EvolutionConfig,
                 mapping: MappingModel | None = None, provider=None,
                 encoding: PromptEncoding | None = None,
                 state: CmaState | None = None, parent: dict | None = None):
        self.config = config
        self.provider = provider if provider is not None else make_provider(config)
        if encoding is None:
            if mapping is None:
                raise ValueError("need a mapping model or an explicit encoding")
            encoding = encode_prompt(mapping, prompt, self.provider.embed_text)
        self.prompt = prompt
        self.prompt_embedding = self.provider.embed_text(prompt)
        self.prior_params = encoding.prior_params
        self.state = state if state is not None else cma_init(
            encoding.initial_params, config.cma
        )
        self.history = RunHistory(
            prompt=prompt,
            prompt_revisions=[],
            prior_params=self.prior_params,
            records=[],
            config=config,
            parent=parent,
        )

    def _evaluate_all(self, candidates, generation: int) -> list[CandidateEval]:
        def work(i):
            return evaluate_candidate(
                candidates[i], self.prompt_embedding, self.prior_params,
                self.config, self.provider, generation, i,
            )

        if self.config.workers == 1:
            return [work(i) for i in range(len(candidates))]
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            return list(pool.map(work, range(len(candidates))))

    def step_generation(self) -> GenerationRecord:
        started = time.perf_counter()
        generation = self.state.generation
        candidates = cma_ask(self.state)
        try:
            evals = self._evaluate_all(candidates, generation)
        except EmbedServiceError:
            # transient backend trouble: one full retry of the generation
            evals = self._evaluate_all(candidates, generation)
        for candidate, ev in zip(candidates, evals):
            candidate.loss = ev.loss
        cma_tell(self.state, candidates)
        diversity = population_diversity(
            [ev.best_frame_embedding for ev in evals]
        )
        injected = apply_diversity_noise(self.state, diversity, self.config.cma)
        losses = [ev.loss for ev in evals]
        best_index = int(np.argmin(losses))
        record = GenerationRecord(
            generation=generation,
            losses=[float(x) for x in losses],
            best_params=candidates[best_index].params,
            best_loss=float(losses[best_index]),
            diversity=float(diversity),
            noise_injected=injected,
            best_frame_digest=evals[best_index].frame_digest,
            wall_ms=int((time.perf_counter() - started) * 1000),
            candidate_params=[
                [float(v) for v in c.params.as_array()] for c in candidates
            ],
        )
        self.history.records.append(record)
        return record

    def run(self, on_generation=None) -> RunHistory:
        try:
            while len(self.history.records) < self.config.generations:
                record = self.step_generation()
                if on_generation is not None:
                    on_generation(record)
        except Exception as exc:
            exc.partial_history = self.history
            raise
        return self.history

    def refine(self, new_prompt: str, mapping: MappingModel) -> None:
        """Swap the semantic target mid-run; optimizer state is untouched."""
        if not new_prompt or not new_prompt.strip():
            raise EmptyPrompt("prompt is empty")
        encoding = encode_prompt(mapping, new_prompt, self.provider.embed_text)
        self.prompt = new_prompt
        self.prompt_embedding = self.provider.embed_text(new_prompt)
        self.prior_params = encoding.prior_params
        self.history.prompt_revisions.append(
            (self.state.generation, new_prompt)
        )
        self.history.prior_params = self.prior_params

    def render_best_frame(self) -> bytes | None:
        """PNG of the current best candidate's final frame (re-simulated)."""
        if not self.history.records:
            return None
        record = self.history.records[-1]
        best_index = int(np.argmin(record.losses))
        params, _ = validate_params(record.candidate_params[best_index])
        eval_seed = derive_seed(
            self.config.run_seed, record.generation, best_index
        )
        trajectory = swarm.run_simulation(
            params, self.config.n_agents, self.config.sim_steps, eval_seed
        )
        image = render.render_trail_sequence(
            (f.positions for f in trajectory.frames[-self.config.trail_window:]),
            self.config.image_size, self.config.trail_decay,
        )
        return render.encode_png(image)


def evolve(prompt: str, config: EvolutionConfig,
           mapping: MappingModel, on_generation=None) -> RunHistory:
    """Run the whole loop headlessly and return the history."""
    return EvolutionRun(prompt, config, mapping).run(on_generation)


def branch_from(history: RunHistory, generation: int,
                candidate_index: int) -> CmaState:
    """Fresh optimizer state centered on one recorded individual."""
    records = history.records
    if not 0 <= generation < len(records):
        raise IndexError(f"generation {generation} not in history")
    record = records[generation]
    if not 0 <= candidate_index < len(record.candidate_params):
        raise IndexError(f"candidate {candidate_index} not in generation")
    params, _ = validate_params(record.candidate_params[candidate_index])
    seed = derive_seed(
        history.config.run_seed, generation, candidate_index, _BRANCH_STREAM
    )
    cma = dataclasses.replace(
        history.config.cma, seed=seed, sigma0=0.5 * history.config.cma.sigma0
    )
    return cma_init(params, cma, BoundsCodec())


def branch_run(history: RunHistory, generation: int, candidate_index: int,
               run_id: str | None = None, provider=None) -> EvolutionRun:
    """A new run continuing from a branched state, ancestry recorded."""
    state = branch_from(history, generation, candidate_index)
    config = dataclasses.replace(history.config, cma=state.config)
    encoding = PromptEncoding(
        initial_params=state.codec.decode(state.mean),
        prior_params=history.prior_params,
    )
    return EvolutionRun(
        history.prompt, config, provider=provider, encoding=encoding,
        state=state,
        parent={
            "run_id": run_id,
            "generation": generation,
            "candidate": candidate_index,
        },
    )


# --- run log (JSON lines) ---------------------------------------------------

def _config_to_dict(config: EvolutionConfig) -> dict:
    out = dataclasses.asdict(config)
    out["cma"] = dataclasses.asdict(config.cma)
    return out


def _config_from_dict(data: dict) -> EvolutionConfig:
    cma = CmaConfig(**data.pop("cma"))
    return EvolutionConfig(cma=cma, **data)


def history_to_lines(history: RunHistory) -> list[str]:
    """Serialize: one header line, then one line per generation record."""
    def dump(obj) -> str:
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    lines = [dump({
        "record": "header",
        "version": RUN_LOG_VERSION,
        "prompt": history.prompt,
        "prompt_revisions": [[g, p] for g, p in history.prompt_revisions],
        "prior_params": list(history.prior_params.as_array()),
        "config": _config_to_dict(history.config),
        "rng_algorithm_id": history.rng_algorithm_id,
        "parent": history.parent,
    })]
    for r in history.records:
        lines.append(dump({
            "record": "generation",
            "generation": r.generation,
            "losses": r.losses,
            "best_params": list(r.best_params.as_array()),
            "best_loss": r.best_loss,
            "diversity": r.diversity,
            "noise_injected": r.noise_injected,
            "best_frame_digest": f"{r.best_frame_digest:016x}",
            "wall_ms": r.wall_ms,
            "candidate_params": r.candidate_params,
        }))
    return lines


def history_from_lines(lines) -> RunHistory:
    """Parse a run log; raises ParseError naming the offending line."""
    rows = []
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rows.append((number, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {number}: {exc}", line_number=number)
    if not rows:
        raise ParseError("empty run log", line_number=1)
    number, header = rows[0]
    if header.get("record") != "header":
        raise ParseError(f"line {number}: expected header record",
                         line_number=number)
    try:
        history = RunHistory(
            prompt=header["prompt"],
            prompt_revisions=[tuple(x) for x in header["prompt_revisions"]],
            prior_params=SwarmParams.from_array(header["prior_params"]),
            records=[],
            config=_config_from_dict(header["config"]),
            rng_algorithm_id=header["rng_algorithm_id"],
            parent=header.get("parent"),
        )
        for number, row in rows[1:]:
            if row.get("record") != "generation":
                raise ParseError(f"line {number}: expected generation record",
                                 line_number=number)
            history.records.append(GenerationRecord(
                generation=row["generation"],
                losses=[float(x) for x in row["losses"]],
                best_params=SwarmParams.from_array(row["best_params"]),
                best_loss=float(row["best_loss"]),
                diversity=float(row["diversity"]),
                noise_injected=bool(row["noise_injected"]),
                best_frame_digest=int(row["best_frame_digest"], 16),
                wall_ms=int(row["wall_ms"]),
                candidate_params=[
                    [float(v) for v in c] for c in row["candidate_params"]
                ],
            ))
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"line {number}: {exc}", line_number=number)
    return history
