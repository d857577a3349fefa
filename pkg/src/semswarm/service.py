"""Session server: evolution over WebSocket, history over HTTP.

The state machine (SessionManager) is synchronous and I/O-free so its
transitions can be model-checked exhaustively; the aiohttp layer adapts it
to sockets. Simulation work runs in worker threads and never blocks the
message path — pause, refine and branch take effect at generation
boundaries, which keeps every persisted record deterministic.
"""

from __future__ import annotations

import asyncio
import base64
import dataclasses
import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from . import ecosystem as eco
from .cmaes import CmaConfig
from .errors import NotFound, ParseError
from .evolution import (
    EvolutionConfig,
    EvolutionRun,
    RunHistory,
    branch_run,
    history_from_lines,
    history_to_lines,
)
from .prompt2param import MappingModel, bundled_dataset, train_mapping
from .semantic import oracle_embed_text

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
ENV_EMBED_ENDPOINT = "SEMSWARM_EMBED_ENDPOINT"
ENV_RUN_STORE = "SEMSWARM_RUN_STORE"

IDLE, RUNNING, PAUSED = "idle", "running", "paused"


# --- persistence -------------------------------------------------------------

class RunStore:
    """Directory of {run_id}.jsonl run logs."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def new_id(self) -> str:
        return uuid.uuid4().hex[:12]

    def _path(self, run_id: str) -> Path:
        return self.root / f"{run_id}.jsonl"

    def persist(self, history: RunHistory, run_id: str | None = None) -> str:
        run_id = run_id or self.new_id()
        self._path(run_id).write_text(
            "\n".join(history_to_lines(history)) + "\n", encoding="utf-8"
        )
        return run_id

    def load(self, run_id: str) -> RunHistory:
        path = self._path(run_id)
        if not path.exists():
            raise NotFound(f"run {run_id} not found")
        return history_from_lines(
            path.read_text(encoding="utf-8").splitlines()
        )

    def ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.jsonl"))


def persist_run(history: RunHistory, store_path) -> str:
    return RunStore(store_path).persist(history)


def load_run(store_path, run_id: str) -> RunHistory:
    return RunStore(store_path).load(run_id)


# --- run execution -----------------------------------------------------------

class ThreadRunner:
    """Executes an EvolutionRun on a worker thread with a pause gate
    honored at generation boundaries."""

    def __init__(self, run: EvolutionRun, run_id: str, events=None,
                 send_frames: bool = True):
        self.run = run
        self.run_id = run_id
        self.events = events or (lambda kind, payload: None)
        self.send_frames = send_frames
        self._gate = threading.Event()
        self._gate.set()
        self._abort = False
        self._boundary = threading.Lock()
        self.finished = False
        self.error: Exception | None = None
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def start(self):
        self._thread.start()

    def _loop(self):
        try:
            while len(self.run.history.records) < self.run.config.generations:
                self._gate.wait()
                if self._abort:
                    break
                with self._boundary:
                    record = self.run.step_generation()
                    frame = (
                        self.run.render_best_frame() if self.send_frames else None
                    )
                payload = {
                    "run_id": self.run_id,
                    "generation": record.generation,
                    "best_loss": record.best_loss,
                    "losses": record.losses,
                    "diversity": record.diversity,
                    "noise_injected": record.noise_injected,
                }
                if frame is not None:
                    payload["frame_png_b64"] = base64.b64encode(frame).decode()
                self.events("generation_update", payload)
        except Exception as exc:  # surfaced to the session on completion
            self.error = exc
            log.exception("run %s failed", self.run_id)
        finally:
            self.finished = True
            self.events("run_finished", {"run_id": self.run_id})

    def pause(self):
        self._gate.clear()

    def resume(self):
        self._gate.set()

    def abort_and_join(self, timeout: float = 60.0):
        self._abort = True
        self._gate.set()
        if self._thread.is_alive():
            self._thread.join(timeout)

    def refine(self, prompt: str, mapping: MappingModel):
        with self._boundary:  # only reachable while paused at a boundary
            self.run.refine(prompt, mapping)

    @property
    def history(self) -> RunHistory:
        return self.run.history


class SyncRunner:
    """Deterministic in-thread runner for tests: generations advance only
    when step() is called explicitly."""

    def __init__(self, run: EvolutionRun, run_id: str, events=None,
                 send_frames: bool = False):
        self.run = run
        self.run_id = run_id
        self.events = events or (lambda kind, payload: None)
        self.finished = False
        self.error = None
        self.paused = False

    def start(self):
        pass

    def step(self):
        if self.finished or self.paused:
            return
        record = self.run.step_generation()
        self.events("generation_update", {
            "run_id": self.run_id,
            "generation": record.generation,
            "best_loss": record.best_loss,
            "losses": record.losses,
            "diversity": record.diversity,
            "noise_injected": record.noise_injected,
        })
        if len(self.run.history.records) >= self.run.config.generations:
            self.finish()

    def finish(self):
        if not self.finished:
            self.finished = True
            self.events("run_finished", {"run_id": self.run_id})

    def pause(self):
        self.paused = True

    def resume(self):
        self.paused = False

    def abort_and_join(self, timeout: float = 0.0):
        self.finished = True

    def refine(self, prompt: str, mapping: MappingModel):
        self.run.refine(prompt, mapping)

    @property
    def history(self) -> RunHistory:
        return self.run.history


# --- sessions ----------------------------------------------------------------

@dataclass
class Session:
    id: str
    state: str = IDLE
    runner: object = None
    run_id: str | None = None
    last_run_id: str | None = None
    created_at: float = field(default_factory=time.time)
    seq_out: int = 0
    seq_in: int = 0
    events: object = None  # callable(kind, payload) wired by the transport

    def next_seq(self) -> int:
        self.seq_out += 1
        return self.seq_out


def _error(code: str, detail: str = "") -> dict:
    payload = {"code": code}
    if detail:
        payload["detail"] = detail
    return {"type": "error", "payload": payload}


class SessionManager:
    """Owns sessions, the run store, and the shared ecosystem world."""

    def __init__(self, store: RunStore, mapping: MappingModel | None = None,
                 base_config: EvolutionConfig | None = None,
                 runner_class=ThreadRunner, send_frames: bool = True,
                 admit_agents: int = 500,
                 world: eco.EcosystemWorld | None = None):
        self.store = store
        self.mapping = mapping or train_mapping(
            bundled_dataset(), oracle_embed_text
        )
        self.base_config = base_config or EvolutionConfig()
        self.runner_class = runner_class
        self.send_frames = send_frames
        self.admit_agents = admit_agents
        self.world = world if world is not None else eco.EcosystemWorld()
        self.sessions: dict[str, Session] = {}
        self._lock = threading.RLock()

    # -- lifecycle --

    def create_session(self) -> Session:
        with self._lock:
            session = Session(id=uuid.uuid4().hex[:12])
            self.sessions[session.id] = session
            return session

    def close_session(self, session_id: str) -> None:
        with self._lock:
            session = self.sessions.pop(session_id, None)
        if session is None:
            raise NotFound(f"session {session_id} not found")
        if session.runner is not None and not session.runner.finished:
            session.runner.abort_and_join()
            if session.runner.history.records:
                self.store.persist(session.runner.history, session.run_id)
        session.state = IDLE
        session.runner = None

    # -- dispatch --

    def handle_message(self, session: Session, raw) -> list[dict]:
        """Dispatch one client message; returns immediate replies."""
        if isinstance(raw, (bytes, str)):
            try:
                msg = json.loads(raw)
            except (json.JSONDecodeError, UnicodeDecodeError):
                return [_error("bad_json")]
        else:
            msg = raw
        if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
            return [_error("bad_json", "message must be an object with a type")]
        seq = msg.get("seq")
        if seq is not None:
            if not isinstance(seq, int) or seq <= session.seq_in:
                return [_error("bad_seq",
                               f"seq must be > {session.seq_in}")]
            session.seq_in = seq
        payload = msg.get("payload") or {}
        handler = getattr(self, f"_on_{msg['type']}", None)
        if handler is None:
            return [_error("unknown_type", msg["type"])]
        try:
            return handler(session, payload)
        except (KeyError, TypeError, ValueError) as exc:
            return [_error("bad_payload", str(exc))]

    def _emit(self, session: Session, kind: str, payload: dict):
        if kind == "run_finished":
            self._finish_run(session)
            kind = "run_complete"
            payload = dict(payload)
            payload["persisted"] = True
        if session.events is not None:
            session.events(kind, payload)

    def _finish_run(self, session: Session):
        with self._lock:
            runner = session.runner
            if runner is None:
                return
            if runner.history.records:
                self.store.persist(runner.history, session.run_id)
                session.last_run_id = session.run_id
            session.runner = None
            session.state = IDLE

    def _start_runner(self, session: Session, run: EvolutionRun) -> str:
        run_id = self.store.new_id()
        runner = self.runner_class(
            run, run_id,
            events=lambda kind, payload: self._emit(session, kind, payload),
            send_frames=self.send_frames,
        )
        session.runner = runner
        session.run_id = run_id
        session.state = RUNNING
        runner.start()
        return run_id

    def _make_run(self, prompt: str, config: EvolutionConfig) -> EvolutionRun:
        return EvolutionRun(prompt, config, self.mapping)

    def _make_branch(self, history: RunHistory, generation: int,
                     candidate: int, parent_id: str | None) -> EvolutionRun:
        return branch_run(history, generation, candidate, run_id=parent_id)

    def _config_with_overrides(self, overrides: dict) -> EvolutionConfig:
        config = self.base_config
        allowed = {
            "n_agents", "sim_steps", "frames_per_eval", "generations",
            "run_seed", "workers",
        }
        cma_allowed = {
            "population_size", "sigma0", "seed", "prior_lambda",
            "diversity_threshold", "noise_boost", "sigma_max",
        }
        updates = {k: v for k, v in overrides.items() if k in allowed}
        cma_updates = {
            k: v for k, v in (overrides.get("cma") or {}).items()
            if k in cma_allowed
        }
        cma = dataclasses.replace(config.cma, **cma_updates)
        return dataclasses.replace(config, cma=cma, **updates)

    # -- message handlers --

    def _on_start_run(self, session: Session, payload: dict) -> list[dict]:
        if session.state != IDLE:
            return [_error("bad_state", f"cannot start while {session.state}")]
        prompt = payload.get("prompt")
        if not prompt or not isinstance(prompt, str):
            return [_error("bad_payload", "start_run requires a prompt")]
        config = self._config_with_overrides(payload.get("overrides") or {})
        run = self._make_run(prompt, config)
        run_id = self._start_runner(session, run)
        return [{"type": "ack", "payload": {"of": "start_run",
                                            "run_id": run_id}}]

    def _on_pause(self, session: Session, payload: dict) -> list[dict]:
        if session.state != RUNNING:
            return [_error("bad_state", f"cannot pause while {session.state}")]
        session.runner.pause()
        session.state = PAUSED
        return [{"type": "ack", "payload": {"of": "pause"}}]

    def _on_resume(self, session: Session, payload: dict) -> list[dict]:
        if session.state != PAUSED:
            return [_error("bad_state", f"cannot resume while {session.state}")]
        session.runner.resume()
        session.state = RUNNING
        return [{"type": "ack", "payload": {"of": "resume"}}]

    def _on_refine(self, session: Session, payload: dict) -> list[dict]:
        if session.state == RUNNING:
            return [_error("not_paused", "pause before refining")]
        if session.state != PAUSED:
            return [_error("bad_state", "no paused run to refine")]
        prompt = payload.get("prompt")
        if not prompt or not isinstance(prompt, str):
            return [_error("bad_payload", "refine requires a prompt")]
        session.runner.refine(prompt, self.mapping)
        return [{"type": "ack", "payload": {"of": "refine",
                                            "prompt": prompt}}]

    def _on_branch(self, session: Session, payload: dict) -> list[dict]:
        if session.state == RUNNING:
            return [_error("bad_state", "pause before branching")]
        generation = payload.get("generation")
        candidate = payload.get("candidate")
        if not isinstance(generation, int) or not isinstance(candidate, int):
            return [_error("bad_payload",
                           "branch requires generation and candidate")]
        if session.state == PAUSED:
            history = session.runner.history
            parent_id = session.run_id
            session.runner.abort_and_join()
            if history.records:
                self.store.persist(history, session.run_id)
                session.last_run_id = session.run_id
            session.runner = None
            session.state = IDLE
        elif session.last_run_id is not None:
            parent_id = session.last_run_id
            try:
                history = self.store.load(parent_id)
            except NotFound:
                return [_error("not_found", f"run {parent_id}")]
        else:
            return [_error("bad_state", "no run to branch from")]
        try:
            run = self._make_branch(history, generation, candidate, parent_id)
        except IndexError as exc:
            return [_error("bad_payload", str(exc))]
        run_id = self._start_runner(session, run)
        return [{"type": "ack", "payload": {"of": "branch",
                                            "run_id": run_id}}]

    def _on_admit(self, session: Session, payload: dict) -> list[dict]:
        run_id = payload.get("run_id") or session.last_run_id
        if run_id is None:
            return [_error("bad_state", "no finished run to admit")]
        try:
            history = self.store.load(run_id)
        except NotFound:
            return [_error("not_found", f"run {run_id}")]
        if not history.records:
            return [_error("bad_state", "run has no generations")]
        params, _ = history.best_so_far()
        embedding = oracle_embed_text(history.prompt)
        try:
            lifeform = eco.admit_lifeform(
                self.world, params, embedding, owner=session.id,
                n_agents=payload.get("n_agents") or self.admit_agents,
            )
        except eco.CapacityExceeded as exc:
            return [_error("bad_state", str(exc))]
        return [{"type": "ack", "payload": {"of": "admit",
                                            "lifeform_id": lifeform.id,
                                            "run_id": run_id}}]

    def _on_ping(self, session: Session, payload: dict) -> list[dict]:
        return [{"type": "pong", "payload": payload}]


# --- aiohttp transport -------------------------------------------------------

def build_app(manager: SessionManager, ecosystem_tick: float | None = None):
    """The HTTP + WebSocket application surface."""
    from aiohttp import WSMsgType, web

    app = web.Application()
    app["manager"] = manager

    async def healthz(request):
        return web.json_response({"ok": True})

    async def get_run(request):
        run_id = request.match_info["run_id"]
        try:
            history = manager.store.load(run_id)
        except NotFound:
            raise web.HTTPNotFound(text=json.dumps({"error": "not_found"}),
                                   content_type="application/json")
        except ParseError as exc:
            raise web.HTTPInternalServerError(
                text=json.dumps({"error": "parse_error",
                                 "line": exc.line_number}),
                content_type="application/json")
        lines = history_to_lines(history)
        return web.json_response({
            "run_id": run_id,
            "header": json.loads(lines[0]),
            "generations": [json.loads(line) for line in lines[1:]],
        })

    async def ecosystem_state(request):
        return web.json_response(eco.world_state(manager.world))

    async def ecosystem_frame(request):
        png = eco.render_world_png(manager.world)
        return web.Response(body=png, content_type="image/png")

    async def ws_handler(request):
        ws = web.WebSocketResponse(heartbeat=30)
        await ws.prepare(request)
        session = manager.create_session()
        loop = asyncio.get_running_loop()
        outbox: asyncio.Queue = asyncio.Queue()

        def push_event(kind0, payload0):
            loop.call_soon_threadsafe(
                outbox.put_nowait, {"type": kind0, "payload": payload0}
            )

        session.events = push_event

        async def drain():
            while True:
                message = await outbox.get()
                message["v"] = PROTOCOL_VERSION
                message["seq"] = session.next_seq()
                await ws.send_str(json.dumps(message))

        drain_task = asyncio.create_task(drain())
        await outbox.put({"type": "welcome",
                          "payload": {"session_id": session.id}})
        try:
            async for msg in ws:
                if msg.type == WSMsgType.TEXT:
                    replies = await loop.run_in_executor(
                        None, manager.handle_message, session, msg.data
                    )
                    for reply in replies:
                        await outbox.put(reply)
                elif msg.type == WSMsgType.ERROR:
                    break
        finally:
            drain_task.cancel()
            try:
                manager.close_session(session.id)
            except NotFound:
                pass
        return ws

    app.router.add_get("/healthz", healthz)
    app.router.add_get("/v1/runs/{run_id}", get_run)
    app.router.add_get("/v1/ecosystem/state", ecosystem_state)
    app.router.add_get("/v1/ecosystem/frame.png", ecosystem_frame)
    app.router.add_get("/v1/ws", ws_handler)

    if ecosystem_tick:
        async def step_world(app):
            loop = asyncio.get_running_loop()
            try:
                while True:
                    if manager.world.n_agents:
                        await loop.run_in_executor(
                            None, eco.ecosystem_step, manager.world
                        )
                    await asyncio.sleep(ecosystem_tick)
            except asyncio.CancelledError:
                pass

        async def start_loop(app):
            app["world_task"] = asyncio.create_task(step_world(app))

        async def stop_loop(app):
            app["world_task"].cancel()

        app.on_startup.append(start_loop)
        app.on_cleanup.append(stop_loop)
    return app


def default_manager(store_path=None, **kwargs) -> SessionManager:
    store = RunStore(store_path or os.environ.get(ENV_RUN_STORE, "./runs"))
    endpoint = os.environ.get(ENV_EMBED_ENDPOINT)
    base_config = kwargs.pop("base_config", None)
    if base_config is None:
        base_config = EvolutionConfig(
            embedder="remote" if endpoint else "oracle",
            endpoint=endpoint,
        )
    return SessionManager(store, base_config=base_config, **kwargs)


def main(argv=None) -> int:
    import argparse

    from aiohttp import web

    parser = argparse.ArgumentParser(prog="semswarm-service")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8800)
    parser.add_argument("--store", default=None)
    parser.add_argument("--generations", type=int, default=None,
                        help="default generations per run")
    parser.add_argument("--fast", action="store_true",
                        help="small default simulations (demo/testing)")
    parser.add_argument("--ecosystem-tick", type=float, default=0.05)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO)
    base = None
    if args.fast:
        base = EvolutionConfig(n_agents=128, sim_steps=80, generations=8,
                               cma=CmaConfig(), workers=2)
    if args.generations is not None:
        base = dataclasses.replace(base or EvolutionConfig(),
                                   generations=args.generations)
    manager = default_manager(args.store, base_config=base)
    app = build_app(manager, ecosystem_tick=args.ecosystem_tick)
    web.run_app(app, host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
