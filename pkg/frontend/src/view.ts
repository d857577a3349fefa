/** Client-side run state: a pure projection of the server event stream.
 *
 * No fitness or simulation math happens here; identical event logs must
 * produce identical views, which the tests assert directly.
 */

import type { GenerationUpdatePayload, ProtocolMessage } from "./protocol.js";

export type RunStatus =
  | "idle"
  | "running"
  | "paused"
  | "complete"
  | "reconnecting";

export interface GenerationView {
  index: number;
  loss: number;
  losses: number[];
  diversity: number;
  noiseInjected: boolean;
  framePngB64?: string;
}

export interface RevisionView {
  generation: number;
  prompt: string;
}

export interface ClientRunView {
  sessionId: string | null;
  runId: string | null;
  status: RunStatus;
  prompt: string;
  revisions: RevisionView[];
  generations: GenerationView[];
  lifeformIds: string[];
  lastError: string | null;
}

export function initialView(): ClientRunView {
  return {
    sessionId: null,
    runId: null,
    status: "idle",
    prompt: "",
    revisions: [],
    generations: [],
    lifeformIds: [],
    lastError: null,
  };
}

function withGeneration(
  view: ClientRunView,
  payload: GenerationUpdatePayload,
): ClientRunView {
  if (view.runId !== null && payload.run_id !== view.runId) return view;
  const entry: GenerationView = {
    index: payload.generation,
    loss: payload.best_loss,
    losses: payload.losses ?? [],
    diversity: payload.diversity,
    noiseInjected: payload.noise_injected,
    framePngB64: payload.frame_png_b64,
  };
  return { ...view, generations: [...view.generations, entry] };
}

function withAck(view: ClientRunView, payload: Record<string, unknown>): ClientRunView {
  switch (payload.of) {
    case "start_run":
      return {
        ...view,
        runId: String(payload.run_id),
        status: "running",
        generations: [],
        revisions: [],
        lastError: null,
      };
    case "branch":
      return {
        ...view,
        runId: String(payload.run_id),
        status: "running",
        generations: [],
        lastError: null,
      };
    case "pause":
      return { ...view, status: "paused" };
    case "resume":
      return { ...view, status: "running" };
    case "refine":
      return {
        ...view,
        prompt: String(payload.prompt),
        revisions: [
          ...view.revisions,
          {
            generation: view.generations.length,
            prompt: String(payload.prompt),
          },
        ],
      };
    case "admit":
      return {
        ...view,
        lifeformIds: [...view.lifeformIds, String(payload.lifeform_id)],
      };
    default:
      return view;
  }
}

/** Folds one server message into the view; unknown types are ignored. */
export function applyServerMessage(
  view: ClientRunView,
  message: ProtocolMessage,
): ClientRunView {
  switch (message.type) {
    case "welcome":
      return { ...view, sessionId: String(message.payload.session_id) };
    case "ack":
      return withAck(view, message.payload);
    case "error": {
      const code = String(message.payload.code ?? "unknown");
      const detail = message.payload.detail
        ? `: ${message.payload.detail}`
        : "";
      return { ...view, lastError: `${code}${detail}` };
    }
    case "generation_update":
      return withGeneration(
        view,
        message.payload as unknown as GenerationUpdatePayload,
      );
    case "run_complete":
      return { ...view, status: "complete" };
    default:
      return view;
  }
}

export interface PersistedRun {
  run_id: string;
  header: { prompt: string; prompt_revisions: [number, string][] };
  generations: Array<{
    generation: number;
    best_loss: number;
    losses: number[];
    diversity: number;
    noise_injected: boolean;
  }>;
}

/** Rebuilds the view from the HTTP history after a connection drop. */
export function replayFromHistory(
  view: ClientRunView,
  history: PersistedRun,
): ClientRunView {
  return {
    ...view,
    runId: history.run_id,
    prompt: history.header.prompt,
    revisions: history.header.prompt_revisions.map(([generation, prompt]) => ({
      generation,
      prompt,
    })),
    generations: history.generations.map((record) => ({
      index: record.generation,
      loss: record.best_loss,
      losses: record.losses,
      diversity: record.diversity,
      noiseInjected: record.noise_injected,
    })),
    lastError: null,
  };
}
