/** Wire protocol shared with the evolution service (version 1).
 *
 * Every user-visible control maps to exactly one client message type;
 * the server answers with acks, errors, and streamed events.
 */

export const PROTOCOL_VERSION = 1;

export type ClientMessageType =
  | "start_run"
  | "pause"
  | "resume"
  | "refine"
  | "branch"
  | "admit"
  | "ping";

export type ServerMessageType =
  | "welcome"
  | "ack"
  | "error"
  | "generation_update"
  | "run_complete"
  | "pong";

export interface ProtocolMessage {
  v?: number;
  type: string;
  payload: Record<string, unknown>;
  seq?: number;
}

export interface GenerationUpdatePayload {
  run_id: string;
  generation: number;
  best_loss: number;
  losses: number[];
  diversity: number;
  noise_injected: boolean;
  frame_png_b64?: string;
}

/** Builds outgoing messages with a strictly increasing seq. */
export class MessageEncoder {
  private seq = 0;

  encode(type: ClientMessageType, payload: Record<string, unknown> = {}): string {
    this.seq += 1;
    const message: ProtocolMessage = {
      v: PROTOCOL_VERSION,
      type,
      payload,
      seq: this.seq,
    };
    return JSON.stringify(message);
  }
}

export function decodeMessage(raw: string): ProtocolMessage | null {
  let parsed: unknown;
  try {
    parsed = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof parsed !== "object" || parsed === null) return null;
  const message = parsed as ProtocolMessage;
  if (typeof message.type !== "string") return null;
  if (message.payload === undefined) message.payload = {};
  return message;
}
