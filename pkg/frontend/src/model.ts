// Display-state derivation. A SessionView is a pure function of the latest
// API payload; nothing here keeps state that could drift from the server.

import type { SessionDetail, SessionFailure, SessionSummary } from "./api.js";

export type BadgeTone = "waiting" | "busy" | "live" | "done" | "dead";

const TONES: Record<string, BadgeTone> = {
  pending: "waiting",
  cloning: "busy",
  building: "busy",
  spawning: "busy",
  running: "live",
  stopping: "busy",
  stopped: "done",
  failed: "dead",
};

const TERMINAL = new Set(["stopped", "failed"]);

export interface SessionView {
  id: string;
  repo: string;
  owner: string;
  state: string;
  badgeTone: BadgeTone;
  openHref: string | null;
  failure: SessionFailure | null;
  stoppable: boolean;
  terminal: boolean;
  elapsedText: string;
}

export function sessionView(
  payload: SessionSummary | SessionDetail,
  nowMs: number = Date.now(),
): SessionView {
  const state = payload.state;
  const failure = "failure" in payload ? payload.failure : null;
  return {
    id: payload.id,
    repo: payload.repo,
    owner: ownerFromRoute(payload.route_path),
    state,
    badgeTone: TONES[state] ?? "waiting",
    openHref: state === "running" ? payload.route_path : null,
    failure: state === "failed" ? failure : null,
    stoppable: !TERMINAL.has(state),
    terminal: TERMINAL.has(state),
    elapsedText: elapsed(nowMs / 1000 - payload.created_at),
  };
}

export function ownerFromRoute(routePath: string): string {
  // Route paths look like /user/{login}/{session}/.
  const parts = routePath.split("/");
  return parts.length > 2 ? parts[2] : "";
}

export function elapsed(seconds: number): string {
  if (!Number.isFinite(seconds) || seconds < 0) return "";
  if (seconds < 60) return `${Math.floor(seconds)}s`;
  if (seconds < 3600) return `${Math.floor(seconds / 60)}m`;
  if (seconds < 86400) return `${Math.floor(seconds / 3600)}h ${Math.floor((seconds % 3600) / 60)}m`;
  return `${Math.floor(seconds / 86400)}d`;
}
