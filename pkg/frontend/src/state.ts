// Pure application state. The UI is a function of (server snapshot, form input);
// every event funnels through reduce() so a refresh can never lose an
// already-submitted verdict.

import type { QueueCase } from "./api.js";

export type Phase =
  | "login"
  | "idle" // queue drained
  | "loading"
  | "reviewing"
  | "submitting"
  | "wrong_state" // case adjudicated elsewhere; informative dialog
  | "error";

export type AppState = {
  phase: Phase;
  annotatorId: string;
  token: string;
  current: QueueCase | null;
  isHallucination: boolean;
  reason: string;
  leaseRemainingS: number | null;
  leaseExpired: boolean;
  toast: string | null;
  dialogMessage: string | null;
  reviewed: number;
};

export type Action =
  | { type: "login"; annotatorId: string; token: string }
  | { type: "fetch_start" }
  | { type: "case_loaded"; item: QueueCase }
  | { type: "queue_empty" }
  | { type: "set_hallucination"; value: boolean }
  | { type: "set_reason"; value: string }
  | { type: "submit_start" }
  | { type: "submit_ok"; newState: string }
  | { type: "wrong_state"; detail: string }
  | { type: "network_error"; message: string }
  | { type: "dismiss_dialog" }
  | { type: "tick"; seconds: number }
  | { type: "skip" };

export function initialState(): AppState {
  return {
    phase: "login",
    annotatorId: "",
    token: "",
    current: null,
    isHallucination: false,
    reason: "",
    leaseRemainingS: null,
    leaseExpired: false,
    toast: null,
    dialogMessage: null,
    reviewed: 0,
  };
}

function clearedForm(state: AppState): AppState {
  return {
    ...state,
    current: null,
    isHallucination: false,
    reason: "",
    leaseRemainingS: null,
    leaseExpired: false,
  };
}

export function reduce(state: AppState, action: Action): AppState {
  switch (action.type) {
    case "login":
      return {
        ...state,
        phase: "loading",
        annotatorId: action.annotatorId,
        token: action.token,
      };
    case "fetch_start":
      return { ...clearedForm(state), phase: "loading", toast: state.toast };
    case "case_loaded":
      return {
        ...clearedForm(state),
        phase: "reviewing",
        current: action.item,
        leaseRemainingS: action.item.lease_expires_in_s,
      };
    case "queue_empty":
      return { ...clearedForm(state), phase: "idle", toast: null };
    case "set_hallucination":
      if (state.phase !== "reviewing") return state;
      return { ...state, isHallucination: action.value };
    case "set_reason":
      if (state.phase !== "reviewing") return state;
      return { ...state, reason: action.value };
    case "submit_start":
      if (!canSubmit(state)) return state;
      return { ...state, phase: "submitting" };
    case "submit_ok":
      return {
        ...clearedForm(state),
        phase: "loading",
        toast: `verdict saved (${action.newState})`,
        reviewed: state.reviewed + 1,
      };
    case "wrong_state":
      return {
        ...state,
        phase: "wrong_state",
        dialogMessage: action.detail,
      };
    case "network_error":
      return { ...state, phase: "error", dialogMessage: action.message };
    case "dismiss_dialog":
      // after a wrong-state dialog the stale case must be refetched
      return { ...clearedForm(state), phase: "loading", dialogMessage: null };
    case "tick": {
      if (state.phase !== "reviewing" || state.leaseRemainingS === null) return state;
      const remaining = Math.max(0, state.leaseRemainingS - action.seconds);
      return { ...state, leaseRemainingS: remaining, leaseExpired: remaining <= 0 };
    }
    case "skip":
      if (state.phase !== "reviewing") return state;
      return { ...clearedForm(state), phase: "loading" };
  }
}

export function canSubmit(state: AppState): boolean {
  if (state.phase !== "reviewing" || state.current === null || state.leaseExpired) {
    return false;
  }
  return !state.isHallucination || state.reason.trim().length > 0;
}

export function formatCountdown(seconds: number | null): string {
  if (seconds === null) return "";
  const s = Math.max(0, Math.floor(seconds));
  return `${Math.floor(s / 60)}:${String(s % 60).padStart(2, "0")}`;
}
