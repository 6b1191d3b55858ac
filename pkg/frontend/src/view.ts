// HTML rendering. Every dynamic string goes through escapeHtml so dialogue
// content with tag-literal text cannot break the page.

import type { QueueCase } from "./api.js";
import { AppState, canSubmit, formatCountdown } from "./state.js";

const ROLE_LABELS: Record<string, string> = {
  user: "User",
  assistant: "Customer Service",
  human_csr: "Human CSR",
};

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

function renderHistory(item: QueueCase): string {
  if (item.history.length === 0) return `<p class="muted">(no prior turns)</p>`;
  return item.history
    .map(
      (turn) =>
        `<div class="turn turn-${escapeHtml(turn.role)}">` +
        `<span class="role">${escapeHtml(ROLE_LABELS[turn.role] ?? turn.role)}</span>` +
        `<span class="text">${escapeHtml(turn.text)}</span></div>`,
    )
    .join("");
}

function renderSnippets(item: QueueCase): string {
  if (item.snippets.length === 0) return `<p class="muted">(no retrieved knowledge)</p>`;
  return item.snippets
    .map(
      (s) =>
        `<div class="snippet"><span class="snippet-id">${escapeHtml(s.id)}</span> ` +
        `${escapeHtml(s.content)}</div>`,
    )
    .join("");
}

export function renderCase(state: AppState): string {
  const item = state.current;
  if (!item) return "";
  const detector = item.detector
    ? `<span class="badge">${escapeHtml(item.detector.label)}</span> ${escapeHtml(item.detector.reason)}`
    : `<span class="badge badge-muted">no detector verdict</span>`;
  const expired = state.leaseExpired
    ? `<div class="lease-expired">Lease expired — refetch to continue.</div>`
    : "";
  return `
    <div class="case ${state.leaseExpired ? "stale" : ""}" data-case-id="${escapeHtml(item.case_id)}">
      <div class="case-header">
        <span class="case-id">${escapeHtml(item.case_id)}</span>
        ${item.priority ? `<span class="badge badge-priority">user feedback</span>` : ""}
        <span class="countdown" id="countdown">${formatCountdown(state.leaseRemainingS)}</span>
      </div>
      ${expired}
      <h3>History</h3>
      <div class="history">${renderHistory(item)}</div>
      <h3>Current question</h3>
      <p class="query">${escapeHtml(item.query)}</p>
      <h3>Retrieved knowledge</h3>
      <div class="snippets">${renderSnippets(item)}</div>
      <h3>Model response</h3>
      <p class="response">${escapeHtml(item.response)}</p>
      <h3>Detector verdict</h3>
      <p class="detector">${detector}</p>
    </div>`;
}

export function renderStatusLine(state: AppState): string {
  switch (state.phase) {
    case "login":
      return "Sign in to start reviewing.";
    case "loading":
      return "Fetching the next case…";
    case "idle":
      return `Queue drained — nothing waiting. Reviewed ${state.reviewed} case(s).`;
    case "reviewing":
      return state.leaseExpired ? "Lease expired." : "Reviewing.";
    case "submitting":
      return "Submitting verdict…";
    case "wrong_state":
      return "Case already adjudicated elsewhere.";
    case "error":
      return "Connection problem.";
  }
}

export function submitDisabled(state: AppState): boolean {
  return !canSubmit(state);
}
