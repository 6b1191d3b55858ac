// Wires the DOM to the pure state module and the API client.
// Hotkeys: c = confirm hallucination, o = overturn, s = skip, Enter = submit.

import { ApiError, TriageApi } from "./api.js";
import { Action, AppState, canSubmit, initialState, reduce } from "./state.js";
import { renderCase, renderStatusLine, submitDisabled } from "./view.js";

let state: AppState = initialState();
let api = new TriageApi();

const $ = (id: string): HTMLElement => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el;
};

function dispatch(action: Action): void {
  state = reduce(state, action);
  render();
}

function render(): void {
  $("status").textContent = renderStatusLine(state);
  $("login-panel").hidden = state.phase !== "login";
  $("review-panel").hidden = state.phase === "login";
  $("case-panel").innerHTML = renderCase(state);
  $("toast").textContent = state.toast ?? "";
  $("toast").hidden = !state.toast;

  const dialog = $("dialog") as HTMLDialogElement;
  if (state.phase === "wrong_state" || state.phase === "error") {
    $("dialog-message").textContent = state.dialogMessage ?? "";
    if (!dialog.open) dialog.showModal();
  } else if (dialog.open) {
    dialog.close();
  }

  const form = $("verdict-form");
  form.hidden = !(state.phase === "reviewing" || state.phase === "submitting");
  ($("is-halluc") as HTMLInputElement).checked = state.isHallucination;
  ($("reason") as HTMLTextAreaElement).value = state.reason;
  ($("reason") as HTMLTextAreaElement).disabled = !state.isHallucination;
  ($("submit") as HTMLButtonElement).disabled = submitDisabled(state);
}

async function fetchNext(): Promise<void> {
  dispatch({ type: "fetch_start" });
  try {
    const item = await api.nextCase(state.annotatorId);
    if (item === null) {
      dispatch({ type: "queue_empty" });
    } else {
      dispatch({ type: "case_loaded", item });
    }
  } catch (error) {
    dispatch({ type: "network_error", message: String(error) });
  }
}

async function submit(): Promise<void> {
  if (!canSubmit(state) || !state.current) return;
  const caseId = state.current.case_id;
  dispatch({ type: "submit_start" });
  try {
    const result = await api.submitVerdict(
      caseId,
      state.isHallucination,
      state.reason,
      state.annotatorId,
    );
    dispatch({ type: "submit_ok", newState: result.state });
    await fetchNext();
  } catch (error) {
    if (error instanceof ApiError && error.isWrongState) {
      dispatch({ type: "wrong_state", detail: error.detail });
    } else {
      dispatch({ type: "network_error", message: String(error) });
    }
  }
}

function bind(): void {
  $("login-form").addEventListener("submit", (event) => {
    event.preventDefault();
    const annotator = ($("annotator-id") as HTMLInputElement).value.trim();
    const token = ($("token") as HTMLInputElement).value;
    if (!annotator) return;
    api = new TriageApi("", token); // token lives in memory only
    dispatch({ type: "login", annotatorId: annotator, token });
    void fetchNext();
  });

  $("is-halluc").addEventListener("change", (event) => {
    dispatch({ type: "set_hallucination", value: (event.target as HTMLInputElement).checked });
  });
  $("reason").addEventListener("input", (event) => {
    dispatch({ type: "set_reason", value: (event.target as HTMLTextAreaElement).value });
  });
  $("verdict-form").addEventListener("submit", (event) => {
    event.preventDefault();
    void submit();
  });
  $("skip").addEventListener("click", () => {
    dispatch({ type: "skip" });
    void fetchNext();
  });
  $("dialog-ok").addEventListener("click", () => {
    dispatch({ type: "dismiss_dialog" });
    void fetchNext();
  });

  document.addEventListener("keydown", (event) => {
    if (state.phase !== "reviewing") return;
    const target = event.target as HTMLElement;
    if (target.tagName === "TEXTAREA" || target.tagName === "INPUT") return;
    if (event.key === "c") {
      dispatch({ type: "set_hallucination", value: true });
      ($("reason") as HTMLTextAreaElement).focus();
    } else if (event.key === "o") {
      dispatch({ type: "set_hallucination", value: false });
      void submit();
    } else if (event.key === "s") {
      dispatch({ type: "skip" });
      void fetchNext();
    } else if (event.key === "Enter") {
      void submit();
    }
  });

  window.setInterval(() => {
    if (state.phase === "reviewing") dispatch({ type: "tick", seconds: 1 });
  }, 1000);
}

bind();
render();
