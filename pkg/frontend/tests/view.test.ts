import { describe, expect, it } from "vitest";

import type { QueueCase } from "../src/api.js";
import { initialState, reduce } from "../src/state.js";
import { escapeHtml, renderCase, renderStatusLine } from "../src/view.js";

const hostile: QueueCase = {
  case_id: "c-<script>",
  state: "awaiting_human",
  priority: true,
  history: [
    { role: "user", text: "my reply contains <think>raw tags</think> & ampersands" },
    { role: "human_csr", text: 'quotes "double" and \'single\'' },
  ],
  query: "does <answer>x</answer> break the page?",
  snippets: [{ id: "kb-<1>", content: "snippet with <answer> literal" }],
  response: "<think>inner</think><answer>reply</answer>",
  detector: { label: "improper_rag_use", reason: "uses <answer> incorrectly" },
  lease_expires_in_s: 600,
};

function stateWith(item: QueueCase) {
  let s = reduce(initialState(), { type: "login", annotatorId: "a", token: "" });
  return reduce(s, { type: "case_loaded", item });
}

describe("escapeHtml", () => {
  it("escapes the five significant characters", () => {
    expect(escapeHtml(`<a href="x">&'`)).toBe("&lt;a href=&quot;x&quot;&gt;&amp;&#39;");
  });

  it("leaves plain text alone", () => {
    expect(escapeHtml("hello world")).toBe("hello world");
  });
});

describe("renderCase", () => {
  it("renders tag-literal dialogue content without emitting raw tags", () => {
    const html = renderCase(stateWith(hostile));
    expect(html).not.toContain("<think>");
    expect(html).not.toContain("<answer>");
    expect(html).not.toContain("<script>");
    expect(html).toContain("&lt;think&gt;");
    expect(html).toContain("&lt;answer&gt;reply&lt;/answer&gt;");
  });

  it("shows detector verdict, priority badge, and countdown", () => {
    const html = renderCase(stateWith(hostile));
    expect(html).toContain("improper_rag_use");
    expect(html).toContain("user feedback");
    expect(html).toContain("10:00");
  });

  it("marks expired leases", () => {
    let s = stateWith(hostile);
    s = reduce(s, { type: "tick", seconds: 601 });
    const html = renderCase(s);
    expect(html).toContain("Lease expired");
    expect(html).toContain("stale");
  });

  it("renders role labels", () => {
    const html = renderCase(stateWith(hostile));
    expect(html).toContain("Human CSR");
  });
});

describe("renderStatusLine", () => {
  it("describes each phase", () => {
    expect(renderStatusLine(initialState())).toContain("Sign in");
    const idle = reduce(stateWith(hostile), { type: "queue_empty" });
    expect(renderStatusLine(idle)).toContain("Queue drained");
    const wrong = reduce(stateWith(hostile), { type: "wrong_state", detail: "gone" });
    expect(renderStatusLine(wrong)).toContain("already adjudicated");
  });
});
