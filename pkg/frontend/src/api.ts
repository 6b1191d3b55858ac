// Typed client for the triage queue HTTP API.

export type HistoryTurn = { role: "user" | "assistant" | "human_csr"; text: string };

export type Snippet = { id: string; content: string };

export type DetectorVerdict = { label: string; reason: string } | null;

export type QueueCase = {
  case_id: string;
  state: string;
  priority: boolean;
  history: HistoryTurn[];
  query: string;
  snippets: Snippet[];
  response: string;
  detector: DetectorVerdict;
  lease_expires_in_s: number | null;
};

export type Stats = {
  states: Record<string, number>;
  queue_depth: number;
  active_leases: number;
  terminal: number;
};

export type VerdictResult = { case_id: string; state: string };

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
  get isWrongState(): boolean {
    return this.status === 409;
  }
}

async function failFrom(r: Response): Promise<never> {
  let detail = r.statusText;
  try {
    const body = await r.json();
    if (body && typeof body.detail === "string") detail = body.detail;
  } catch {
    /* non-JSON error body */
  }
  throw new ApiError(r.status, detail);
}

export class TriageApi {
  constructor(private baseUrl: string = "", private token: string = "") {}

  private headers(json = false): HeadersInit {
    const h: Record<string, string> = {};
    if (json) h["Content-Type"] = "application/json";
    if (this.token) h["Authorization"] = `Bearer ${this.token}`;
    return h;
  }

  async health(): Promise<boolean> {
    try {
      const r = await fetch(`${this.baseUrl}/healthz`);
      return r.ok;
    } catch {
      return false;
    }
  }

  async nextCase(session: string): Promise<QueueCase | null> {
    const r = await fetch(
      `${this.baseUrl}/queue/next?session=${encodeURIComponent(session)}`,
      { headers: this.headers() },
    );
    if (r.status === 204) return null;
    if (!r.ok) return failFrom(r);
    return (await r.json()) as QueueCase;
  }

  async submitVerdict(
    caseId: string,
    isHallucination: boolean,
    reason: string,
    annotatorId: string,
  ): Promise<VerdictResult> {
    const r = await fetch(`${this.baseUrl}/queue/${encodeURIComponent(caseId)}/verdict`, {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify({
        is_hallucination: isHallucination,
        reason,
        annotator_id: annotatorId,
      }),
    });
    if (!r.ok) return failFrom(r);
    return (await r.json()) as VerdictResult;
  }

  async stats(): Promise<Stats> {
    const r = await fetch(`${this.baseUrl}/stats`, { headers: this.headers() });
    if (!r.ok) return failFrom(r);
    return (await r.json()) as Stats;
  }

  async getCase(caseId: string): Promise<QueueCase> {
    const r = await fetch(`${this.baseUrl}/cases/${encodeURIComponent(caseId)}`, {
      headers: this.headers(),
    });
    if (!r.ok) return failFrom(r);
    return (await r.json()) as QueueCase;
  }
}
