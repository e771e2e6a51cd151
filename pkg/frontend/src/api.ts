// Thin typed client over the /v1 endpoints. fetch is injectable for tests.

import type {
  ApiError,
  FrameMeta,
  GraphDoc,
  InstructionLogEntry,
  MetricsReport,
  SessionManifest,
} from "./types.js";

export class ApiFailure extends Error {
  constructor(
    public status: number,
    public body: ApiError,
  ) {
    super(`${body.code}: ${body.message}`);
  }
}

type Fetch = typeof fetch;

export class Client {
  constructor(
    private baseUrl: string,
    private fetchFn: Fetch = fetch.bind(globalThis),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, init);
    const body = await resp.json();
    if (!resp.ok) {
      throw new ApiFailure(resp.status, body as ApiError);
    }
    return body as T;
  }

  listSessions(): Promise<SessionManifest[]> {
    return this.request("/v1/sessions");
  }

  getSession(id: string): Promise<SessionManifest> {
    return this.request(`/v1/sessions/${id}`);
  }

  step(id: string, payload: Record<string, unknown>): Promise<FrameMeta> {
    return this.request(`/v1/sessions/${id}/step`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  getGraph(id: string): Promise<GraphDoc> {
    return this.request(`/v1/sessions/${id}/graph`);
  }

  getFrameMeta(id: string, index: number): Promise<FrameMeta> {
    return this.request(`/v1/sessions/${id}/frames/${index}.json`);
  }

  frameUrl(id: string, index: number): string {
    return `${this.baseUrl}/v1/sessions/${id}/frames/${index}.png`;
  }

  getMetrics(id: string): Promise<MetricsReport> {
    return this.request(`/v1/sessions/${id}/metrics`);
  }

  getInstructions(id: string): Promise<InstructionLogEntry[]> {
    return this.request(`/v1/sessions/${id}/instructions`);
  }
}
