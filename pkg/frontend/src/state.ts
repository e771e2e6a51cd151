// Client session state: polling snapshot, graph version gating, and the
// single-mutation-in-flight rule. All server mutations flow through
// submitStep; 409/422 bodies surface verbatim in the banner.

import { ApiFailure, Client } from "./api.js";
import { toStepPayload } from "./instructions.js";
import type {
  FrameMeta,
  GraphDoc,
  InstructionDraft,
  MetricsReport,
  SessionManifest,
} from "./types.js";

export class ClientSessionState {
  manifest: SessionManifest | null = null;
  graph: GraphDoc | null = null;
  graphVersion = -1;
  frames = new Map<number, FrameMeta>();
  metrics: MetricsReport | null = null;
  draft: InstructionDraft | null = null;
  busy = false;
  banner: string | null = null;

  constructor(
    public api: Client,
    public sessionId: string,
  ) {}

  /** Stale graph documents (older version than what we hold) are rejected. */
  applyGraph(doc: GraphDoc): boolean {
    const version = doc.graph_version ?? 0;
    if (version < this.graphVersion) return false;
    this.graph = doc;
    this.graphVersion = version;
    return true;
  }

  async pollTick(): Promise<void> {
    const manifest = await this.api.getSession(this.sessionId);
    this.manifest = manifest;
    if (manifest.status === "error") {
      this.banner = manifest.error ?? "session error";
      return;
    }
    if (manifest.graph_version !== this.graphVersion) {
      this.applyGraph(await this.api.getGraph(this.sessionId));
    }
    for (let i = 0; i < manifest.frame_count; i++) {
      if (!this.frames.has(i)) {
        this.frames.set(i, await this.api.getFrameMeta(this.sessionId, i));
      }
    }
  }

  latestFrameIndex(): number {
    return this.manifest ? this.manifest.frame_count - 1 : 0;
  }

  /**
   * POST /step with the current draft (or none). Optimistic busy flag; the
   * server's 409/422 message lands in the banner untouched.
   */
  async submitStep(promptOverride?: string[]): Promise<FrameMeta | null> {
    if (this.busy) {
      this.banner = "a step is already in flight in this tab";
      return null;
    }
    this.busy = true;
    this.banner = null;
    try {
      const frame = await this.api.step(
        this.sessionId,
        toStepPayload(this.draft, promptOverride),
      );
      this.frames.set(frame.index, frame);
      this.draft = null;
      return frame;
    } catch (err) {
      if (err instanceof ApiFailure) {
        this.banner = `${err.body.code}: ${err.body.message}`;
        return null;
      }
      throw err;
    } finally {
      this.busy = false;
    }
  }

  async refreshMetrics(): Promise<void> {
    this.metrics = await this.api.getMetrics(this.sessionId);
  }
}
