// Wire types mirroring the /v1 endpoints.

export interface SessionManifest {
  id: string;
  status: "constructing" | "ready" | "stepping" | "refining" | "error";
  error: string | null;
  frame_count: number;
  graph_version: number;
  created_at: number;
  updated_at: number;
}

export interface MaskDoc {
  size: [number, number];
  rle: string;
}

export interface NodeDoc {
  id: string;
  level: 1 | 2 | 3;
  handle: string;
  embedding_ref: string;
  mask: string;
  parent_region: string | null;
  muted: boolean;
}

export interface EdgeDoc {
  id: string;
  kind: "R1" | "R2" | "R3";
  endpoints: [string, string];
  handle: string;
  embedding_ref: string;
}

export interface GraphDoc {
  graph_version?: number;
  version: number;
  size: [number, number];
  nodes: NodeDoc[];
  edges: EdgeDoc[];
}

export interface FrameMeta {
  index: number;
  camera: unknown;
  prompt_tokens: string[];
  fill_mask: MaskDoc;
  graph_version: number;
  ckpt_version: number;
  prompt_override?: string[];
}

export type InstructionKind = "add" | "change" | "mute";

export interface InstructionDraft {
  kind: InstructionKind;
  target_handle?: string;
  description?: string;
  mask_hint?: MaskDoc;
}

export interface MetricsReport {
  metric: number;
  per_image: number[];
  backend_id: string;
}

export interface ApiError {
  code: string;
  message: string;
}

export interface InstructionLogEntry {
  frame_index: number;
  instruction: Record<string, unknown>;
}
