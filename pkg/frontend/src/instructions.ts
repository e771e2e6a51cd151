// Client-side instruction drafting: validation mirrors the server's
// invariants so obviously-bad drafts never hit the wire, and the submitted
// payload is exactly what the server records in its instruction log.

import type { GraphDoc, InstructionDraft } from "./types.js";

export function validateDraft(draft: InstructionDraft, graph: GraphDoc | null): string[] {
  const problems: string[] = [];
  if (!["add", "change", "mute"].includes(draft.kind)) {
    problems.push(`unknown instruction kind "${draft.kind}"`);
    return problems;
  }
  if (draft.kind === "add" && !(draft.description ?? "").trim()) {
    problems.push("add needs a nonempty description");
  }
  if (draft.kind === "change" || draft.kind === "mute") {
    if (!draft.target_handle) {
      problems.push(`${draft.kind} needs a target handle`);
    } else if (graph && !graph.nodes.some((n) => n.handle === draft.target_handle)) {
      problems.push(`no concept with handle ${draft.target_handle}`);
    }
  }
  if (draft.kind === "change" && graph && draft.target_handle) {
    const target = graph.nodes.find((n) => n.handle === draft.target_handle);
    if (target && target.level === 1) {
      problems.push("change cannot target the environment concept");
    }
  }
  if (draft.mask_hint) {
    const [h, w] = draft.mask_hint.size;
    if (graph && (h !== graph.size[0] || w !== graph.size[1])) {
      problems.push(`mask hint ${h}x${w} does not match frame size ${graph.size[0]}x${graph.size[1]}`);
    }
  }
  return problems;
}

/** Body for POST /v1/sessions/{id}/step; field-for-field what the server logs. */
export function toStepPayload(draft: InstructionDraft | null, promptOverride?: string[]) {
  const body: Record<string, unknown> = {};
  if (draft) {
    const instruction: Record<string, unknown> = { kind: draft.kind };
    if (draft.target_handle !== undefined) instruction.target_handle = draft.target_handle;
    if (draft.description !== undefined) instruction.description = draft.description;
    if (draft.mask_hint !== undefined) instruction.mask_hint = draft.mask_hint;
    body.instruction = instruction;
  }
  if (promptOverride) body.prompt_override = promptOverride;
  return body;
}

/**
 * Prompt the server will assemble for the next frame: level-1 handle, then
 * each unmuted level-2 handle preceded by its R1 edge handle, in node order.
 * Mirrors the server policy so muting updates the preview instantly.
 */
export function promptPreview(graph: GraphDoc): string[] {
  const level1 = graph.nodes.find((n) => n.level === 1);
  if (!level1) return [];
  const tokens: string[] = level1.muted ? [] : [level1.handle];
  const r1ByNode = new Map<string, string>();
  for (const e of graph.edges) {
    if (e.kind !== "R1") continue;
    const other = e.endpoints[0] === level1.id ? e.endpoints[1] : e.endpoints[0];
    r1ByNode.set(other, e.handle);
  }
  for (const node of graph.nodes) {
    if (node.level !== 2 || node.muted) continue;
    const edgeHandle = r1ByNode.get(node.id);
    if (edgeHandle && !level1.muted) tokens.push(edgeHandle);
    tokens.push(node.handle);
  }
  return tokens;
}
