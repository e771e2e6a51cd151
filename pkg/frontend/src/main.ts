// Entry point: wires the polling loop, instruction form, brush editor and
// step submission onto index.html. Query params: ?session=ID[&api=BASE].

import { Client } from "./api.js";
import { BrushMask } from "./brush.js";
import { promptPreview, validateDraft } from "./instructions.js";
import {
  renderBanner,
  renderDrift,
  renderFilmstrip,
  renderGraph,
  renderPromptPreview,
  renderStatus,
} from "./render.js";
import { ClientSessionState } from "./state.js";
import type { InstructionDraft, InstructionKind } from "./types.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const params = new URLSearchParams(location.search);
const api = new Client(params.get("api") ?? "");
const sessionId = params.get("session") ?? "";

const state = new ClientSessionState(api, sessionId);
let brush: BrushMask | null = null;
let brushDirty = false;

const banner = $("banner");
const statusLine = $("status");
const filmstrip = $("filmstrip");
const graphSvg = $("graph") as unknown as SVGSVGElement;
const promptEl = $("prompt-preview");
const kindSelect = $("kind") as HTMLSelectElement;
const targetSelect = $("target") as HTMLSelectElement;
const descriptionInput = $("description") as HTMLInputElement;
const validationEl = $("validation");
const stepButton = $("step") as HTMLButtonElement;
const clearBrushButton = $("clear-brush") as HTMLButtonElement;
const brushCanvas = $("brush") as HTMLCanvasElement;
const brushBackdrop = $("brush-backdrop") as HTMLImageElement;

function currentDraft(): InstructionDraft | null {
  const kind = kindSelect.value as InstructionKind | "none";
  if (kind === "none") return null;
  const draft: InstructionDraft = { kind };
  if (kind === "change" || kind === "mute") draft.target_handle = targetSelect.value;
  if (kind !== "mute" && descriptionInput.value) draft.description = descriptionInput.value;
  if (brush && brushDirty && !brush.isEmpty()) draft.mask_hint = brush.toDoc();
  return draft;
}

function refreshForm(): void {
  const draft = currentDraft();
  state.draft = draft;
  const problems = draft ? validateDraft(draft, state.graph) : [];
  validationEl.textContent = problems.join("; ");
  stepButton.disabled = state.busy || problems.length > 0;
  targetSelect.classList.toggle("hidden", !draft || draft.kind === "add");
  descriptionInput.classList.toggle("hidden", draft?.kind === "mute");
}

function refreshTargets(): void {
  if (!state.graph) return;
  const handles = state.graph.nodes.filter((n) => n.level !== 1).map((n) => n.handle);
  targetSelect.replaceChildren(
    ...handles.map((h) => {
      const opt = document.createElement("option");
      opt.value = h;
      opt.textContent = h;
      return opt;
    }),
  );
}

function resizeBrush(): void {
  if (!state.graph) return;
  const [h, w] = state.graph.size;
  if (!brush || brush.height !== h || brush.width !== w) {
    brush = new BrushMask(h, w);
    brushDirty = false;
    brushCanvas.width = w;
    brushCanvas.height = h;
  }
}

function drawBrush(): void {
  if (!brush) return;
  const ctx = brushCanvas.getContext("2d");
  if (!ctx) return;
  ctx.clearRect(0, 0, brush.width, brush.height);
  const img = ctx.createImageData(brush.width, brush.height);
  for (let i = 0; i < brush.bits.length; i++) {
    if (brush.bits[i]) {
      img.data[4 * i] = 255;
      img.data[4 * i + 1] = 120;
      img.data[4 * i + 2] = 40;
      img.data[4 * i + 3] = 150;
    }
  }
  ctx.putImageData(img, 0, 0);
}

let painting = false;
brushCanvas.addEventListener("pointerdown", (ev) => {
  painting = true;
  paintAt(ev);
});
brushCanvas.addEventListener("pointermove", (ev) => painting && paintAt(ev));
window.addEventListener("pointerup", () => (painting = false));

function paintAt(ev: PointerEvent): void {
  if (!brush) return;
  const rect = brushCanvas.getBoundingClientRect();
  const col = ((ev.clientX - rect.left) / rect.width) * brush.width;
  const row = ((ev.clientY - rect.top) / rect.height) * brush.height;
  brush.paint(row, col, Math.max(1, brush.width / 16), ev.shiftKey ? 0 : 1);
  brushDirty = true;
  drawBrush();
  refreshForm();
}

clearBrushButton.addEventListener("click", () => {
  brush?.clear();
  brushDirty = false;
  drawBrush();
  refreshForm();
});

for (const el of [kindSelect, targetSelect, descriptionInput]) {
  el.addEventListener("input", refreshForm);
}

stepButton.addEventListener("click", async () => {
  stepButton.disabled = true;
  const frame = await state.submitStep();
  if (frame) {
    kindSelect.value = "none";
    descriptionInput.value = "";
    brush?.clear();
    brushDirty = false;
    drawBrush();
    await state.refreshMetrics().catch(() => undefined);
  }
  repaint();
});

function repaint(): void {
  renderBanner(banner, state);
  renderStatus(statusLine, state);
  renderFilmstrip(filmstrip, state, api, (i) => {
    brushBackdrop.src = api.frameUrl(sessionId, i);
  });
  renderGraph(graphSvg, state);
  if (state.graph) renderPromptPreview(promptEl, promptPreview(state.graph));
  renderDrift(
    $("drift-first") as HTMLImageElement,
    $("drift-latest") as HTMLImageElement,
    $("drift-metric"),
    state,
    api,
  );
  refreshTargets();
  resizeBrush();
  refreshForm();
  const latest = state.latestFrameIndex();
  if (latest >= 0 && !brushBackdrop.src) {
    brushBackdrop.src = api.frameUrl(sessionId, latest);
  }
}

async function poll(): Promise<void> {
  try {
    await state.pollTick();
  } catch (err) {
    state.banner = err instanceof Error ? err.message : String(err);
  }
  repaint();
}

if (sessionId) {
  void poll();
  setInterval(() => void poll(), 1000);
  void state.refreshMetrics().catch(() => undefined);
} else {
  banner.textContent = "add ?session=<id> to the URL";
  banner.classList.remove("hidden");
}
