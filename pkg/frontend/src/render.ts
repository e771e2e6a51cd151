// DOM rendering: frame filmstrip, graph SVG diagram, banner, drift panel.

import type { Client } from "./api.js";
import { layoutGraph } from "./layout.js";
import type { ClientSessionState } from "./state.js";

const SVG_NS = "http://www.w3.org/2000/svg";
const EDGE_DASH: Record<string, string> = { R1: "", R2: "6 4", R3: "2 3" };
const LEVEL_RADIUS: Record<number, number> = { 1: 16, 2: 12, 3: 8 };

export function renderBanner(el: HTMLElement, state: ClientSessionState): void {
  el.textContent = state.banner ?? "";
  el.classList.toggle("hidden", state.banner === null);
}

export function renderStatus(el: HTMLElement, state: ClientSessionState): void {
  const m = state.manifest;
  el.textContent = m
    ? `${m.id} · ${m.status} · ${m.frame_count} frame(s) · graph v${m.graph_version}`
    : "connecting…";
}

export function renderFilmstrip(
  el: HTMLElement,
  state: ClientSessionState,
  api: Client,
  onSelect: (index: number) => void,
): void {
  const count = state.manifest?.frame_count ?? 0;
  el.replaceChildren(
    ...Array.from({ length: count }, (_, i) => {
      const img = document.createElement("img");
      // cache-bust only the latest frame; older ones are immutable
      img.src = api.frameUrl(state.sessionId, i);
      img.title = `frame ${i}`;
      img.addEventListener("click", () => onSelect(i));
      return img;
    }),
  );
}

export function renderGraph(svg: SVGSVGElement, state: ClientSessionState): void {
  svg.replaceChildren();
  if (!state.graph) return;
  const layout = layoutGraph(state.graph);
  const w = svg.clientWidth || 360;
  const h = svg.clientHeight || 360;
  const pos = new Map(layout.nodes.map((n) => [n.id, n]));

  for (const edge of layout.edges) {
    const a = pos.get(edge.from);
    const b = pos.get(edge.to);
    if (!a || !b) continue;
    const line = document.createElementNS(SVG_NS, "line");
    line.setAttribute("x1", String(a.x * w));
    line.setAttribute("y1", String(a.y * h));
    line.setAttribute("x2", String(b.x * w));
    line.setAttribute("y2", String(b.y * h));
    line.setAttribute("class", `edge edge-${edge.kind.toLowerCase()}`);
    const dash = EDGE_DASH[edge.kind];
    if (dash) line.setAttribute("stroke-dasharray", dash);
    const title = document.createElementNS(SVG_NS, "title");
    title.textContent = `${edge.kind} ${edge.handle}`;
    line.appendChild(title);
    svg.appendChild(line);
  }
  for (const node of layout.nodes) {
    const g = document.createElementNS(SVG_NS, "g");
    g.setAttribute("class", `node level-${node.level}${node.muted ? " muted" : ""}`);
    const circle = document.createElementNS(SVG_NS, "circle");
    circle.setAttribute("cx", String(node.x * w));
    circle.setAttribute("cy", String(node.y * h));
    circle.setAttribute("r", String(LEVEL_RADIUS[node.level] ?? 8));
    const label = document.createElementNS(SVG_NS, "text");
    label.setAttribute("x", String(node.x * w));
    label.setAttribute("y", String(node.y * h - (LEVEL_RADIUS[node.level] ?? 8) - 4));
    label.textContent = node.handle;
    g.append(circle, label);
    svg.appendChild(g);
  }
}

export function renderPromptPreview(el: HTMLElement, tokens: string[]): void {
  el.textContent = tokens.length ? tokens.join(" ") : "(empty prompt)";
}

export function renderDrift(
  firstEl: HTMLImageElement,
  latestEl: HTMLImageElement,
  metricEl: HTMLElement,
  state: ClientSessionState,
  api: Client,
): void {
  const count = state.manifest?.frame_count ?? 0;
  if (count === 0) return;
  firstEl.src = api.frameUrl(state.sessionId, 0);
  latestEl.src = api.frameUrl(state.sessionId, count - 1);
  metricEl.textContent = state.metrics
    ? `scene fidelity ${state.metrics.metric.toFixed(4)} (${state.metrics.backend_id})`
    : "scene fidelity: –";
}
