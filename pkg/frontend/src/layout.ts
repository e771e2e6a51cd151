// Deterministic graph layout: level-1 at the center, level-2 on a ring,
// level-3 leaves clustered around their parent region. Positions depend only
// on node ids, so screenshots of the same graph are comparable.

import type { GraphDoc } from "./types.js";

export interface PlacedNode {
  id: string;
  handle: string;
  level: number;
  muted: boolean;
  x: number; // normalized [0, 1]
  y: number;
}

export interface PlacedEdge {
  id: string;
  kind: "R1" | "R2" | "R3";
  handle: string;
  from: string;
  to: string;
}

export interface Layout {
  nodes: PlacedNode[];
  edges: PlacedEdge[];
}

const RING_RADIUS = 0.33;
const LEAF_RADIUS = 0.13;

export function layoutGraph(graph: GraphDoc): Layout {
  const nodes = [...graph.nodes].sort((a, b) => (a.id < b.id ? -1 : a.id > b.id ? 1 : 0));
  const placed = new Map<string, PlacedNode>();

  const level2 = nodes.filter((n) => n.level === 2);
  level2.forEach((n, i) => {
    const angle = -Math.PI / 2 + (2 * Math.PI * i) / Math.max(level2.length, 1);
    placed.set(n.id, {
      id: n.id,
      handle: n.handle,
      level: 2,
      muted: n.muted,
      x: 0.5 + RING_RADIUS * Math.cos(angle),
      y: 0.5 + RING_RADIUS * Math.sin(angle),
    });
  });

  for (const n of nodes) {
    if (n.level === 1) {
      placed.set(n.id, { id: n.id, handle: n.handle, level: 1, muted: n.muted, x: 0.5, y: 0.5 });
    }
  }

  const leavesByParent = new Map<string, typeof nodes>();
  for (const n of nodes) {
    if (n.level === 3 && n.parent_region) {
      const siblings = leavesByParent.get(n.parent_region) ?? [];
      siblings.push(n);
      leavesByParent.set(n.parent_region, siblings);
    }
  }
  for (const [parentId, leaves] of leavesByParent) {
    const parent = placed.get(parentId);
    if (!parent) continue;
    const away = Math.atan2(parent.y - 0.5, parent.x - 0.5);
    leaves.forEach((n, i) => {
      const spread = leaves.length > 1 ? (i / (leaves.length - 1) - 0.5) * (Math.PI / 2) : 0;
      placed.set(n.id, {
        id: n.id,
        handle: n.handle,
        level: 3,
        muted: n.muted,
        x: parent.x + LEAF_RADIUS * Math.cos(away + spread),
        y: parent.y + LEAF_RADIUS * Math.sin(away + spread),
      });
    });
  }

  return {
    nodes: nodes.map((n) => placed.get(n.id)!),
    edges: [...graph.edges]
      .sort((a, b) => (a.id < b.id ? -1 : a.id > b.id ? 1 : 0))
      .map((e) => ({
        id: e.id,
        kind: e.kind,
        handle: e.handle,
        from: e.endpoints[0],
        to: e.endpoints[1],
      })),
  };
}
