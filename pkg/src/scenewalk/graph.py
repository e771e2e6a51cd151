"""Three-level scene concept graph with region masks and relation edges.

Nodes sit on three levels: level 1 is the single whole-frame environment
concept, level 2 holds category regions, level 3 holds individual objects
inside a level-2 parent region. Edges come in three kinds: R1 joins the
level-1 node to a level-2 node, R2 joins two level-2 nodes, R3 joins a
level-3 node to its own parent region.

Graphs are immutable values: every operation returns a new graph and never
touches its input. Each node and edge carries a unique placeholder handle
token (``<name>`` / ``<rN>``) that the diffusion backend's embedding table
keys on.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import masks as mk
from .errors import (
    CorruptDocument,
    CorruptMask,
    DuplicateHandle,
    InvalidEdgeKind,
    MaskSizeMismatch,
    MaskSubsetViolation,
    MissingParentRegion,
    MutedEndpoint,
    NotLevelThree,
    SchemaVersionMismatch,
    SegmentationEmpty,
    UnknownEdge,
    UnknownHandle,
)

SCHEMA_VERSION = 1

_NAME_RE = re.compile(r"^[A-Za-z0-9_-]+$")

# Segmenter callables receive (description, mask_hint) and return a {0,1}
# raster sized to the graph's reference frame.
Segmenter = Callable[[str, Optional[np.ndarray]], np.ndarray]


@dataclass(frozen=True)
class ConceptNode:
    id: str
    level: int
    handle: str
    embedding_ref: str
    mask: np.ndarray
    parent_region: Optional[str] = None
    muted: bool = False

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConceptNode):
            return NotImplemented
        return (
            self.id == other.id
            and self.level == other.level
            and self.handle == other.handle
            and self.embedding_ref == other.embedding_ref
            and self.parent_region == other.parent_region
            and self.muted == other.muted
            and self.mask.shape == other.mask.shape
            and bool((self.mask == other.mask).all())
        )


@dataclass(frozen=True)
class RelationEdge:
    id: str
    kind: str  # "R1" | "R2" | "R3"
    endpoints: tuple[str, str]
    handle: str
    embedding_ref: str


@dataclass(frozen=True)
class RefineInstruction:
    kind: str  # "add" | "change" | "mute"
    target_handle: Optional[str] = None
    description: Optional[str] = None
    mask_hint: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("add", "change", "mute"):
            raise ValueError(f"unknown instruction kind {self.kind!r}")
        if self.kind == "add" and not (self.description or "").strip():
            raise ValueError("add instruction requires a nonempty description")
        if self.kind in ("change", "mute") and not self.target_handle:
            raise ValueError(f"{self.kind} instruction requires a target_handle")

    def to_document(self) -> dict:
        doc = {"kind": self.kind}
        if self.target_handle is not None:
            doc["target_handle"] = self.target_handle
        if self.description is not None:
            doc["description"] = self.description
        if self.mask_hint is not None:
            doc["mask_hint"] = {
                "size": list(self.mask_hint.shape),
                "rle": mk.rle_encode(self.mask_hint),
            }
        return doc

    @staticmethod
    def from_document(doc: dict) -> "RefineInstruction":
        hint = None
        if doc.get("mask_hint") is not None:
            h, w = doc["mask_hint"]["size"]
            hint = mk.rle_decode(doc["mask_hint"]["rle"], (h, w))
        return RefineInstruction(
            kind=doc["kind"],
            target_handle=doc.get("target_handle"),
            description=doc.get("description"),
            mask_hint=hint,
        )


@dataclass(frozen=True)
class PromptTriple:
    tokens: tuple[str, str, str]  # (endpoint-A handle, edge handle, endpoint-B handle)
    edge_id: str
    union_mask: np.ndarray
    handle_masks: dict  # handle token -> mask raster

    def __eq__(self, other) -> bool:
        if not isinstance(other, PromptTriple):
            return NotImplemented
        if self.tokens != other.tokens or self.edge_id != other.edge_id:
            return False
        if not (self.union_mask == other.union_mask).all():
            return False
        if self.handle_masks.keys() != other.handle_masks.keys():
            return False
        return all((self.handle_masks[k] == other.handle_masks[k]).all() for k in self.handle_masks)


@dataclass(frozen=True)
class SceneConceptGraph:
    nodes: tuple[ConceptNode, ...]
    edges: tuple[RelationEdge, ...]
    reference_size: tuple[int, int]

    # --- lookups ---

    def node(self, node_id: str) -> ConceptNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise UnknownHandle(f"no node with id {node_id!r}")

    def edge(self, edge_id: str) -> RelationEdge:
        for e in self.edges:
            if e.id == edge_id:
                return e
        raise UnknownEdge(f"no edge with id {edge_id!r}")

    def node_by_handle(self, handle: str) -> ConceptNode:
        for n in self.nodes:
            if n.handle == handle:
                return n
        raise UnknownHandle(f"no node with handle {handle!r}")

    def level_one(self) -> ConceptNode:
        for n in self.nodes:
            if n.level == 1:
                return n
        raise UnknownHandle("graph has no level-1 node")

    def handles(self) -> set[str]:
        return {n.handle for n in self.nodes} | {e.handle for e in self.edges}

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneConceptGraph):
            return NotImplemented
        return (
            self.reference_size == other.reference_size
            and self.nodes == other.nodes
            and self.edges == other.edges
        )


# --- id / handle allocation ---


def _name_to_handle(name: str) -> str:
    if name.startswith("<") and name.endswith(">"):
        name = name[1:-1]
    if not _NAME_RE.match(name):
        raise DuplicateHandle(f"invalid concept name {name!r}")
    return f"<{name}>"


def _next_index(ids: Iterable[str], prefix: str) -> int:
    best = -1
    for i in ids:
        if i.startswith(prefix):
            best = max(best, int(i[len(prefix):]))
    return best + 1


def _fresh_node_id(graph_nodes: Sequence[ConceptNode]) -> str:
    return f"n{_next_index((n.id for n in graph_nodes), 'n'):03d}"


def _fresh_edge_id(graph_edges: Sequence[RelationEdge]) -> str:
    return f"e{_next_index((e.id for e in graph_edges), 'e'):03d}"


def _fresh_handle(existing: set[str], prefix: str) -> str:
    k = 0
    while f"<{prefix}{k}>" in existing:
        k += 1
    return f"<{prefix}{k}>"


# --- construction ---


def _check_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    m = mk.as_mask(mask)
    if m.shape != size:
        raise MaskSizeMismatch(f"mask shape {m.shape} != reference size {size}")
    return m


def _edge_kind_for(level_a: int, level_b: int) -> str:
    pair = tuple(sorted((level_a, level_b)))
    if pair == (1, 2):
        return "R1"
    if pair == (2, 2):
        return "R2"
    if pair == (2, 3):
        return "R3"
    raise InvalidEdgeKind(f"no relation kind joins levels {level_a} and {level_b}")


def _validate_edge(kind: str, a: ConceptNode, b: ConceptNode) -> None:
    levels = (a.level, b.level)
    ok = {
        "R1": sorted(levels) == [1, 2],
        "R2": levels == (2, 2),
        "R3": sorted(levels) == [2, 3],
    }.get(kind)
    if ok is None:
        raise InvalidEdgeKind(f"unknown edge kind {kind!r}")
    if not ok:
        raise InvalidEdgeKind(f"{kind} edge cannot join levels {levels[0]} and {levels[1]}")
    if kind == "R3":
        child = a if a.level == 3 else b
        parent = b if a.level == 3 else a
        if child.parent_region != parent.id:
            raise InvalidEdgeKind("R3 edge must join a level-3 node to its own parent region")


def build_graph(
    reference_image: np.ndarray,
    concepts: Sequence[tuple],
    relations: Optional[Sequence[tuple]] = None,
) -> SceneConceptGraph:
    """Build a validated graph from concept and relation specs.

    ``concepts`` holds (name, level, mask, parent_name) tuples; trailing
    entries may be omitted. The level-1 concept may be left out entirely (one
    is created with an all-ones mask) and its mask may be None. When
    ``relations`` is None, the default wiring is used: an R1 edge per level-2
    node, R2 edges between all level-2 pairs, and an R3 edge per level-3 node.
    """
    img = np.asarray(reference_image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise MaskSizeMismatch(f"reference image must be (H, W, 3), got {img.shape}")
    size = (img.shape[0], img.shape[1])

    normalized = []
    for spec in concepts:
        name, level, mask, parent = (tuple(spec) + (None, None, None, None))[:4]
        normalized.append((name, int(level), mask, parent))

    n_level1 = sum(1 for _, level, _, _ in normalized if level == 1)
    if n_level1 > 1:
        raise DuplicateHandle("more than one level-1 concept supplied")
    if n_level1 == 0:
        normalized.insert(0, (None, 1, None, None))

    nodes: list[ConceptNode] = []
    handles: set[str] = set()
    by_name: dict[str, ConceptNode] = {}

    def register(name, level, mask, parent_id) -> ConceptNode:
        handle = _name_to_handle(name) if name else _fresh_handle(handles, "c")
        if handle in handles:
            raise DuplicateHandle(f"handle {handle!r} already used")
        node = ConceptNode(
            id=f"n{len(nodes):03d}",
            level=level,
            handle=handle,
            embedding_ref=handle,
            mask=mask,
            parent_region=parent_id,
            muted=False,
        )
        nodes.append(node)
        handles.add(handle)
        if name:
            by_name[name] = node
        return node

    # level order so level-3 parents exist when referenced
    for want in (1, 2, 3):
        for name, level, mask, parent in normalized:
            if level != want:
                continue
            if level == 1:
                m = np.ones(size, dtype=np.uint8) if mask is None else _check_mask(mask, size)
                if not m.all():
                    raise MaskSubsetViolation("level-1 mask must cover the whole frame")
                register(name, 1, mk.as_mask(m), None)
            elif level == 2:
                if mask is None:
                    raise MaskSizeMismatch(f"level-2 concept {name!r} needs a mask")
                register(name, 2, _check_mask(mask, size), None)
            else:
                if parent is None:
                    raise MissingParentRegion(f"level-3 concept {name!r} has no parent region")
                parent_node = by_name.get(parent)
                if parent_node is None or parent_node.level != 2:
                    raise MissingParentRegion(f"parent {parent!r} of {name!r} is not a level-2 concept")
                if mask is None:
                    raise MaskSizeMismatch(f"level-3 concept {name!r} needs a mask")
                m = _check_mask(mask, size)
                if (m & ~parent_node.mask).any():
                    raise MaskSubsetViolation(f"mask of {name!r} is not inside region {parent!r}")
                register(name, 3, m, parent_node.id)

    edges: list[RelationEdge] = []
    seen_pairs: set[frozenset] = set()

    def add_edge(kind: str, a: ConceptNode, b: ConceptNode) -> None:
        _validate_edge(kind, a, b)
        pair = frozenset((a.id, b.id))
        if pair in seen_pairs:
            raise InvalidEdgeKind(f"duplicate edge between {a.handle} and {b.handle}")
        seen_pairs.add(pair)
        handle = _fresh_handle(handles, "r")
        handles.add(handle)
        edges.append(
            RelationEdge(
                id=f"e{len(edges):03d}",
                kind=kind,
                endpoints=(a.id, b.id),
                handle=handle,
                embedding_ref=handle,
            )
        )

    level1 = next(n for n in nodes if n.level == 1)
    if relations is None:
        level2 = [n for n in nodes if n.level == 2]
        for n in level2:
            add_edge("R1", level1, n)
        for i, a in enumerate(level2):
            for b in level2[i + 1 :]:
                add_edge("R2", a, b)
        for n in nodes:
            if n.level == 3:
                add_edge("R3", n, next(p for p in nodes if p.id == n.parent_region))
    else:
        def resolve(ref: str) -> ConceptNode:
            if ref in by_name:
                return by_name[ref]
            handle = _name_to_handle(ref)
            for n in nodes:
                if n.handle == handle:
                    return n
            raise UnknownHandle(f"relation endpoint {ref!r} does not name a concept")

        for kind, (ref_a, ref_b) in relations:
            add_edge(kind, resolve(ref_a), resolve(ref_b))

    graph = SceneConceptGraph(nodes=tuple(nodes), edges=tuple(edges), reference_size=size)
    validate(graph)
    return graph


# --- queries ---


def region_of(graph: SceneConceptGraph, node_id: str) -> str:
    """Parent level-2 region of a level-3 node."""
    node = graph.node(node_id)
    if node.level != 3:
        raise NotLevelThree(f"node {node_id!r} has level {node.level}")
    return node.parent_region


def edge_mask(graph: SceneConceptGraph, edge_id: str) -> np.ndarray:
    """Pixelwise OR of the two endpoint masks."""
    e = graph.edge(edge_id)
    a = graph.node(e.endpoints[0]).mask
    b = graph.node(e.endpoints[1]).mask
    return mk.as_mask(a | b)


def prompt_triple(graph: SceneConceptGraph, edge_id: str) -> PromptTriple:
    """Token triple (A, relation, B) with the union mask and per-handle masks.

    The relation handle's own mask is the edge mask. Muted endpoints raise
    rather than being dropped silently.
    """
    e = graph.edge(edge_id)
    a = graph.node(e.endpoints[0])
    b = graph.node(e.endpoints[1])
    for n in (a, b):
        if n.muted:
            raise MutedEndpoint(f"endpoint {n.handle} of edge {edge_id} is muted")
    union = edge_mask(graph, edge_id)
    return PromptTriple(
        tokens=(a.handle, e.handle, b.handle),
        edge_id=edge_id,
        union_mask=union,
        handle_masks={a.handle: a.mask, e.handle: union, b.handle: b.mask},
    )


# --- instruction-driven mutation ---


def apply_instruction(
    graph: SceneConceptGraph,
    instruction: RefineInstruction,
    segmenter: Optional[Segmenter] = None,
) -> tuple[SceneConceptGraph, Optional[str], list[str]]:
    """Apply an add/change/mute instruction, returning a new graph.

    Returns (new graph, affected edge id or None, newly created handles).
    ``add`` introduces one level-2 node plus its R1 edge; ``change`` singles
    out the target's R1 edge (creating it when absent); ``mute`` flips the
    target's muted flag on.
    """
    if instruction.kind == "add":
        mask = _instruction_mask(graph, instruction, segmenter)
        nodes = list(graph.nodes)
        edges = list(graph.edges)
        handles = graph.handles()
        slug = _slugify(instruction.description)
        node_handle = f"<{slug}>" if slug else _fresh_handle(handles, "c")
        if node_handle in handles:
            node_handle = _fresh_handle(handles, "c")
        handles.add(node_handle)
        node = ConceptNode(
            id=_fresh_node_id(nodes),
            level=2,
            handle=node_handle,
            embedding_ref=node_handle,
            mask=mask,
            parent_region=None,
            muted=False,
        )
        edge_handle = _fresh_handle(handles, "r")
        edge = RelationEdge(
            id=_fresh_edge_id(edges),
            kind="R1",
            endpoints=(graph.level_one().id, node.id),
            handle=edge_handle,
            embedding_ref=edge_handle,
        )
        new_graph = SceneConceptGraph(
            nodes=tuple(nodes + [node]),
            edges=tuple(edges + [edge]),
            reference_size=graph.reference_size,
        )
        validate(new_graph)
        return new_graph, edge.id, [node.handle, edge.handle]

    target = graph.node_by_handle(instruction.target_handle)

    if instruction.kind == "mute":
        nodes = tuple(replace(n, muted=True) if n.id == target.id else n for n in graph.nodes)
        return SceneConceptGraph(nodes, graph.edges, graph.reference_size), None, []

    # change: concentrate on the single edge that ties the target into the scene
    if target.level == 1:
        raise InvalidEdgeKind("change cannot target the level-1 environment concept")
    if target.level == 2:
        other_id, kind = graph.level_one().id, "R1"
    else:
        other_id, kind = target.parent_region, "R3"
    for e in graph.edges:
        if e.kind == kind and set(e.endpoints) == {target.id, other_id}:
            return graph, e.id, []
    handles = graph.handles()
    edge_handle = _fresh_handle(handles, "r")
    other = graph.node(other_id)
    a, b = (other, target) if kind == "R1" else (target, other)
    edge = RelationEdge(
        id=_fresh_edge_id(graph.edges),
        kind=kind,
        endpoints=(a.id, b.id),
        handle=edge_handle,
        embedding_ref=edge_handle,
    )
    new_graph = SceneConceptGraph(graph.nodes, graph.edges + (edge,), graph.reference_size)
    validate(new_graph)
    return new_graph, edge.id, []


def _slugify(text: Optional[str]) -> str:
    if not text:
        return ""
    slug = re.sub(r"[^A-Za-z0-9]+", "_", text.strip().lower()).strip("_")
    return slug[:24]


def _instruction_mask(
    graph: SceneConceptGraph,
    instruction: RefineInstruction,
    segmenter: Optional[Segmenter],
) -> np.ndarray:
    if instruction.mask_hint is not None:
        mask = _check_mask(instruction.mask_hint, graph.reference_size)
    elif segmenter is not None:
        mask = _check_mask(
            segmenter(instruction.description or "", instruction.mask_hint),
            graph.reference_size,
        )
    else:
        raise SegmentationEmpty("no segmenter and no mask hint supplied")
    if not mask.any():
        raise SegmentationEmpty(f"empty mask for {instruction.description!r}")
    return mask


# --- validation ---


def validate(graph: SceneConceptGraph) -> None:
    """Check every type invariant; raises on the first violation."""
    size = graph.reference_size
    ids = [n.id for n in graph.nodes]
    if len(set(ids)) != len(ids):
        raise CorruptDocument("duplicate node ids")
    eids = [e.id for e in graph.edges]
    if len(set(eids)) != len(eids):
        raise CorruptDocument("duplicate edge ids")

    handles = [n.handle for n in graph.nodes] + [e.handle for e in graph.edges]
    if len(set(handles)) != len(handles):
        raise DuplicateHandle("handle tokens are not unique across nodes and edges")

    level1 = [n for n in graph.nodes if n.level == 1]
    if len(level1) != 1:
        raise CorruptDocument(f"graph must have exactly one level-1 node, has {len(level1)}")
    if not level1[0].mask.all():
        raise MaskSubsetViolation("level-1 mask must be all-ones")

    by_id = {n.id: n for n in graph.nodes}
    for n in graph.nodes:
        if n.level not in (1, 2, 3):
            raise CorruptDocument(f"node {n.id} has invalid level {n.level}")
        if n.mask.shape != size:
            raise MaskSizeMismatch(f"node {n.id} mask shape {n.mask.shape} != {size}")
        if n.level == 3:
            parent = by_id.get(n.parent_region)
            if parent is None or parent.level != 2:
                raise MissingParentRegion(f"node {n.id} lacks a level-2 parent region")
            if (n.mask & ~parent.mask).any():
                raise MaskSubsetViolation(f"node {n.id} mask leaves its parent region")
        elif n.parent_region is not None:
            raise CorruptDocument(f"non-level-3 node {n.id} has a parent region")

    seen_pairs = set()
    for e in graph.edges:
        a, b = (by_id.get(i) for i in e.endpoints)
        if a is None or b is None:
            raise CorruptDocument(f"edge {e.id} references a missing node")
        _validate_edge(e.kind, a, b)
        pair = frozenset(e.endpoints)
        if pair in seen_pairs:
            raise InvalidEdgeKind(f"edges share endpoint pair {sorted(pair)}")
        seen_pairs.add(pair)


# --- serialization ---


def serialize(graph: SceneConceptGraph) -> dict:
    """Versioned JSON-style document with run-length-encoded masks."""
    return {
        "version": SCHEMA_VERSION,
        "size": list(graph.reference_size),
        "nodes": [
            {
                "id": n.id,
                "level": n.level,
                "handle": n.handle,
                "embedding_ref": n.embedding_ref,
                "mask": mk.rle_encode(n.mask),
                "parent_region": n.parent_region,
                "muted": n.muted,
            }
            for n in graph.nodes
        ],
        "edges": [
            {
                "id": e.id,
                "kind": e.kind,
                "endpoints": list(e.endpoints),
                "handle": e.handle,
                "embedding_ref": e.embedding_ref,
            }
            for e in graph.edges
        ],
    }


def deserialize(document: dict) -> SceneConceptGraph:
    """Inverse of serialize; validates the result against all invariants."""
    if document.get("version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"document version {document.get('version')!r} != {SCHEMA_VERSION}"
        )
    try:
        h, w = document["size"]
        size = (int(h), int(w))
        nodes = tuple(
            ConceptNode(
                id=d["id"],
                level=int(d["level"]),
                handle=d["handle"],
                embedding_ref=d["embedding_ref"],
                mask=mk.rle_decode(d["mask"], size),
                parent_region=d.get("parent_region"),
                muted=bool(d.get("muted", False)),
            )
            for d in document["nodes"]
        )
        edges = tuple(
            RelationEdge(
                id=d["id"],
                kind=d["kind"],
                endpoints=(d["endpoints"][0], d["endpoints"][1]),
                handle=d["handle"],
                embedding_ref=d["embedding_ref"],
            )
            for d in document["edges"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptDocument(f"malformed graph document: {exc}") from exc
    graph = SceneConceptGraph(nodes=nodes, edges=edges, reference_size=size)
    validate(graph)
    return graph
