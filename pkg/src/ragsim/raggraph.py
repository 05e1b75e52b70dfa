"""
RAGraph: workflow graphs of Generation and Retrieval nodes, per-request
execution state, and the runtime sub-node transformations (splitting,
reordering, speculative edges, dependency rewiring).
"""
import json
import re
import string
from collections import deque
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Dict, FrozenSet, Iterable, List, Literal, Optional, Sequence, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

START = -1
END = -2
DEFAULT_MAX_LOOP_ITERS = 8
INITIAL_VARS = ("input", "query")

_SENTINEL_NAMES = {START: "START", END: "END"}
_SENTINEL_IDS = {v: k for k, v in _SENTINEL_NAMES.items()}


class WorkflowError(ValueError):
    """A workflow cannot make progress or refers to missing nodes"""


class LoopGuardError(RuntimeError):
    """A request entered one node more than max_loop_iters times"""


def node_label(node_id: int) -> str:
    return _SENTINEL_NAMES.get(node_id, str(node_id))


@dataclass(eq=False)
class Value:
    """A request variable: text plus optional embedding or retrieved doc ids"""
    text: str = ""
    embedding: Optional[np.ndarray] = None
    doc_ids: Optional[Tuple[int, ...]] = None

    def __bool__(self) -> bool:
        return bool(self.text) or bool(self.doc_ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Value):
            return NotImplemented
        if self.text != other.text or self.doc_ids != other.doc_ids:
            return False
        if self.embedding is None or other.embedding is None:
            return self.embedding is None and other.embedding is None
        return np.array_equal(self.embedding, other.embedding)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "text": self.text,
            "doc_ids": list(self.doc_ids) if self.doc_ids is not None else None,
            "has_embedding": self.embedding is not None,
        }


@dataclass(frozen=True)
class GenerationNode:
    node_id: int
    prompt_template: str
    output_var: Optional[str] = None

    kind = "generation"

    @property
    def reads(self) -> Set[str]:
        return {name for _, name, _, _ in string.Formatter().parse(self.prompt_template) if name}

    @property
    def writes(self) -> Set[str]:
        return {self.output_var} if self.output_var else set()


@dataclass(frozen=True)
class RetrievalNode:
    node_id: int
    topk: int
    query_var: str
    output_var: str

    kind = "retrieval"

    @property
    def reads(self) -> Set[str]:
        return {self.query_var}

    @property
    def writes(self) -> Set[str]:
        return {self.output_var}


NodeSpec = Union[GenerationNode, RetrievalNode]


class RequestState:
    """Per-request variable bindings, position and visit counters. Single owner."""

    def __init__(self, request_id: int, bindings: Optional[Dict[str, Value]] = None):
        self.request_id = request_id
        self.bindings: Dict[str, Value] = dict(bindings or {})
        self.current = START
        self.visits: Dict[int, int] = {}
        self.gen_cursor = 0
        self._snapshots: Dict[int, Tuple[Dict[str, Value], int, Dict[int, int], int]] = {}
        self._next_anchor = 0

    def get(self, name: str, default: Any = None) -> Any:
        return self.bindings.get(name, default)

    def bind(self, name: str, value: Value) -> None:
        self.bindings[name] = value

    def snapshot(self) -> int:
        """Record bindings and position; returns the anchor id"""
        anchor = self._next_anchor
        self._next_anchor += 1
        self._snapshots[anchor] = (dict(self.bindings), self.current, dict(self.visits), self.gen_cursor)
        return anchor

    def restore(self, anchor: int) -> None:
        if anchor not in self._snapshots:
            raise ValueError(f"unknown rollback anchor {anchor}")
        bindings, current, visits, gen_cursor = self._snapshots[anchor]
        self.bindings = dict(bindings)
        self.current = current
        self.visits = dict(visits)
        self.gen_cursor = gen_cursor

    def discard(self, anchor: int) -> None:
        self._snapshots.pop(anchor, None)

    def clone(self) -> "RequestState":
        twin = RequestState(self.request_id, self.bindings)
        twin.current = self.current
        twin.visits = dict(self.visits)
        twin.gen_cursor = self.gen_cursor
        return twin


Predicate = Callable[[RequestState, int], bool]


@dataclass(frozen=True)
class Condition:
    """A named guard from the condition library"""
    name: str
    args: Tuple[str, ...]
    predicate: Predicate = field(compare=False)

    def __call__(self, state: RequestState, source: int) -> bool:
        return self.predicate(state, source)

    def __str__(self) -> str:
        return f"{self.name}({', '.join(self.args)})" if self.args else self.name


class ConditionRegistry:
    """Registry of condition factories"""
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._instance.factories = {}
        return cls._instance

    def register(self, name: str, factory: Callable[..., Predicate]) -> None:
        self.factories[name] = factory

    def get(self, name: str) -> Optional[Callable[..., Predicate]]:
        return self.factories.get(name)

    def names(self) -> List[str]:
        return sorted(self.factories)


conditions = ConditionRegistry()


def define_condition(name: str):
    """Decorator registering a condition factory under a library name"""
    def decorator(factory):
        conditions.register(name, factory)
        return factory
    return decorator


@define_condition("always")
def _always() -> Predicate:
    return lambda state, source: True


@define_condition("nonempty")
def _nonempty(var: str) -> Predicate:
    return lambda state, source: bool(state.get(var))


@define_condition("iter_lt")
def _iter_lt(n: str) -> Predicate:
    limit = int(n)
    return lambda state, source: state.visits.get(source, 0) < limit


_CONDITION_RE = re.compile(r"^\s*([A-Za-z_]\w*)\s*(?:\((.*)\))?\s*$")


def parse_condition(text: str) -> Condition:
    """Parse 'name' or 'name(arg, ...)' against the condition library"""
    match = _CONDITION_RE.match(text)
    if not match:
        raise ValueError(f"malformed condition {text!r}")
    name, raw_args = match.group(1), match.group(2)
    factory = conditions.get(name)
    if factory is None:
        raise ValueError(f"unknown condition {name!r}; available: {', '.join(conditions.names())}")
    args = tuple(a.strip() for a in raw_args.split(",")) if raw_args and raw_args.strip() else ()
    try:
        predicate = factory(*args)
    except (TypeError, ValueError) as e:
        raise ValueError(f"bad arguments for condition {text!r}: {e}")
    return Condition(name=name, args=args, predicate=predicate)


Route = Callable[[RequestState], Optional[int]]


@dataclass(frozen=True)
class Edge:
    src: int
    dst: Optional[int] = None
    condition: Optional[Condition] = None
    route: Optional[Route] = field(default=None, compare=False)

    def resolve(self, state: RequestState) -> Optional[int]:
        """Target node if this edge is satisfied, else None"""
        if self.route is not None:
            return self.route(state)
        if self.condition is not None and not self.condition(state, self.src):
            return None
        return self.dst


class RAGraph:
    """Workflow definition; immutable once validated and handed to the runtime"""

    def __init__(self, name: str = "workflow", max_loop_iters: int = DEFAULT_MAX_LOOP_ITERS):
        if max_loop_iters < 1:
            raise ValueError(f"max_loop_iters must be >= 1, got {max_loop_iters}")
        self.name = name
        self.max_loop_iters = max_loop_iters
        self.nodes: Dict[int, NodeSpec] = {}
        self.edges: List[Edge] = []

    def _check_new_id(self, node_id: int) -> None:
        if node_id in (START, END):
            raise ValueError(f"node id {node_label(node_id)} is reserved")
        if node_id in self.nodes:
            raise ValueError(f"duplicate node id {node_id}")

    def add_generation(self, node_id: int, prompt_template: str, output_var: Optional[str] = None) -> "RAGraph":
        self._check_new_id(node_id)
        self.nodes[node_id] = GenerationNode(node_id, prompt_template, output_var)
        return self

    def add_retrieval(self, node_id: int, topk: int, query_var: str, output_var: str) -> "RAGraph":
        self._check_new_id(node_id)
        if topk < 1:
            raise ValueError(f"topk must be >= 1, got {topk}")
        self.nodes[node_id] = RetrievalNode(node_id, topk, query_var, output_var)
        return self

    def add_edge(self, src: int, to: Union[int, Route], when: Optional[Union[Condition, str]] = None) -> "RAGraph":
        """Static edge, guarded edge (when=...), or routing function returning a node id"""
        if callable(to):
            if when is not None:
                raise ValueError("a routing function cannot carry a condition")
            self.edges.append(Edge(src=src, route=to))
            return self
        if isinstance(when, str):
            when = parse_condition(when)
        self.edges.append(Edge(src=src, dst=int(to), condition=when))
        return self

    def out_edges(self, src: int) -> List[Edge]:
        return [e for e in self.edges if e.src == src]

    def possible_targets(self, src: int) -> Set[int]:
        targets: Set[int] = set()
        for edge in self.out_edges(src):
            if edge.route is not None:
                targets |= set(self.nodes) | {END}
            else:
                targets.add(edge.dst)
        return targets

    def node(self, node_id: int) -> NodeSpec:
        if node_id not in self.nodes:
            raise WorkflowError(f"unknown node {node_label(node_id)}")
        return self.nodes[node_id]

    def validate(self) -> List[str]:
        """Diagnostics for every violated graph invariant; empty when valid"""
        diagnostics: List[str] = []
        known = set(self.nodes)
        for edge in self.edges:
            if edge.src != START and edge.src not in known:
                diagnostics.append(f"edge from unknown node {node_label(edge.src)}")
            if edge.route is None and edge.dst != END and edge.dst not in known:
                diagnostics.append(f"edge to unknown node {node_label(edge.dst)}")
        if not self.out_edges(START):
            diagnostics.append("START has no outgoing edge")

        reachable = self._reachable()
        if END not in reachable:
            diagnostics.append("END unreachable from START")

        defined = self._must_defined(reachable)
        for node_id in sorted(known & reachable):
            missing = self.nodes[node_id].reads - defined[node_id]
            for var in sorted(missing):
                diagnostics.append(f"unbound variable '{var}' read by node {node_id}")
        return diagnostics

    def is_valid(self) -> bool:
        return not self.validate()

    def _reachable(self) -> Set[int]:
        seen = {START}
        queue = deque([START])
        while queue:
            src = queue.popleft()
            for dst in self.possible_targets(src):
                if dst not in seen and (dst == END or dst in self.nodes):
                    seen.add(dst)
                    if dst != END:
                        queue.append(dst)
        return seen

    def _must_defined(self, reachable: Set[int]) -> Dict[int, Set[str]]:
        """Variables written on every path from START into each node"""
        universe = set(INITIAL_VARS)
        for spec in self.nodes.values():
            universe |= spec.writes
        preds: Dict[int, Set[int]] = {n: set() for n in self.nodes}
        for src in [START] + list(self.nodes):
            if src not in reachable:
                continue
            for dst in self.possible_targets(src):
                if dst in preds:
                    preds[dst].add(src)

        out: Dict[int, Set[str]] = {START: set(INITIAL_VARS)}
        out.update({n: set(universe) for n in self.nodes})
        inn: Dict[int, Set[str]] = {n: set(universe) for n in self.nodes}
        changed = True
        while changed:
            changed = False
            for n in self.nodes:
                if not preds[n]:
                    continue
                new_in = set.intersection(*(out[p] for p in preds[n]))
                new_out = new_in | self.nodes[n].writes
                if new_in != inn[n] or new_out != out[n]:
                    inn[n], out[n] = new_in, new_out
                    changed = True
        return inn

    def to_dict(self) -> Dict[str, Any]:
        nodes = []
        for node_id in sorted(self.nodes):
            spec = self.nodes[node_id]
            if isinstance(spec, GenerationNode):
                nodes.append({"id": node_id, "kind": "generation", "prompt": spec.prompt_template, "output_var": spec.output_var})
            else:
                nodes.append({"id": node_id, "kind": "retrieval", "topk": spec.topk, "query_var": spec.query_var, "output_var": spec.output_var})
        edges = []
        for edge in self.edges:
            if edge.route is not None:
                raise ValueError("routing functions cannot be serialized; use a named condition")
            record: Dict[str, Any] = {"from": node_label(edge.src), "to": node_label(edge.dst)}
            if edge.condition is not None:
                record["cond"] = str(edge.condition)
            edges.append(record)
        return {"name": self.name, "max_loop_iters": self.max_loop_iters, "nodes": nodes, "edges": edges}


def advance(graph: RAGraph, state: RequestState) -> int:
    """Move a request past its current node along the first satisfied out-edge"""
    src = state.current
    if src == END:
        raise WorkflowError(f"request {state.request_id} already reached END")
    for edge in graph.out_edges(src):
        target = edge.resolve(state)
        if target is None:
            continue
        if target != END:
            if target not in graph.nodes:
                raise WorkflowError(f"edge from {node_label(src)} leads to unknown node {target}")
            entries = state.visits.get(target, 0) + 1
            if entries > graph.max_loop_iters:
                raise LoopGuardError(
                    f"request {state.request_id} would enter node {target} {entries} times "
                    f"(max_loop_iters={graph.max_loop_iters})"
                )
            state.visits[target] = entries
        state.current = target
        return target
    raise WorkflowError(f"no satisfied out-edge from node {node_label(src)} for request {state.request_id}")


# ---------------------------------------------------------------------------
# Sub-node transformations

SubKind = Literal["generation", "retrieval"]


@dataclass(frozen=True)
class SubNode:
    """A fragment of a node's work: decode-step range or cluster-plan range"""
    subnode_id: int
    parent: int
    kind: SubKind
    span: Tuple[int, int]
    deps: FrozenSet[int] = frozenset()
    speculative: bool = False
    rollback_anchor: Optional[int] = None
    clusters: Tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return self.span[1] - self.span[0]


def split_node(node: NodeSpec, boundaries: Sequence[int], total_work: Optional[int] = None, *,
               clusters: Optional[Sequence[int]] = None, first_id: int = 0, start: int = 0,
               deps: Iterable[int] = ()) -> List[SubNode]:
    """Split [start, total_work) at the given boundaries into a chain of sub-nodes.

    Retrieval nodes take their clusters (positions start..total_work of the plan)
    and total_work defaults to start + len(clusters).
    """
    if isinstance(node, RetrievalNode):
        if clusters is None:
            raise ValueError("retrieval nodes are split over a cluster plan")
        clusters = [int(c) for c in clusters]
        if total_work is None:
            total_work = start + len(clusters)
        if len(clusters) != total_work - start:
            raise ValueError(f"{len(clusters)} clusters for span [{start}, {total_work})")
    elif total_work is None:
        raise ValueError("generation nodes need total_work (tokens)")

    bounds = [int(b) for b in boundaries]
    if len(bounds) < 2 or bounds[0] != start or bounds[-1] != total_work:
        raise ValueError(f"boundaries {bounds} do not cover [{start}, {total_work})")
    if any(b <= a for a, b in zip(bounds, bounds[1:])):
        raise ValueError(f"boundaries {bounds} are not strictly increasing")

    subnodes: List[SubNode] = []
    previous: FrozenSet[int] = frozenset(deps)
    for i, (lo, hi) in enumerate(zip(bounds, bounds[1:])):
        sub = SubNode(
            subnode_id=first_id + i,
            parent=node.node_id,
            kind=node.kind,
            span=(lo, hi),
            deps=previous,
            clusters=tuple(clusters[lo - start:hi - start]) if clusters is not None else (),
        )
        subnodes.append(sub)
        previous = frozenset({sub.subnode_id})
    return subnodes


def reorder_subnodes(subnodes: Sequence[SubNode], new_order: Sequence[int]) -> List[SubNode]:
    """Permute retrieval sub-nodes of one parent; spans re-map onto the permuted
    cluster sequence and the dependency chain follows the new order"""
    subnodes = list(subnodes)
    if sorted(new_order) != list(range(len(subnodes))):
        raise ValueError(f"{list(new_order)} is not a permutation of {len(subnodes)} sub-nodes")
    if not subnodes:
        return []
    if any(s.kind != "retrieval" for s in subnodes) or len({s.parent for s in subnodes}) != 1:
        raise ValueError("only retrieval sub-nodes of a single parent can be reordered")

    ordered_by_span = sorted(subnodes, key=lambda s: s.span[0])
    internal = {s.subnode_id for s in subnodes}
    external = frozenset(ordered_by_span[0].deps - internal)
    offset = ordered_by_span[0].span[0]

    result: List[SubNode] = []
    previous = external
    for i in new_order:
        sub = subnodes[i]
        moved = replace(sub, span=(offset, offset + sub.size), deps=previous)
        offset += sub.size
        result.append(moved)
        previous = frozenset({moved.subnode_id})
    return result


class GraphInstance:
    """Runtime sub-node table of one request"""

    def __init__(self, graph: RAGraph, request_id: int):
        self.graph = graph
        self.request_id = request_id
        self.subnodes: Dict[int, SubNode] = {}
        self.speculative_edges: Dict[Tuple[int, int], Optional[int]] = {}
        self._next_id = 0

    def _take_ids(self, n: int) -> int:
        first = self._next_id
        self._next_id += n
        return first

    def open_stage(self, node_id: int, total_work: int, clusters: Optional[Sequence[int]] = None,
                   deps: Iterable[int] = (), speculative: bool = False, anchor: Optional[int] = None) -> SubNode:
        """Register a whole-stage sub-node covering [0, total_work)"""
        node = self.graph.node(node_id)
        (sub,) = split_node(node, [0, total_work], total_work, clusters=clusters, first_id=self._take_ids(1), deps=deps)
        sub = replace(sub, speculative=speculative, rollback_anchor=anchor)
        self.subnodes[sub.subnode_id] = sub
        return sub

    def split_subnode(self, subnode_id: int, cut: int) -> Tuple[SubNode, SubNode]:
        """Cut a sub-node in two; the tail keeps its id so dependents still wait for the whole remainder"""
        sub = self.subnodes[subnode_id]
        lo, hi = sub.span
        if not lo < cut < hi:
            raise ValueError(f"cut {cut} outside ({lo}, {hi})")
        head, tail = split_node(
            self.graph.node(sub.parent), [lo, cut, hi], hi,
            clusters=sub.clusters if sub.kind == "retrieval" else None,
            first_id=self._take_ids(1), start=lo, deps=sub.deps,
        )
        head = replace(head, speculative=sub.speculative, rollback_anchor=sub.rollback_anchor)
        tail = replace(tail, subnode_id=subnode_id, deps=frozenset({head.subnode_id}),
                       speculative=sub.speculative, rollback_anchor=sub.rollback_anchor)
        self.subnodes[head.subnode_id] = head
        self.subnodes[subnode_id] = tail
        return head, tail

    def reorder_stage(self, subnode_id: int, cluster_order: Sequence[int]) -> SubNode:
        """Reorder the clusters of an unsplit retrieval sub-node into cluster_order"""
        sub = self.subnodes[subnode_id]
        if sub.kind != "retrieval":
            raise ValueError("only retrieval sub-nodes carry a cluster order")
        lo, hi = sub.span
        singles = split_node(self.graph.node(sub.parent), list(range(lo, hi + 1)), hi,
                             clusters=sub.clusters, start=lo, deps=sub.deps)
        position = {c: i for i, c in enumerate(sub.clusters)}
        try:
            permutation = [position[int(c)] for c in cluster_order]
        except KeyError as e:
            raise ValueError(f"cluster {e.args[0]} is not part of sub-node {subnode_id}")
        reordered = reorder_subnodes(singles, permutation)
        merged = replace(sub, clusters=tuple(c for s in reordered for c in s.clusters))
        self.subnodes[subnode_id] = merged
        return merged

    def stage_subnodes(self, parent: int) -> List[SubNode]:
        return sorted((s for s in self.subnodes.values() if s.parent == parent), key=lambda s: (s.span[0], s.subnode_id))

    def stage_end(self, parent: int) -> int:
        return max(s.span[1] for s in self.stage_subnodes(parent))

    def insert_speculative_edge(self, from_subnode: int, to_node: int, anchor: Optional[int] = None) -> "GraphInstance":
        sub = self.subnodes.get(from_subnode)
        if sub is None:
            raise ValueError(f"unknown sub-node {from_subnode}")
        if sub.span[1] >= self.stage_end(sub.parent):
            raise ValueError(f"sub-node {from_subnode} is the last sub-node of node {sub.parent}")
        if to_node not in self.graph.possible_targets(sub.parent) or to_node == END:
            raise ValueError(f"node {node_label(to_node)} is not a successor of node {sub.parent}")
        key = (from_subnode, to_node)
        if key in self.speculative_edges:
            raise ValueError(f"speculative edge {key} already exists")
        self.speculative_edges[key] = anchor
        return self

    def rewire_dependency(self, subnode_id: int, new_deps: Iterable[int]) -> "GraphInstance":
        new_deps = frozenset(int(d) for d in new_deps)
        if subnode_id not in self.subnodes:
            raise ValueError(f"unknown sub-node {subnode_id}")
        if subnode_id in new_deps:
            raise ValueError(f"sub-node {subnode_id} cannot depend on itself")
        unknown = new_deps - set(self.subnodes)
        if unknown:
            raise ValueError(f"unknown dependencies {sorted(unknown)}")
        previous = self.subnodes[subnode_id]
        self.subnodes[subnode_id] = replace(previous, deps=new_deps)
        try:
            self.topological_order()
        except ValueError:
            self.subnodes[subnode_id] = previous
            raise ValueError(f"rewiring sub-node {subnode_id} to {sorted(new_deps)} introduces a cycle")
        return self

    def topological_order(self) -> List[int]:
        indegree = {sid: 0 for sid in self.subnodes}
        dependents: Dict[int, List[int]] = {sid: [] for sid in self.subnodes}
        for sid, sub in self.subnodes.items():
            for dep in sub.deps:
                if dep in dependents:
                    indegree[sid] += 1
                    dependents[dep].append(sid)
        ready = sorted(sid for sid, d in indegree.items() if d == 0)
        order: List[int] = []
        while ready:
            sid = ready.pop(0)
            order.append(sid)
            for nxt in sorted(dependents[sid]):
                indegree[nxt] -= 1
                if indegree[nxt] == 0:
                    ready.append(nxt)
            ready.sort()
        if len(order) != len(self.subnodes):
            raise ValueError("sub-node dependencies contain a cycle")
        return order

    def is_ready(self, subnode_id: int, completed: Set[int]) -> bool:
        return self.subnodes[subnode_id].deps <= completed


# ---------------------------------------------------------------------------
# Workflow files

class NodeRecord(BaseModel):
    id: int = Field(..., description="Node id")
    kind: Literal["generation", "retrieval"] = Field(..., description="Node kind")
    prompt: Optional[str] = Field(default=None, description="Prompt template with {var} slots")
    topk: Optional[int] = Field(default=None, description="Results returned by a retrieval node")
    query_var: Optional[str] = Field(default=None, description="Variable holding the retrieval query")
    output_var: Optional[str] = Field(default=None, description="Variable written by the node")


class EdgeRecord(BaseModel):
    src: Union[int, str] = Field(..., alias="from", description="Source node id or START")
    to: Union[int, str] = Field(..., description="Target node id or END")
    cond: Optional[str] = Field(default=None, description="Named condition guarding the edge")


class WorkflowFile(BaseModel):
    name: str = Field(default="workflow")
    max_loop_iters: int = Field(default=DEFAULT_MAX_LOOP_ITERS, ge=1)
    nodes: List[NodeRecord] = Field(default_factory=list)
    edges: List[EdgeRecord] = Field(default_factory=list)


def _endpoint(raw: Union[int, str]) -> int:
    if isinstance(raw, int):
        return raw
    if raw in _SENTINEL_IDS:
        return _SENTINEL_IDS[raw]
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"bad edge endpoint {raw!r}")


def graph_from_dict(data: Dict[str, Any]) -> RAGraph:
    record = WorkflowFile.model_validate(data)
    graph = RAGraph(name=record.name, max_loop_iters=record.max_loop_iters)
    for node in record.nodes:
        if node.kind == "generation":
            if node.prompt is None:
                raise ValueError(f"generation node {node.id} needs a prompt")
            graph.add_generation(node.id, node.prompt, node.output_var)
        else:
            if node.topk is None or node.query_var is None or node.output_var is None:
                raise ValueError(f"retrieval node {node.id} needs topk, query_var and output_var")
            graph.add_retrieval(node.id, node.topk, node.query_var, node.output_var)
    for edge in record.edges:
        graph.add_edge(_endpoint(edge.src), _endpoint(edge.to), when=edge.cond)
    return graph


def _template_dir():
    return resources.files("ragsim") / "templates"


def list_templates() -> List[str]:
    return sorted(p.name[:-5] for p in _template_dir().iterdir() if p.name.endswith(".json"))


def load_workflow(name_or_path: str) -> RAGraph:
    """Load a workflow file, or a shipped template by name"""
    path = Path(name_or_path)
    if path.is_file():
        return graph_from_dict(json.loads(path.read_text()))
    template = _template_dir() / f"{name_or_path}.json"
    if template.is_file():
        return graph_from_dict(json.loads(template.read_text()))
    raise ValueError(f"no workflow file or template named {name_or_path!r}; templates: {', '.join(list_templates())}")


def save_workflow(graph: RAGraph, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(graph.to_dict(), indent=2))
