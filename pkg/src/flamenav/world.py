"""Grid-city navigation graphs, agent dynamics and synthetic observations.

Headings are compass degrees: 0 is north (+y), 90 east (+x), and they grow
clockwise, so RIGHT rotates towards larger headings.
"""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .seeding import derive_seed, rng_for

WORLD_FORMAT = "flamenav-world"
WORLD_VERSION = 1

DEFAULT_TAGS = (
    "traffic light",
    "scaffolding",
    "bench",
    "hydrant",
    "bus stop",
    "mailbox",
    "church",
    "bank",
    "cafe",
    "parking lot",
    "statue",
    "fountain",
)

_GRID_STEPS = {0: (0, 1), 90: (1, 0), 180: (0, -1), 270: (-1, 0)}

# observation feature construction
FEATURE_DIM = 64
AHEAD_WEIGHT = 0.5
LAYOUT_KEYS = ("ahead", "right", "behind", "left")


class WorldError(ValueError):
    pass


class Action(enum.IntEnum):
    FORWARD = 0
    LEFT = 1
    RIGHT = 2
    STOP = 3
    TURN_AROUND = 4


class AgentState(NamedTuple):
    node: int
    heading: int


class Step(NamedTuple):
    state: AgentState
    stopped: bool = False
    blocked: bool = False


@dataclass(frozen=True)
class Node:
    id: int
    x: int
    y: int
    tags: tuple[str, ...] = ()
    sides: tuple[str, ...] = ()


@dataclass(frozen=True)
class WorldParams:
    width: int = 8
    height: int = 8
    landmark_density: float = 0.35
    tag_vocab: tuple[str, ...] = DEFAULT_TAGS
    edge_drop: float = 0.25
    second_tag_prob: float = 0.15

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "landmark_density": self.landmark_density,
            "tag_vocab": list(self.tag_vocab),
            "edge_drop": self.edge_drop,
            "second_tag_prob": self.second_tag_prob,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldParams":
        d = dict(d)
        if "tag_vocab" in d:
            d["tag_vocab"] = tuple(d["tag_vocab"])
        return cls(**d)


@dataclass
class NavGraph:
    nodes: dict[int, Node]
    out: dict[int, dict[int, int]]  # node -> heading -> neighbour
    world_id: str = "world"
    seed: int = 0
    params: WorldParams = field(default_factory=WorldParams)
    _dist_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def edges(self) -> list[tuple[int, int, int]]:
        return [(u, v, h) for u in sorted(self.out) for h, v in sorted(self.out[u].items())]

    def out_headings(self, node: int) -> list[int]:
        return sorted(self.out[node])

    def degree(self, node: int) -> int:
        return len(self.out[node])

    def edge_heading(self, u: int, v: int) -> int:
        for h, w in self.out[u].items():
            if w == v:
                return h
        raise WorldError(f"no edge {u}->{v}")

    def forward_neighbor(self, s: AgentState) -> int | None:
        e = _forward_edge(self, s)
        return None if e is None else self.out[s.node][e]

    def validate(self) -> None:
        for u, nbrs in self.out.items():
            if not 1 <= len(nbrs) <= 4:
                raise WorldError(f"node {u} has degree {len(nbrs)}")
            for h, v in nbrs.items():
                if self.out.get(v, {}).get((h + 180) % 360) != u:
                    raise WorldError(f"edge {u}->{v} lacks its reverse")
                a, b = self.nodes[u], self.nodes[v]
                if heading_between((a.x, a.y), (b.x, b.y)) != h:
                    raise WorldError(f"edge {u}->{v} heading {h} disagrees with coordinates")
        if not is_connected(self):
            raise WorldError("graph is not connected")


def heading_between(a: tuple[int, int], b: tuple[int, int]) -> int:
    dx, dy = b[0] - a[0], b[1] - a[1]
    ang = np.degrees(np.arctan2(dx, dy)) % 360.0
    return int(round(ang / 45.0) * 45) % 360


def angle_diff(a: int, b: int) -> int:
    d = abs(a - b) % 360
    return min(d, 360 - d)


def is_connected(g: NavGraph) -> bool:
    if not g.nodes:
        return False
    start = next(iter(g.nodes))
    return len(_bfs(g, start)) == len(g.nodes)


def _bfs(g: NavGraph, src: int) -> dict[int, int]:
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in g.out[u].values():
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def distances_from(g: NavGraph, src: int) -> dict[int, int]:
    if src not in g.nodes:
        raise WorldError(f"unknown node {src}")
    cached = g._dist_cache.get(src)
    if cached is None:
        cached = g._dist_cache[src] = _bfs(g, src)
    return cached


def shortest_path_dist(g: NavGraph, u: int, v: int) -> int:
    if u not in g.nodes or v not in g.nodes:
        raise WorldError(f"unknown node in ({u}, {v})")
    d = distances_from(g, v).get(u)
    if d is None:
        raise WorldError(f"nodes {u} and {v} are disconnected")
    return d


def is_key_location(g: NavGraph, node: int) -> bool:
    if node not in g.out:
        raise WorldError(f"unknown node {node}")
    return len(g.out[node]) >= 3


# ------------------------------------------------------------------ dynamics


def _forward_edge(g: NavGraph, s: AgentState) -> int | None:
    best = None
    for e in g.out[s.node]:
        diff = angle_diff(s.heading, e)
        if diff >= 90:
            continue
        key = (diff, (e - s.heading) % 360)
        if best is None or key < best[0]:
            best = (key, e)
    return None if best is None else best[1]


def transition(g: NavGraph, s: AgentState, a: Action) -> Step:
    a = Action(a)
    if a is Action.STOP:
        return Step(s, stopped=True)
    if a is Action.TURN_AROUND:
        return Step(AgentState(s.node, (s.heading + 180) % 360))
    out = g.out[s.node]
    if a is Action.FORWARD:
        e = _forward_edge(g, s)
        if e is None:
            return Step(s, blocked=True)
        return Step(AgentState(out[e], e))
    back = (s.heading + 180) % 360
    if len(out) == 2 and back in out:
        # corridor node: either rotation realigns onto the way onward
        other = next(e for e in out if e != back)
        return Step(AgentState(s.node, other))
    distinct = [e for e in out if e != s.heading]
    if not distinct:
        return Step(s)
    if a is Action.RIGHT:
        e = min(distinct, key=lambda e: (e - s.heading) % 360)
    else:
        e = min(distinct, key=lambda e: (s.heading - e) % 360)
    return Step(AgentState(s.node, e))


def replay(g: NavGraph, start: AgentState, actions) -> tuple[list[int], AgentState, bool]:
    """Run actions from ``start``; returns (node path, final state, stopped)."""
    s = start
    path = [s.node]
    for a in actions:
        step = transition(g, s, a)
        if step.stopped:
            return path, s, True
        if step.state.node != s.node:
            path.append(step.state.node)
        s = step.state
    return path, s, False


def rotation_plan(g: NavGraph, node: int, heading: int, target_edge: int) -> list[Action]:
    """Shortest rotation sequence after which FORWARD takes ``target_edge``.

    Rotations in the geometric direction of the target are tried first so a
    right-hand curve is labelled RIGHT.
    """
    if _forward_edge(g, AgentState(node, heading)) == target_edge:
        return []
    cw = (target_edge - heading) % 360
    order = [Action.RIGHT, Action.LEFT] if 0 < cw < 180 else [Action.LEFT, Action.RIGHT]
    order.append(Action.TURN_AROUND)
    start = AgentState(node, heading)
    seen = {start}
    q = deque([(start, [])])
    while q:
        s, plan = q.popleft()
        for a in order:
            ns = transition(g, s, a).state
            if ns in seen:
                continue
            seen.add(ns)
            if _forward_edge(g, ns) == target_edge:
                return plan + [a]
            q.append((ns, plan + [a]))
    raise WorldError(f"cannot face edge {target_edge} at node {node}")


def actions_for_path(g: NavGraph, path: list[int], start_heading: int) -> list[Action]:
    actions: list[Action] = []
    h = start_heading
    for u, v in zip(path, path[1:]):
        e = g.edge_heading(u, v)
        actions.extend(rotation_plan(g, u, h, e))
        actions.append(Action.FORWARD)
        h = e
    actions.append(Action.STOP)
    return actions


# --------------------------------------------------------------- generation


def generate_world(seed: int, params: WorldParams | None = None, world_id: str | None = None) -> NavGraph:
    params = params or WorldParams()
    if params.width < 2 or params.height < 2:
        raise WorldError(f"grid must be at least 2x2, got {params.width}x{params.height}")
    if not 0.0 <= params.landmark_density <= 1.0 or not 0.0 <= params.edge_drop < 1.0:
        raise WorldError("landmark_density must be in [0,1] and edge_drop in [0,1)")
    if params.landmark_density > 0 and not params.tag_vocab:
        raise WorldError("landmarks requested with an empty tag vocabulary")
    rng = rng_for("world", seed)
    W, H = params.width, params.height
    out: dict[int, dict[int, int]] = {y * W + x: {} for y in range(H) for x in range(W)}
    undirected = []
    for y in range(H):
        for x in range(W):
            u = y * W + x
            if x + 1 < W:
                undirected.append((u, u + 1, 90))
            if y + 1 < H:
                undirected.append((u, u + W, 0))
    for u, v, h in undirected:
        out[u][h] = v
        out[v][(h + 180) % 360] = u

    nodes = {}
    for y in range(H):
        for x in range(W):
            nodes[y * W + x] = Node(y * W + x, x, y)
    g = NavGraph(nodes, out, world_id or f"w{seed}", seed, params)

    order = rng.permutation(len(undirected))
    for i in order:
        if rng.random() >= params.edge_drop:
            continue
        u, v, h = undirected[i]
        if len(out[u]) <= 1 or len(out[v]) <= 1:
            continue
        del out[u][h]
        del out[v][(h + 180) % 360]
        if not is_connected(g):
            out[u][h] = v
            out[v][(h + 180) % 360] = u

    vocab = list(params.tag_vocab)
    for nid in sorted(nodes):
        tags: list[str] = []
        if vocab and rng.random() < params.landmark_density:
            tags.append(vocab[rng.integers(len(vocab))])
            if rng.random() < params.second_tag_prob:
                extra = vocab[rng.integers(len(vocab))]
                if extra not in tags:
                    tags.append(extra)
        sides = tuple("left" if rng.random() < 0.5 else "right" for _ in tags)
        n = nodes[nid]
        nodes[nid] = Node(nid, n.x, n.y, tuple(tags), sides)
    g._dist_cache.clear()
    return g


def with_tags(g: NavGraph, node: int, tags, sides=None) -> NavGraph:
    """Copy of ``g`` with the tags of one node replaced."""
    tags = tuple(tags)
    sides = tuple(sides) if sides is not None else tuple("left" for _ in tags)
    nodes = dict(g.nodes)
    n = nodes[node]
    nodes[node] = Node(n.id, n.x, n.y, tags, sides)
    return NavGraph(nodes, {u: dict(v) for u, v in g.out.items()}, g.world_id, g.seed, g.params)


def world_to_dict(g: NavGraph) -> dict:
    return {
        "format": WORLD_FORMAT,
        "version": WORLD_VERSION,
        "world_id": g.world_id,
        "seed": g.seed,
        "params": g.params.to_dict(),
        "nodes": [
            {"id": n.id, "x": n.x, "y": n.y, "tags": list(n.tags), "sides": list(n.sides)}
            for n in (g.nodes[k] for k in sorted(g.nodes))
        ],
        "edges": [{"u": u, "v": v, "heading": h} for u, v, h in g.edges],
    }


def world_to_json(g: NavGraph) -> str:
    return json.dumps(world_to_dict(g), sort_keys=True, separators=(",", ":"))


def world_from_dict(d: dict) -> NavGraph:
    if d.get("format") != WORLD_FORMAT:
        raise WorldError(f"not a world file (format={d.get('format')!r})")
    if d.get("version") != WORLD_VERSION:
        raise WorldError(f"world file version {d.get('version')} != {WORLD_VERSION}")
    nodes = {
        n["id"]: Node(n["id"], n["x"], n["y"], tuple(n["tags"]), tuple(n.get("sides", ["left"] * len(n["tags"]))))
        for n in d["nodes"]
    }
    out: dict[int, dict[int, int]] = {nid: {} for nid in nodes}
    for e in d["edges"]:
        out[e["u"]][e["heading"]] = e["v"]
    g = NavGraph(nodes, out, d["world_id"], d["seed"], WorldParams.from_dict(d["params"]))
    g.validate()
    return g


def world_from_json(text: str) -> NavGraph:
    return world_from_dict(json.loads(text))


# ------------------------------------------------------------- observations


@dataclass(frozen=True)
class Observation:
    feature: np.ndarray
    caption: str


@lru_cache(maxsize=None)
def tag_signature(tag: str, dim: int = FEATURE_DIM) -> np.ndarray:
    v = rng_for("tag-signature", tag, dim).standard_normal(dim)
    v = v / np.linalg.norm(v)
    v.setflags(write=False)
    return v


@lru_cache(maxsize=None)
def layout_signature(rel: str, dim: int = FEATURE_DIM) -> np.ndarray:
    v = rng_for("layout-signature", rel, dim).standard_normal(dim)
    v = v / np.linalg.norm(v)
    v.setflags(write=False)
    return v


def relative_direction(heading: int, edge: int) -> str:
    d = (edge - heading) % 360
    if d == 0:
        return "ahead"
    if d == 180:
        return "behind"
    return "right" if d < 180 else "left"


def visible_tags(g: NavGraph, s: AgentState) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Tags at the node and tags at the FORWARD neighbour."""
    here = g.nodes[s.node].tags
    nb = g.forward_neighbor(s)
    ahead = g.nodes[nb].tags if nb is not None else ()
    return here, ahead


def layout(g: NavGraph, s: AgentState) -> tuple[str, ...]:
    """Directions of the open roads relative to the heading, in fixed order."""
    rels = {relative_direction(s.heading, e) for e in g.out[s.node]}
    return tuple(k for k in LAYOUT_KEYS if k in rels)


def raw_feature(g: NavGraph, s: AgentState, world_seed: int | None = None, dim: int = FEATURE_DIM) -> np.ndarray:
    """Unnormalised observation vector.

    A pseudo-random base vector per (node, heading bucket) plus one fixed
    signature per visible landmark (node tags at full weight, tags at the
    FORWARD neighbour at ``AHEAD_WEIGHT``) plus one per open road direction.
    """
    seed = g.seed if world_seed is None else world_seed
    base = rng_for("obs-base", seed, s.node, (s.heading % 360) // 45, dim).standard_normal(dim) / np.sqrt(dim)
    v = base.copy()
    here, ahead = visible_tags(g, s)
    for t in here:
        v += tag_signature(t, dim)
    for t in ahead:
        v += AHEAD_WEIGHT * tag_signature(t, dim)
    for rel in layout(g, s):
        v += layout_signature(rel, dim)
    return v


def observe(g: NavGraph, s: AgentState, world_seed: int | None = None, dim: int = FEATURE_DIM) -> Observation:
    from .synth import gen_caption

    v = raw_feature(g, s, world_seed, dim)
    feature = v / np.linalg.norm(v)
    caption = gen_caption(g, s.node, s.heading, style_seed=0).caption
    return Observation(feature, caption)


def observe_feature(g: NavGraph, s: AgentState, world_seed: int | None = None, dim: int = FEATURE_DIM) -> np.ndarray:
    v = raw_feature(g, s, world_seed, dim)
    return v / np.linalg.norm(v)


# ------------------------------------------------------------------- routes


@dataclass(frozen=True)
class RouteParams:
    min_len: int = 3
    max_len: int = 9
    straight_bias: float = 0.7
    heading_mode: str = "aligned"  # "aligned" (map2seq-like) or "random" (touchdown-like)
    max_tries: int = 200


@dataclass(frozen=True)
class Route:
    path: tuple[int, ...]
    actions: tuple[Action, ...]
    start_heading: int

    @property
    def start(self) -> AgentState:
        return AgentState(self.path[0], self.start_heading)


def _random_dfs(g: NavGraph, start: int, length: int, straight_bias: float, rng) -> list[int] | None:
    path = [start]
    on_path = {start}
    budget = [4000]

    def extend(prev_heading: int | None) -> bool:
        if len(path) - 1 == length:
            return True
        budget[0] -= 1
        if budget[0] < 0:
            return False
        u = path[-1]
        options = [(h, v) for h, v in sorted(g.out[u].items()) if v not in on_path]
        rng.shuffle(options)
        if prev_heading is not None and rng.random() < straight_bias:
            options.sort(key=lambda hv: hv[0] != prev_heading)
        for h, v in options:
            path.append(v)
            on_path.add(v)
            if extend(h):
                return True
            path.pop()
            on_path.discard(v)
        return False

    return path if extend(None) else None


def sample_route(g: NavGraph, seed: int, params: RouteParams | None = None) -> Route:
    params = params or RouteParams()
    if params.min_len < 1 or params.max_len < params.min_len:
        raise WorldError(f"bad route length range [{params.min_len}, {params.max_len}]")
    rng = rng_for("route", g.world_id, seed)
    ids = sorted(g.nodes)
    for _ in range(params.max_tries):
        length = int(rng.integers(params.min_len, params.max_len + 1))
        start = ids[int(rng.integers(len(ids)))]
        path = _random_dfs(g, start, length, params.straight_bias, rng)
        if path is None:
            continue
        first = g.edge_heading(path[0], path[1])
        if params.heading_mode == "random":
            opts = g.out_headings(path[0])
            h0 = opts[int(rng.integers(len(opts)))]
        else:
            h0 = first
        actions = actions_for_path(g, path, h0)
        walked, _, stopped = replay(g, AgentState(path[0], h0), actions)
        if walked != path or not stopped:
            raise WorldError("ground-truth actions do not replay the sampled path")
        return Route(tuple(path), tuple(actions), h0)
    raise WorldError(f"no simple path of length in [{params.min_len}, {params.max_len}] after {params.max_tries} tries")
