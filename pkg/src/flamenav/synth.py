"""Template-based captions, route summaries, instructions and rationales.

Every generated string is lower-case, whitespace tokenised, and drawn from a
closed grammar whose words are enumerated by :func:`grammar_words`.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .seeding import content_hash, derive_seed, rng_for
from .world import (
    Action,
    AgentState,
    NavGraph,
    Route,
    RouteParams,
    actions_for_path,
    is_key_location,
    layout,
    replay,
    sample_route,
    transition,
    visible_tags,
)

DATASET_FORMAT = "flamenav-dataset"
DATASET_VERSION = 1

NUMBER_WORDS = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    "nine", "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen",
)

TURN_WORDS = {Action.LEFT: "left", Action.RIGHT: "right", Action.TURN_AROUND: "around"}
DECISION_PHRASES = {
    Action.FORWARD: "go forward",
    Action.LEFT: "turn left",
    Action.RIGHT: "turn right",
    Action.STOP: "stop",
    Action.TURN_AROUND: "turn around",
}

CAPTION_PROMPTS = (
    "describe the street view .",
    "what can you see from here ?",
    "describe the landmarks around you .",
    "tell me about this street .",
    "what does this place look like ?",
    "give a short description of the view .",
)

# {tags}: landmark phrase list, {layout}: road clause
CAPTION_TEMPLATES = (
    "there is {tags} . {layout}",
    "i can see {tags} . {layout}",
    "{layout} you can spot {tags} .",
    "this street has {tags} . {layout}",
    "on this block there is {tags} . {layout}",
    "{tags} can be seen nearby . {layout}",
)
GENERIC_CAPTION = "a plain street with no landmarks . {layout}"
LAYOUT_CLAUSE = "roads lead {dirs} ."
DEAD_END_CLAUSE = "this is a dead end ."
TAG_PHRASE = "a {tag} on your {side}"

FORWARD_VERBS = ("go forward", "walk forward", "head straight")


class SynthError(ValueError):
    pass


# --------------------------------------------------------------------- grammar


def tokenize(text: str) -> list[str]:
    return text.split()


def grammar_words(tag_vocab: Iterable[str]) -> list[str]:
    """Every word any generator in this module can emit."""
    words: set[str] = set()
    static = (
        list(CAPTION_PROMPTS) + list(CAPTION_TEMPLATES) + [GENERIC_CAPTION, LAYOUT_CLAUSE, DEAD_END_CLAUSE, TAG_PHRASE]
        + list(FORWARD_VERBS) + list(DECISION_PHRASES.values()) + list(NUMBER_WORDS)
        + [
            "ahead behind left right and around",
            "block blocks passing the at to stop turn then",
            ", .",
            "i see no landmarks here ahead the instruction says so i will",
        ]
    )
    for s in static:
        words.update(w for w in re.sub(r"\{[a-z]+\}", " ", s).split())
    for tag in tag_vocab:
        words.update(tag.split())
    return sorted(words)


def number_word(n: int) -> str:
    if not 0 <= n < len(NUMBER_WORDS):
        raise SynthError(f"count {n} outside the number vocabulary")
    return NUMBER_WORDS[n]


def _blocks(n: int) -> str:
    return f"{number_word(n)} {'block' if n == 1 else 'blocks'}"


def _join_the(tags: Sequence[str]) -> str:
    return " and the ".join(tags)


# -------------------------------------------------------------------- captions


@dataclass(frozen=True)
class CaptionRecord:
    prompt: str
    node: int
    heading: int
    caption: str
    world_id: str = ""
    skeleton: int = 0


def relative_side(side: str, heading: int) -> str:
    """Street sides are stored for north/east-facing travel and mirror otherwise."""
    if heading % 360 >= 180:
        return "left" if side == "right" else "right"
    return side


def _layout_clause(g: NavGraph, s: AgentState) -> str:
    dirs = [d for d in layout(g, s) if d != "behind"]
    if not dirs:
        return DEAD_END_CLAUSE
    return LAYOUT_CLAUSE.format(dirs=" and ".join(dirs))


def gen_caption(g: NavGraph, node: int, heading: int, style_seed: int = 0) -> CaptionRecord:
    n = g.nodes[node]
    rng = rng_for("caption", g.world_id, node, heading, style_seed)
    prompt = CAPTION_PROMPTS[int(rng.integers(len(CAPTION_PROMPTS)))]
    lay = _layout_clause(g, AgentState(node, heading))
    if not n.tags:
        return CaptionRecord(prompt, node, heading, GENERIC_CAPTION.format(layout=lay), g.world_id, len(CAPTION_TEMPLATES))
    phrases = [TAG_PHRASE.format(tag=t, side=relative_side(sd, heading)) for t, sd in zip(n.tags, n.sides)]
    k = int(rng.integers(len(CAPTION_TEMPLATES)))
    text = CAPTION_TEMPLATES[k].format(tags=" and ".join(phrases), layout=lay)
    return CaptionRecord(prompt, node, heading, text, g.world_id, k)


# -------------------------------------------------------------------- segments


@dataclass(frozen=True)
class Segment:
    """A run of FORWARD moves closed by a rotation or by STOP."""

    start_index: int  # path index where the segment starts
    end_index: int  # path index of the node where the closing action happens
    n_forward: int
    end_action: Action
    end_step: int  # action index of the closing action


def segments(actions: Sequence[Action]) -> list[Segment]:
    segs = []
    i = start = n = 0
    for k, a in enumerate(actions):
        a = Action(a)
        if a is Action.FORWARD:
            n += 1
            i += 1
            continue
        segs.append(Segment(start, i, n, a, k))
        start, n = i, 0
        if a is Action.STOP:
            break
    return segs


def _check_path(g: NavGraph, path: Sequence[int]) -> None:
    if len(path) < 1:
        raise SynthError("empty path")
    for u, v in zip(path, path[1:]):
        if u not in g.out or v not in g.out[u].values():
            raise SynthError(f"path step {u}->{v} is not an edge")


def _route_actions(g: NavGraph, path: Sequence[int], start_heading: int | None) -> list[Action]:
    _check_path(g, path)
    if start_heading is None:
        if len(path) < 2:
            raise SynthError("single-node path needs an explicit start heading")
        start_heading = g.edge_heading(path[0], path[1])
    return actions_for_path(g, list(path), start_heading)


# -------------------------------------------------------------------- summaries


def gen_summary(g: NavGraph, path: Sequence[int], start_heading: int | None = None) -> str:
    """Segment-by-segment recitation of turns and the landmarks passed."""
    actions = _route_actions(g, path, start_heading)
    clauses = []
    for seg in segments(actions):
        parts = []
        if seg.n_forward:
            fwd = f"go forward {_blocks(seg.n_forward)}"
            passed = [t for j in range(seg.start_index + 1, seg.end_index) for t in g.nodes[path[j]].tags]
            if passed:
                fwd += f" passing the {_join_the(passed)}"
            parts.append(fwd)
        end_tags = g.nodes[path[seg.end_index]].tags
        if seg.end_action is Action.STOP:
            end = "stop"
        else:
            end = f"turn {TURN_WORDS[seg.end_action]}"
        if end_tags:
            end += f" at the {_join_the(end_tags)}"
        parts.append(end)
        clauses.append(" and ".join(parts))
    return " , ".join(clauses) + " ."


# ----------------------------------------------------------------- instructions


def anchor_tags(g: NavGraph, path: Sequence[int], seg: Segment) -> list[str]:
    """Tags at the segment's end node that appear nowhere earlier in it."""
    earlier = {t for j in range(seg.start_index, seg.end_index) for t in g.nodes[path[j]].tags}
    return [t for t in g.nodes[path[seg.end_index]].tags if t not in earlier]


def instruction_clauses(
    g: NavGraph,
    path: Sequence[int],
    style_seed: int = 0,
    landmark_fraction: float = 0.7,
    start_heading: int | None = None,
) -> list[str]:
    actions = _route_actions(g, path, start_heading)
    rng = rng_for("instruction", g.world_id, tuple(path), style_seed)
    clauses = []
    for seg in segments(actions):
        anchors = anchor_tags(g, path, seg)
        use_anchor = bool(anchors) and rng.random() < landmark_fraction
        verb = FORWARD_VERBS[int(rng.integers(len(FORWARD_VERBS)))]
        if seg.end_action is Action.STOP:
            if use_anchor and seg.n_forward:
                clauses.append(f"{verb} to the {anchors[0]} and stop")
            elif seg.n_forward:
                clauses.append(f"{verb} {_blocks(seg.n_forward)} and stop")
            else:
                clauses.append("stop")
            continue
        turn = f"turn {TURN_WORDS[seg.end_action]}"
        if use_anchor:
            clauses.append(f"{turn} at the {anchors[0]}")
        elif seg.n_forward:
            clauses.append(f"{verb} {_blocks(seg.n_forward)} and {turn}")
        else:
            clauses.append(turn)
    return clauses


def gen_instruction(
    g: NavGraph,
    path: Sequence[int],
    style_seed: int = 0,
    landmark_fraction: float = 0.7,
    start_heading: int | None = None,
) -> str:
    return " , ".join(instruction_clauses(g, path, style_seed, landmark_fraction, start_heading)) + " ."


def split_instruction(instruction: str) -> list[str]:
    body = instruction.strip()
    if body.endswith("."):
        body = body[:-1]
    return [c.strip() for c in body.split(" , ")]


# ------------------------------------------------------------------ rationales


@dataclass(frozen=True)
class KeyVisit:
    node: int
    path_index: int
    step: int  # action index of the first action taken at the node
    heading: int  # heading on arrival
    action: Action
    segment: int


def key_visits(g: NavGraph, path: Sequence[int], actions: Sequence[Action], start_heading: int) -> list[KeyVisit]:
    """First arrival at every key location along a ground-truth route."""
    segs = segments(actions)
    visits = []
    s = AgentState(path[0], start_heading)
    idx = 0
    arrived = True
    for k, a in enumerate(actions):
        if arrived and is_key_location(g, s.node):
            seg = next(i for i, sg in enumerate(segs) if sg.start_index <= idx <= sg.end_index)
            visits.append(KeyVisit(s.node, idx, k, s.heading, Action(a), seg))
        arrived = False
        step = transition(g, s, a)
        if step.stopped:
            break
        if step.state.node != s.node:
            idx += 1
            arrived = True
        s = step.state
    return visits


def observed_clause(g: NavGraph, s: AgentState) -> str:
    here, ahead = visible_tags(g, s)
    ahead = [t for t in ahead if t not in here]
    if here and ahead:
        return f"i see the {_join_the(here)} here and the {_join_the(ahead)} ahead"
    if here:
        return f"i see the {_join_the(here)} here"
    if ahead:
        return f"i see the {_join_the(ahead)} ahead"
    return "i see no landmarks"


def format_rationale(observed: str, clause: str, action: Action) -> str:
    return f"{observed} . the instruction says {clause} . so i will {DECISION_PHRASES[Action(action)]} ."


def gen_rationale(
    g: NavGraph,
    path: Sequence[int],
    key_node: int,
    instruction: str,
    start_heading: int | None = None,
) -> str:
    actions = _route_actions(g, path, start_heading)
    h0 = start_heading if start_heading is not None else g.edge_heading(path[0], path[1])
    visit = next((v for v in key_visits(g, path, actions, h0) if v.node == key_node), None)
    if visit is None:
        raise SynthError(f"node {key_node} is not a key location on the path")
    clauses = split_instruction(instruction)
    clause = clauses[min(visit.segment, len(clauses) - 1)]
    return format_rationale(observed_clause(g, AgentState(visit.node, visit.heading)), clause, visit.action)


@dataclass(frozen=True)
class ParsedRationale:
    observed: str
    clause: str
    decision: Action | None
    landmarks_observed: tuple[str, ...]
    landmarks_all: tuple[str, ...]


_DECISION_RE = re.compile(r"so i will (.+?) \.?$")


def find_landmarks(text: str, tag_vocab: Iterable[str]) -> list[str]:
    """Landmark mentions in order of appearance (multi-word tags matched first)."""
    words = text.split()
    tags = sorted((t.split() for t in tag_vocab), key=len, reverse=True)
    found = []
    i = 0
    while i < len(words):
        for t in tags:
            if words[i : i + len(t)] == t:
                found.append(" ".join(t))
                i += len(t)
                break
        else:
            i += 1
    return found


def parse_decision(phrase: str) -> Action | None:
    phrase = phrase.strip().rstrip(".").strip()
    for a, p in DECISION_PHRASES.items():
        if phrase == p:
            return a
    return None


def parse_rationale(text: str, tag_vocab: Iterable[str]) -> ParsedRationale | None:
    """Split a rationale into its three clauses; None if it does not fit the grammar."""
    parts = [p.strip() for p in text.strip().split(" . ")]
    if len(parts) != 3:
        return None
    observed, clause, decision = parts
    if not observed.startswith("i see") or not clause.startswith("the instruction says"):
        return None
    m = _DECISION_RE.match(decision if decision.endswith(".") else decision + " .")
    if not m:
        return None
    action = parse_decision(m.group(1))
    tag_vocab = list(tag_vocab)
    return ParsedRationale(
        observed,
        clause[len("the instruction says"):].strip(),
        action,
        tuple(find_landmarks(observed, tag_vocab)),
        tuple(find_landmarks(text, tag_vocab)),
    )


def validate_rationale(record: dict, g: NavGraph) -> bool:
    """Check a rationale record ``{node, heading, action, text}`` against the world."""
    parsed = parse_rationale(record["text"], g.params.tag_vocab)
    if parsed is None or parsed.decision is None:
        return False
    act = record["action"]
    if parsed.decision != (Action[act] if isinstance(act, str) else Action(act)):
        return False
    here, ahead = visible_tags(g, AgentState(record["node"], record["heading"]))
    visible = set(here) | set(ahead)
    return all(t in visible for t in parsed.landmarks_observed)


# ------------------------------------------------------------------- datasets


def route_id(world_id: str, route: Route) -> str:
    return f"{world_id}:{'-'.join(map(str, route.path))}:{route.start_heading}"


def split_of(rid: str) -> str:
    bucket = int(hashlib.sha256(rid.encode()).hexdigest()[:8], 16) % 100
    if bucket < 70:
        return "train"
    if bucket < 85:
        return "dev"
    return "test"


def _route_record(g: NavGraph, route: Route, seed: int, landmark_fraction: float, with_rationales: bool, simple: bool) -> dict:
    path, actions, h0 = list(route.path), list(route.actions), route.start_heading
    rid = route_id(g.world_id, route)
    instr = gen_instruction(g, path, style_seed=seed, landmark_fraction=0.0 if simple else landmark_fraction, start_heading=h0)
    visits = key_visits(g, path, actions, h0)
    captions = [
        {"node": v.node, "heading": v.heading, "text": gen_caption(g, v.node, v.heading, seed).caption} for v in visits
    ]
    rationales = None
    if with_rationales:
        rationales = []
        clauses = split_instruction(instr)
        for v in visits:
            text = format_rationale(
                observed_clause(g, AgentState(v.node, v.heading)), clauses[min(v.segment, len(clauses) - 1)], v.action
            )
            rationales.append({"node": v.node, "step": v.step, "heading": v.heading, "action": v.action.name, "text": text})
    return {
        "route_id": rid,
        "world_id": g.world_id,
        "split": split_of(rid),
        "path": path,
        "start_heading": h0,
        "actions": [a.name for a in actions],
        "instruction": instr,
        "summary": gen_summary(g, path, h0),
        "captions": captions,
        "rationales": rationales,
    }


def _distinct_routes(worlds: Sequence[NavGraph], count: int, seed: int, params: RouteParams, keep, tag: str):
    seen: set[str] = set()
    out = []
    attempts = 0
    limit = 50 * count + 1000
    while len(out) < count:
        if attempts >= limit:
            raise SynthError(f"only {len(out)} distinct routes found, {count} requested")
        g = worlds[attempts % len(worlds)]
        route = sample_route(g, seed=derive_seed(tag, seed, attempts), params=params)
        attempts += 1
        rid = route_id(g.world_id, route)
        if rid in seen or not keep(rid):
            continue
        seen.add(rid)
        out.append((g, route))
    return out


def build_phase1_dataset(worlds: Sequence[NavGraph], count: int, seed: int, key_fraction: float = 0.7) -> list[dict]:
    """Caption records, drawn mostly at key locations."""
    if count < 1:
        raise SynthError("count must be >= 1")
    rng = rng_for("phase1", seed)
    records = []
    for i in range(count):
        g = worlds[int(rng.integers(len(worlds)))]
        keys = [n for n in sorted(g.nodes) if is_key_location(g, n)]
        pool = keys if keys and rng.random() < key_fraction else sorted(g.nodes)
        node = pool[int(rng.integers(len(pool)))]
        hs = sorted({h for h in g.out[node]} | {(h + 180) % 360 for h in g.out[node]})
        heading = hs[int(rng.integers(len(hs)))]
        rec = gen_caption(g, node, heading, style_seed=derive_seed("p1-style", seed, i))
        records.append({**asdict(rec), "record_id": f"p1-{i}"})
    return records


def build_phase2_dataset(
    worlds: Sequence[NavGraph], count: int, seed: int, params: RouteParams | None = None
) -> list[dict]:
    """Routes with simple (landmark-free) instructions and summaries; train split only."""
    if count < 1:
        raise SynthError("count must be >= 1")
    params = params or RouteParams()
    pairs = _distinct_routes(worlds, count, seed, params, lambda rid: split_of(rid) == "train", "phase2")
    return [_route_record(g, r, seed, 0.0, False, simple=True) for g, r in pairs]


def build_nav_dataset(
    worlds: Sequence[NavGraph],
    count: int,
    seed: int,
    params: RouteParams | None = None,
    landmark_fraction: float = 0.7,
    with_rationales: bool = True,
) -> list[dict]:
    """Navigation routes split 70/15/15 by route hash; rationales validated and filtered."""
    if count < 1:
        raise SynthError("count must be >= 1")
    params = params or RouteParams()
    pairs = _distinct_routes(worlds, count, seed, params, lambda rid: True, "nav")
    by_id = {g.world_id: g for g in worlds}
    records = []
    for g, r in pairs:
        rec = _route_record(g, r, seed, landmark_fraction, with_rationales, simple=False)
        if rec["rationales"] is not None:
            world = by_id[rec["world_id"]]
            if not all(validate_rationale(x, world) for x in rec["rationales"]):
                continue
        records.append(rec)
    return records


def dataset_header(kind: str, config: dict, inputs_hash: str) -> dict:
    return {"format": DATASET_FORMAT, "version": DATASET_VERSION, "kind": kind, "config": config, "inputs": inputs_hash}


def dumps_jsonl(header: dict, records: Sequence[dict]) -> str:
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    lines += [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in records]
    return "\n".join(lines) + "\n"


def write_jsonl(path, header: dict, records: Sequence[dict]) -> str:
    text = dumps_jsonl(header, records)
    Path(path).write_text(text)
    return content_hash(text.encode())


def read_jsonl(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise SynthError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT:
        raise SynthError(f"{path}: not a dataset file")
    if header.get("version") != DATASET_VERSION:
        raise SynthError(f"{path}: dataset version {header.get('version')} != {DATASET_VERSION}")
    return header, [json.loads(x) for x in lines[1:] if x]


def replay_ok(g: NavGraph, record: dict) -> bool:
    actions = [Action[a] for a in record["actions"]]
    walked, _, stopped = replay(g, AgentState(record["path"][0], record["start_heading"]), actions)
    return stopped and walked == list(record["path"])
