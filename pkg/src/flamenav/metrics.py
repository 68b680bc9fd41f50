"""Navigation and rationale metrics.

TC, SPD and nDTW score where the agent went; RC and RA score what it said at
key locations, using deterministic rule-based judges over the rationale
grammar.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .synth import find_landmarks, parse_rationale
from .world import Action, DEFAULT_TAGS, NavGraph, shortest_path_dist

SUCCESS_RADIUS = 1
NDTW_THRESHOLD = 1.0


class MetricError(ValueError):
    pass


@dataclass
class KeyStep:
    """One visited key location: what was said and done there."""

    node: int
    step: int
    action: Action
    rationale: str | None = None
    gt_action: Action | None = None
    gt_rationale: str | None = None


@dataclass
class EvalEpisode:
    route_id: str
    instruction: str
    gt_path: list[int]
    gt_actions: list[Action]
    pred_path: list[int]
    pred_actions: list[Action]
    pred_keys: list[KeyStep] = field(default_factory=list)
    gt_keys: list[KeyStep] = field(default_factory=list)
    timeout: bool = False
    blocked_steps: int = 0
    world_id: str = ""

    def __post_init__(self):
        if not self.gt_path or not self.pred_path:
            raise MetricError("episode paths must be non-empty")
        if self.gt_path[0] != self.pred_path[0]:
            raise MetricError("predicted and reference paths must start at the same node")

    @property
    def stop_node(self) -> int:
        return self.pred_path[-1]

    @property
    def goal(self) -> int:
        return self.gt_path[-1]


# ---------------------------------------------------------------- navigation


def spd(g: NavGraph, ep: EvalEpisode) -> int:
    return shortest_path_dist(g, ep.stop_node, ep.goal)


def tc(g: NavGraph, ep: EvalEpisode) -> int:
    return int(spd(g, ep) <= SUCCESS_RADIUS)


def dtw(g: NavGraph, pred: Sequence[int], ref: Sequence[int]) -> float:
    if not pred or not ref:
        raise MetricError("dtw needs non-empty paths")
    n, m = len(pred), len(ref)
    cost = np.array([[shortest_path_dist(g, p, r) for r in ref] for p in pred], dtype=float)
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = cost[i - 1, j - 1] + min(D[i - 1, j], D[i, j - 1], D[i - 1, j - 1])
    return float(D[n, m])


def ndtw(g: NavGraph, pred: Sequence[int], ref: Sequence[int], threshold: float = NDTW_THRESHOLD) -> float:
    """``exp(-DTW / (|ref| * threshold))`` with graph distance as point cost."""
    return math.exp(-dtw(g, pred, ref) / (len(ref) * threshold))


# ------------------------------------------------------------------- judges


@dataclass(frozen=True)
class Judgement:
    value: int
    parsed: bool


def judge_rc(instruction: str, gt_rationale: str, pred_rationale: str, tag_vocab: Iterable[str] = DEFAULT_TAGS) -> Judgement:
    """Coherent iff every landmark the prediction mentions is grounded in the
    reference rationale or the instruction, and it quotes the same instruction
    clause as the reference."""
    tag_vocab = list(tag_vocab)
    pred = parse_rationale(pred_rationale, tag_vocab)
    if pred is None:
        return Judgement(0, False)
    gt = parse_rationale(gt_rationale, tag_vocab)
    if gt is None:
        raise MetricError(f"reference rationale does not parse: {gt_rationale!r}")
    allowed = set(gt.landmarks_all) | set(find_landmarks(instruction, tag_vocab))
    grounded = set(pred.landmarks_all) <= allowed
    return Judgement(int(grounded and pred.clause == gt.clause), True)


def judge_ra(pred_rationale: str, action: Action, tag_vocab: Iterable[str] = DEFAULT_TAGS) -> Judgement:
    """Aligned iff the rationale's decision names the executed action."""
    pred = parse_rationale(pred_rationale, tag_vocab)
    if pred is None or pred.decision is None:
        return Judgement(0, False)
    return Judgement(int(pred.decision == Action(action)), True)


def calibrate(rc_raw: int, ra_raw: int, action_correct: bool) -> tuple[int, int]:
    """Consistency rules applied before aggregation.

    A coherent, aligned rationale behind a wrong action is not coherent; a
    coherent rationale behind a correct action counts as aligned.
    """
    rc_v, ra_v = int(rc_raw), int(ra_raw)
    if not action_correct and ra_v == 1 and rc_v == 1:
        rc_v = 0
    elif action_correct and rc_v == 1 and ra_v == 0:
        ra_v = 1
    return rc_v, ra_v


def match_keys(pred: Sequence[int], ref: Sequence[int]) -> list[tuple[int, int]]:
    """Order-preserving matching of key-location visits (longest common subsequence).

    Returns index pairs ``(i_pred, j_ref)``; ties resolve to the earliest pairs.
    """
    n, m = len(pred), len(ref)
    L = np.zeros((n + 1, m + 1), dtype=int)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            L[i, j] = L[i + 1, j + 1] + 1 if pred[i] == ref[j] else max(L[i + 1, j], L[i, j + 1])
    pairs = []
    i = j = 0
    while i < n and j < m:
        if pred[i] == ref[j]:
            pairs.append((i, j))
            i += 1
            j += 1
        elif L[i + 1, j] >= L[i, j + 1]:
            i += 1
        else:
            j += 1
    return pairs


@dataclass
class RationaleScore:
    rc_sum: int = 0
    m: int = 0
    ra_sum: int = 0
    k: int = 0
    unparseable: int = 0


JudgeRC = Callable[[str, str, str], Judgement]
JudgeRA = Callable[[str, Action], Judgement]


def score_rationales(ep: EvalEpisode, tag_vocab: Iterable[str] = DEFAULT_TAGS, rc_judge: JudgeRC | None = None, ra_judge: JudgeRA | None = None) -> RationaleScore:
    """Per-episode numerators and denominators of RC (over matched key visits)
    and RA (over every visited key location that carries a rationale)."""
    tag_vocab = list(tag_vocab)
    rc_judge = rc_judge or (lambda i, g, p: judge_rc(i, g, p, tag_vocab))
    ra_judge = ra_judge or (lambda p, a: judge_ra(p, a, tag_vocab))
    out = RationaleScore()
    visits = [k for k in ep.pred_keys if k.rationale is not None]
    pairs = dict(match_keys([k.node for k in visits], [k.node for k in ep.gt_keys]))
    for i, kv in enumerate(visits):
        j_ra = ra_judge(kv.rationale, kv.action)
        ra_v = j_ra.value
        flagged = not j_ra.parsed
        gt = ep.gt_keys[pairs[i]] if i in pairs else None
        if gt is not None and gt.gt_rationale is not None:
            j_rc = rc_judge(ep.instruction, gt.gt_rationale, kv.rationale)
            flagged = flagged or not j_rc.parsed
            rc_v, ra_v = calibrate(j_rc.value, ra_v, Action(kv.action) == Action(gt.gt_action))
            out.rc_sum += rc_v
            out.m += 1
        out.ra_sum += ra_v
        out.k += 1
        out.unparseable += int(flagged)
    return out


def rc(scores: Sequence[RationaleScore]) -> float | None:
    m = sum(s.m for s in scores)
    return None if m == 0 else 100.0 * sum(s.rc_sum for s in scores) / m


def ra(scores: Sequence[RationaleScore]) -> float | None:
    k = sum(s.k for s in scores)
    return None if k == 0 else 100.0 * sum(s.ra_sum for s in scores) / k


# ------------------------------------------------------------------ reports


@dataclass
class MetricReport:
    split: str
    n: int
    tc: float
    spd: float
    ndtw: float
    rc: float | None
    ra: float | None
    unparseable_rationales: int
    per_episode: list[dict]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def report(worlds: dict[str, NavGraph] | NavGraph, episodes: Sequence[EvalEpisode], split: str, tag_vocab: Iterable[str] = DEFAULT_TAGS, config: dict | None = None) -> MetricReport:
    """Aggregate episodes; ``worlds`` maps world ids to graphs, or is one graph for all.

    Timed-out episodes score TC 0 but keep their SPD and nDTW.
    """
    if not episodes:
        raise MetricError("cannot report on an empty split")
    rows = []
    scores = []
    for ep in episodes:
        g = worlds if isinstance(worlds, NavGraph) else worlds[ep.world_id]
        d = spd(g, ep)
        t = int(d <= SUCCESS_RADIUS and not ep.timeout)
        s = score_rationales(ep, tag_vocab)
        scores.append(s)
        rows.append({
            "route_id": ep.route_id,
            "tc": t,
            "spd": d,
            "ndtw": ndtw(g, ep.pred_path, ep.gt_path),
            "steps": len(ep.pred_actions),
            "timeout": ep.timeout,
            "blocked": ep.blocked_steps,
            "rc_num": s.rc_sum, "m": s.m, "ra_num": s.ra_sum, "k": s.k,
        })
    n = len(rows)
    return MetricReport(
        split=split,
        n=n,
        tc=100.0 * sum(r["tc"] for r in rows) / n,
        spd=sum(r["spd"] for r in rows) / n,
        ndtw=100.0 * sum(r["ndtw"] for r in rows) / n,
        rc=rc(scores),
        ra=ra(scores),
        unparseable_rationales=sum(s.unparseable for s in scores),
        per_episode=rows,
        config=config or {},
    )
