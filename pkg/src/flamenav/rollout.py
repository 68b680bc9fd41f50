"""Episode execution: greedy or sampled decoding, rationales at key locations,
and self-consistency voting over several rationale-to-action samples."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .metrics import EvalEpisode, KeyStep, MetricReport, report
from .model import FlameModel
from .model.cache import DecodeState, state_for
from .model.vocab import Seg, TokenStream, prompt_stream
from .seeding import rng_for
from .synth import key_visits
from .world import Action, AgentState, NavGraph, is_key_location, observe_feature, transition

DEFAULT_MAX_STEPS = 55
RATIONALE_MAX_LEN = 48


class RolloutError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 0.0
    paths: int = 1
    rationale_mode: bool = False
    max_steps: int = DEFAULT_MAX_STEPS
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise RolloutError("temperature must be >= 0")
        if self.paths < 1:
            raise RolloutError("paths must be >= 1")
        if self.paths > 1 and not self.rationale_mode:
            raise RolloutError("voting over several paths requires rationale mode")
        if self.max_steps < 1:
            raise RolloutError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    path: int
    rationale: str | None
    action: Action
    action_logprob: float
    rationale_logprob: float
    rationale_tokens: list[int] = field(default_factory=list)

    @property
    def logprob(self) -> float:
        return self.action_logprob + self.rationale_logprob


@dataclass
class Episode:
    eval: EvalEpisode
    trace: list[dict]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _choose(logp: np.ndarray, temperature: float, rng: np.random.Generator | None) -> int:
    if temperature <= 0:
        return int(np.argmax(logp))
    q = _log_softmax(logp / temperature)
    return int(rng.choice(len(q), p=np.exp(q)))


def path_rngs(seed: int, key: str, step: int, paths: int) -> list[np.random.Generator]:
    return [rng_for("decode", seed, key, step, p) for p in range(paths)]


def tally(samples: Sequence[Sample]) -> Sample:
    """Modal action; ties go to the higher mean action log-probability, then
    to the lower action value.  Returns the winning action's most likely sample."""
    if not samples:
        raise RolloutError("no samples to vote over")
    counts = Counter(s.action for s in samples)
    best = max(counts.values())
    tied = [a for a in counts if counts[a] == best]

    def key(a):
        lps = [s.action_logprob for s in samples if s.action == a]
        return (-float(np.mean(lps)), int(a))

    winner = min(tied, key=key)
    cands = [s for s in samples if s.action == winner]
    return max(cands, key=lambda s: (s.logprob, -s.path))


def sample_pairs(model: FlameModel, stream: TokenStream, feats: np.ndarray, cfg: DecodeConfig, rngs: Sequence[np.random.Generator], state: DecodeState | None = None) -> list[Sample]:
    """Draw one (rationale, action) pair per RNG stream.  ``stream`` must not
    yet contain the ``<rat>`` marker; ``state``, if given, has consumed it."""
    if state is None:
        state = state_for(model.params, model.cfg, stream, feats)
    base = state.fork()
    base.feed([model.vocab.rat], [base.n_obs])
    states = [base.fork() for _ in rngs]
    rats = model.rationales_from_states(states, cfg.temperature, RATIONALE_MAX_LEN, rngs)
    out = []
    for p, (r, st) in enumerate(zip(rats, states)):
        if r.truncated:
            st.feed([model.vocab.end_rat], [st.n_obs])
        zi = st.logits[model.vocab.action_ids]
        lp = _log_softmax(zi)
        a = _choose(zi, cfg.temperature, rngs[p])
        out.append(Sample(p, r.text, Action(a), float(lp[a]), r.logprob, r.tokens))
    return out


def vote_action(model: FlameModel, stream: TokenStream, feats: np.ndarray, cfg: DecodeConfig, rngs: Sequence[np.random.Generator], state: DecodeState | None = None) -> tuple[Sample, list[Sample]]:
    samples = sample_pairs(model, stream, feats, cfg, rngs, state)
    return tally(samples), samples


def _commit_rationale(model: FlameModel, stream: TokenStream, tokens: Sequence[int], state: DecodeState) -> None:
    n = len(stream)
    stream.append(model.vocab.rat, Seg.RATIONALE)
    stream.extend(tokens, Seg.RATIONALE)
    stream.append(model.vocab.end_rat, Seg.RATIONALE)
    state.feed(stream.tokens[n:], stream.obs_index[n:])


def gt_key_steps(g: NavGraph, record: dict) -> list[KeyStep]:
    actions = [Action[a] for a in record["actions"]]
    by_step = {int(r["step"]): r["text"] for r in (record.get("rationales") or [])}
    return [
        KeyStep(v.node, v.step, v.action, by_step.get(v.step), v.action, by_step.get(v.step))
        for v in key_visits(g, record["path"], actions, record["start_heading"])
    ]


def run_episode(
    model: FlameModel,
    g: NavGraph,
    instruction: str,
    start: AgentState,
    cfg: DecodeConfig,
    key: str = "",
) -> tuple[list[int], list[Action], list[KeyStep], list[dict], bool, int]:
    """Observe, optionally reason, act, move; until STOP or ``cfg.max_steps``.

    Returns ``(path, actions, key_steps, trace, timeout, blocked)``.
    """
    if start.node not in g.nodes:
        raise RolloutError(f"start node {start.node} not in world")
    vocab = model.vocab
    stream = prompt_stream(vocab, instruction)
    feats: list[np.ndarray] = []
    s = start
    path = [s.node]
    actions: list[Action] = []
    keys: list[KeyStep] = []
    trace: list[dict] = []
    seen_keys: set[int] = set()
    arrived = True
    blocked = 0
    timeout = False
    max_obs = model.cfg.max_observations
    state = state_for(model.params, model.cfg, stream, None)
    for step in range(cfg.max_steps):
        if len(feats) >= max_obs or len(stream) + RATIONALE_MAX_LEN + 4 > model.cfg.max_seq_len:
            timeout = True
            break
        feats.append(observe_feature(g, s))
        stream.append(vocab.obs, Seg.OBS_MARK)
        F = np.stack(feats)
        state.add_observation(feats[-1])
        state.feed(stream.tokens[-1:], stream.obs_index[-1:])
        rationale = None
        at_key = arrived and is_key_location(g, s.node) and s.node not in seen_keys
        rngs = path_rngs(cfg.seed, key, step, cfg.paths)
        if cfg.rationale_mode and at_key:
            seen_keys.add(s.node)
            chosen, samples = vote_action(model, stream, F, cfg, rngs, state)
            _commit_rationale(model, stream, chosen.rationale_tokens, state)
            a, rationale = chosen.action, chosen.rationale
            lp = state.logits[vocab.action_ids]
            votes = [int(x.action) for x in samples]
        else:
            lp = state.logits[vocab.action_ids]
            a = Action(_choose(lp, cfg.temperature, rngs[0]))
            votes = None
        stream.append(vocab.action_id(a), Seg.ACTION)
        state.feed(stream.tokens[-1:], stream.obs_index[-1:])
        actions.append(a)
        if at_key:
            seen_keys.add(s.node)
            keys.append(KeyStep(s.node, step, a, rationale))
        res = transition(g, s, a)
        trace.append({
            "step": step,
            "node": s.node,
            "heading": s.heading,
            "observation": f"{g.world_id}:{s.node}:{s.heading}",
            "rationale": rationale,
            "action": a.name,
            "blocked": res.blocked,
            "action_logprobs": [round(float(x), 6) for x in _log_softmax(lp)],
            "votes": votes,
        })
        blocked += int(res.blocked)
        if res.stopped:
            break
        arrived = res.state.node != s.node
        s = res.state
        if arrived:
            path.append(s.node)
    else:
        timeout = True
    if timeout:
        actions.append(Action.STOP)
        trace.append({"step": len(actions) - 1, "node": s.node, "heading": s.heading, "action": "STOP", "forced": True})
    return path, actions, keys, trace, timeout, blocked


def episode_for_record(model: FlameModel, g: NavGraph, record: dict, cfg: DecodeConfig) -> Episode:
    start = AgentState(record["path"][0], record["start_heading"])
    path, actions, keys, trace, timeout, blocked = run_episode(model, g, record["instruction"], start, cfg, record["route_id"])
    gt_keys = gt_key_steps(g, record)
    ep = EvalEpisode(
        route_id=record["route_id"],
        instruction=record["instruction"],
        gt_path=list(record["path"]),
        gt_actions=[Action[a] for a in record["actions"]],
        pred_path=path,
        pred_actions=actions,
        pred_keys=keys,
        gt_keys=gt_keys,
        timeout=timeout,
        blocked_steps=blocked,
        world_id=g.world_id,
    )
    return Episode(ep, trace)


def evaluate_split(model: FlameModel, worlds: dict[str, NavGraph], records: Sequence[dict], cfg: DecodeConfig, split: str = "dev", config: dict | None = None) -> MetricReport:
    if not records:
        raise RolloutError("empty split")
    eps = [episode_for_record(model, worlds[r["world_id"]], r, cfg).eval for r in records]
    tags = next(iter(worlds.values())).params.tag_vocab
    return report(worlds, eps, split, tags, config={"decode": cfg.to_dict(), **(config or {})})


# ------------------------------------------------------------ baseline agents


def _walk(g: NavGraph, start: AgentState, choose, max_steps: int):
    s = start
    path, actions = [s.node], []
    blocked = 0
    for step in range(max_steps):
        a = choose(step, s)
        actions.append(a)
        res = transition(g, s, a)
        blocked += int(res.blocked)
        if res.stopped:
            return path, actions, False, blocked
        if res.state.node != s.node:
            path.append(res.state.node)
        s = res.state
    actions.append(Action.STOP)
    return path, actions, True, blocked


def baseline_episode(g: NavGraph, record: dict, agent: str, seed: int = 0, max_steps: int = DEFAULT_MAX_STEPS) -> EvalEpisode:
    """``agent`` is ``"random"`` (uniform over actions) or ``"scripted"`` (replays ground truth)."""
    start = AgentState(record["path"][0], record["start_heading"])
    gt = [Action[a] for a in record["actions"]]
    if agent == "random":
        rng = rng_for("random-agent", seed, record["route_id"])
        choose = lambda step, s: Action(int(rng.integers(len(Action))))
    elif agent == "scripted":
        choose = lambda step, s: gt[step] if step < len(gt) else Action.STOP
    else:
        raise RolloutError(f"unknown baseline agent {agent!r}")
    path, actions, timeout, blocked = _walk(g, start, choose, max_steps)
    return EvalEpisode(
        record["route_id"], record["instruction"], list(record["path"]), gt, path, actions,
        gt_keys=gt_key_steps(g, record), timeout=timeout, blocked_steps=blocked, world_id=g.world_id,
    )


def evaluate_baseline(worlds: dict[str, NavGraph], records: Sequence[dict], agent: str, seed: int = 0, split: str = "dev") -> MetricReport:
    eps = [baseline_episode(worlds[r["world_id"]], r, agent, seed) for r in records]
    return report(worlds, eps, split, config={"agent": agent, "seed": seed})


def trace_lines(trace: Sequence[dict]) -> str:
    return "".join(json.dumps(t, sort_keys=True) + "\n" for t in trace)

