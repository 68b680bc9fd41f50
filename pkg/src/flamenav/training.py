"""Three-phase tuning: captioning, summary + imitation, end-to-end navigation.

Records are turned into token streams plus per-observation features once,
then batched.  Every loss is a mean over the supervised token positions of
the batch; the target for position ``i`` is token ``i + 1``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .model import FlameModel, ModelConfig, Vocab, caption_stream, collate, forward_batch, lm_param_names, route_stream
from .model.vocab import Seg, TokenStream
from .seeding import derive_seed, rng_for
from .world import Action, AgentState, NavGraph, observe_feature, transition

log = logging.getLogger(__name__)

PHASES = ("p1", "p2", "nav")
PHASE_NUMBER = {"p1": 1, "p2": 2, "nav": 3}


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 8
    epochs: int = 20
    clip_norm: float = 1.0
    seed: int = 0
    warmup_steps: int = 0
    decay: bool = False  # linear decay to zero over the phase after warmup
    freeze_lm: bool = False
    with_rationales: bool = False  # nav phase only
    dev_fraction: float = 0.05  # hash holdout for p1/p2 dev loss
    max_dev: int = 200

    def __post_init__(self):
        if not self.lr > 0:
            raise TrainingError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise TrainingError("batch_size must be >= 1 and epochs >= 0")

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for optimizer step ``step`` (0-based) of ``total``."""
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.decay and total > self.warmup_steps:
            return self.lr * max(0.0, 1.0 - (step - self.warmup_steps) / (total - self.warmup_steps))
        return self.lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# ------------------------------------------------------------------ encoding


@dataclass
class Example:
    stream: TokenStream
    features: np.ndarray  # (n_obs, D)
    key: str


def route_states(g: NavGraph, record: dict) -> list[AgentState]:
    """State in which each ground-truth action is taken."""
    s = AgentState(record["path"][0], record["start_heading"])
    states = []
    for name in record["actions"]:
        states.append(s)
        s = transition(g, s, Action[name]).state
    return states


def encode_caption(vocab: Vocab, record: dict, g: NavGraph) -> Example:
    if "caption" not in record or "actions" in record:
        raise TrainingError("phase p1 expects caption records")
    stream = caption_stream(vocab, record["prompt"], record["caption"])
    feat = observe_feature(g, AgentState(record["node"], record["heading"]))[None, :]
    return Example(stream, feat, record.get("record_id", f"{record['world_id']}:{record['node']}:{record['heading']}"))


def rationale_map(record: dict) -> dict[int, str]:
    return {int(r["step"]): r["text"] for r in (record.get("rationales") or [])}


def encode_route(vocab: Vocab, record: dict, g: NavGraph, summary: bool = False, rationales: bool = False) -> Example:
    if "actions" not in record:
        raise TrainingError("expected route records with actions")
    if summary and not record.get("summary"):
        raise TrainingError(f"record {record.get('route_id')} has no summary")
    if rationales and record.get("rationales") is None:
        raise TrainingError(f"record {record.get('route_id')} has no rationales")
    actions = [Action[a] for a in record["actions"]]
    stream = route_stream(
        vocab,
        record["instruction"],
        actions,
        record["summary"] if summary else None,
        rationale_map(record) if rationales else None,
    )
    feats = np.stack([observe_feature(g, s) for s in route_states(g, record)])
    return Example(stream, feats, record["route_id"])


def encode_records(phase: str, vocab: Vocab, records: Sequence[dict], worlds: dict[str, NavGraph], with_rationales: bool = False) -> list[Example]:
    out = []
    for r in records:
        g = worlds.get(r["world_id"])
        if g is None:
            raise TrainingError(f"record references unknown world {r['world_id']!r}")
        if phase == "p1":
            if "actions" in r or "caption" not in r:
                raise TrainingError("phase p1 expects caption records")
            if not r["caption"].strip():
                log.warning("skipping caption record %s with empty caption", r.get("record_id"))
                continue
            out.append(encode_caption(vocab, r, g))
        elif phase == "p2":
            out.append(encode_route(vocab, r, g, summary=True))
        elif phase == "nav":
            out.append(encode_route(vocab, r, g, rationales=with_rationales))
        else:
            raise TrainingError(f"unknown phase {phase!r}")
    return out


# ------------------------------------------------------------------- masking


def target_masks(batch, vocab: Vocab) -> dict[str, np.ndarray]:
    """Boolean ``(B, L)`` masks over predicting positions, one per segment kind.

    Position ``i`` is supervised when token ``i + 1`` belongs to the segment.
    Segment-opening markers (``<sum>``, ``<rat>``) are not predicted: the
    rollout inserts them itself.
    """
    tokens, segs = batch.tokens, batch.segments
    B, L = tokens.shape
    nxt_seg = np.full((B, L), -1)
    nxt_seg[:, :-1] = segs[:, 1:]
    nxt_tok = np.full((B, L), -1)
    nxt_tok[:, :-1] = tokens[:, 1:]
    return {
        "caption": nxt_seg == Seg.CAPTION,
        "action": nxt_seg == Seg.ACTION,
        "summary": (nxt_seg == Seg.SUMMARY) & (nxt_tok != vocab.sum),
        "rationale": (nxt_seg == Seg.RATIONALE) & (nxt_tok != vocab.rat),
        "targets": np.where(nxt_tok < 0, 0, nxt_tok),
    }


def _masked_ce(logits: nx.Tensor, targets: np.ndarray, mask: np.ndarray) -> nx.Tensor:
    B, L, V = logits.shape
    return nx.cross_entropy(logits.reshape(B * L, V), targets.reshape(-1), mask.reshape(-1).astype(logits.dtype))


def _batch(model: FlameModel, examples: Sequence[Example]):
    return collate([e.stream for e in examples], [e.features for e in examples], model.vocab.pad, model.cfg.feature_dim)


def loss_phase1(model: FlameModel, examples: Sequence[Example]) -> nx.Tensor:
    batch = _batch(model, examples)
    logits = forward_batch(model.params, model.cfg, batch)
    m = target_masks(batch, model.vocab)
    return _masked_ce(logits, m["targets"], m["caption"])


def loss_phase2(model: FlameModel, examples: Sequence[Example]) -> tuple[nx.Tensor, nx.Tensor, nx.Tensor]:
    """Returns ``(total, L_act, L_sum)`` with ``total = L_act + L_sum``."""
    batch = _batch(model, examples)
    m = target_masks(batch, model.vocab)
    if not m["summary"].any():
        raise TrainingError("phase p2 batch carries no summary tokens")
    logits = forward_batch(model.params, model.cfg, batch)
    l_act = _masked_ce(logits, m["targets"], m["action"])
    l_sum = _masked_ce(logits, m["targets"], m["summary"])
    return nx.add(l_act, l_sum), l_act, l_sum


def loss_nav(model: FlameModel, examples: Sequence[Example], with_rationales: bool = False) -> nx.Tensor:
    """Action cross-entropy, plus rationale tokens (weight 1) when enabled.

    Both kinds of token share one mean.
    """
    batch = _batch(model, examples)
    m = target_masks(batch, model.vocab)
    logits = forward_batch(model.params, model.cfg, batch)
    mask = m["action"] | m["rationale"] if with_rationales else m["action"]
    return _masked_ce(logits, m["targets"], mask)


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def adam_step(params: dict[str, nx.Tensor], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig, lr: float | None = None) -> float:
    """Clip to ``cfg.clip_norm`` by global norm, then one bias-corrected Adam update.

    Returns the pre-clip global norm.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {k!r}")
    norm = global_norm(grads)
    scale = cfg.clip_norm / norm if cfg.clip_norm and norm > cfg.clip_norm else 1.0
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k in sorted(grads):
        p = params[k]
        g = grads[k].astype(np.float64) * scale
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m.get(k)
        v = state.v.get(k)
        m = b1 * (m if m is not None else 0.0) + (1 - b1) * g
        v = b2 * (v if v is not None else 0.0) + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        upd = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (p.data - upd).astype(p.dtype)
    return norm


# ------------------------------------------------------------------- phases


@dataclass
class PhaseResult:
    model: FlameModel
    curve: list[dict]
    history: list[str]
    seconds: float


def _loss_fn(phase: str, cfg: TrainConfig) -> Callable:
    if phase == "p1":
        return lambda model, ex: {"loss": loss_phase1(model, ex)}
    if phase == "p2":
        def f(model, ex):
            total, a, s = loss_phase2(model, ex)
            return {"loss": total, "act": a, "sum": s}
        return f
    return lambda model, ex: {"loss": loss_nav(model, ex, cfg.with_rationales)}


def check_order(phase: str, history: Sequence[str], ablation: bool) -> None:
    if phase not in PHASES:
        raise TrainingError(f"unknown phase {phase!r}; expected one of {PHASES}")
    if ablation:
        return
    need = PHASES[: PHASES.index(phase)]
    if list(history) != list(need):
        raise TrainingError(
            f"phase {phase} requires prior phases {list(need)}, checkpoint has {list(history)} "
            "(use ablation mode to skip phases)"
        )


def holdout(key: str, seed: int, fraction: float) -> bool:
    return (derive_seed("dev-holdout", seed, key) % 10_000) < fraction * 10_000


def _batches(n: int, size: int, rng: np.random.Generator, lengths: np.ndarray) -> list[np.ndarray]:
    """Shuffled batches of similar length: shuffle, sort within chunks, shuffle batches."""
    order = rng.permutation(n)
    chunk = size * 16
    out = []
    for i in range(0, n, chunk):
        part = order[i : i + chunk]
        part = part[np.argsort(lengths[part], kind="stable")]
        out.extend(part[j : j + size] for j in range(0, len(part), size))
    return [out[i] for i in rng.permutation(len(out))]


def evaluate_loss(model: FlameModel, phase: str, examples: Sequence[Example], cfg: TrainConfig, batch_size: int = 32) -> dict[str, float]:
    if not examples:
        return {}
    fn = _loss_fn(phase, cfg)
    sums: dict[str, float] = {}
    for i in range(0, len(examples), batch_size):
        part = examples[i : i + batch_size]
        for k, v in fn(model, part).items():
            sums[k] = sums.get(k, 0.0) + float(v.item()) * len(part)
    return {k: v / len(examples) for k, v in sums.items()}


def run_phase(
    phase: str,
    model: FlameModel,
    train_examples: Sequence[Example],
    cfg: TrainConfig,
    dev_examples: Sequence[Example] | None = None,
    history: Sequence[str] = (),
    ablation: bool = False,
    progress: Callable[[dict], None] | None = None,
) -> PhaseResult:
    """Train ``model`` in place for ``cfg.epochs`` epochs of ``phase``."""
    check_order(phase, history, ablation)
    if not train_examples:
        raise TrainingError("empty training set")
    if dev_examples is None:
        dev_examples = [e for e in train_examples if holdout(e.key, cfg.seed, cfg.dev_fraction)]
        train_examples = [e for e in train_examples if not holdout(e.key, cfg.seed, cfg.dev_fraction)]
    dev_examples = list(dev_examples)[: cfg.max_dev]
    fn = _loss_fn(phase, cfg)
    frozen = set(lm_param_names(model.cfg)) if cfg.freeze_lm else set()
    trainable = {k: p for k, p in model.params.items() if k not in frozen}
    state = AdamState()
    lengths = np.array([len(e.stream) for e in train_examples])
    curve = [{"phase": phase, "epoch": 0, "step": 0, "dev": evaluate_loss(model, phase, dev_examples, cfg)}]
    total_steps = cfg.epochs * len(_batches(len(train_examples), cfg.batch_size, np.random.default_rng(0), lengths))
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        rng = rng_for("train-batches", phase, cfg.seed, epoch)
        sums: dict[str, float] = {}
        count = 0
        for idx in _batches(len(train_examples), cfg.batch_size, rng, lengths):
            part = [train_examples[i] for i in idx]
            for p in trainable.values():
                p.grad = None
            with nx.Tape() as tape:
                losses = fn(model, part)
            tape.backward(losses["loss"])
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in trainable.items()}
            adam_step(trainable, grads, state, cfg, cfg.lr_at(state.step, total_steps))
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + float(v.item()) * len(part)
            count += len(part)
        row = {
            "phase": phase,
            "epoch": epoch,
            "step": state.step,
            "train": {k: v / count for k, v in sums.items()},
            "dev": evaluate_loss(model, phase, dev_examples, cfg),
        }
        curve.append(row)
        if progress:
            progress(row)
        log.info("%s epoch %d train %s dev %s", phase, epoch, row["train"], row["dev"])
    for p in model.params.values():
        p.grad = None
    return PhaseResult(model, curve, list(history) + [phase], time.perf_counter() - t0)


def curve_json(curve: Sequence[dict]) -> str:
    return json.dumps(list(curve), sort_keys=True, indent=1)


def new_model(vocab: Vocab, cfg: ModelConfig | None = None, seed: int = 0) -> FlameModel:
    cfg = (cfg or ModelConfig()).replace(vocab_size=len(vocab))
    return FlameModel(cfg, vocab, seed=derive_seed("init", seed) % (2**32))

