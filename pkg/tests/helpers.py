"""Shared fixtures and independent reference implementations for the tests."""

from __future__ import annotations

from collections import Counter
from functools import lru_cache

import numpy as np

from flamenav import numerics as nx
from flamenav.model import ModelConfig, Seg, Vocab, forward, init_params, prompt_stream
from flamenav.metrics import EvalEpisode, KeyStep, match_keys
from flamenav.numerics import Tensor
from flamenav.world import Action, observe_feature, transition


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, True, np.float64)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return nx.sum_(nx.mul(out, Tensor(w)))


def op_cases(rng):
    """``name -> (inputs, f(inputs) -> scalar)`` for every differentiable op."""
    cases = {}

    def case(name, inputs, fn, out_shape=None):
        w = None

        def f():
            nonlocal w
            out = fn(inputs)
            if out.ndim == 0:
                return out
            if w is None:
                w = np.random.default_rng(7).standard_normal(out.shape)
            return _weighted(out, w)

        cases[name] = (inputs, f)

    case("add", {"a": leaf(rng, 2, 3, 4), "b": leaf(rng, 4)}, lambda p: nx.add(p["a"], p["b"]))
    case("sub", {"a": leaf(rng, 3, 4), "b": leaf(rng, 3, 4)}, lambda p: nx.sub(p["a"], p["b"]))
    case("mul", {"a": leaf(rng, 2, 3, 4), "b": leaf(rng, 3, 4)}, lambda p: nx.mul(p["a"], p["b"]))
    case("mul_scalar", {"a": leaf(rng, 2, 3), "g": leaf(rng)}, lambda p: nx.mul(p["a"], nx.tanh(p["g"])))
    case("scale", {"a": leaf(rng, 5)}, lambda p: nx.scale(p["a"], -1.7))
    case("tanh", {"a": leaf(rng, 6)}, lambda p: nx.tanh(p["a"]))
    case("exp", {"a": leaf(rng, 6, scale=0.5)}, lambda p: nx.exp(p["a"]))
    case("gelu", {"a": leaf(rng, 8, scale=2.0)}, lambda p: nx.gelu(p["a"]))
    case("sum", {"a": leaf(rng, 3, 4)}, lambda p: nx.sum_(nx.mul(p["a"], p["a"])))
    case("mean", {"a": leaf(rng, 3, 4)}, lambda p: nx.mean(nx.mul(p["a"], p["a"])))
    case("reshape", {"a": leaf(rng, 3, 4)}, lambda p: p["a"].reshape(2, 6))
    case("transpose", {"a": leaf(rng, 2, 3, 4)}, lambda p: p["a"].transpose(2, 0, 1))
    case("slice", {"a": leaf(rng, 4, 5)}, lambda p: p["a"][1:3, ::2])
    case("concat", {"a": leaf(rng, 2, 3), "b": leaf(rng, 2, 2)}, lambda p: nx.concat([p["a"], p["b"]], axis=1))
    idx = np.array([[0, 2, 2], [1, 0, 3]])
    case("embedding", {"t": leaf(rng, 4, 3)}, lambda p: nx.embedding(p["t"], idx))
    ends = np.array([[0, 2, 5], [3, 3, 1]])
    case("window_gather", {"x": leaf(rng, 2, 5, 3)}, lambda p: nx.window_gather(p["x"], ends, 3))
    case("matmul", {"a": leaf(rng, 2, 3, 4), "b": leaf(rng, 4, 5)}, lambda p: nx.matmul(p["a"], p["b"]))
    case("matmul_batched", {"a": leaf(rng, 2, 3, 4), "b": leaf(rng, 2, 4, 2)}, lambda p: nx.matmul(p["a"], p["b"]))
    case("einsum", {"a": leaf(rng, 2, 3, 4), "b": leaf(rng, 2, 5, 4)}, lambda p: nx.einsum("bqd,bkd->bqk", p["a"], p["b"]))
    mask = np.where(np.random.default_rng(1).random((3, 5)) < 0.4, -np.inf, 0.0)
    mask[:, 0] = 0.0
    case("softmax", {"a": leaf(rng, 3, 5)}, lambda p: nx.softmax(p["a"], mask))
    case("log_softmax", {"a": leaf(rng, 3, 5)}, lambda p: nx.log_softmax(p["a"]))
    case(
        "layer_norm",
        {"x": leaf(rng, 2, 3, 6), "g": leaf(rng, 6), "b": leaf(rng, 6)},
        lambda p: nx.layer_norm(p["x"], p["g"], p["b"]),
    )
    tg = np.array([0, 3, 2, 1])
    wts = np.array([1.0, 0.0, 2.0, 1.0])
    case("cross_entropy", {"z": leaf(rng, 4, 5)}, lambda p: nx.cross_entropy(p["z"], tg, wts))
    case("linear", {"x": leaf(rng, 3, 4), "w": leaf(rng, 4, 2), "b": leaf(rng, 2)}, lambda p: nx.linear(p["x"], p["w"], p["b"]))
    return cases


# ------------------------------------------------------------ tiny models


def tiny_cfg(**kw) -> ModelConfig:
    base = dict(
        d_model=8, n_heads=2, n_lm_blocks=2, n_xattn_blocks=1, n_visual_tokens=2, stride=2,
        feature_dim=6, resampler_inputs=2, ff_mult=2, max_seq_len=64, dtype="float64",
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_params(cfg: ModelConfig, seed: int, open_gates: bool = True):
    P = init_params(cfg, seed)
    if open_gates:
        rng = np.random.default_rng(seed + 1)
        for k, p in P.items():
            if k.endswith("gate_attn") or k.endswith("gate_ff"):
                p.data = np.asarray(rng.uniform(0.3, 1.0))
    return P


# ------------------------------------------------- dense attention oracle


def _ln_np(x, g, b, eps=nx.LN_EPS):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu_np(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def dense_xattn(P, prefix, cfg, x, bank, obs_index):
    """Cross-attention over the full bank with -inf outside each query's
    window, looped query by query in plain numpy."""
    P = {k: v.data for k, v in P.items()}
    B, L, d = x.shape
    H, Nr = cfg.n_heads, cfg.n_visual_tokens
    dh = d // H
    R = bank.shape[1]
    out = np.array(x, dtype=float)
    ga, gf = np.tanh(P[f"{prefix}.gate_attn"]), np.tanh(P[f"{prefix}.gate_ff"])
    for b in range(B):
        K = bank[b] @ P[f"{prefix}.wk"]
        V = bank[b] @ P[f"{prefix}.wv"]
        for l in range(L):
            t = obs_index[b, l]
            if t == 0:
                continue
            lo = 0 if cfg.stride is None else max(0, (t - cfg.stride) * Nr)
            hi = t * Nr
            mask = np.full(R, -np.inf)
            mask[lo:hi] = 0.0
            q = _ln_np(x[b, l], P[f"{prefix}.ln_q.g"], P[f"{prefix}.ln_q.b"]) @ P[f"{prefix}.wq"]
            heads = []
            for h in range(H):
                sl = slice(h * dh, (h + 1) * dh)
                s = K[:, sl] @ q[sl] / np.sqrt(dh) + mask
                a = np.exp(s - s.max())
                a /= a.sum()
                heads.append(a @ V[:, sl])
            att = np.concatenate(heads) @ P[f"{prefix}.wo"]
            y = x[b, l] + ga * att
            hdn = _gelu_np(_ln_np(y, P[f"{prefix}.ff.ln.g"], P[f"{prefix}.ff.ln.b"]) @ P[f"{prefix}.ff.w1"] + P[f"{prefix}.ff.b1"])
            out[b, l] = y + gf * (hdn @ P[f"{prefix}.ff.w2"] + P[f"{prefix}.ff.b2"])
    return out


def vocab() -> Vocab:
    return Vocab.from_tags()


# ------------------------------------------- rationale metric recomputation


def _lcs_len(a, b):
    @lru_cache(maxsize=None)
    def f(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + f(i + 1, j + 1)
        return max(f(i + 1, j), f(i, j + 1))

    return f(0, 0)


def recompute_rc_ra(episodes, labels):
    """Independent aggregation from per-visit labels.  ``labels[e][i]`` gives
    ``(rc_raw, ra_raw, correct, matched)`` for predicted visit ``i``."""
    rc_num = m = ra_num = k = 0
    for ep, lab in zip(episodes, labels):
        assert sum(x[3] for x in lab) == _lcs_len(tuple(v.node for v in ep.pred_keys), tuple(v.node for v in ep.gt_keys))
        for rc_raw, ra_raw, correct, matched in lab:
            if matched:
                if rc_raw and ra_raw and not correct:
                    rc_raw = 0
                elif rc_raw and not ra_raw and correct:
                    ra_raw = 1
                rc_num += rc_raw
                m += 1
            ra_num += ra_raw
            k += 1
    return (100.0 * rc_num / m if m else None), (100.0 * ra_num / k if k else None)


def synthetic_episode(rng, i):
    """Random key visits over nodes 0..5 with rationales drawn from a small pool."""
    decisions = {Action.LEFT: "turn left", Action.RIGHT: "turn right", Action.FORWARD: "go forward"}
    clauses = ["turn left at the bank", "turn right", "go forward two blocks and turn left"]

    def rat(clause, a):
        return f"i see the bank here . the instruction says {clause} . so i will {decisions[a]} ."

    gt_nodes = list(rng.choice(6, size=rng.integers(0, 5), replace=False))
    gt = []
    for j, n in enumerate(gt_nodes):
        a = Action(int(rng.choice([0, 1, 2])))
        gt.append(KeyStep(int(n), j, a, rat(clauses[j % 3], a), a, rat(clauses[j % 3], a)))
    pred_nodes = list(rng.choice(6, size=rng.integers(0, 5), replace=False))
    pred = []
    labels = []
    pairs = dict(match_keys([int(n) for n in pred_nodes], [k.node for k in gt]))
    for j, n in enumerate(pred_nodes):
        a = Action(int(rng.choice([0, 1, 2])))
        said = Action(int(rng.choice([0, 1, 2])))
        clause = clauses[int(rng.integers(3))]
        pred.append(KeyStep(int(n), j, a, rat(clause, said)))
        if j in pairs:
            ref = gt[pairs[j]]
            labels.append((int(clause == clauses[pairs[j] % 3]), int(said == a), a == ref.gt_action, True))
        else:
            labels.append((0, int(said == a), False, False))
    ep = EvalEpisode(f"r{i}", "turn left at the bank .", [0], [Action.STOP], [0], [Action.STOP], pred, gt)
    return ep, labels


# ------------------------------------------------------- greedy decoding


def greedy_oracle(model, g, instruction, start, max_steps):
    """Step-by-step argmax decoding written directly against ``forward``."""
    v = model.vocab
    stream = prompt_stream(v, instruction)
    feats, actions, s = [], [], start
    for _ in range(max_steps):
        feats.append(observe_feature(g, s))
        stream.append(v.obs, Seg.OBS_MARK)
        z = forward(model.params, model.cfg, stream, np.stack(feats)).data[-1]
        a = Action(int(np.argmax(z[v.action_ids])))
        stream.append(v.action_id(a), Seg.ACTION)
        actions.append(a)
        res = transition(g, s, a)
        if res.stopped:
            break
        s = res.state
    return actions


def vote_oracle(samples):
    """Modal action by explicit counting; ties by mean action log-prob, then lowest action value."""
    counts = Counter(int(s.action) for s in samples)
    top = max(counts.values())
    tied = sorted(a for a, c in counts.items() if c == top)
    means = {a: sum(s.action_logprob for s in samples if int(s.action) == a) / counts[a] for a in tied}
    best = max(means.values())
    return min(a for a in tied if means[a] == best)
