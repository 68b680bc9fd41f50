"""Navigation LM: perceiver resampler, strided gated cross-attention, causal LM.

Parameters live in a flat ``dict[str, Tensor]`` so they can be checkpointed
by name.  All forward functions are pure in ``(params, inputs)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor
from .config import ModelConfig
from .vocab import TokenStream

Params = dict[str, Tensor]


class ModelInputError(ValueError):
    pass


# ---------------------------------------------------------------------- init


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    d, V = cfg.d_model, cfg.vocab_size
    P: Params = {}

    def mat(name, fan_in, fan_out, gain=1.0):
        P[name] = Tensor(rng.standard_normal((fan_in, fan_out)) * gain / np.sqrt(fan_in), True, dt, name)

    def vec(name, n, value=0.0):
        P[name] = Tensor(np.full(n, value), True, dt, name)

    def ln(prefix):
        vec(f"{prefix}.g", d, 1.0)
        vec(f"{prefix}.b", d, 0.0)

    def ffn(prefix):
        ln(f"{prefix}.ln")
        mat(f"{prefix}.w1", d, cfg.ff_mult * d)
        vec(f"{prefix}.b1", cfg.ff_mult * d)
        mat(f"{prefix}.w2", cfg.ff_mult * d, d, gain=0.5)
        vec(f"{prefix}.b2", d)

    P["tok_emb"] = Tensor(rng.standard_normal((V, d)) * 0.1, True, dt, "tok_emb")
    P["pos_emb"] = Tensor(rng.standard_normal((cfg.max_seq_len, d)) * 0.1, True, dt, "pos_emb")

    M = cfg.resampler_inputs
    mat("res.proj_w", cfg.feature_dim, M * d, gain=np.sqrt(cfg.feature_dim / 4.0))
    vec("res.proj_b", M * d)
    ln("res.ln_in")
    P["res.latents"] = Tensor(rng.standard_normal((cfg.n_visual_tokens, d)) * 0.5, True, dt, "res.latents")
    for n in ("wq", "wk", "wv", "wo"):
        mat(f"res.{n}", d, d)
    ffn("res.ff")
    ln("res.ln_out")

    for i in range(cfg.n_xattn_blocks):
        p = f"xattn{i}"
        ln(f"{p}.ln_q")
        for n in ("wq", "wk", "wv", "wo"):
            mat(f"{p}.{n}", d, d)
        P[f"{p}.gate_attn"] = Tensor(np.zeros(()), True, dt, f"{p}.gate_attn")
        ffn(f"{p}.ff")
        P[f"{p}.gate_ff"] = Tensor(np.zeros(()), True, dt, f"{p}.gate_ff")

    for i in range(cfg.n_lm_blocks):
        p = f"lm{i}"
        ln(f"{p}.ln1")
        mat(f"{p}.wqkv", d, 3 * d)
        mat(f"{p}.wo", d, d, gain=0.5)
        ffn(f"{p}.ff")

    ln("ln_f")
    mat("head_w", d, V)
    vec("head_b", V)
    return P


def lm_param_names(cfg: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb", "ln_f.g", "ln_f.b", "head_w", "head_b"]
    for i in range(cfg.n_lm_blocks):
        for n in ("ln1.g", "ln1.b", "wqkv", "wo", "ff.ln.g", "ff.ln.b", "ff.w1", "ff.b1", "ff.w2", "ff.b2"):
            names.append(f"lm{i}.{n}")
    return names


# ------------------------------------------------------------------ patterns


def pattern(t: int, stride: int | None, n_visual: int) -> range:
    """Visual rows visible to a token whose latest observation is ``t``.

    Half-open ``[max(0, (t - l) * N_r), t * N_r)``; empty for t = 0.
    """
    if t < 0:
        raise ValueError("observation index must be >= 0")
    if stride is None:
        return range(0, t * n_visual)
    return range(max(0, (t - stride) * n_visual), t * n_visual)


# -------------------------------------------------------------------- blocks


def _ln(P: Params, prefix: str, x: Tensor) -> Tensor:
    return nx.layer_norm(x, P[f"{prefix}.g"], P[f"{prefix}.b"])


def _ffn(P: Params, prefix: str, x: Tensor) -> Tensor:
    h = nx.gelu(nx.linear(_ln(P, f"{prefix}.ln", x), P[f"{prefix}.w1"], P[f"{prefix}.b1"]))
    return nx.linear(h, P[f"{prefix}.w2"], P[f"{prefix}.b2"])


def resample(P: Params, cfg: ModelConfig, features: Tensor) -> Tensor:
    """``(n, D)`` observation features -> ``(n, N_r, d)`` visual tokens."""
    if features.ndim != 2 or features.shape[1] != cfg.feature_dim:
        raise ModelInputError(f"expected (n, {cfg.feature_dim}) features, got {features.shape}")
    n = features.shape[0]
    d, M = cfg.d_model, cfg.resampler_inputs
    inputs = nx.linear(features, P["res.proj_w"], P["res.proj_b"]).reshape(n, M, d)
    inputs = _ln(P, "res.ln_in", inputs)
    q = nx.matmul(P["res.latents"], P["res.wq"])  # (N_r, d)
    k = nx.matmul(inputs, P["res.wk"])
    v = nx.matmul(inputs, P["res.wv"])
    scores = nx.scale(nx.einsum("rd,nmd->nrm", q, k), 1.0 / np.sqrt(d))
    attn = nx.softmax(scores)
    out = nx.matmul(nx.einsum("nrm,nmd->nrd", attn, v), P["res.wo"])
    out = nx.add(out, P["res.latents"])
    out = nx.add(out, _ffn(P, "res.ff", out))
    return _ln(P, "res.ln_out", out)


def visual_bank(P: Params, cfg: ModelConfig, features: np.ndarray) -> Tensor:
    """``(B, T, D)`` features -> flattened ``(B, T * N_r, d)`` token bank."""
    B, T, D = features.shape
    toks = resample(P, cfg, Tensor(features.reshape(B * T, D).astype(cfg.np_dtype, copy=False)))
    return toks.reshape(B, T * cfg.n_visual_tokens, cfg.d_model)


def _split_heads(x: Tensor, H: int) -> Tensor:
    B, L, d = x.shape
    return x.reshape(B, L, H, d // H)


def strided_gated_xattn(
    P: Params, prefix: str, cfg: ModelConfig, x: Tensor, bank: Tensor, obs_index: np.ndarray, n_obs: int
) -> Tensor:
    """Gated cross-attention where each query sees only its strided window.

    Keys/values are projected once for the whole bank, then a window of the
    ``min(t, l) * N_r`` most recent visual rows is gathered per query.  Queries
    with no preceding observation pass through unchanged.
    """
    B, L, d = x.shape
    H, Nr = cfg.n_heads, cfg.n_visual_tokens
    obs_index = np.asarray(obs_index, dtype=np.int64)
    if obs_index.shape != (B, L):
        raise ModelInputError(f"obs_index shape {obs_index.shape} != {(B, L)}")
    if obs_index.size and obs_index.max() > n_obs:
        raise ModelInputError(f"obs_index {obs_index.max()} exceeds the {n_obs} observations in the bank")
    if bank.shape[1] != n_obs * Nr:
        raise ModelInputError(f"bank has {bank.shape[1]} rows, expected {n_obs * Nr}")
    W = cfg.window(n_obs)
    end = obs_index * Nr
    w = np.arange(W)
    invalid = w[None, None, :] < (W - end)[:, :, None]  # (B, L, W)
    live = obs_index > 0
    invalid &= live[:, :, None]
    mask = np.where(invalid, -np.inf, 0.0).astype(cfg.np_dtype)[:, :, None, :]  # (B, L, 1, W)
    mask = np.broadcast_to(mask, (B, L, H, W))

    dh = d // H
    q = _split_heads(nx.matmul(_ln(P, f"{prefix}.ln_q", x), P[f"{prefix}.wq"]), H)
    k = nx.matmul(bank, P[f"{prefix}.wk"])
    v = nx.matmul(bank, P[f"{prefix}.wv"])
    kw = nx.window_gather(k, end, W).reshape(B, L, W, H, dh)
    vw = nx.window_gather(v, end, W).reshape(B, L, W, H, dh)
    scores = nx.scale(nx.einsum("blhe,blwhe->blhw", q, kw), 1.0 / np.sqrt(dh))
    attn = nx.softmax(scores, mask)
    out = nx.einsum("blhw,blwhe->blhe", attn, vw).reshape(B, L, d)
    out = nx.matmul(out, P[f"{prefix}.wo"])

    rowmask = Tensor(np.broadcast_to(live[:, :, None], (B, L, d)).astype(cfg.np_dtype))
    y = nx.add(x, nx.mul(nx.mul(out, rowmask), nx.tanh(P[f"{prefix}.gate_attn"])))
    ff = nx.mul(_ffn(P, f"{prefix}.ff", y), rowmask)
    return nx.add(y, nx.mul(ff, nx.tanh(P[f"{prefix}.gate_ff"])))


def lm_block(P: Params, prefix: str, cfg: ModelConfig, x: Tensor, causal_mask: np.ndarray) -> Tensor:
    B, L, d = x.shape
    H = cfg.n_heads
    dh = d // H
    qkv = nx.matmul(_ln(P, f"{prefix}.ln1", x), P[f"{prefix}.wqkv"])
    q = qkv[:, :, :d].reshape(B, L, H, dh).transpose(0, 2, 1, 3)
    k = qkv[:, :, d : 2 * d].reshape(B, L, H, dh).transpose(0, 2, 3, 1)
    v = qkv[:, :, 2 * d :].reshape(B, L, H, dh).transpose(0, 2, 1, 3)
    scores = nx.scale(nx.matmul(q, k), 1.0 / np.sqrt(dh))
    attn = nx.softmax(scores, causal_mask)
    out = nx.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, L, d)
    x = nx.add(x, nx.matmul(out, P[f"{prefix}.wo"]))
    return nx.add(x, _ffn(P, f"{prefix}.ff", x))


# ------------------------------------------------------------------- batches


@dataclass
class Batch:
    tokens: np.ndarray  # (B, L) int
    obs_index: np.ndarray  # (B, L) int
    segments: np.ndarray  # (B, L) int
    lengths: np.ndarray  # (B,)
    features: np.ndarray | None  # (B, T, D) or None
    n_obs: np.ndarray  # (B,)


def collate(streams: Sequence[TokenStream], features: Sequence[np.ndarray] | None, pad_id: int = 0, feature_dim: int = 64) -> Batch:
    B = len(streams)
    L = max(len(s) for s in streams)
    tokens = np.full((B, L), pad_id, dtype=np.int64)
    obs = np.zeros((B, L), dtype=np.int64)
    segs = np.full((B, L), -1, dtype=np.int64)
    lengths = np.array([len(s) for s in streams])
    for i, s in enumerate(streams):
        n = len(s)
        tokens[i, :n] = s.tokens
        obs[i, :n] = s.obs_index
        segs[i, :n] = s.segments
    n_obs = np.array([s.n_obs for s in streams])
    feats = None
    if features is not None:
        T = max(1, max(len(f) for f in features))
        feats = np.zeros((B, T, feature_dim))
        for i, f in enumerate(features):
            if len(f):
                feats[i, : len(f)] = f
            if len(f) < n_obs[i]:
                raise ModelInputError(f"stream {i} references {n_obs[i]} observations but {len(f)} were given")
    return Batch(tokens, obs, segs, lengths, feats, n_obs)


def _causal(L: int, dt) -> np.ndarray:
    return np.triu(np.full((L, L), -np.inf, dtype=dt), k=1)


def forward_batch(P: Params, cfg: ModelConfig, batch: Batch) -> Tensor:
    """Logits ``(B, L, V)``; observations are skipped when ``batch.features`` is None."""
    B, L = batch.tokens.shape
    if L > cfg.max_seq_len:
        raise ModelInputError(f"stream length {L} exceeds max_seq_len {cfg.max_seq_len}")
    x = nx.add(nx.embedding(P["tok_emb"], batch.tokens), P["pos_emb"][:L])
    bank = None
    n_obs = 0
    if batch.features is not None and cfg.n_xattn_blocks:
        n_obs = batch.features.shape[1]
        if n_obs > cfg.max_observations:
            raise ModelInputError(f"{n_obs} observations exceed max_observations {cfg.max_observations}")
        bank = visual_bank(P, cfg, batch.features)
    causal = _causal(L, cfg.np_dtype)
    for i in range(cfg.n_lm_blocks):
        if bank is not None and i < cfg.n_xattn_blocks:
            x = strided_gated_xattn(P, f"xattn{i}", cfg, x, bank, batch.obs_index, n_obs)
        x = lm_block(P, f"lm{i}", cfg, x, causal)
    x = _ln(P, "ln_f", x)
    return nx.linear(x, P["head_w"], P["head_b"])


def forward(P: Params, cfg: ModelConfig, stream: TokenStream, observations: Sequence[np.ndarray] | None) -> Tensor:
    """Single-stream forward; logits ``(len, V)``."""
    feats = None if observations is None else [np.asarray(observations).reshape(-1, cfg.feature_dim)]
    if observations is not None and stream.n_obs > len(feats[0]):
        raise ModelInputError("stream has more observation markers than observations")
    batch = collate([stream], feats, feature_dim=cfg.feature_dim)
    logits = forward_batch(P, cfg, batch)
    return logits.reshape(len(stream), cfg.vocab_size)
