"""Incremental inference with cached keys and values.

Decoding one token through :func:`forward_batch` costs a pass over the whole
stream.  ``DecodeState`` keeps the per-layer self-attention keys/values and
the projected visual bank, so appending ``m`` tokens costs work proportional
to ``m`` times the current length.  The results match the full forward up to
floating-point reassociation.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..numerics import Tensor
from .config import ModelConfig
from .network import ModelInputError, Params, _ffn, _ln, pattern, resample
from .vocab import TokenStream


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class DecodeState:
    """Cached prefix of a single stream.  Use :meth:`fork` to branch."""

    def __init__(self, P: Params, cfg: ModelConfig):
        self.P = P
        self.cfg = cfg
        self.n = 0
        self.n_obs = 0
        L, d, dt = cfg.max_seq_len, cfg.d_model, cfg.np_dtype
        self.k = [np.zeros((L, d), dt) for _ in range(cfg.n_lm_blocks)]
        self.v = [np.zeros((L, d), dt) for _ in range(cfg.n_lm_blocks)]
        rows = cfg.max_observations * cfg.n_visual_tokens
        self.bank_k = [np.zeros((rows, d), dt) for _ in range(cfg.n_xattn_blocks)]
        self.bank_v = [np.zeros((rows, d), dt) for _ in range(cfg.n_xattn_blocks)]
        self.logits: np.ndarray | None = None

    def fork(self) -> "DecodeState":
        s = DecodeState.__new__(DecodeState)
        s.P, s.cfg, s.n, s.n_obs = self.P, self.cfg, self.n, self.n_obs
        s.k = [a.copy() for a in self.k]
        s.v = [a.copy() for a in self.v]
        s.bank_k = [a.copy() for a in self.bank_k]
        s.bank_v = [a.copy() for a in self.bank_v]
        s.logits = self.logits
        return s

    # ----------------------------------------------------------- feeding

    def add_observation(self, feature: np.ndarray) -> None:
        """Project one observation into the visual bank (before its marker is fed)."""
        cfg = self.cfg
        if self.n_obs >= cfg.max_observations:
            raise ModelInputError(f"more than {cfg.max_observations} observations")
        f = np.asarray(feature, dtype=cfg.np_dtype).reshape(1, cfg.feature_dim)
        toks = resample(self.P, cfg, Tensor(f)).data[0]  # (N_r, d)
        Nr = cfg.n_visual_tokens
        rows = slice(self.n_obs * Nr, (self.n_obs + 1) * Nr)
        for i in range(cfg.n_xattn_blocks):
            self.bank_k[i][rows] = toks @ self.P[f"xattn{i}.wk"].data
            self.bank_v[i][rows] = toks @ self.P[f"xattn{i}.wv"].data
        self.n_obs += 1

    def feed(self, tokens: Sequence[int], obs_index: Sequence[int]) -> np.ndarray:
        """Append tokens; returns logits ``(m, V)`` for the new positions."""
        cfg, P = self.cfg, self.P
        m = len(tokens)
        if m == 0:
            raise ModelInputError("feed needs at least one token")
        if self.n + m > cfg.max_seq_len:
            raise ModelInputError(f"stream length {self.n + m} exceeds max_seq_len {cfg.max_seq_len}")
        obs = np.asarray(obs_index, dtype=np.int64)
        if obs.max() > self.n_obs:
            raise ModelInputError(f"obs_index {obs.max()} exceeds the {self.n_obs} observations added")
        toks = np.asarray(tokens, dtype=np.int64)
        x = P["tok_emb"].data[toks] + P["pos_emb"].data[self.n : self.n + m]
        for i in range(cfg.n_lm_blocks):
            if i < cfg.n_xattn_blocks:
                x = self._xattn(i, x, obs)
            x = self._lm(i, x)
        self.n += m
        x = _ln(P, "ln_f", Tensor(x)).data
        out = x @ P["head_w"].data + P["head_b"].data
        self.logits = out[-1].astype(np.float64)
        return out

    def feed_stream_tail(self, stream: TokenStream, features: np.ndarray | None = None) -> np.ndarray:
        """Bring the cache up to ``stream`` (which must extend the cached prefix)."""
        if features is not None:
            while self.n_obs < stream.n_obs:
                self.add_observation(features[self.n_obs])
        return self.feed(stream.tokens[self.n :], stream.obs_index[self.n :])

    # ------------------------------------------------------------ blocks

    def _xattn(self, i: int, x: np.ndarray, obs: np.ndarray) -> np.ndarray:
        cfg, P = self.cfg, self.P
        prefix = f"xattn{i}"
        live = obs > 0
        if not live.any():
            return x
        H = cfg.n_heads
        d = cfg.d_model
        dh = d // H
        q = (_ln(P, f"{prefix}.ln_q", Tensor(x)).data @ P[f"{prefix}.wq"].data).reshape(-1, H, dh)
        out = np.zeros_like(x)
        scale = 1.0 / np.sqrt(dh)
        for j in np.flatnonzero(live):
            r = pattern(int(obs[j]), cfg.stride, cfg.n_visual_tokens)
            kw = self.bank_k[i][r.start : r.stop].reshape(-1, H, dh)
            vw = self.bank_v[i][r.start : r.stop].reshape(-1, H, dh)
            a = _softmax_rows(np.einsum("he,whe->hw", q[j], kw) * scale)
            out[j] = np.einsum("hw,whe->he", a, vw).reshape(d)
        out = out @ P[f"{prefix}.wo"].data
        rowmask = live[:, None].astype(x.dtype)
        y = x + out * rowmask * np.tanh(P[f"{prefix}.gate_attn"].data)
        ff = _ffn(P, f"{prefix}.ff", Tensor(y)).data * rowmask
        return y + ff * np.tanh(P[f"{prefix}.gate_ff"].data)

    def _lm(self, i: int, x: np.ndarray) -> np.ndarray:
        cfg, P = self.cfg, self.P
        prefix = f"lm{i}"
        m, d = x.shape
        H = cfg.n_heads
        dh = d // H
        n0 = self.n
        qkv = _ln(P, f"{prefix}.ln1", Tensor(x)).data @ P[f"{prefix}.wqkv"].data
        n1 = n0 + m
        self.k[i][n0:n1] = qkv[:, d : 2 * d]
        self.v[i][n0:n1] = qkv[:, 2 * d :]
        q = qkv[:, :d].reshape(m, H, dh).transpose(1, 0, 2)  # (H, m, dh)
        k = self.k[i][:n1].reshape(n1, H, dh).transpose(1, 2, 0)  # (H, dh, n1)
        v = self.v[i][:n1].reshape(n1, H, dh).transpose(1, 0, 2)  # (H, n1, dh)
        scores = (q @ k) * (1.0 / np.sqrt(dh))
        if m > 1:
            causal = np.triu(np.full((m, n1), -np.inf, dtype=x.dtype), k=n0 + 1)
            scores = scores + causal
        out = (_softmax_rows(scores) @ v).transpose(1, 0, 2).reshape(m, d)
        x = x + out @ P[f"{prefix}.wo"].data
        x = x + _ffn(P, f"{prefix}.ff", Tensor(x)).data
        return x


def state_for(P: Params, cfg: ModelConfig, stream: TokenStream, features: np.ndarray | None) -> DecodeState:
    """A fresh state that has consumed all of ``stream``."""
    st = DecodeState(P, cfg)
    if len(stream):
        st.feed_stream_tail(stream, features)
    return st


__all__ = ["DecodeState", "state_for"]
