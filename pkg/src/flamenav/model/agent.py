"""Inference-side wrapper: action prediction, rationale decoding, checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..numerics import Tensor, checkpoint
from ..world import Action
from .cache import DecodeState, state_for
from .config import ModelConfig
from .network import Params, collate, forward_batch, init_params
from .vocab import ACTION_TOKENS, SPECIALS, Seg, TokenStream, Vocab

CONFIG_SIDECAR_VERSION = 1


@dataclass
class RationaleResult:
    tokens: list[int]
    text: str
    truncated: bool
    logprob: float


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class FlameModel:
    def __init__(self, cfg: ModelConfig, vocab: Vocab, params: Params | None = None, seed: int = 0):
        if cfg.vocab_size != len(vocab):
            cfg = cfg.replace(vocab_size=len(vocab))
        self.cfg = cfg
        self.vocab = vocab
        self.params = params if params is not None else init_params(cfg, seed)

    # ------------------------------------------------------------- logits

    def last_logits(self, streams: Sequence[TokenStream], features: Sequence[np.ndarray] | None) -> np.ndarray:
        """Next-token logits at the final position of every stream, ``(B, V)``."""
        batch = collate(streams, features, self.vocab.pad, self.cfg.feature_dim)
        logits = forward_batch(self.params, self.cfg, batch).data
        return logits[np.arange(len(streams)), batch.lengths - 1].astype(np.float64)

    def action_distribution(self, stream: TokenStream, features, temperature: float = 1.0) -> np.ndarray:
        """Distribution over the five actions (index = ``Action`` value)."""
        z = self.last_logits([stream], [features])[0][self.vocab.action_ids]
        if temperature <= 0:
            p = np.zeros(len(z))
            p[int(np.argmax(z))] = 1.0
            return p
        return _softmax(z / temperature)

    def action_logprobs(self, stream: TokenStream, features) -> np.ndarray:
        z = self.last_logits([stream], [features])[0][self.vocab.action_ids]
        z = z - z.max()
        return z - np.log(np.exp(z).sum())

    def predict_action(self, stream: TokenStream, features, temperature: float = 0.0, rng=None) -> Action:
        if temperature <= 0:
            z = self.last_logits([stream], [features])[0][self.vocab.action_ids]
            return Action(int(np.argmax(z)))
        p = self.action_distribution(stream, features, temperature)
        return Action(int(rng.choice(len(p), p=p)))

    # --------------------------------------------------------- rationales

    def generate_rationales(
        self,
        streams: Sequence[TokenStream],
        features,
        temperature: float,
        max_len: int,
        rngs: Sequence[np.random.Generator] | None = None,
    ) -> list[RationaleResult]:
        """Decode one rationale per stream, batched.  Each stream must end with ``<rat>``.

        Sampling uses ``rngs[i]`` for stream ``i``; temperature 0 is greedy.
        """
        base = [state_for(self.params, self.cfg, s, f) for s, f in zip(streams, features)]
        return self.rationales_from_states(base, temperature, max_len, rngs)

    def rationales_from_states(
        self,
        states: Sequence[DecodeState],
        temperature: float,
        max_len: int,
        rngs: Sequence[np.random.Generator] | None = None,
    ) -> list[RationaleResult]:
        """Like :meth:`generate_rationales`, continuing cached states whose last
        fed token is ``<rat>``.  The states are advanced in place."""
        vocab = self.vocab
        # rationale words only: no specials besides the terminator, no action tokens
        allowed = np.full(len(vocab), -np.inf)
        allowed[len(SPECIALS) + len(ACTION_TOKENS) :] = 0.0
        allowed[vocab.end_rat] = 0.0
        results = []
        for i, st in enumerate(states):
            out: list[int] = []
            logp = 0.0
            done = False
            for _ in range(max_len):
                z = st.logits + allowed
                if temperature <= 0:
                    tok = int(np.argmax(z))
                    lp = z - z.max()
                else:
                    lp = z / temperature
                    lp = lp - lp.max()
                lp = lp - np.log(np.exp(lp).sum())
                if temperature > 0:
                    tok = int(rngs[i].choice(len(lp), p=np.exp(lp)))
                logp += float(lp[tok])
                st.feed([tok], [st.n_obs])
                if tok == vocab.end_rat:
                    done = True
                    break
                out.append(tok)
            results.append(RationaleResult(out, vocab.decode(out), not done, logp))
        return results

    def generate_rationale(self, stream: TokenStream, features, temperature: float = 0.0, max_len: int = 40, rng=None) -> RationaleResult:
        return self.generate_rationales([stream], [features], temperature, max_len, [rng])[0]

    # --------------------------------------------------------- checkpoints

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, path, meta: dict | None = None) -> None:
        path = Path(path)
        checkpoint.save(path, self.state_dict(), meta)
        sidecar = {
            "version": CONFIG_SIDECAR_VERSION,
            "model_config": self.cfg.to_dict(),
            "vocab": self.vocab.to_list(),
        }
        Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> tuple["FlameModel", dict]:
        path = Path(path)
        side = json.loads(Path(str(path) + ".json").read_text())
        if side.get("version") != CONFIG_SIDECAR_VERSION:
            raise checkpoint.CheckpointError(f"config sidecar version {side.get('version')} unsupported")
        cfg = ModelConfig.from_dict(side["model_config"])
        vocab = Vocab.from_list(side["vocab"])
        arrays, meta = checkpoint.load(path)
        model = cls(cfg, vocab)
        load_arrays(model.params, arrays)
        return model, meta


def load_arrays(params: Params, arrays: dict[str, np.ndarray]) -> None:
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise checkpoint.CheckpointError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
    for k, p in params.items():
        if arrays[k].shape != p.shape:
            raise checkpoint.CheckpointError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.shape}")
        p.data = arrays[k].astype(p.dtype, copy=True)


def clone_params(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), True, name=k) for k, v in params.items()}
