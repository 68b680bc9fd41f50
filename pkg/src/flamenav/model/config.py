from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_lm_blocks: int = 2
    n_xattn_blocks: int = 1  # placed before LM blocks 0 .. n-1
    n_visual_tokens: int = 4  # N_r
    stride: int | None = 1  # None: attend to every past observation
    vocab_size: int = 0
    max_seq_len: int = 512
    max_observations: int = 55
    feature_dim: int = 64
    resampler_inputs: int = 4
    ff_mult: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be >= 1 (or None for full attention)")
        if self.n_visual_tokens < 1:
            raise ValueError("n_visual_tokens must be >= 1")
        if not 0 <= self.n_xattn_blocks <= self.n_lm_blocks:
            raise ValueError("n_xattn_blocks must be within [0, n_lm_blocks]")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def window(self, n_obs: int) -> int:
        """Visual rows each query sees through the strided window."""
        span = n_obs if self.stride is None else min(self.stride, max(n_obs, 1))
        return max(span, 1) * self.n_visual_tokens

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})
