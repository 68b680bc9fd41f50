from .agent import FlameModel, RationaleResult, clone_params, load_arrays
from .cache import DecodeState, state_for
from .config import ModelConfig
from .network import (
    Batch,
    collate,
    forward,
    forward_batch,
    init_params,
    lm_param_names,
    pattern,
    resample,
    strided_gated_xattn,
    visual_bank,
)
from .vocab import Seg, TokenStream, Vocab, caption_stream, prompt_stream, route_stream

__all__ = [
    "Batch", "DecodeState", "FlameModel", "ModelConfig", "RationaleResult", "Seg", "TokenStream", "Vocab",
    "caption_stream", "clone_params", "collate", "forward", "forward_batch", "init_params",
    "lm_param_names", "load_arrays", "pattern", "prompt_stream", "resample", "route_stream", "state_for",
    "strided_gated_xattn", "visual_bank",
]
