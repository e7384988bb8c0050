"""Streaming video-language model with time-aware cross-attention, in numpy."""

from .densedata import (
    InstructionTriplet,
    Tokenizer,
    assign_timestamps,
    compile_training_item,
    load_corpus,
    synth_generate,
    synth_tokenizer,
    write_corpus,
)
from .masks import build_causal_mask, build_stream_mask, verify_temporal_integrity
from .model import ModelConfig, StreamLMM
from .numkit import Param, grad_check
from .rope3d import RopeLayout, apply_rope3d, split_dims, text_position, visual_position
from .stream import Clock, FrameQueue, decode_offline_oracle, decode_streaming, freshness_report
from .tokens import FrameTokens, TimedToken

__version__ = "0.1.0"

__all__ = [
    "Clock",
    "FrameQueue",
    "FrameTokens",
    "InstructionTriplet",
    "ModelConfig",
    "Param",
    "RopeLayout",
    "StreamLMM",
    "TimedToken",
    "Tokenizer",
    "apply_rope3d",
    "assign_timestamps",
    "build_causal_mask",
    "build_stream_mask",
    "compile_training_item",
    "decode_offline_oracle",
    "decode_streaming",
    "freshness_report",
    "grad_check",
    "load_corpus",
    "split_dims",
    "synth_generate",
    "synth_tokenizer",
    "text_position",
    "verify_temporal_integrity",
    "visual_position",
    "write_corpus",
]
