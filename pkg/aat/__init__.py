from .attention import Attention, AttentionConfig, AttentionKind, attend
from .decoder import (
    AatDecoder,
    AttentionMode,
    DecodeMode,
    DecoderState,
    ModelConfig,
    decode_sequence,
)
from .errors import *
from .halting import HaltingRecord, decide
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"
