"""History-compressing visuomotor policy toolkit.

A small transformer policy over multi-frame pixel observations: lower
blocks attend the full frame history under a frame-causal mask, the
history is then mean-pooled into a single context token, and upper blocks
run on the short [context | current | instruction] sequence. Streaming
inference caches per-frame key/value rows so each step encodes only the
newly arrived frame. Action chunks are decoded either by a flow-matching
head or autoregressively over compressed action tokens.
"""

from .backbone import (
    CheckpointError,
    ModelConfig,
    forward_policy,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .decoders import (
    ActionTokenizer,
    DecodeError,
    TokenizerError,
    flow_sample,
    train_tokenizer,
)
from .envs import (
    DatasetError,
    evaluate_policy,
    generate_dataset,
    load_dataset,
)
from .inference import (
    DecoderSpec,
    StreamCache,
    StreamingPolicy,
    act,
    append_frame,
    bench,
    oracle_act,
)
from .numerics import NonFiniteError, Tensor, grad_check, no_grad
from .train import TrainConfig, finetune_preset, train_bc

__version__ = "0.1.0"

__all__ = [
    "ActionTokenizer",
    "CheckpointError",
    "DatasetError",
    "DecodeError",
    "DecoderSpec",
    "ModelConfig",
    "NonFiniteError",
    "StreamCache",
    "StreamingPolicy",
    "Tensor",
    "TokenizerError",
    "TrainConfig",
    "act",
    "append_frame",
    "bench",
    "evaluate_policy",
    "flow_sample",
    "forward_policy",
    "generate_dataset",
    "grad_check",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "no_grad",
    "oracle_act",
    "finetune_preset",
    "save_checkpoint",
    "train_bc",
    "train_tokenizer",
    "__version__",
]
