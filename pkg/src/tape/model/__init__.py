"""TAPE decoder: config, parameters, layers and the rotary baseline."""
from .config import ConfigError, ModelConfig
from .layers import (
    block_logits,
    causal_mask,
    position_attend,
    position_mlp,
    psi,
    rope_block,
    rotary_logits,
    tape_block,
    token_mix,
)
from .params import (
    added_params,
    added_params_formula,
    check_params,
    count_params,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
)
from .transformer import (
    ContextLengthError,
    TapeModel,
    forward,
    initial_pe,
    layer_params,
    model_forward,
    pe_schedule,
    rope_attention_baseline,
)
