from .config import DISPLAY_NAMES, VARIANT_KEYS, Kind, ModelConfig, ModelVariant
from .network import (
    Window,
    action_head,
    attention,
    block,
    causal_mask,
    channel,
    embed_window,
    feedforward,
    forward,
    state_token_index,
)
from .params import (
    CheckpointError,
    clone_params,
    init_params,
    interference_weights,
    load_checkpoint,
    param_count,
    param_kind,
    param_shapes,
    save_checkpoint,
    variant_delta,
)
