from clinical_lm.model.checkpoint import (  # noqa: F401
    Checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from clinical_lm.model.config import (  # noqa: F401
    ModelConfig,
    count_params,
    nearest_preset,
    preset_config,
)
from clinical_lm.model.encoder import (  # noqa: F401
    EncoderOutput,
    SerialContext,
    build_encoder,
    forward,
    param_shapes,
)
