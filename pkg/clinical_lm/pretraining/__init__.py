from clinical_lm.pretraining.data import (  # noqa: F401
    BatchBuilder,
    BatchPrefetcher,
    TokenizedDocument,
    split_documents,
    tokenize_documents,
    train_batches,
    validation_batches,
)
from clinical_lm.pretraining.examples import (  # noqa: F401
    MlmExample,
    SopExample,
    make_mlm_example,
    make_sop_example,
)
from clinical_lm.pretraining.heads import (  # noqa: F401
    PretrainBatch,
    build_pretraining_heads,
    pretraining_loss,
)
from clinical_lm.pretraining.trainer import (  # noqa: F401
    EarlyStopping,
    PretrainResult,
    TrainLog,
    evaluate,
    pretrain,
)
