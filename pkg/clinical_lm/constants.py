"""
Shared constants for clinical_lm.

Special tokens, label conventions, and the numeric defaults that several
subpackages agree on (mask rate, windowing, optimizer).
"""
# Special tokens occupy the lowest ids in this order.
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
MASK_TOKEN = "[MASK]"
S1_TOKEN = "[S1]"
E1_TOKEN = "[E1]"
S2_TOKEN = "[S2]"
E2_TOKEN = "[E2]"
SPECIAL_TOKENS = (
    PAD_TOKEN,
    UNK_TOKEN,
    CLS_TOKEN,
    SEP_TOKEN,
    MASK_TOKEN,
    S1_TOKEN,
    E1_TOKEN,
    S2_TOKEN,
    E2_TOKEN,
)
ENTITY_MARKERS = (S1_TOKEN, E1_TOKEN, S2_TOKEN, E2_TOKEN)

# Label value ignored by the token-level losses (MLM, NER subword tails).
IGNORE_INDEX = -100

# Tokenizer
DEFAULT_VOCAB_SIZE = 4096
VOCAB_FORMAT_HEADER = "bpe-v1"
# Suffix on the last symbol of every word.
END_OF_WORD = "</w>"

# Pretraining
DEFAULT_MASK_RATE = 0.15
DEFAULT_VAL_FRACTION = 0.05
DEFAULT_MIN_DELTA = 1e-3
DEFAULT_PATIENCE = 3
SOP_IN_ORDER = 0
SOP_SWAPPED = 1

# Optimizer: Adam with linear warmup then constant LR.
DEFAULT_LR = 1e-3
DEFAULT_WARMUP_STEPS = 100
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Cross-entropy log clamp.
LOG_EPSILON = 1e-12

# Encoder initialization.
INIT_STD = 0.02
LAYER_NORM_EPS = 1e-12

# Question answering windowing: 64-token questions, 446-token windows with a
# 396-token stride (50 overlapping tokens), answers of at most 32 tokens.
QA_MAX_QUESTION = 64
QA_WINDOW = 446
QA_STRIDE = 396
QA_MAX_ANSWER = 32

# Semantic similarity score scale.
STS_MIN_SCORE = 0.0
STS_MAX_SCORE = 5.0

NLI_LABELS = ("entailment", "contradiction", "neutral")
NO_RELATION = "no-relation"

# Checkpoint format.
CHECKPOINT_MAGIC = b"GTRN"
CHECKPOINT_VERSION = 1
