from clinical_lm.tokenizer.bpe import (  # noqa: F401
    END_OF_WORD,
    Encoding,
    Vocabulary,
    decode,
    encode,
    load_vocabulary,
    save_vocabulary,
    train_bpe,
)
