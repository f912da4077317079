from clinical_lm.corpus.deid import (  # noqa: F401
    PHI_CATEGORIES,
    DeidReport,
    PhiSpan,
    RuleSet,
    deidentify,
)
from clinical_lm.corpus.documents import CleanDocument, RawDocument  # noqa: F401
from clinical_lm.corpus.normalize import dedup_corpus, normalize_text  # noqa: F401
from clinical_lm.corpus.pipeline import (  # noqa: F401
    CorpusReport,
    preprocess_corpus,
    subsample,
)
from clinical_lm.corpus.sentences import split_sentences, tokenize_words  # noqa: F401
