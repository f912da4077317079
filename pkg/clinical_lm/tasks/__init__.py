from clinical_lm.tasks.common import (  # noqa: F401
    TASKS,
    TaskModel,
    finetune_loop,
    load_task_model,
    save_task_model,
)
from clinical_lm.tasks.datasets import (  # noqa: F401
    NerExample,
    NliExample,
    QaAnswerSpan,
    QaExample,
    ReExample,
    StsExample,
    example_rows,
    read_task_examples,
)
from clinical_lm.tasks.ner import NerTagger, Span, bio_decode, bio_encode, finetune_ner  # noqa: F401
from clinical_lm.tasks.nli import InferenceClassifier, finetune_nli  # noqa: F401
from clinical_lm.tasks.qa import QaPrediction, QaReader, best_span, finetune_qa, qa_windows  # noqa: F401
from clinical_lm.tasks.relation import (  # noqa: F401
    Concept,
    RelationClassifier,
    finetune_re,
    generate_candidates,
    mark_entities,
    markers_balanced,
)
from clinical_lm.tasks.sts import SimilarityScorer, finetune_sts  # noqa: F401
