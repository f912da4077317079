"""
Pytest fixtures for clinical_lm tests.
"""
import pytest

from clinical_lm.fixtures import generate_pretraining_corpus
from clinical_lm.model.config import ModelConfig
from clinical_lm.tensor import default_dtype
from clinical_lm.tokenizer import train_bpe

CORPUS_SENTENCES = [
    "The patient was started on aspirin 81 mg daily for chest pain.",
    "Metformin was discontinued after the patient developed nausea.",
    "Continue lisinopril for hypertension.",
    "No rash was noted after amoxicillin.",
    "Labs showed an elevated creatinine this morning.",
    "Why was warfarin prescribed?",
]


@pytest.fixture
def float64():
    """Run the test with float64 as this thread's default precision."""
    with default_dtype("float64"):
        yield


@pytest.fixture(scope="session")
def pretraining_docs():
    return generate_pretraining_corpus(24, sentences_per_document=8, seed=3)


@pytest.fixture(scope="session")
def vocab(pretraining_docs):
    texts = list(CORPUS_SENTENCES)
    texts.extend(doc.text for doc in pretraining_docs)
    return train_bpe(texts, vocab_size=400)


@pytest.fixture
def tiny_config(vocab):
    return ModelConfig(
        num_layers=2,
        hidden_size=16,
        num_heads=2,
        intermediate_size=32,
        vocab_size=len(vocab),
        max_seq_len=64,
        dropout=0.0,
    )
