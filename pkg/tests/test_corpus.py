"""
Tests for corpus cleaning: normalization, deduplication, sentence
splitting, rule-based de-identification and the preprocessing pipeline.
"""
import pytest

from clinical_lm.conf import CorpusConfig
from clinical_lm.corpus import (
    RawDocument,
    RuleSet,
    dedup_corpus,
    deidentify,
    normalize_text,
    preprocess_corpus,
    split_sentences,
    subsample,
    tokenize_words,
)
from clinical_lm.corpus.deid import PHI_CATEGORIES, default_rules, find_phi
from clinical_lm.corpus.pipeline import deidentify_documents
from clinical_lm.errors import ConfigError, EmptyCorpusError
from clinical_lm.fixtures import generate_phi_corpus, phi_recall


@pytest.fixture(scope="module")
def synthetic_phi():
    return generate_phi_corpus(100, seed=0)


@pytest.mark.unit
class TestNormalizeText:
    def test_nested_html_entities_settle(self):
        assert normalize_text("a &amp;amp;lt; b") == "a < b"

    def test_non_breaking_space(self):
        assert normalize_text("5\xa0mg") == "5 mg"

    def test_invalid_utf8_bytes_dropped(self):
        assert normalize_text(b"ab\xffc") == "abc"

    def test_mojibake_repaired(self):
        assert normalize_text("cafÃ©") == "café"

    def test_idempotent(self):
        text = normalize_text("x &amp;gt;\xa0y cafÃ©")
        assert normalize_text(text) == text


@pytest.mark.unit
class TestDedup:
    def test_drops_empty_and_duplicate_documents(self):
        docs = [
            RawDocument("1", "Continue aspirin."),
            RawDocument("2", "Continue&nbsp;aspirin.".replace("&nbsp;", "\xa0")),
            RawDocument("3", "   "),
            RawDocument("4", "Another note."),
        ]
        stats = {}
        kept = list(dedup_corpus(docs, stats))
        assert [d.id for d in kept] == ["1", "4"]
        assert stats == {"empty": 1, "duplicates": 1, "repeated_ids": 0}

    def test_repeated_id_with_new_text_is_kept(self):
        docs = [
            RawDocument("1", "Continue aspirin."),
            RawDocument("1", "A different note."),
            RawDocument("1", "Continue aspirin."),
        ]
        stats = {}
        kept = list(dedup_corpus(docs, stats))
        assert [d.text for d in kept] == ["Continue aspirin.", "A different note."]
        assert stats == {"empty": 0, "duplicates": 1, "repeated_ids": 1}

    def test_subsample_is_seeded(self):
        docs = [RawDocument(str(i), f"note {i}") for i in range(200)]
        first = [d.id for d in subsample(docs, 0.5, seed=1)]
        second = [d.id for d in subsample(docs, 0.5, seed=1)]
        assert first == second
        assert 60 < len(first) < 140
        assert len(list(subsample(docs, 1.0))) == 200


@pytest.mark.unit
class TestSentences:
    def test_abbreviation_does_not_split(self):
        text = "Seen by Dr. Smith today. Start aspirin! Is she better? Yes."
        assert split_sentences(text) == [
            "Seen by Dr. Smith today.",
            "Start aspirin!",
            "Is she better?",
            "Yes.",
        ]

    def test_initial_does_not_split(self):
        assert split_sentences("Seen by J. Smith today.") == ["Seen by J. Smith today."]

    def test_blank_line_always_splits(self):
        assert split_sentences("first line\n\nsecond line") == ["first line", "second line"]

    def test_dummy_token_starts_a_sentence(self):
        assert split_sentences("Seen on [**DATE**]. [**NAME**] called.") == [
            "Seen on [**DATE**].",
            "[**NAME**] called.",
        ]

    def test_empty_text(self):
        assert split_sentences("") == []

    def test_tokenize_keeps_dummy_tokens_whole(self):
        assert tokenize_words("Call [**PHONE**] now, please.") == [
            "Call", "[**PHONE**]", "now", ",", "please", ".",
        ]


@pytest.mark.unit
class TestDeidentify:
    def test_phone(self):
        text, spans = deidentify("Call back at 352-555-1234 if symptoms worsen.")
        assert text == "Call back at [**PHONE**] if symptoms worsen."
        assert [(s.category, s.surface) for s in spans] == [("PHONE", "352-555-1234")]

    def test_fax_wins_tie_by_rule_order(self):
        text, spans = deidentify("Records sent by fax 352-555-1234 this afternoon.")
        assert text == "Records sent by fax [**FAX**] this afternoon."
        assert spans[0].category == "FAX"

    def test_group_replaces_only_the_identifier(self):
        text, _ = deidentify("MRN 12345678 was linked to this visit.")
        assert text == "MRN [**MRN**] was linked to this visit."

    def test_gazetteer_name(self):
        text, _ = deidentify("Discussed the plan with Mary Smith at bedside.")
        assert text == "Discussed the plan with [**NAME**] at bedside."

    def test_spans_refer_to_input_offsets(self):
        source = "Admitted on 03/04/1999 for observation."
        _, spans = deidentify(source)
        assert source[spans[0].start:spans[0].end] == "03/04/1999"

    def test_output_is_fixed_point(self):
        docs, _ = generate_phi_corpus(10, seed=5)
        for doc in docs:
            once, spans = deidentify(doc.text)
            assert spans
            twice, again = deidentify(once)
            assert twice == once
            assert again == []

    def test_recall_on_synthetic_corpus(self, synthetic_phi):
        docs, injected = synthetic_phi
        assert len(injected) >= 500
        recall = phi_recall(docs, injected)
        assert set(recall) == set(PHI_CATEGORIES)

    @pytest.mark.parametrize("category", PHI_CATEGORIES)
    def test_recall_per_category(self, synthetic_phi, category):
        docs, injected = synthetic_phi
        support = [s for s in injected if s.category == category]
        assert len(support) >= 500 // len(PHI_CATEGORIES)
        assert phi_recall(docs, support)[category] >= 0.95

    def test_found_spans_do_not_overlap(self):
        docs, _ = generate_phi_corpus(5, seed=2)
        for doc in docs:
            spans = find_phi(doc.text, default_rules())
            for left, right in zip(spans, spans[1:]):
                assert left.end <= right.start


@pytest.mark.unit
class TestRuleSet:
    def test_custom_rules(self):
        rules = RuleSet.from_text("# comment\nOTHER_ID\t\\bZZ-\\d{3}\\b\n")
        assert len(rules) == 1
        text, _ = deidentify("Code ZZ-123 noted.", rules)
        assert text == "Code [**OTHER_ID**] noted."

    @pytest.mark.parametrize(
        "line",
        [
            "NAME no tab here",
            "NICKNAME\t\\w+",
            "NAME\t(unclosed",
            "NAME\t{{no_such_list}}",
        ],
    )
    def test_invalid_rules(self, line):
        with pytest.raises(ConfigError):
            RuleSet.from_text(line)


@pytest.mark.unit
class TestPreprocessCorpus:
    def _docs(self):
        return [
            RawDocument("b", "Patient Mary Smith was seen. Continue aspirin.", "clinical"),
            RawDocument("a", "Aspirin is a common drug.\n\nMary Smith wrote about it.", "encyclopedia"),
            RawDocument("c", "Patient Mary Smith was seen. Continue aspirin.", "clinical"),
            RawDocument("d", "   ", "clinical"),
        ]

    def test_pipeline(self):
        clean, deid_report, report = preprocess_corpus(self._docs(), CorpusConfig(workers=2))
        assert [d.id for d in clean] == ["a", "b"]
        assert clean[1].sentences == [
            ["Patient", "[**NAME**]", "was", "seen", "."],
            ["Continue", "aspirin", "."],
        ]
        # only clinical sources are de-identified
        assert clean[0].sentences[1][:2] == ["Mary", "Smith"]
        assert deid_report.documents == 1
        assert deid_report.counts["NAME"] == 1
        assert report.documents_in == 4
        assert report.documents_out == 2
        assert report.empty_dropped == 1
        assert report.duplicates_dropped == 1
        assert report.repeated_ids == 0
        assert report.sentences == 4
        assert report.sources["clinical"]["documents"] == 1

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpusError):
            preprocess_corpus([RawDocument("x", "  ")], CorpusConfig(workers=1))

    def test_sample_fraction_validated(self):
        with pytest.raises(ConfigError):
            CorpusConfig.from_mapping({"sample_fraction": 0.0})

    def test_deidentify_documents_keeps_layout(self):
        docs = [RawDocument("x", "Line one.\nCall 352-555-1234.")]
        out, report = deidentify_documents(docs, default_rules())
        assert out[0].text == "Line one.\nCall [**PHONE**]."
        assert report.total == 1
