"""
Tests for the fine-tuning heads: BIO tagging, relation candidates and
markers, sentence-pair heads, sliding-window QA and task checkpoints.
"""
import dataclasses
import json

import numpy as np
import pytest

from clinical_lm.conf import FinetuneConfig, QaWindowing
from clinical_lm.constants import NO_RELATION
from clinical_lm.errors import ConfigError, SchemaError
from clinical_lm.fixtures import ner_examples, nli_examples, qa_examples, re_examples, sts_examples
from clinical_lm.model import build_encoder, save_checkpoint
from clinical_lm.model.inputs import CLS_ID, SEP_ID
from clinical_lm.tasks import (
    Concept,
    NerExample,
    NerTagger,
    QaAnswerSpan,
    QaExample,
    QaReader,
    ReExample,
    Span,
    TaskModel,
    best_span,
    bio_decode,
    bio_encode,
    finetune_loop,
    finetune_ner,
    finetune_nli,
    finetune_qa,
    finetune_re,
    finetune_sts,
    generate_candidates,
    load_task_model,
    mark_entities,
    markers_balanced,
    read_task_examples,
    save_task_model,
)
from clinical_lm.tasks.common import encode_words, init_linear
from clinical_lm.metrics import accuracy, label_prf, pearson, qa_scores, span_prf
from clinical_lm.tasks.ner import PER_CATEGORY, bio_labels, encode_ner, token_loss
from clinical_lm.tasks.qa import answer_token_span, qa_windows, training_targets, window_starts
from clinical_lm.tasks.relation import MARKER_IDS, align_to_tokens, encode_relation, relation_logits
from clinical_lm.tensor import Tensor, mse
from clinical_lm.tokenizer import train_bpe

QA_WINDOWING = QaWindowing(max_question=16, window=32, stride=16, max_answer=8)


@pytest.fixture
def small_vocab():
    return train_bpe(["ab ab ab", "abc"], vocab_size=15)


def _finetune_config(**overrides):
    values = dict(steps=4, batch_size=4, lr=1e-3, warmup_steps=0, seed=0)
    values.update(overrides)
    return FinetuneConfig(**values)


@pytest.mark.unit
class TestBio:
    def test_encode_and_decode(self):
        spans = [Span(0, 2, "drug"), Span(3, 4, "ade")]
        labels = bio_encode(5, spans)
        assert labels == ["B-drug", "I-drug", "O", "B-ade", "O"]
        assert bio_decode(labels) == sorted(spans)

    def test_dangling_inside_opens_a_span(self):
        assert bio_decode(["I-drug", "I-drug", "O", "B-ade", "I-drug"]) == [
            Span(0, 2, "drug"), Span(3, 4, "ade"), Span(4, 5, "drug"),
        ]

    def test_adjacent_begins_are_separate_spans(self):
        assert bio_decode(["B-drug", "B-drug"]) == [Span(0, 1, "drug"), Span(1, 2, "drug")]

    @pytest.mark.parametrize(
        "spans",
        [[Span(0, 3, "drug"), Span(2, 4, "ade")], [Span(3, 6, "drug")], [Span(2, 2, "drug")]],
    )
    def test_invalid_spans(self, spans):
        with pytest.raises(ConfigError):
            bio_encode(5, spans)

    def test_label_set(self):
        assert bio_labels(["drug", "ade", "drug"]) == ["O", "B-ade", "I-ade", "B-drug", "I-drug"]

    def test_labels_read_at_first_subword(self, small_vocab):
        ids, firsts = encode_words(small_vocab, ["abc", "ab"])
        # "abc" splits into "ab" + "c</w>"; "ab" is the single token "ab</w>"
        assert (ids, firsts) == ([14, 12, 13], [0, 2])
        enc = encode_ner(small_vocab, ["ab", "abc"], 16, ["B-drug", "O"], {"O": 0, "B-drug": 1})
        assert enc.ids == [CLS_ID, 13, 14, 12, SEP_ID]
        assert enc.first_subwords == [1, 2]
        assert enc.label_ids == [-100, 1, 0, -100, -100]

    def test_no_spans_to_learn(self, vocab, tiny_config):
        examples = [NerExample(["no", "concepts"], ["O", "O"])]
        with pytest.raises(ConfigError):
            finetune_ner(None, vocab, examples, _finetune_config(), model_cfg=tiny_config)


@pytest.mark.unit
class TestRelationCandidates:
    ADE = Concept(0, 0, 6, "ade")
    DRUG = Concept(0, 10, 17, "drug")
    REASON = Concept(1, 4, 9, "reason")
    DOSAGE = Concept(1, 12, 16, "dosage")
    LATE_DRUG = Concept(3, 0, 4, "drug")

    def _concepts(self):
        return [self.LATE_DRUG, self.REASON, self.DRUG, self.DOSAGE, self.ADE]

    def test_default_allowlist_and_gap(self):
        assert generate_candidates(self._concepts()) == [
            (self.ADE, self.DRUG), (self.DRUG, self.REASON), (self.DRUG, self.DOSAGE),
        ]

    def test_same_sentence_only(self):
        assert generate_candidates(self._concepts(), max_sentence_gap=0) == [(self.ADE, self.DRUG)]

    def test_custom_pairs_are_ordered(self):
        pairs = frozenset({("drug", "reason")})
        assert generate_candidates(self._concepts(), allowed_pairs=pairs) == [(self.DRUG, self.REASON)]


@pytest.mark.unit
class TestEntityMarkers:
    TEXT = "Aspirin caused rash."

    def test_marks_both_concepts(self):
        m1, m2 = mark_entities(self.TEXT, (0, 7), self.TEXT, (15, 19))
        assert m1 == "[S1] Aspirin [E1] caused rash."
        assert m2 == "Aspirin caused [S2] rash [E2] ."
        assert markers_balanced(m1) and markers_balanced(m2)

    def test_span_widened_to_word_boundaries(self):
        assert align_to_tokens(self.TEXT, 2, 5) == (0, 7)
        assert align_to_tokens(self.TEXT, 7, 15) == (8, 14)

    @pytest.mark.parametrize(
        "text,balanced",
        [
            ("[S1] a [E1] b [S2] c [E2]", True),
            ("[S1] a [S2] b [E1] [E2]", False),
            ("[S1] a", False),
            ("a [E1]", False),
            ("[S1] a [E2]", False),
        ],
    )
    def test_balance(self, text, balanced):
        assert markers_balanced(text) is balanced

    def test_encoded_marker_positions(self, vocab):
        ex = ReExample(self.TEXT, self.TEXT, (0, 7), (15, 19), "ade")
        enc = encode_relation(vocab, ex, 64)
        assert enc.marker_positions[0] == 0
        assert [enc.ids[p] for p in enc.marker_positions[1:]] == list(MARKER_IDS)
        assert enc.segment_ids[enc.marker_positions[3]] == 1

    def test_truncated_marker_raises(self, vocab):
        ex = ReExample(self.TEXT, self.TEXT, (0, 7), (15, 19), "ade")
        with pytest.raises(SchemaError):
            encode_relation(vocab, ex, 6)

    def test_feature_is_five_hidden_states(self, vocab, tiny_config):
        params = build_encoder(tiny_config)
        params.update(init_linear("re.classifier", 5 * tiny_config.hidden_size, 3, seed=0))
        ex = ReExample(self.TEXT, self.TEXT, (0, 7), (15, 19), "ade")
        logits = relation_logits(params, tiny_config, [encode_relation(vocab, ex, 64)] * 2)
        assert logits.shape == (2, 3)


@pytest.mark.unit
class TestQaWindows:
    @pytest.mark.parametrize(
        "n,expected",
        [(0, [0]), (446, [0]), (500, [0, 396]), (842, [0, 396]), (900, [0, 396, 792])],
    )
    def test_window_starts(self, n, expected):
        assert window_starts(n, 446, 396) == expected

    def test_window_starts_properties_on_random_triples(self):
        rng = np.random.default_rng(5)
        cases = [(842, 446, 396)]
        for _ in range(999):
            window = int(rng.integers(2, 600))
            cases.append((int(rng.integers(0, 3000)), window, int(rng.integers(1, window))))
        for n, window, stride in cases:
            starts = window_starts(n, window, stride)
            assert starts[0] == 0
            assert all(b - a == stride for a, b in zip(starts, starts[1:]))
            assert starts[-1] + window >= n
            assert len(starts) == 1 or starts[-2] + window < n
            covered = np.zeros(n, dtype=bool)
            for s in starts:
                covered[s:s + window] = True
            assert covered.all(), (n, window, stride)

    def test_qa_windows_pack_and_overlap(self):
        question = list(range(100, 170))
        context = [10 + i % 5 for i in range(842)]
        windows = qa_windows(question, context, QaWindowing())
        assert [w.start for w in windows] == [0, 396]
        assert [w.length for w in windows] == [446, 446]
        first, second = windows
        assert first.context_offset == 66
        assert first.packed.ids[:2] == [CLS_ID, 100]
        assert first.packed.ids[65] == SEP_ID
        assert first.packed.ids[-1] == SEP_ID
        assert len(first.packed.ids) == 66 + 446 + 1
        shared = first.packed.ids[66 + 396:66 + 446]
        assert shared == second.packed.ids[66:66 + 50]
        covered = set()
        for w in windows:
            covered.update(range(w.start, w.start + w.length))
        assert covered == set(range(842))

    def test_fit_keeps_overlap(self):
        fitted = QaWindowing().fit(512)
        assert (fitted.max_question, fitted.window, fitted.stride) == (64, 445, 395)
        assert fitted.overlap == QaWindowing().overlap
        assert QA_WINDOWING.fit(64) == QA_WINDOWING

    def test_fit_rejects_tiny_sequences(self):
        with pytest.raises(ConfigError):
            QaWindowing().fit(4)

    @pytest.mark.parametrize("kwargs", [{"stride": 0}, {"stride": 500}, {"window": 0}])
    def test_invalid_windowing(self, kwargs):
        with pytest.raises(ConfigError):
            QaWindowing(**kwargs).validate()

    def test_answer_token_span(self):
        offsets = [(0, 3), (3, 4), (4, 9)]
        assert answer_token_span(offsets, 4, 9) == (2, 2)
        assert answer_token_span(offsets, 0, 4) == (0, 1)
        assert answer_token_span(offsets, 10, 12) is None

    def test_training_targets_point_into_covering_window(self, small_vocab):
        context = "ab ab ab abc ab ab"
        ex = QaExample("ab", context, [QaAnswerSpan(9, "abc")])
        windowing = QaWindowing(max_question=2, window=3, stride=2, max_answer=2)
        targets = training_targets(small_vocab, ex, windowing)
        assert [(t.start, t.end) for t in targets] == [(0, 0), (4, 5), (0, 0)]
        assert targets[1].packed.ids == [CLS_ID, 13, SEP_ID, 13, 14, 12, SEP_ID]




@pytest.mark.unit
class TestBestSpan:
    def test_best_sum_within_length(self):
        start = np.array([0.0, 5.0, 1.0])
        end = np.array([3.0, 0.0, 4.0])
        assert best_span(start, end, max_answer=2) == (1, 2, 9.0)
        assert best_span(start, end, max_answer=1) == (1, 1, 5.0)

    def test_end_never_before_start(self):
        i, j, score = best_span(np.array([0.0, 9.0]), np.array([9.0, 0.0]), max_answer=4)
        assert i <= j
        assert score == 9.0

    def test_long_span_excluded(self):
        i, j, score = best_span(np.array([10.0, 0.0, 0.0]), np.array([0.0, 0.0, 10.0]), max_answer=2)
        assert j - i < 2
        assert score == 10.0

    def test_no_positions(self):
        assert best_span(np.zeros(0), np.zeros(0), 4) is None


def _qa_model(cfg):
    params = build_encoder(cfg, seed=0)
    params.update(init_linear("qa.start", cfg.hidden_size, 1, 0))
    params.update(init_linear("qa.end", cfg.hidden_size, 1, 1))
    return TaskModel("qa", cfg, params, meta={"qa_windowing": dataclasses.asdict(QA_WINDOWING)})


@pytest.mark.unit
class TestQaReader:
    def test_prediction_is_a_context_substring(self, vocab, tiny_config):
        context = " ".join(["Continue lisinopril for hypertension."] * 12)
        pred = QaReader(_qa_model(tiny_config)).predict(vocab, "Why lisinopril?", context)
        assert not pred.is_empty
        assert pred.text == context[pred.start:pred.end]
        assert pred.start < pred.end

    def test_empty_context_gives_empty_answer(self, vocab, tiny_config):
        pred = QaReader(_qa_model(tiny_config)).predict(vocab, "Why?", "")
        assert pred.is_empty
        assert (pred.text, pred.start, pred.end) == ("", 0, 0)


@pytest.mark.unit
class TestFinetuneLoop:
    def test_losses_per_step(self, float64):
        params = {"w": Tensor(np.array([2.0]), requires_grad=True)}
        examples = [0.5, 0.5, 0.5]

        def loss_fn(p, batch, rng):
            return mse(p["w"] * 1.0, np.array([np.mean(batch)]))

        losses = finetune_loop(params, examples, loss_fn, _finetune_config(steps=7, batch_size=2, lr=0.1))
        assert len(losses) == 7
        assert losses[-1] < losses[0]

    def test_no_examples(self):
        with pytest.raises(ConfigError):
            finetune_loop({}, [], None, _finetune_config(), task="sts")


@pytest.mark.integration
class TestFinetuneTasks:
    def test_ner_unified_reproducible(self, vocab, tiny_config):
        examples = ner_examples(12, seed=0)
        first = finetune_ner(None, vocab, examples, _finetune_config(), model_cfg=tiny_config)
        second = finetune_ner(None, vocab, examples, _finetune_config(), model_cfg=tiny_config)
        words = examples[0].tokens
        spans, scores = first.predict(vocab, words)
        assert (spans, scores) == second.predict(vocab, words)
        assert len(scores) == len(words)
        assert all(0.0 < s <= 1.0 for s in scores)

    def test_ner_per_category_checkpoint(self, tmp_path, vocab, tiny_config):
        examples = ner_examples(12, seed=0)
        tagger = finetune_ner(
            None, vocab, examples, _finetune_config(steps=2, ner_mode=PER_CATEGORY), model_cfg=tiny_config
        )
        assert len(tagger.models) == len(tagger.categories) > 1
        path = str(tmp_path / "ner.ckpt")
        save_task_model(path, tagger.to_task_model())
        restored = NerTagger.from_task_model(load_task_model(path, "ner"))
        assert restored.mode == PER_CATEGORY
        assert restored.categories == tagger.categories
        words = examples[1].tokens
        expected_spans, expected_scores = tagger.predict(vocab, words)
        spans, scores = restored.predict(vocab, words)
        assert spans == expected_spans
        np.testing.assert_allclose(scores, expected_scores, rtol=1e-6)

    def test_relation_labels_include_no_relation(self, vocab, tiny_config):
        examples = re_examples(6, seed=0)
        clf = finetune_re(None, vocab, examples, _finetune_config(), model_cfg=tiny_config)
        assert NO_RELATION in clf.labels
        assert clf.labels == sorted(clf.labels)
        assert clf.model.params["re.classifier.weight"].shape == (5 * tiny_config.hidden_size, len(clf.labels))
        probs = clf.predict_proba(vocab, examples)
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(len(examples)), rtol=1e-5)
        assert set(clf.predict(vocab, examples)) <= set(clf.labels)

    def test_sts_predictions_are_clipped(self, vocab, tiny_config):
        examples = sts_examples(6, seed=0)
        scorer = finetune_sts(None, vocab, examples, _finetune_config(lr=0.05, steps=10), model_cfg=tiny_config)
        scores = scorer.predict(vocab, examples)
        assert len(scores) == len(examples)
        assert all(0.0 <= s <= 5.0 for s in scores)

    def test_nli_three_way(self, vocab, tiny_config):
        examples = nli_examples(6, seed=0)
        clf = finetune_nli(None, vocab, examples, _finetune_config(), model_cfg=tiny_config)
        assert clf.labels == ["entailment", "contradiction", "neutral"]
        assert clf.predict_proba(vocab, examples).shape == (6, 3)

    def test_qa_checkpoint_keeps_windowing(self, tmp_path, vocab, tiny_config):
        examples = qa_examples(4, seed=0)
        reader = finetune_qa(None, vocab, examples, _finetune_config(), QA_WINDOWING, model_cfg=tiny_config)
        path = str(tmp_path / "qa.ckpt")
        save_task_model(path, reader.model, seed=0)
        restored = QaReader(load_task_model(path, "qa"))
        assert restored.windowing == QA_WINDOWING
        ex = examples[0]
        pred = restored.predict(vocab, ex.question, ex.context)
        assert pred.text == ex.context[pred.start:pred.end]

    def test_finetune_from_pretrained_checkpoint(self, tmp_path, vocab, tiny_config):
        from clinical_lm.model import load_checkpoint

        path = str(tmp_path / "pretrained.bin")
        save_checkpoint(path, tiny_config, build_encoder(tiny_config, seed=9), {"kind": "pretrain"})
        scorer = finetune_sts(load_checkpoint(path), vocab, sts_examples(4), _finetune_config(steps=1))
        assert scorer.model.config == tiny_config


@pytest.mark.unit
class TestTaskCheckpoints:
    def test_wrong_task_or_kind(self, tmp_path, tiny_config):
        path = str(tmp_path / "sts.ckpt")
        params = build_encoder(tiny_config)
        save_task_model(path, TaskModel("sts", tiny_config, params))
        assert load_task_model(path, "sts").task == "sts"
        with pytest.raises(ConfigError):
            load_task_model(path, "nli")
        pretrained = str(tmp_path / "pretrained.bin")
        save_checkpoint(pretrained, tiny_config, params, {"kind": "pretrain"})
        with pytest.raises(ConfigError):
            load_task_model(pretrained)


@pytest.mark.unit
class TestDatasets:
    def _write(self, tmp_path, rows):
        path = tmp_path / "data.jsonl"
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        return str(path)

    def test_reads_rows(self, tmp_path):
        path = self._write(tmp_path, [{"a": "x", "b": "y", "score": 4.5}])
        (ex,) = read_task_examples("sts", path)
        assert (ex.a, ex.b, ex.score) == ("x", "y", 4.5)

    @pytest.mark.parametrize(
        "task,row",
        [
            ("ner", {"tokens": ["a", "b"], "labels": ["O"]}),
            ("ner", {"tokens": ["a"], "labels": ["DRUG"]}),
            ("re", {"s1": "ab", "s2": "ab", "c1": [0, 5], "c2": [0, 1], "label": "x"}),
            ("sts", {"a": "x", "b": "y", "score": 7}),
            ("nli", {"premise": "x", "hypothesis": "y", "label": "maybe"}),
            ("qa", {"question": "q", "context": "abc", "answers": [{"start": 1, "text": "c"}]}),
            ("qa", {"question": "q", "answers": []}),
        ],
    )
    def test_schema_errors(self, tmp_path, task, row):
        with pytest.raises(SchemaError):
            read_task_examples(task, self._write(tmp_path, [row]))


@pytest.mark.unit
class TestNerLoss:
    def test_loss_sums_over_labelled_tokens(self, float64, vocab, tiny_config):
        params = build_encoder(tiny_config, seed=2)
        params.update(init_linear("ner.classifier", tiny_config.hidden_size, 3, 2))
        index = {"O": 0, "B-drug": 1, "I-drug": 2}
        short = encode_ner(vocab, ["aspirin", "daily"], 64, ["B-drug", "O"], index)
        long = encode_ner(vocab, ["no", "rash", "after", "amoxicillin", "was", "given"], 64,
                          ["O", "O", "O", "B-drug", "O", "O"], index)
        both = token_loss(params, tiny_config, [short, long]).item()
        alone = token_loss(params, tiny_config, [short]).item() + token_loss(params, tiny_config, [long]).item()
        assert both == pytest.approx(alone, rel=1e-9)


def _overfit_config(tiny_config):
    return dataclasses.replace(tiny_config, max_seq_len=128)


def _full_batch(n, **overrides):
    return _finetune_config(steps=1200, batch_size=n, lr=3e-3, **overrides)


@pytest.mark.integration
class TestOverfit:
    """Each head memorizes a handful of training examples."""

    def test_ner_span_f1(self, vocab, tiny_config):
        examples = ner_examples(8, seed=0)
        tagger = finetune_ner(None, vocab, examples, _full_batch(8), model_cfg=_overfit_config(tiny_config))
        gold, pred = [], []
        for i, ex in enumerate(examples):
            gold += [(i, s.start, s.end, s.category) for s in bio_decode(ex.labels)]
            spans, _ = tagger.predict(vocab, ex.tokens)
            pred += [(i, s.start, s.end, s.category) for s in spans]
        assert gold
        assert span_prf(gold, pred).f1 >= 0.99

    def test_relation_f1(self, vocab, tiny_config):
        examples = re_examples(8, seed=0)
        clf = finetune_re(None, vocab, examples, _full_batch(8), model_cfg=_overfit_config(tiny_config))
        gold = [ex.label for ex in examples]
        assert set(gold) - {NO_RELATION}
        assert label_prf(gold, clf.predict(vocab, examples)).f1 >= 0.99

    def test_sts_pearson(self, vocab, tiny_config):
        examples = sts_examples(8, seed=0)
        scorer = finetune_sts(None, vocab, examples, _full_batch(8), model_cfg=_overfit_config(tiny_config))
        assert pearson([ex.score for ex in examples], scorer.predict(vocab, examples)) >= 0.99

    def test_nli_accuracy(self, vocab, tiny_config):
        examples = nli_examples(6, seed=0)
        clf = finetune_nli(None, vocab, examples, _full_batch(6), model_cfg=_overfit_config(tiny_config))
        assert accuracy([ex.label for ex in examples], clf.predict(vocab, examples)) == 1.0

    def test_qa_exact_match(self, vocab, tiny_config):
        examples = qa_examples(4, seed=0, max_fillers=0)
        windowing = QaWindowing(max_question=16, window=100, stride=90, max_answer=16)
        reader = finetune_qa(None, vocab, examples, _full_batch(4), windowing, model_cfg=_overfit_config(tiny_config))
        preds = [reader.predict(vocab, ex.question, ex.context).text for ex in examples]
        scores = qa_scores([[a.text for a in ex.answers] for ex in examples], preds)
        assert scores["exact_match"] >= 0.95
