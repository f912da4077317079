"""
Tests for BPE training, encode/decode and the vocabulary file format.
"""
import pytest

from clinical_lm.constants import CLS_TOKEN, END_OF_WORD, SEP_TOKEN, SPECIAL_TOKENS
from clinical_lm.errors import VocabularyError
from clinical_lm.fixtures import generate_pretraining_corpus
from clinical_lm.tokenizer import decode, encode, load_vocabulary, save_vocabulary, train_bpe
from clinical_lm.tokenizer.bpe import dumps_vocabulary, loads_vocabulary

# alphabet a, b, b</w>, c</w> -> ids 9..12 after the nine specials
SMALL_CORPUS = ["ab ab ab", "abc"]


@pytest.fixture
def small_vocab():
    return train_bpe(SMALL_CORPUS, vocab_size=15)


@pytest.fixture(scope="module")
def corpus_lines():
    docs = generate_pretraining_corpus(120, sentences_per_document=8, seed=21)
    return [line for doc in docs for line in doc.text.split("\n\n")]


@pytest.mark.unit
class TestTrainBpe:
    def test_merges_most_frequent_pair_first(self, small_vocab):
        assert small_vocab.merges == [("a", "b" + END_OF_WORD), ("a", "b")]
        assert len(small_vocab) == 15

    def test_id_layout(self, small_vocab):
        assert small_vocab.id_to_token[:len(SPECIAL_TOKENS)] == list(SPECIAL_TOKENS)
        assert small_vocab.alphabet == ("a", "b", "b</w>", "c</w>")
        assert small_vocab.token_to_id["a"] == 9
        assert small_vocab.token_to_id["ab</w>"] == 13
        assert small_vocab.token_to_id["ab"] == 14
        assert small_vocab.special_ids == frozenset(range(len(SPECIAL_TOKENS)))

    def test_word_final_merge(self):
        vocab = train_bpe(["abab abab"], vocab_size=len(SPECIAL_TOKENS) + 3 + 1)
        assert vocab.merges == [("a", "b")]
        assert encode(vocab, "abab").tokens == ["ab", "a", "b</w>"]

    def test_equal_counts_merge_smaller_pair_first(self):
        vocab = train_bpe(["xy yz"], vocab_size=len(SPECIAL_TOKENS) + 4 + 1)
        assert vocab.merges == [("x", "y</w>")]

    def test_stops_when_pairs_run_out(self):
        vocab = train_bpe(SMALL_CORPUS, vocab_size=40)
        assert vocab.merges[-1] == ("ab", "c</w>")
        assert len(vocab) == 16

    def test_below_minimum_size_raises(self):
        with pytest.raises(VocabularyError, match="13"):
            train_bpe(SMALL_CORPUS, vocab_size=12)

    def test_zero_merges_is_character_level(self):
        vocab = train_bpe(SMALL_CORPUS, vocab_size=13)
        assert vocab.merges == []
        assert encode(vocab, "abc").tokens == ["a", "b", "c</w>"]

    def test_special_pretokens_are_not_counted(self):
        vocab = train_bpe(["[S1] ab [E1]"], vocab_size=30)
        assert "S" not in vocab.alphabet
        assert "[" not in vocab.alphabet

    def test_deterministic(self, pretraining_docs):
        texts = [doc.text for doc in pretraining_docs]
        assert train_bpe(texts, 200) == train_bpe(texts, 200)

    def test_truncate_keeps_merge_prefix(self, small_vocab):
        smaller = small_vocab.truncate(1)
        assert smaller.merges == [("a", "b</w>")]
        assert len(smaller) == 14

    @pytest.mark.parametrize("divisor", [2, 4])
    def test_truncation_equals_retraining(self, corpus_lines, divisor):
        full = train_bpe(corpus_lines, vocab_size=1600)
        size = len(full) // divisor
        minimum = len(full.alphabet) + len(SPECIAL_TOKENS)
        assert size > minimum
        retrained = train_bpe(corpus_lines, vocab_size=size)
        assert len(retrained) == size
        assert full.truncate(size - minimum) == retrained


@pytest.mark.unit
class TestEncodeDecode:
    def test_encode_ids_and_offsets(self, small_vocab):
        enc = encode(small_vocab, "abc ab")
        assert enc.ids == [14, 12, 13]
        assert enc.offsets == [(0, 2), (2, 3), (4, 6)]

    def test_explicit_whitespace_runs(self):
        vocab = train_bpe(["ab  ab\nab "], vocab_size=20)
        enc = encode(vocab, "ab\nab  ab ")
        assert [tok.endswith(END_OF_WORD) for tok in enc.tokens if not tok.isspace()] == [True] * 3
        assert "".join(tok for tok in enc.tokens if tok.isspace()) == "\n   "
        assert decode(vocab, enc.ids) == "ab\nab  ab "

    def test_empty_text(self, small_vocab):
        assert encode(small_vocab, "").ids == []
        assert decode(small_vocab, []) == ""

    def test_skip_whitespace(self, small_vocab):
        assert encode(small_vocab, "abc  ab", skip_whitespace=True).ids == [14, 12, 13]

    def test_unknown_symbol_maps_to_unk(self, small_vocab):
        assert encode(small_vocab, "abz").ids == [14, 1]

    def test_special_pretoken_maps_to_its_id(self, small_vocab):
        assert encode(small_vocab, "[S1] ab [E1]").ids == [5, 13, 6]
        assert decode(small_vocab, [5, 13, 6]) == "[S1] ab [E1]"

    def test_round_trip_over_alphabet(self, vocab):
        text = "The patient was started on aspirin 81 mg daily.\n\nContinue insulin."
        assert decode(vocab, encode(vocab, text).ids) == text

    def test_offsets_slice_the_source(self, vocab):
        text = "Metformin was discontinued after the patient developed nausea."
        enc = encode(vocab, text)
        pieces = [text[lo:hi] for lo, hi in enc.offsets]
        assert [tok.replace(END_OF_WORD, "") for tok in enc.tokens] == pieces
        starts = [lo for lo, _ in enc.offsets]
        assert starts == sorted(starts)

    def test_decode_spaces_specials_and_drops_pad(self, small_vocab):
        ids = [small_vocab.special_id(CLS_TOKEN), 13, small_vocab.special_id(SEP_TOKEN), 0, 0]
        assert decode(small_vocab, ids) == "[CLS] ab [SEP]"

    def test_decode_out_of_range(self, small_vocab):
        with pytest.raises(VocabularyError):
            decode(small_vocab, [len(small_vocab)])


@pytest.mark.integration
class TestLargeCorpus:
    def test_ten_thousand_line_round_trip(self):
        docs = generate_pretraining_corpus(5000, sentences_per_document=8, seed=17)
        lines = [line for doc in docs for line in doc.text.split("\n\n")]
        lines = [line if i % 3 else line.replace(" ", "  ", 1) + "\n" for i, line in enumerate(lines)]
        assert len(lines) == 10000
        vocab = train_bpe(lines, vocab_size=800)
        failures = [line for line in lines if decode(vocab, encode(vocab, line).ids) != line]
        assert failures == []


@pytest.mark.unit
class TestVocabularyFile:
    def test_save_and_load(self, tmp_path, vocab):
        path = str(tmp_path / "vocab.txt")
        save_vocabulary(vocab, path)
        assert load_vocabulary(path) == vocab

    def test_training_is_byte_identical_across_runs(self, tmp_path, corpus_lines):
        contents = []
        for run in range(3):
            path = tmp_path / f"vocab-{run}.txt"
            save_vocabulary(train_bpe(corpus_lines, vocab_size=500), str(path))
            contents.append(path.read_bytes())
        assert contents[0] == contents[1] == contents[2]

    def test_whitespace_symbols_survive(self, tmp_path):
        vocab = train_bpe(["a\tb\n  c"], vocab_size=20)
        path = str(tmp_path / "vocab.txt")
        save_vocabulary(vocab, path)
        loaded = load_vocabulary(path)
        assert "\t" in loaded.alphabet
        assert loaded.alphabet == vocab.alphabet
        assert loaded.merges == vocab.merges

    def test_bad_header(self):
        with pytest.raises(VocabularyError):
            loads_vocabulary("wordpiece 10\n")

    def test_declared_size_must_match(self, small_vocab):
        text = dumps_vocabulary(small_vocab).replace("bpe-v1 15", "bpe-v1 16", 1)
        with pytest.raises(VocabularyError):
            loads_vocabulary(text)
