# tests/test_text_encoder.py
import numpy as np
import pytest

from app.errors import ShapeError
from app.tensor import RngStream, Tensor, grad_check, grad_check_parameter
from app.text_encoder import (
    CLS,
    PAD,
    SEP,
    UNK,
    TextEncoder,
    TextEncoderConfig,
    TokenSeq,
    build_vocab,
    encode_text,
    patient_text,
    project_text,
    split_words,
    tokenize,
    tokenize_batch,
)

MICRO = TextEncoderConfig(max_len=6, width=4, blocks=1, ffn=8, pooled_dim=4, feature_dim=3)


@pytest.fixture
def vocab():
    return build_vocab(["aspirin 100mg daily", "metoprolol 12.5mg twice daily", "aspirin after surgery"])


@pytest.fixture
def micro_encoder(vocab):
    return TextEncoder(MICRO, len(vocab), RngStream(21)).eval()


@pytest.mark.unit
class TestVocab:
    """Word vocabulary construction"""

    def test_contains_words_and_specials(self):
        vocab = build_vocab(["a b a"])
        assert vocab.tokens[:4] == ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
        assert "a" in vocab and "b" in vocab
        assert len(vocab) == 6

    def test_unseen_word_is_unk(self):
        assert build_vocab(["a b"]).id_of("zebra") == UNK

    def test_cap_keeps_most_frequent(self):
        vocab = build_vocab(["a b a"], max_size=1)
        assert "a" in vocab and "b" not in vocab

    def test_ties_break_alphabetically(self):
        assert build_vocab(["beta alpha"]).tokens[4:] == ("alpha", "beta")

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_doses_stay_whole(self):
        assert split_words("Metoprolol 12.5mg, post-op.") == ["metoprolol", "12.5mg", "post-op"]


@pytest.mark.unit
class TestTokenize:
    """Fixed-length ids with an attention mask"""

    def test_empty_text(self, vocab):
        seq = tokenize("", vocab, 8)
        assert seq.ids.tolist() == [CLS, SEP] + [PAD] * 6
        assert seq.mask.tolist() == [1, 1, 0, 0, 0, 0, 0, 0]

    def test_three_words(self, vocab):
        assert tokenize("aspirin daily after", vocab, 8).mask.sum() == 5

    def test_truncation_keeps_sep(self, vocab):
        seq = tokenize(" ".join(["aspirin"] * 100), vocab, 8)
        assert seq.mask.sum() == 8
        assert seq.ids[-1] == SEP

    def test_mask_matches_padding_on_random_strings(self, vocab, np_rng):
        """Fuzzed text always yields mask == (ids != PAD)"""
        alphabet = np.array(list("ab1.- xyz"))
        for _ in range(300):
            text = "".join(np_rng.choice(alphabet, int(np_rng.integers(0, 40))))
            seq = tokenize(text, vocab, int(np_rng.integers(2, 12)))
            assert len(seq.ids) == seq.max_len
            np.testing.assert_array_equal(seq.mask == 1, seq.ids != PAD)

    def test_batch_shapes(self, vocab):
        ids, mask = tokenize_batch(["aspirin", "aspirin daily"], vocab, 5)
        assert ids.shape == mask.shape == (2, 5)

    def test_bad_token_seq(self):
        with pytest.raises(ValueError):
            TokenSeq(np.array([CLS, PAD]), np.array([1, 1]))
        with pytest.raises(ShapeError):
            TokenSeq(np.array([CLS, SEP]), np.array([1, 1, 0]))

    def test_max_len_too_small(self, vocab):
        with pytest.raises(ValueError):
            tokenize("a", vocab, 1)
        with pytest.raises(ValueError):
            TextEncoderConfig(max_len=1)

    def test_patient_text_in_stage_order(self):
        text = patient_text([("admission", "aspirin 100mg"), ("discharge", "statin")])
        assert text == "admission: aspirin 100mg. discharge: statin."


@pytest.mark.unit
class TestTextEncoder:
    """Masked encoder and 256-d projection"""

    def test_pad_content_is_ignored(self, vocab, micro_encoder, np_rng):
        """Any id at a masked position leaves the pooled vector unchanged"""
        seq = tokenize("aspirin daily", vocab, MICRO.max_len)
        reference = encode_text(micro_encoder, seq).data
        padded = np.flatnonzero(seq.mask == 0)
        for _ in range(20):
            ids = seq.ids.copy()
            ids[padded] = np_rng.integers(0, len(vocab), len(padded))
            np.testing.assert_allclose(micro_encoder(ids, seq.mask).data[0], reference, atol=1e-12)

    def test_identical_texts_identical_vectors(self, vocab, micro_encoder):
        first = encode_text(micro_encoder, tokenize("aspirin daily", vocab, MICRO.max_len))
        second = encode_text(micro_encoder, tokenize("aspirin daily", vocab, MICRO.max_len))
        assert first.shape == (MICRO.pooled_dim,)
        np.testing.assert_array_equal(first.data, second.data)

    def test_single_real_token_equals_its_own_stack(self, micro_encoder, np_rng):
        """With one unmasked position the pooled vector ignores every other token"""
        x = np_rng.normal(size=(1, MICRO.max_len, MICRO.width))
        for j in range(MICRO.max_len):
            mask = np.zeros((1, MICRO.max_len))
            mask[0, j] = 1
            alone = micro_encoder.encode_embeddings(x[:, j : j + 1], np.ones((1, 1)))
            np.testing.assert_allclose(micro_encoder.encode_embeddings(x, mask).data, alone.data, atol=1e-12)

    def test_gradients_through_embeddings(self, micro_encoder, np_rng):
        mask = np.array([[1, 1, 1, 1, 0, 0]])
        weights = np_rng.normal(size=(1, MICRO.pooled_dim))
        x = np_rng.normal(size=(1, MICRO.max_len, MICRO.width))
        assert grad_check(lambda t: (micro_encoder.encode_embeddings(t, mask) * weights).sum(), x, step=1e-5) < 1e-4

    def test_gradients_into_token_embeddings(self, vocab, micro_encoder, np_rng):
        seq = tokenize("aspirin daily after", vocab, MICRO.max_len)
        weights = np_rng.normal(size=(1, MICRO.pooled_dim))
        loss = lambda: (micro_encoder(seq.ids, seq.mask) * weights).sum()
        assert grad_check_parameter(loss, micro_encoder.token_embedding, step=1e-5) < 1e-4

    def test_pooler_maps_to_pooled_dim(self, vocab):
        encoder = TextEncoder(TextEncoderConfig(max_len=6, width=4, blocks=1, pooled_dim=10), len(vocab), RngStream(2))
        assert encoder.pooler is not None
        assert encode_text(encoder, tokenize("aspirin", vocab, 6)).shape == (10,)

    def test_rejects_bad_inputs(self, vocab, micro_encoder):
        with pytest.raises(ShapeError):
            micro_encoder(np.full(5, CLS), np.ones(5))
        with pytest.raises(ValueError):
            micro_encoder(np.full(6, len(vocab)), np.ones(6))
        with pytest.raises(ValueError):
            micro_encoder(np.full(6, PAD), np.zeros(6))

    def test_multi_head_encoder(self, vocab):
        config = TextEncoderConfig(max_len=6, width=4, blocks=1, heads=2, pooled_dim=4)
        encoder = TextEncoder(config, len(vocab), RngStream(5))
        seq = tokenize("aspirin daily", vocab, 6)
        assert encode_text(encoder, seq).shape == (4,)

    def test_dropout_only_while_training(self, vocab):
        config = MICRO.model_copy(update={"dropout": 0.5})
        encoder = TextEncoder(config, len(vocab), RngStream(8)).train()
        seq = tokenize("aspirin 100mg daily", vocab, config.max_len)
        assert not np.array_equal(encode_text(encoder, seq).data, encode_text(encoder, seq).data)
        encoder.eval()
        np.testing.assert_array_equal(encode_text(encoder, seq).data, encode_text(encoder, seq).data)

    def test_dropout_range(self):
        with pytest.raises(ValueError):
            TextEncoderConfig(dropout=1.0)


@pytest.mark.unit
class TestProjection:
    """768 -> 256 linear map, exercised at micro width"""

    def test_zero_maps_to_zero(self, micro_encoder):
        np.testing.assert_array_equal(project_text(micro_encoder, np.zeros(MICRO.pooled_dim)).data, 0.0)

    def test_linear_with_zero_bias(self, micro_encoder, np_rng):
        a, b = np_rng.normal(size=MICRO.pooled_dim), np_rng.normal(size=MICRO.pooled_dim)
        np.testing.assert_allclose(
            project_text(micro_encoder, a + b).data,
            project_text(micro_encoder, a).data + project_text(micro_encoder, b).data,
            atol=1e-12,
        )

    def test_default_output_is_256(self, vocab):
        encoder = TextEncoder(TextEncoderConfig(max_len=6, width=4, blocks=1, pooled_dim=8), len(vocab), RngStream(1))
        assert project_text(encoder, Tensor(np.ones(8))).shape == (256,)

    def test_wrong_width(self, micro_encoder):
        with pytest.raises(ShapeError):
            project_text(micro_encoder, np.zeros(MICRO.pooled_dim + 1))
