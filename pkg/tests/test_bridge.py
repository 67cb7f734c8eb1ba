"""Bridge components: prompts, audio encoder, subsamplers, prefix assembly."""

import numpy as np
import pytest

from speechlm.bridge import (
    EVAL_PROMPT,
    TRAIN_PROMPTS,
    AudioEncoder,
    AudioEncoderConfig,
    ConvSubsampler,
    ScratchFrontend,
    assemble_prefix,
    encode_audio,
    sample_prompt,
    tokenize_prompt,
)
from speechlm.decoder import BOS_ID, EOS_ID, CausalMask, PrefixNonCausalMask
from speechlm.errors import ConfigError, ContractError
from speechlm.nn import Embedding
from speechlm.tensor import Tensor, no_grad


def test_eval_prompt_is_fixed():
    rng = np.random.default_rng(0)
    for _ in range(50):
        prompt = sample_prompt(rng, language_id=1, training=False)
        assert prompt.text == EVAL_PROMPT == "translate the audio into English"


def test_training_prompts_all_observed():
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(10_000):
        seen.add(sample_prompt(rng, 0, training=True).text)
    assert seen == set(TRAIN_PROMPTS)
    assert len(TRAIN_PROMPTS) >= 4


def test_source_slot_filled_with_language_token():
    a = tokenize_prompt("translate [source] audio into English", 0)
    b = tokenize_prompt("translate [source] audio into English", 1)
    assert a.token_ids != b.token_ids
    diff = [i for i, (x, y) in enumerate(zip(a.token_ids, b.token_ids)) if x != y]
    assert len(diff) == 1  # only the language name token differs


def test_prompt_ids_distinct_from_content_and_specials():
    for text in TRAIN_PROMPTS:
        ids = tokenize_prompt(text, 0).token_ids
        assert all(i >= 35 for i in ids)


def test_audio_encoder_shapes_and_dim():
    rng = np.random.default_rng(2)
    enc = AudioEncoder(AudioEncoderConfig(input_dim=8, n_layers=1, n_heads=2,
                                          ffn_dim=16, output_dim=24), rng)
    x = Tensor(rng.normal(size=(5, 8)).astype(np.float32))
    with no_grad():
        out = encode_audio(enc, x)
    assert out.shape == (5, 24)


def test_audio_encoder_positionally_sensitive():
    rng = np.random.default_rng(3)
    enc = AudioEncoder(AudioEncoderConfig(input_dim=8, n_layers=1, n_heads=2,
                                          ffn_dim=16, output_dim=8), rng)
    x = rng.normal(size=(6, 8)).astype(np.float32)
    with no_grad():
        a = enc(Tensor(x)).data
        b = enc(Tensor(x[::-1].copy())).data
    assert np.abs(a - b[::-1]).max() > 1e-4


def test_audio_encoder_rejects_empty():
    rng = np.random.default_rng(4)
    enc = AudioEncoder(AudioEncoderConfig(input_dim=8, n_layers=1, n_heads=2,
                                          ffn_dim=16, output_dim=8), rng)
    with pytest.raises(ContractError):
        enc(Tensor(np.zeros((0, 8), dtype=np.float32)))


def test_conv_subsampler_32x_reduction():
    rng = np.random.default_rng(5)
    sub = ConvSubsampler(feature_dim=16, out_dim=24, rng=rng)
    assert sub.jointly_trained is True
    with no_grad():
        for t, expect in [(64, 2), (65, 3), (32, 1), (1, 1), (200, 7)]:
            out = sub(rng.normal(size=(t, 16)).astype(np.float32))
            assert out.shape == (expect, 24), t
            assert ConvSubsampler.out_length(t) == expect


def test_scratch_frontend_four_x_reduction():
    rng = np.random.default_rng(6)
    fe = ScratchFrontend(feature_dim=16, model_dim=24, rng=rng)
    with no_grad():
        out = fe(rng.normal(size=(16, 16)).astype(np.float32))
    assert out.shape == (4, 24)


def _embedding(rng, vocab=48, dim=12):
    return Embedding(vocab, dim, rng)


def test_assemble_prefix_index_arithmetic():
    rng = np.random.default_rng(7)
    embed = _embedding(rng)
    audio = Tensor(rng.normal(size=(5, 12)).astype(np.float32))
    target = [10, 11, 12, EOS_ID]  # N = 4 (EOS included)
    asm = assemble_prefix(embed, [35, 36, 37], audio, target, "causal")
    assert asm.embeddings.shape == (3 + 5 + 4, 12)  # P + A + N
    assert asm.loss_mask.sum() == 4
    assert list(np.nonzero(asm.loss_mask)[0]) == [8, 9, 10, 11]
    assert asm.labels[8:].tolist() == target
    assert asm.prefix_len == 8
    assert isinstance(asm.mask_spec, CausalMask)


def test_assemble_prefix_mask_variant():
    rng = np.random.default_rng(8)
    embed = _embedding(rng)
    audio = Tensor(rng.normal(size=(5, 12)).astype(np.float32))
    asm = assemble_prefix(embed, [35, 36, 37], audio, [10, EOS_ID], "prefix")
    assert isinstance(asm.mask_spec, PrefixNonCausalMask)
    assert asm.mask_spec.prefix_len == 8


def test_assemble_prefix_empty_prompt():
    rng = np.random.default_rng(9)
    embed = _embedding(rng)
    audio = Tensor(rng.normal(size=(4, 12)).astype(np.float32))
    target = [10, 11, EOS_ID]
    asm = assemble_prefix(embed, [], audio, target, "causal")
    assert asm.embeddings.shape[0] == 4 + len(target)  # A + N
    assert asm.prefix_len == 4


def test_assemble_prefix_bos_inserted():
    rng = np.random.default_rng(10)
    embed = _embedding(rng)
    audio = Tensor(rng.normal(size=(2, 12)).astype(np.float32))
    asm = assemble_prefix(embed, [35], audio, [10, EOS_ID], "causal")
    bos_row = embed(np.array([BOS_ID])).data[0]
    np.testing.assert_array_equal(asm.embeddings.data[3], bos_row)


def test_assemble_prefix_no_bos_toggle():
    rng = np.random.default_rng(11)
    embed = _embedding(rng)
    audio = Tensor(rng.normal(size=(3, 12)).astype(np.float32))
    target = [10, 11, EOS_ID]
    asm = assemble_prefix(embed, [35], audio, target, "causal", use_bos=False)
    assert asm.embeddings.shape[0] == 1 + 3 + len(target) - 1
    assert asm.labels[1 + 3 - 1] == 10  # first target predicted at last audio row


def test_assemble_prefix_contract_errors():
    rng = np.random.default_rng(12)
    embed = _embedding(rng)
    audio = Tensor(rng.normal(size=(3, 12)).astype(np.float32))
    with pytest.raises(ContractError, match="EOS"):
        assemble_prefix(embed, [35], audio, [10, 11], "causal")
    with pytest.raises(ContractError, match="audio"):
        assemble_prefix(embed, [35], Tensor(np.zeros((0, 12), dtype=np.float32)),
                        [10, EOS_ID], "causal")
    with pytest.raises(ConfigError):
        assemble_prefix(embed, [35], audio, [10, EOS_ID], "diagonal")


def test_loss_mask_shape_invariant_to_prompt():
    rng = np.random.default_rng(13)
    embed = _embedding(rng)
    audio = Tensor(rng.normal(size=(4, 12)).astype(np.float32))
    target = [10, 11, 12, EOS_ID]
    a = assemble_prefix(embed, tokenize_prompt(TRAIN_PROMPTS[0], 0).token_ids,
                        audio, target, "causal")
    b = assemble_prefix(embed, tokenize_prompt(TRAIN_PROMPTS[1], 0).token_ids,
                        audio, target, "causal")
    assert a.loss_mask.sum() == b.loss_mask.sum() == len(target)
