"""Low-rank adapters: zero-init identity, accounting, merge equivalence,
freeze contract."""

import numpy as np
import pytest

from speechlm.decoder import CausalMask, DecoderConfig, DecoderLM
from speechlm.errors import ConfigError
from speechlm.lora import LoraConfig, inject, merge, param_count
from speechlm.tensor import Tensor, no_grad
from speechlm.trainer import AdamW, apply_freeze_plan


def make_model(seed=0):
    cfg = DecoderConfig(n_layers=2, n_heads=2, model_dim=16, ffn_dim=32, vocab_size=11)
    return DecoderLM(cfg, np.random.default_rng(seed))


class Wrapper:
    """Give the LM an `lm.` prefix like the composite models do."""

    def __init__(self, lm):
        from speechlm.nn import Module

        class Root(Module):
            def __init__(self):
                super().__init__()
                self.lm = lm

        self.root = Root()


def test_zero_init_identity_bit_for_bit():
    lm = make_model()
    root = Wrapper(lm).root
    emb = Tensor(np.random.default_rng(1).normal(size=(6, 16)).astype(np.float32))
    with no_grad():
        before = lm.forward(emb, CausalMask()).data.copy()
    inject(root, LoraConfig(rank=2), np.random.default_rng(2))
    with no_grad():
        after = lm.forward(emb, CausalMask()).data
    assert np.array_equal(before, after)


def test_adapter_count_four_targets_per_layer():
    lm = make_model()
    root = Wrapper(lm).root
    bank = inject(root, LoraConfig(rank=2), np.random.default_rng(0))
    assert len(bank) == 4 * 2  # targets x layers
    names = [n for n, _ in root.named_parameters() if n.startswith("lora.")]
    assert len(names) == 4 * 2 * 2  # w_a and w_b each
    assert "lora.lm.layers.0.attn.wq.w_a" in names


def test_toy_param_count_arithmetic():
    assert param_count(LoraConfig(rank=2), n_layers=4, d=128, k=128) == 8192


def test_paper_scale_param_count():
    assert param_count(LoraConfig(rank=2), n_layers=32, d=4096, k=4096) == 2_097_152


def test_rank_validation():
    with pytest.raises(ConfigError):
        LoraConfig(rank=0).validate()
    with pytest.raises(ConfigError):
        param_count(LoraConfig(rank=-1), 1, 8, 8)
    lm = make_model()
    root = Wrapper(lm).root
    with pytest.raises(ConfigError):
        # rank must satisfy rank <= min(d, k) / 4 = 4 for 16x16 targets
        inject(root, LoraConfig(rank=5), np.random.default_rng(0))


def test_doubling_rank_doubles_count():
    one = param_count(LoraConfig(rank=1), 3, 64, 64)
    two = param_count(LoraConfig(rank=2), 3, 64, 64)
    assert two == 2 * one


def test_merge_equivalence_and_reinject():
    lm = make_model(seed=3)
    root = Wrapper(lm).root
    bank = inject(root, LoraConfig(rank=2), np.random.default_rng(4))
    rng = np.random.default_rng(5)
    for _, adapter in bank.items():
        adapter.w_b.data = rng.normal(0, 0.1, size=adapter.w_b.data.shape).astype(np.float32)
    emb = Tensor(rng.normal(size=(5, 16)).astype(np.float32))
    with no_grad():
        adapted = lm.forward(emb, CausalMask()).data.copy()
    merge(root)
    with no_grad():
        merged = lm.forward(emb, CausalMask()).data
    np.testing.assert_allclose(merged, adapted, atol=1e-5)
    # merge W_b=0 adapters back in: forward unchanged
    inject(root, LoraConfig(rank=2), np.random.default_rng(6))
    with no_grad():
        reinjected = lm.forward(emb, CausalMask()).data
    assert np.array_equal(reinjected, merged)


def test_merge_with_zero_b_is_noop_on_weights():
    lm = make_model(seed=7)
    root = Wrapper(lm).root
    inject(root, LoraConfig(rank=2), np.random.default_rng(8))
    w_before = lm.layer_list[0].attn.wq.w.data.copy()
    merge(root)
    assert np.array_equal(lm.layer_list[0].attn.wq.w.data, w_before)


def test_freeze_contract_after_adapter_training():
    lm = make_model(seed=9)
    root = Wrapper(lm).root
    inject(root, LoraConfig(rank=2), np.random.default_rng(10))
    apply_freeze_plan(root, ("lora.",))
    frozen_before = {
        name: p.data.copy() for name, p in root.named_parameters() if p.frozen
    }
    opt = AdamW(list(root.trainable_parameters()), weight_decay=0.01)
    rng = np.random.default_rng(11)
    for _ in range(5):
        root.zero_grad()
        emb = Tensor(rng.normal(size=(4, 16)).astype(np.float32))
        from speechlm.ops import cross_entropy

        logits = lm.forward(emb, CausalMask())
        loss = cross_entropy(logits, rng.integers(0, 11, size=4))
        loss.backward()
        opt.step(1e-2)
    changed = [n for n, p in root.named_parameters()
               if not p.frozen and not np.array_equal(p.data, 0 * p.data)]
    assert any(n.endswith("w_b") for n in changed)
    for name, p in root.named_parameters():
        if p.frozen:
            assert np.array_equal(p.data, frozen_before[name]), name


def test_adapter_serializes_under_lora_prefix(tmp_path):
    from speechlm.checkpoint import load_checkpoint, model_entries, save_checkpoint

    lm = make_model(seed=12)
    root = Wrapper(lm).root
    inject(root, LoraConfig(rank=2), np.random.default_rng(13))
    save_checkpoint(model_entries(root), {}, tmp_path / "m.ckpt")
    entries, _ = load_checkpoint(tmp_path / "m.ckpt")
    lora_names = [n for n in entries if n.startswith("lora.")]
    assert len(lora_names) == 16
