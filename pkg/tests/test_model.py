"""Split-plan extraction, LoRA injection, and assembly invariants."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from offsite_fl.errors import ConfigError, InputError
from offsite_fl.model import (LoraSet, ModelConfig, SplitPlan, TransformerStack,
                              assemble, emulator_activations, extract,
                              extract_both_ends, inject_lora, reconstruct)

TINY = ModelConfig(n_layers=6, d_model=16, n_heads=2, d_ff=48, vocab_size=64,
                   max_seq_len=32, rng_seed=7)


# ---------------------------------------------------------------------------
# extraction


def test_extract_worked_example_n32():
    plan = extract(32, 2, 0.5)
    assert plan.emulator_indices == (0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 22,
                                     24, 26, 29)
    assert plan.adapter_indices == (30, 31)
    assert plan.noncompressed_indices == tuple(range(30))
    assert plan.keep_ratio == Fraction(1, 2)


def test_extract_layer_counts_n32():
    # (adapter, keep) -> emulator layer count
    cases = {(4, "4/5"): 22, (2, "4/5"): 24, (4, "1/2"): 14, (2, "1/2"): 15}
    for (s, keep), want in cases.items():
        assert len(extract(32, s, keep).emulator_indices) == want


def test_extract_keep_all_is_identity():
    plan = extract(8, 2, 1)
    assert plan.emulator_indices == tuple(range(6))
    assert plan.emulator_indices == plan.noncompressed_indices


def test_extract_rational_vs_float_keep_ratio_agree():
    assert extract(32, 2, 0.8) == extract(32, 2, "4/5") == extract(32, 2, Fraction(4, 5))


def test_extract_validation():
    with pytest.raises(ConfigError):
        extract(8, 7, 0.5)  # adapter leaves less than 2 block layers
    with pytest.raises(ConfigError):
        extract(8, 0, 0.5)
    with pytest.raises(ConfigError):
        extract(8, 2, 0.0)
    with pytest.raises(ConfigError):
        extract(8, 2, 1.5)
    with pytest.raises(ConfigError):
        extract(8, 2, 0.2)  # would keep only 1 of 6 layers


def test_extract_both_ends_splits_adapter():
    plan = extract_both_ends(8, 4, 1)
    assert plan.adapter_indices == (0, 1, 6, 7)
    assert plan.noncompressed_indices == (2, 3, 4, 5)
    assert plan.emulator_indices == (2, 3, 4, 5)
    assert plan.placement == "ends"

    plan = extract_both_ends(8, 4, "3/4")
    assert plan.adapter_indices == (0, 1, 6, 7)
    assert plan.emulator_indices == (2, 3, 5)


def test_extract_both_ends_requires_even_adapter():
    with pytest.raises(ConfigError):
        extract_both_ends(8, 3, 0.5)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(4, 64), s=st.integers(1, 62), num=st.integers(1, 8),
       den=st.integers(1, 8))
def test_extract_properties(n, s, num, den):
    if s > n - 2 or num > den:
        return
    kr = Fraction(num, den)
    block = n - s
    if int(kr * block) < 2:
        with pytest.raises(ConfigError):
            extract(n, s, kr)
        return
    plan = extract(n, s, kr)
    emu = plan.emulator_indices
    assert len(emu) == int(kr * block)
    assert len(set(emu)) == len(emu)
    assert list(emu) == sorted(emu)
    assert emu[0] == 0 and emu[-1] == block - 1
    assert set(emu) <= set(plan.noncompressed_indices)
    assert plan.adapter_indices == tuple(range(block, n))
    assert not (set(plan.adapter_indices) & set(plan.noncompressed_indices))


def test_plan_dict_round_trip():
    plan = extract(32, 4, "4/5")
    again = SplitPlan.from_dict(plan.to_dict())
    assert again == plan


def test_plan_rejects_inconsistent_sets():
    with pytest.raises(ConfigError):
        SplitPlan(8, 2, Fraction(1, 2), (5, 6, 7), (0, 3, 5), (0, 1, 2, 3, 4, 5))
    with pytest.raises(ConfigError):  # emulator drops the block's last layer
        SplitPlan(8, 2, Fraction(1, 2), (6, 7), (0, 2, 4), (0, 1, 2, 3, 4, 5))


# ---------------------------------------------------------------------------
# LoRA sets


def test_lora_param_count_small():
    cfg = ModelConfig(n_layers=4, d_model=32, n_heads=2, d_ff=96, vocab_size=64)
    lora = inject_lora(cfg, [1, 2, 3], rank=4, alpha=8.0, seed=0)
    # per layer: 4 * (32 + 32) per target, two targets -> 512
    assert lora.param_count() == 3 * 512


def test_lora_param_count_reference_scale():
    cfg = ModelConfig(n_layers=4, d_model=4096, n_heads=32, d_ff=11008,
                      vocab_size=64, max_seq_len=8)
    lora = inject_lora(cfg, [0, 1], rank=8, alpha=16.0, seed=0)
    assert lora.param_count() == 2 * 131072


def test_lora_init_shapes_and_zero_b():
    lora = inject_lora(TINY, [4, 5], rank=3, alpha=6.0, seed=11)
    for (li, t), (a, b) in lora.entries.items():
        d_in, d_out = TINY.proj_shape(t)
        assert a.shape == (3, d_in)
        assert b.shape == (d_out, 3)
        np.testing.assert_array_equal(b.values, np.zeros((d_out, 3)))
        assert np.abs(a.values).max() > 0
    assert lora.scaling == 2.0


def test_lora_seed_determinism():
    one = inject_lora(TINY, [4, 5], 3, 6.0, seed=11)
    two = inject_lora(TINY, [4, 5], 3, 6.0, seed=11)
    other = inject_lora(TINY, [4, 5], 3, 6.0, seed=12)
    assert one.state_bytes() == two.state_bytes()
    assert one.state_bytes() != other.state_bytes()


def test_lora_copy_is_deep():
    lora = inject_lora(TINY, [4, 5], 3, 6.0, seed=11)
    dup = lora.copy()
    assert dup.state_bytes() == lora.state_bytes()
    key = next(iter(dup.entries))
    dup.entries[key][0].assign_(dup.entries[key][0].values + 1.0)
    assert dup.state_bytes() != lora.state_bytes()


def test_lora_rejects_bad_args():
    with pytest.raises(ConfigError):
        inject_lora(TINY, [1, 1], 2, 4.0, seed=0)
    with pytest.raises(ConfigError):
        inject_lora(TINY, [1], 0, 4.0, seed=0)
    with pytest.raises(ConfigError):
        inject_lora(TINY, [1], 2, 4.0, seed=0, targets=("q", "zz"))


def test_reconstruct_zero_lora_is_zero_vector():
    lora = inject_lora(TINY, [4, 5], 3, 6.0, seed=11)
    flat = reconstruct(lora)
    assert flat.shape == (2 * 2 * 16 * 16,)  # 2 layers x 2 targets x d_in*d_out
    np.testing.assert_array_equal(flat, np.zeros_like(flat))


def test_reconstruct_rank_one_norm():
    lora = inject_lora(TINY, [5], 1, 2.0, seed=0, targets=("q",))
    a, b = lora.entries[(5, "q")]
    a.assign_(np.ones_like(a.values))
    b.assign_(np.ones_like(b.values))
    flat = reconstruct(lora)
    # delta = scaling * ones(16x16), scaling = alpha/r = 2
    np.testing.assert_allclose(flat, np.full(256, 2.0))


# ---------------------------------------------------------------------------
# assembly identities


def tokens_for(stack):
    rng = np.random.default_rng(3)
    return rng.integers(0, stack.cfg.vocab_size, size=12)


def full_forward_logits(stack):
    toks = tokens_for(stack)
    x = stack.embed(toks)
    x = stack.run_layers(x, [(i, None) for i in range(stack.cfg.n_layers)])
    return stack.head_logits(x).values


def test_zero_lora_injection_preserves_forward_bitwise():
    stack = TransformerStack(TINY)
    plan = extract(TINY.n_layers, 2, 1)
    adapter = inject_lora(TINY, plan.adapter_indices, 4, 8.0, seed=1)
    emulator = inject_lora(TINY, plan.emulator_indices, 4, 8.0, seed=2)
    model = assemble(plan, stack, adapter, emulator, "adapemu")
    got = model.logits(tokens_for(stack)).values
    np.testing.assert_array_equal(got, full_forward_logits(stack))


def test_adapfu_with_zero_adapter_equals_full_model():
    stack = TransformerStack(TINY)
    plan = extract(TINY.n_layers, 2, "1/2")  # compression irrelevant for adapfu
    adapter = inject_lora(TINY, plan.adapter_indices, 4, 8.0, seed=1)
    model = assemble(plan, stack, adapter, None, "adapfu")
    np.testing.assert_array_equal(model.logits(tokens_for(stack)).values,
                                  full_forward_logits(stack))


def test_compressed_assembly_differs_from_full():
    stack = TransformerStack(TINY)
    plan = extract(TINY.n_layers, 2, "1/2")
    adapter = inject_lora(TINY, plan.adapter_indices, 4, 8.0, seed=1)
    emulator = inject_lora(TINY, plan.emulator_indices, 4, 8.0, seed=2)
    model = assemble(plan, stack, adapter, emulator, "adapemu")
    assert not np.array_equal(model.logits(tokens_for(stack)).values,
                              full_forward_logits(stack))


def test_lora_rescale_invariance():
    stack = TransformerStack(TINY)
    plan = extract(TINY.n_layers, 2, 1)
    rng = np.random.default_rng(5)
    adapter = inject_lora(TINY, plan.adapter_indices, 4, 8.0, seed=1)
    for a, b in adapter.entries.values():
        b.assign_(rng.normal(0.0, 0.1, size=b.shape))
    base = assemble(plan, stack, adapter, None, "adapfu").logits(tokens_for(stack)).values
    c = 3.7
    scaled = adapter.copy()
    for a, b in scaled.entries.values():
        a.assign_(a.values * c)
        b.assign_(b.values / c)
    again = assemble(plan, stack, scaled, None, "adapfu").logits(tokens_for(stack)).values
    np.testing.assert_allclose(again, base, rtol=1e-10, atol=1e-12)


def test_assemble_rejects_mismatched_lora_layers():
    stack = TransformerStack(TINY)
    plan = extract(TINY.n_layers, 2, 1)
    wrong = inject_lora(TINY, [0, 1], 4, 8.0, seed=1)  # not the adapter layers
    with pytest.raises(ConfigError):
        assemble(plan, stack, wrong, None, "adapfu")
    with pytest.raises(ConfigError):
        assemble(plan, stack, None, None, "nope")


def test_ends_placement_schedule_order():
    cfg = ModelConfig(n_layers=8, d_model=16, n_heads=2, d_ff=32, vocab_size=64,
                      max_seq_len=32)
    stack = TransformerStack(cfg)
    plan = extract_both_ends(8, 4, 1)
    adapter = inject_lora(cfg, plan.adapter_indices, 2, 4.0, seed=3)
    model = assemble(plan, stack, adapter, None, "adapfu")
    assert [i for i, _ in model.schedule] == list(range(8))


def test_emulator_activations_identity_at_full_keep():
    stack = TransformerStack(TINY)
    plan = extract(TINY.n_layers, 2, 1)
    emulator = inject_lora(TINY, plan.emulator_indices, 4, 8.0, seed=2)
    comp, ref = emulator_activations(plan, stack, emulator, tokens_for(stack))
    np.testing.assert_array_equal(comp.values, ref.values)


def test_emulator_activations_output_placement_ignores_adapter():
    stack = TransformerStack(TINY)
    plan = extract(TINY.n_layers, 2, "1/2")
    emulator = inject_lora(TINY, plan.emulator_indices, 4, 8.0, seed=2)
    adapter = inject_lora(TINY, plan.adapter_indices, 4, 8.0, seed=1)
    rng = np.random.default_rng(9)
    for a, b in adapter.entries.values():
        b.assign_(rng.normal(0.0, 0.5, size=b.shape))
    toks = tokens_for(stack)
    without = emulator_activations(plan, stack, emulator, toks)
    with_adapter = emulator_activations(plan, stack, emulator, toks,
                                        adapter_lora=adapter)
    np.testing.assert_array_equal(without[0].values, with_adapter[0].values)
    np.testing.assert_array_equal(without[1].values, with_adapter[1].values)


def test_emulator_activations_ends_placement_uses_lead_adapter():
    cfg = ModelConfig(n_layers=8, d_model=16, n_heads=2, d_ff=32, vocab_size=64,
                      max_seq_len=32)
    stack = TransformerStack(cfg)
    plan = extract_both_ends(8, 4, 1)
    emulator = inject_lora(cfg, plan.emulator_indices, 2, 4.0, seed=2)
    adapter = inject_lora(cfg, plan.adapter_indices, 2, 4.0, seed=1)
    rng = np.random.default_rng(9)
    for a, b in adapter.entries.values():
        b.assign_(rng.normal(0.0, 0.5, size=b.shape))
    toks = tokens_for(stack)
    without = emulator_activations(plan, stack, emulator, toks)
    with_adapter = emulator_activations(plan, stack, emulator, toks,
                                        adapter_lora=adapter)
    assert not np.array_equal(without[0].values, with_adapter[0].values)


# ---------------------------------------------------------------------------
# stack plumbing


def test_stack_build_is_deterministic():
    one, two = TransformerStack(TINY), TransformerStack(TINY)
    for name, arr in one.named_weights().items():
        np.testing.assert_array_equal(arr.values, two.named_weights()[name].values)


def test_stack_seed_changes_weights():
    other_cfg = ModelConfig(n_layers=6, d_model=16, n_heads=2, d_ff=48,
                            vocab_size=64, max_seq_len=32, rng_seed=8)
    one, two = TransformerStack(TINY), TransformerStack(other_cfg)
    assert not np.array_equal(one.embedding.values, two.embedding.values)


def test_embed_input_validation():
    stack = TransformerStack(TINY)
    with pytest.raises(InputError):
        stack.embed(np.zeros(33, dtype=np.int64))  # max_seq_len exceeded
    with pytest.raises(InputError):
        stack.embed(np.zeros(0, dtype=np.int64))


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, n_heads=4)  # not divisible
    with pytest.raises(ConfigError):
        ModelConfig(d_model=12, n_heads=4)  # odd head dim
    with pytest.raises(ConfigError):
        ModelConfig(n_layers=0)
