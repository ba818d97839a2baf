import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unlearnkit import datasets as ds
from unlearnkit import synth
from unlearnkit.errors import ConfigError, DataError
from unlearnkit.model import ModelConfig, ParameterSet, init_model
from unlearnkit.taskvec import (
    LAMBDA_GRID,
    FinetuneConfig,
    LoRAConfig,
    TaskVector,
    apply_task_vector,
    compute_task_vector,
    finetune_lm,
    init_lora,
    lora_targets,
)
from unlearnkit.training import corpus_loss

from conftest import TOY


def perturbed(params, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    return params.replace({k: (v + scale * rng.standard_normal(v.shape)).astype(np.float32) for k, v in params.items()})


def filled(value):
    return ParameterSet(TOY, {k: np.full(v.shape, value, np.float32) for k, v in init_model(TOY).items()})


def test_task_vector_examples(toy_params):
    assert all(not v.any() for v in compute_task_vector(toy_params, toy_params).values())
    tv = compute_task_vector(filled(1.0), filled(3.0))
    assert all(np.all(v == 2.0) for v in tv.values())
    assert isinstance(tv, TaskVector)


def test_algebra(toy_params):
    ft = perturbed(toy_params, 1)
    tv = compute_task_vector(toy_params, ft)
    assert apply_task_vector(toy_params, tv, 0.0, negate=True).bit_equal(toy_params)
    assert apply_task_vector(toy_params, tv, 0.0).bit_equal(toy_params)
    back = apply_task_vector(toy_params, tv, 1.0)
    for k in ft:
        np.testing.assert_allclose(back[k], ft[k], rtol=1e-6, atol=1e-7)
    assert apply_task_vector(toy_params, tv, 0.6, negate=True).bit_equal(apply_task_vector(toy_params, tv.scale(-1), 0.6))
    assert apply_task_vector(toy_params, -tv, 0.6).bit_equal(apply_task_vector(toy_params, tv.scale(-1), 0.6))


@given(st.floats(0, 1), st.floats(0, 1))
def test_linearity(l1, l2):
    pre = init_model(TOY)
    tv = compute_task_vector(pre, perturbed(pre, 2))
    once = apply_task_vector(pre, tv, l1 + l2)
    twice = apply_task_vector(apply_task_vector(pre, tv, l1), tv, l2)
    assert all(np.max(np.abs(once[k] - twice[k])) <= 1e-6 for k in pre)


def test_structure_errors(toy_params):
    other = init_model(ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=16, vocab_size=32, max_seq_len=16))
    with pytest.raises(DataError):
        compute_task_vector(toy_params, other)
    with pytest.raises(DataError):
        apply_task_vector(toy_params, other, 0.5)
    with pytest.raises(ConfigError):
        apply_task_vector(toy_params, toy_params, -0.1)


def test_lambda_grid():
    assert np.allclose(np.diff(LAMBDA_GRID), 0.2) and LAMBDA_GRID[0] == 0 and LAMBDA_GRID[-1] == 1


def test_lora_init_and_merge(toy_params):
    cfg = LoRAConfig()
    assert lora_targets(toy_params, cfg) == ["layer.0.attn.wq", "layer.0.attn.wv"]
    adapter = init_lora(toy_params, cfg, seed=0)
    for name, (a, b) in adapter.factors.items():
        assert a.shape == (8, 16) and b.shape == (16, 8) and not b.any() and a.any()
    assert adapter.merge(toy_params).bit_equal(toy_params)
    rng = np.random.default_rng(0)
    a, b = adapter.factors["layer.0.attn.wq"]
    b = rng.standard_normal(b.shape).astype(np.float32)
    adapter.factors["layer.0.attn.wq"] = (a, b)
    merged = adapter.merge(toy_params)
    expected = toy_params["layer.0.attn.wq"].astype(np.float64) + (16 / 8) * (b.astype(np.float64) @ a.astype(np.float64))
    np.testing.assert_allclose(merged["layer.0.attn.wq"], expected, rtol=1e-5, atol=1e-6)
    with pytest.raises(ConfigError):
        lora_targets(toy_params, LoRAConfig(targets=("nothing",)))
    with pytest.raises(ConfigError):
        LoRAConfig(rank=0)


SEQS = [[1, 4, 5, 6, 7, 2], [1, 8, 9, 10, 2], [1, 4, 5, 11, 12, 2]]


@pytest.mark.parametrize("lora", [None, LoRAConfig()])
def test_zero_steps_is_identity(toy_params, lora):
    out, losses = finetune_lm(toy_params, SEQS, FinetuneConfig(steps=0, lora=lora))
    assert out.bit_equal(toy_params) and losses == []


def test_lora_freeze_contract(toy_params):
    out, _ = finetune_lm(toy_params, SEQS, FinetuneConfig(steps=20, learning_rate=1e-2, lora=LoRAConfig()))
    tv = compute_task_vector(toy_params, out)
    for k in toy_params:
        if k in ("layer.0.attn.wq", "layer.0.attn.wv"):
            assert tv[k].any()
        else:
            assert np.array_equal(out[k], toy_params[k]) and not tv[k].any()


def test_finetune_deterministic_and_validated(toy_params):
    cfg = FinetuneConfig(steps=5, learning_rate=1e-2, lora=LoRAConfig(), seed=4)
    a, la = finetune_lm(toy_params, SEQS, cfg)
    b, lb = finetune_lm(toy_params, SEQS, cfg)
    assert a.bit_equal(b) and la == lb
    with pytest.raises(DataError):
        finetune_lm(toy_params, [], cfg)
    with pytest.raises(ConfigError):
        FinetuneConfig(learning_rate=0)


def test_reference_schedule_is_expressible():
    cfg = FinetuneConfig(steps=1500, learning_rate=5e-4, batch_size=4, grad_accum=4)
    assert cfg.batch_size * cfg.grad_accum == 16


def test_500_steps_on_biased_corpus_lower_the_loss():
    bench = synth.generate()
    vocab = ds.build_vocab("\n".join(bench.pretrain))
    corpus = ds.build_bias_corpus(ds.BiasedCorpusSpec(bench.stereoset, bench.comments))
    seqs = [vocab.encode(line, bos=True, eos=True) for line in corpus]
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, vocab_size=len(vocab), max_seq_len=32)
    base = init_model(cfg)
    out, losses = finetune_lm(base, seqs, FinetuneConfig(steps=500, learning_rate=5e-3, grad_accum=1, lora=LoRAConfig()))
    assert len(losses) == 500
    assert corpus_loss(out, seqs) < corpus_loss(base, seqs)
