"""Layer, optimizer, and adapter tests."""

import numpy as np
import pytest

import sepkit.tensor as T
from sepkit import nn
from sepkit.errors import ShapeError, TrainingDivergence
from sepkit.tensor import Tensor


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_xavier_bounds_and_determinism():
    a = nn.xavier_uniform(_rng(3), (50, 40), 50, 40)
    b = nn.xavier_uniform(_rng(3), (50, 40), 50, 40)
    bound = np.sqrt(6.0 / 90.0)
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= bound


def test_same_seed_same_module():
    m1 = nn.TransformerBlock(8, 2, 16, _rng(7))
    m2 = nn.TransformerBlock(8, 2, 16, _rng(7))
    for (n1, t1), (n2, t2) in zip(m1.tensors().items(), m2.tensors().items()):
        assert n1 == n2 and np.array_equal(t1.data, t2.data)


def test_parameter_names_are_stable_dotted_paths():
    block = nn.TransformerBlock(8, 2, 16, _rng(0))
    names = set(block.parameters())
    assert "attn.q.weight" in names and "ff2.bias" in names and "ln1.gamma" in names


def test_key_bias_gradient_vanishes():
    # softmax over scores is invariant to a constant shift per query row,
    # which is exactly what the key bias produces; the backward row-sums
    # cancel to machine precision rather than bitwise zero
    attn = nn.MultiHeadAttention(8, 2, _rng(1))
    x = Tensor(_rng(2).normal(size=(2, 5, 8)))
    T.square(attn(x)).sum().backward()
    assert np.abs(attn.k.bias.grad).max() < 1e-12
    assert np.abs(attn.q.weight.grad).max() > 1e-3


def test_causal_stack_blocks_future_information():
    stack = nn.TransformerStack(8, 2, 16, layers=2, rng=_rng(4), causal=True)
    x1 = _rng(5).normal(size=(1, 6, 8))
    x2 = x1.copy()
    # perturbation must vary across features: the pre-norm stack is exactly
    # invariant to a per-position constant shift (layer norm removes it)
    x2[0, 4:, :] += _rng(6).normal(size=(2, 8))
    with T.no_grad():
        y1 = stack(Tensor(x1)).data
        y2 = stack(Tensor(x2)).data
    assert np.allclose(y1[0, :4], y2[0, :4], atol=1e-12)
    assert not np.allclose(y1[0, 4:], y2[0, 4:], atol=1e-6)


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ShapeError, match="heads"):
        nn.MultiHeadAttention(10, 3, _rng(0))


# -- AdamW ---------------------------------------------------------------------


def _adamw_oracle(theta0, grads, lr, b1, b2, eps, wd):
    """Independent reimplementation of the update rule."""
    theta = float(theta0)
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * theta)
    return theta


def test_adamw_matches_closed_form_oracle():
    rng = _rng(11)
    grads = rng.normal(size=20)
    p = Tensor(np.array([1.5]), requires_grad=True)
    opt = nn.AdamW({"p": p}, lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
    for g in grads:
        p.grad = np.array([g])
        opt.step()
    expected = _adamw_oracle(1.5, grads, 0.01, 0.9, 0.999, 1e-8, 0.1)
    assert abs(p.data[0] - expected) < 1e-12


def test_adamw_constant_gradient_moment_closed_form():
    # with constant gradient g, m_t = g * (1 - beta1^t)
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = nn.AdamW({"p": p}, lr=1e-3, weight_decay=0.0)
    for _ in range(7):
        p.grad = np.array([0.25])
        opt.step()
    assert abs(opt.m["p"][0] - 0.25 * (1 - 0.9 ** 7)) < 1e-15
    assert abs(opt.v["p"][0] - 0.0625 * (1 - 0.999 ** 7)) < 1e-15


def test_adamw_weight_decay_is_decoupled():
    # zero gradient: adaptive term is 0/(0+eps)=0, decay still shrinks weights
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = nn.AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    p.grad = np.array([0.0])
    opt.step()
    assert abs(p.data[0] - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-15


def test_adamw_warmup_ramps_linearly():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = nn.AdamW({"p": p}, lr=1.0, warmup_steps=4)
    seen = []
    for _ in range(6):
        seen.append(opt.current_lr())
        opt.step_count += 1
    assert seen == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]


def test_adamw_raises_on_non_finite_gradient():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = nn.AdamW({"p": p})
    p.grad = np.array([np.nan])
    with pytest.raises(TrainingDivergence, match="p"):
        opt.step()


def test_adamw_skips_params_without_gradients():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = nn.AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    opt.step()  # no grad assigned
    assert p.data[0] == 1.0


# -- LoRA ------------------------------------------------------------------------


def test_fresh_adapter_output_bit_identical():
    rng = _rng(21)
    lin = nn.Linear(16, 16, rng)
    x = Tensor(rng.normal(size=(4, 16)))
    with T.no_grad():
        base = lin(x).data.copy()
        lin.adapter = nn.LoraAdapter(16, 16, rank=8, rng=rng)
        adapted = lin(x).data
    assert np.array_equal(base, adapted)


def test_lora_trainable_count_rank8_dim128():
    rng = _rng(22)
    lin = nn.Linear(128, 128, rng)
    lin.adapter = nn.LoraAdapter(128, 128, rank=8, rng=rng)
    lin.weight.requires_grad = False
    lin.bias.requires_grad = False
    count = sum(t.data.size for t in lin.parameters().values())
    assert count == 2 * 8 * 128


def test_frozen_base_trains_only_adapters():
    rng = _rng(23)
    attn = nn.MultiHeadAttention(16, 2, rng)
    attn.freeze()
    for proj in (attn.q, attn.k, attn.v, attn.out):
        proj.adapter = nn.LoraAdapter(16, 16, rank=2, rng=rng)
    names = set(attn.parameters())
    assert names and all(".adapter." in n for n in names)
    # gradient flows into adapters even with the base frozen
    x = Tensor(rng.normal(size=(1, 3, 16)))
    out = attn(x)
    T.square(out).sum().backward()
    assert all(p.grad is not None for p in attn.parameters().values())


def test_load_arrays_round_trip_and_shape_check():
    rng = _rng(24)
    src = nn.TransformerBlock(8, 2, 12, rng)
    dst = nn.TransformerBlock(8, 2, 12, _rng(25))
    arrays = {k: t.data.copy() for k, t in src.tensors().items()}
    dst.load_arrays(arrays)
    for k, t in dst.tensors().items():
        assert np.array_equal(t.data, arrays[k])
    bad = dict(arrays)
    bad["ln1.gamma"] = np.zeros(9)
    with pytest.raises(ShapeError):
        dst.load_arrays(bad)


def test_sinusoid_positions_shape_and_range():
    grid = nn.sinusoid_positions(10, 8)
    assert grid.shape == (10, 8)
    assert np.abs(grid).max() <= 1.0
    assert np.allclose(grid[0, 0::2], 0.0) and np.allclose(grid[0, 1::2], 1.0)
