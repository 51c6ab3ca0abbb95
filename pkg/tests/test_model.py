import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lenctl.checkpoint import CheckpointError, load_checkpoint, load_into, read_arrays, save_checkpoint
from lenctl.model import (
    ContextOverflow,
    CriticModel,
    ModelConfig,
    NonFiniteGradient,
    PolicyModel,
    adamw_step,
    beam_search,
    forward_logits,
    generate,
    make_adamw,
    make_batch,
    param_checksum,
    token_logprobs,
)
from lenctl.spe import ExtractorConfig, extractor_loss, new_extractor
from lenctl.templates import AugmentedExample
from lenctl.scp import SCP

V = 40


def small_cfg(**kw):
    base = dict(vocab_size=V, n_layers=2, n_heads=2, d_model=16, max_context=48, anchor=15, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def numbered_cfg(**kw):
    values = [-1] * 8 + list(range(20)) + [-1] * (V - 28)
    return small_cfg(number_values=values, **kw)


def test_forward_shapes_and_determinism():
    m1, m2 = PolicyModel(small_cfg()), PolicyModel(small_cfg())
    ids = [1, 5, 9, 12]
    a, b = forward_logits(m1, ids), forward_logits(m2, ids)
    assert a.shape == (4, V)
    assert torch.equal(a, b)
    assert torch.isfinite(a).all()
    assert forward_logits(m1, [1]).shape == (1, V)


def test_overlength_rejected():
    m = PolicyModel(small_cfg())
    with pytest.raises(ContextOverflow):
        forward_logits(m, list(range(1, 30)) * 2)


@settings(max_examples=25)
@given(st.lists(st.integers(1, V - 1), min_size=2, max_size=20), st.data())
def test_causal_prefix_invariance(ids, data):
    m = PolicyModel(small_cfg())
    t = data.draw(st.integers(1, len(ids) - 1))
    new_tok = data.draw(st.integers(1, V - 1))
    changed = list(ids)
    changed[t] = new_tok
    with torch.no_grad():
        a, b = forward_logits(m, ids), forward_logits(m, changed)
    assert torch.equal(a[:t], b[:t])


def test_softmax_rows_sum_to_one():
    m = PolicyModel(small_cfg())
    logp = torch.log_softmax(forward_logits(m, [1, 2, 3, 4, 5]), -1)
    assert torch.allclose(logp.exp().sum(-1), torch.ones(5), atol=1e-6)


def test_left_padding_does_not_change_continuation_logprobs():
    m = PolicyModel(small_cfg())
    p_short, p_long = [1, 7, 9, 3], [1, 4, 4, 4, 6, 7, 9, 3]
    cont = [11, 12, 2]
    with torch.no_grad():
        alone = token_logprobs(m, make_batch([p_short], [cont], 15, 0))[1]
        mixed = token_logprobs(m, make_batch([p_short, p_long], [cont, [11]], 15, 0))[1]
    assert torch.allclose(alone[0], mixed[0], atol=1e-5)


def test_kv_cache_matches_full_forward():
    m = PolicyModel(small_cfg())
    prompt = [1, 5, 6, 3]
    gen = generate(m, [prompt], max_new_tokens=6, eos_id=2, pad_id=0, temperature=1.0,
                   rngs=[np.random.default_rng(0)])[0]
    with torch.no_grad():
        _, taken = token_logprobs(m, make_batch([prompt], [gen.tokens], 15, 0))
    assert np.allclose(taken[0].numpy(), gen.logprobs, atol=1e-5)


def test_generation_properties():
    m = PolicyModel(small_cfg())
    prompts = [[1, 5, 3], [1, 6, 7, 8, 3]]
    g1 = generate(m, prompts, max_new_tokens=10, eos_id=2, pad_id=0, temperature=0.9, top_k=5,
                  rngs=[np.random.default_rng(i) for i in range(2)])
    g2 = generate(m, prompts, max_new_tokens=10, eos_id=2, pad_id=0, temperature=0.9, top_k=5,
                  rngs=[np.random.default_rng(i) for i in range(2)])
    assert [g.tokens for g in g1] == [g.tokens for g in g2]
    for g in g1:
        assert len(g.tokens) <= 10 and all(lp <= 0 for lp in g.logprobs)
    greedy = [generate(m, prompts, max_new_tokens=8, eos_id=2, pad_id=0, temperature=0.0,
                       rngs=[np.random.default_rng(s), np.random.default_rng(s + 1)]) for s in (0, 50)]
    assert [g.tokens for g in greedy[0]] == [g.tokens for g in greedy[1]]
    empty = generate(m, prompts, max_new_tokens=0, eos_id=2, pad_id=0)
    assert all(g.tokens == [] and g.length == 0 for g in empty)
    # a row's sample does not depend on its batch neighbours
    solo = generate(m, prompts[1:], max_new_tokens=10, eos_id=2, pad_id=0, temperature=0.9, top_k=5,
                    rngs=[np.random.default_rng(1)])
    assert solo[0].tokens == g1[1].tokens


def test_greedy_matches_argmax():
    m = PolicyModel(small_cfg())
    prompt = [1, 5, 3]
    g = generate(m, [prompt], max_new_tokens=1, eos_id=2, pad_id=0, temperature=0.0)[0]
    logits = forward_logits(m, [0] * 0 + prompt)
    # positions differ from the anchored layout, so compare through the batch path
    with torch.no_grad():
        b = make_batch([prompt], [[]], 15, 0)
        lg, _ = m(b.ids, b.pad_mask, b.pos_offset)
    assert g.tokens[0] == int(lg[0, -1].argmax())
    assert logits.shape[0] == 3


def test_beam_search_returns_ranked_hypotheses():
    m = PolicyModel(small_cfg())
    hyps = beam_search(m, [1, 5, 3], beam_width=3, n_best=3, max_new_tokens=5, eos_id=2, pad_id=0)
    assert 1 <= len(hyps) <= 3
    means = [h.mean_logprob for h in hyps]
    assert means == sorted(means, reverse=True)


# --- gradients ---------------------------------------------------------------------


def _fd_check(model, loss_fn, n_probe=3, h=1e-4, seed=0):
    model.double()
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        g = p.grad.view(-1)
        for idx in rng.choice(flat.numel(), size=min(n_probe, flat.numel()), replace=False):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                up = loss_fn().item()
                flat[idx] = orig - h
                down = loss_fn().item()
                flat[idx] = orig
            num = (up - down) / (2 * h)
            ana = g[idx].item()
            scale = max(abs(num), abs(ana))
            if scale < 1e-7:
                continue
            worst = max(worst, abs(num - ana) / scale)
            checked += 1
    return worst, checked


def test_policy_gradients_match_finite_differences():
    m = PolicyModel(numbered_cfg())
    batch = make_batch([[1, 9, 12, 3], [1, 30, 3]], [[15, 16, 2], [17, 2]], 15, 0)

    def loss():
        _, taken = token_logprobs(m, batch)
        return -(taken * batch.target_mask[:, batch.prompt_len:]).sum() / 5

    worst, checked = _fd_check(m, loss)
    assert checked > 30
    assert worst <= 1e-3


def test_critic_gradients_match_finite_differences():
    c = CriticModel(numbered_cfg(), scale=10.0)
    batch = make_batch([[1, 9, 3], [1, 30, 31, 3]], [[15, 2], [16, 17, 2]], 15, 0)
    target = torch.tensor([-3.0, -12.0], dtype=torch.float64)

    def loss():
        return ((c(batch.ids, batch.pad_mask, batch.pos_offset) - target) ** 2).mean()

    worst, checked = _fd_check(c, loss)
    assert checked > 30 and worst <= 1e-3


def test_extractor_gradients_match_finite_differences(tok):
    ex = new_extractor(tok, ExtractorConfig(mode="cls-3", n_layers=1, d_model=16, n_heads=2, max_len=32))
    data = [
        AugmentedExample("summarize w1 w2 with less than 80 tokens", SCP.less(80), "w1 w2"),
        AugmentedExample("w3 w4 between 60 and 90 tokens", SCP.between(60, 90), "w3 w4"),
        AugmentedExample("w5", SCP.none(), "w5"),
    ]
    worst, checked = _fd_check(ex, lambda: extractor_loss(ex, tok, data), n_probe=2)
    assert checked > 20 and worst <= 1e-3


def test_gradient_linearity_and_zero_loss():
    m = PolicyModel(small_cfg())
    batch = make_batch([[1, 9, 3]], [[15, 2]], 15, 0)

    def grads(f):
        m.zero_grad()
        f().backward()
        return [p.grad.clone() for p in m.parameters()]

    def l1():
        return -token_logprobs(m, batch)[1].sum()

    def l2():
        return token_logprobs(m, batch)[1].pow(2).sum()

    g1, g2, g12 = grads(l1), grads(l2), grads(lambda: l1() + l2())
    assert all(torch.allclose(a + b, c, atol=1e-6) for a, b, c in zip(g1, g2, g12))
    zero = grads(lambda: 0.0 * l1())
    assert all(torch.count_nonzero(g) == 0 for g in zero)
    with pytest.raises(RuntimeError):
        l1().detach().backward()


# --- optimiser -----------------------------------------------------------------------


def test_adamw_zero_gradient_keeps_parameters():
    m = PolicyModel(small_cfg())
    before = param_checksum(m)
    opt = make_adamw(m.parameters(), 1e-3, weight_decay=0.0)
    for p in m.parameters():
        p.grad = torch.zeros_like(p)
    adamw_step(opt, m)
    assert param_checksum(m) == before


def test_adamw_matches_hand_rolled_update():
    w = torch.nn.Parameter(torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64))
    holder = torch.nn.Module()
    holder.w = w
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
    opt = make_adamw([w], lr, (b1, b2), eps, wd)
    ref = w.detach().clone()
    m = torch.zeros(3, dtype=torch.float64)
    v = torch.zeros(3, dtype=torch.float64)
    for t in range(1, 4):
        g = torch.tensor([0.3, -0.1, 0.7], dtype=torch.float64) * t
        w.grad = g.clone()
        adamw_step(opt, holder)
        ref = ref * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref = ref - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)).sqrt() + eps)
        assert torch.allclose(w.detach(), ref, atol=1e-12)


def test_adamw_nan_names_parameter():
    m = PolicyModel(small_cfg())
    opt = make_adamw(m.parameters(), 1e-3)
    for p in m.parameters():
        p.grad = torch.zeros_like(p)
    m.body.blocks[0].fc.weight.grad[0, 0] = float("nan")
    with pytest.raises(NonFiniteGradient, match="blocks.0.fc.weight"):
        adamw_step(opt, m)


# --- checkpoints --------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["policy", "critic"])
def test_checkpoint_roundtrip(tmp_path, kind):
    m = PolicyModel(numbered_cfg()) if kind == "policy" else CriticModel(numbered_cfg(), scale=7.0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, {"note": 1})
    m2, extra = load_checkpoint(path)
    assert extra == {"note": 1}
    assert type(m2) is type(m)
    for (k, a), (_, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), k
    assert param_checksum(m) == param_checksum(m2)
    if kind == "critic":
        assert m2.scale == 7.0


def test_extractor_checkpoint_roundtrip(tmp_path, tok):
    ex = new_extractor(tok, ExtractorConfig(mode="cls-3", n_layers=1, d_model=16, n_heads=2))
    save_checkpoint(ex, tmp_path / "e.ckpt")
    ex2, _ = load_checkpoint(tmp_path / "e.ckpt")
    assert ex2.ecfg == ex.ecfg and param_checksum(ex2) == param_checksum(ex)


def test_checkpoint_rejects_corruption(tmp_path):
    m = PolicyModel(small_cfg())
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    data = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(data[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        read_arrays(tmp_path / "trunc.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_arrays(tmp_path / "magic.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointError, match="version"):
        read_arrays(tmp_path / "ver.ckpt")
    with pytest.raises(CheckpointError, match="does not match"):
        load_into(PolicyModel(small_cfg(d_model=32)), path)
    other = PolicyModel(small_cfg(seed=9))
    load_into(other, path)
    assert param_checksum(other) == param_checksum(m)
