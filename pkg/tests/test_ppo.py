import copy
import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from lenctl.model import ModelConfig, PolicyModel
from lenctl.ppo import (
    ACTOR_ONLY,
    AS_WRITTEN,
    EMABaseline,
    PPOConfig,
    PPODivergence,
    RolloutBuffer,
    Trajectory,
    advantage,
    assign_advantages,
    clipped_surrogate,
    init_critic,
    ppo_losses,
    rl_stream,
    rollout,
    train_rl,
)
from lenctl.scp import SCP, compute_reward
from lenctl.spe import RuleBasedExtractor
from lenctl.templates import bundled_templates


def test_defaults_follow_published_table():
    c = PPOConfig()
    assert (c.actor_lr, c.critic_lr) == (3e-7, 3e-4)
    assert c.betas == (0.9, 0.999) and c.actor_adam_eps == c.critic_adam_eps == 1e-7
    assert c.weight_decay == 0 and c.epochs == 1
    assert (c.update_timestep, c.surrogate_epochs, c.surrogate_batch) == (512, 16, 32)
    assert (c.kl_beta, c.entropy_c, c.eps_clip, c.sft_lambda) == (0.1, 0.01, 0.2, 1.0)
    assert c.mode == "ActorCritic" and c.entropy_sign == "Bonus" and c.ratio_level == "token"
    with pytest.raises(ValueError):
        PPOConfig(mode="Critic")


def test_advantage_examples():
    assert advantage(-10.0, -12.0) == 2.0
    assert advantage(-5.0, -5.0) == 0.0


def test_ema_baseline():
    ema = EMABaseline(0.99)
    adv = ema.advantages([-4.0, -6.0])
    assert adv == [1.0, -1.0]
    v = -5.0
    for r in (-4.0, -6.0):
        v = 0.99 * v + 0.01 * r
    assert ema.value == pytest.approx(v)
    assert ema.advantages([-3.0]) == [pytest.approx(-3.0 - v)]


def test_single_reward_first_buffer_has_zero_advantage():
    assert EMABaseline().advantages([-7.0]) == [0.0]


def piecewise(r, a, eps):
    if a >= 0:
        return min(r, 1 + eps) * a
    return max(r, 1 - eps) * a


def test_clip_formula_against_piecewise_oracle():
    rng = np.random.default_rng(0)
    r = rng.uniform(0, 3, 10_000)
    a = rng.normal(0, 5, 10_000)
    eps = rng.uniform(0.01, 0.5, 10_000)
    got = clipped_surrogate(torch.tensor(r), torch.tensor(a), torch.tensor(eps)).numpy()
    want = np.array([piecewise(*x) for x in zip(r, a, eps)])
    assert np.allclose(got, want, atol=1e-12)
    assert np.all(got <= np.maximum(r * a, np.maximum((1 + eps) * a, (1 - eps) * a)) + 1e-12)


def test_clipped_branch_has_zero_gradient():
    ratio = torch.tensor([1.4], requires_grad=True)
    clipped_surrogate(ratio, torch.tensor([2.0]), 0.2).sum().backward()
    assert ratio.grad.item() == 0.0


# --- loss-level checks on a tiny policy -------------------------------------------------


@pytest.fixture(scope="module")
def setup(tok):
    cfg = ModelConfig(vocab_size=tok.vocab_size, n_layers=1, n_heads=2, d_model=16, max_context=320,
                      anchor=95, seed=1, number_values=tok.number_values())
    actor = PolicyModel(cfg)
    return actor, tok


def make_trajs(actor, tok, stream_seed=0, n=8, small_corpus=None):
    from lenctl.templates import SyntheticCorpusParams, gen_synthetic_corpus

    corpus = small_corpus or gen_synthetic_corpus(SyntheticCorpusParams(n_examples=50, vocab_size=200, seed=1))
    stream = rl_stream(corpus, bundled_templates(), np.random.default_rng(stream_seed), tok)
    return rollout(actor, RuleBasedExtractor(), stream, n, tok, np.random.default_rng(1), max_new_tokens=12)


def test_rollout_buffer_integrity(setup):
    actor, tok = setup
    buf = make_trajs(actor, tok, n=10)
    assert len(buf) == 10 and buf.full()
    for t in buf.items:
        assert t.reward == compute_reward(t.scp, t.length).reward
        assert len(t.old_logprobs) == len(t.generated_ids)
        assert t.critic_ids[0] == tok.bos_id and t.critic_ids[-1] == tok.sep_id
    with pytest.raises(OverflowError):
        buf.add(buf.items[0])
    buf.clear()
    assert len(buf) == 0


def test_rollout_scp_comes_from_extractor(setup):
    actor, tok = setup
    from lenctl.templates import SyntheticCorpusParams, gen_synthetic_corpus

    corpus = gen_synthetic_corpus(SyntheticCorpusParams(n_examples=50, vocab_size=200, seed=1))
    items = []
    stream = rl_stream(corpus, bundled_templates(), np.random.default_rng(3), tok)

    def spy(us):
        items.extend(us)
        return [type("R", (), {})() for _ in us]  # never a ParseResult

    buf = RolloutBuffer(4)
    with pytest.raises(StopIteration):
        # a stream that runs dry while every parse fails
        rollout(actor, spy, iter([next(stream) for _ in range(6)]), 4, tok, np.random.default_rng(0))
    assert len(items) == 4 and len(buf) == 0


def test_identity_pass(setup):
    actor, tok = setup
    buf = make_trajs(actor, tok, n=8)
    cfg = PPOConfig(sft_lambda=1.0)
    critic = init_critic(actor)
    assign_advantages(buf, cfg, critic, EMABaseline(), tok.pad_id)
    old = copy.deepcopy(actor)
    out = ppo_losses(actor, old, critic, buf.items, cfg, tok)
    mean_adv = float(np.mean([t.advantage for t in buf.items]))
    assert out.mean_ratio == pytest.approx(1.0, abs=1e-6)
    assert out.mean_abs_ratio_dev == pytest.approx(0.0, abs=1e-6)
    assert out.kl == pytest.approx(0.0, abs=1e-6)
    assert out.clip_fraction == 0.0
    assert out.surrogate == pytest.approx(mean_adv, abs=1e-6)


def test_kl_nonnegative_after_drift(setup):
    actor, tok = setup
    buf = make_trajs(actor, tok, n=6)
    cfg = PPOConfig(mode=ACTOR_ONLY)
    assign_advantages(buf, cfg, None, EMABaseline(), tok.pad_id)
    drifted = copy.deepcopy(actor)
    with torch.no_grad():
        for p in drifted.parameters():
            p.add_(0.05 * torch.randn_like(p))
    out = ppo_losses(drifted, actor, None, buf.items, cfg, tok)
    assert out.kl >= 0 and out.value_loss is None
    assert 0 <= out.clip_fraction <= 1


def test_value_loss_zero_for_perfect_critic(setup):
    actor, tok = setup
    buf = make_trajs(actor, tok, n=4)
    critic = init_critic(actor)
    cfg = PPOConfig()
    assign_advantages(buf, cfg, critic, EMABaseline(), tok.pad_id)
    with torch.no_grad():
        critic.head.weight.zero_()
        critic.head.bias.fill_(0.0)
    for t in buf.items:
        t.reward = 0.0
    out = ppo_losses(actor, actor, critic, buf.items, cfg, tok)
    assert out.value_loss.item() == 0.0


def test_missing_old_logprobs_rejected(setup):
    actor, tok = setup
    buf = make_trajs(actor, tok, n=2)
    for t in buf.items:
        t.advantage = 0.0
    buf.items[0].old_logprobs = []
    buf.items[0].generated_ids = [5]
    with pytest.raises(ValueError):
        ppo_losses(actor, actor, None, buf.items, PPOConfig(), tok)


def test_entropy_sign_switch(setup):
    actor, tok = setup
    buf = make_trajs(actor, tok, n=4)
    for t in buf.items:
        t.advantage = 0.0
    base = dict(sft_lambda=0.0, kl_beta=0.0, entropy_c=1.0)
    bonus = ppo_losses(actor, actor, None, buf.items, PPOConfig(**base), tok)
    written = ppo_losses(actor, actor, None, buf.items, PPOConfig(entropy_sign=AS_WRITTEN, **base), tok)
    assert bonus.actor_loss.item() == pytest.approx(-bonus.entropy, abs=1e-6)
    assert written.actor_loss.item() == pytest.approx(bonus.entropy, abs=1e-6)


def test_sequence_ratio_identity(setup):
    actor, tok = setup
    buf = make_trajs(actor, tok, n=4)
    for i, t in enumerate(buf.items):
        t.advantage = float(i) - 1.5
    out = ppo_losses(actor, actor, None, buf.items, PPOConfig(ratio_level="sequence", sft_lambda=0), tok)
    assert out.mean_ratio == pytest.approx(1.0) and out.surrogate == pytest.approx(0.0, abs=1e-6)


def test_policy_gradient_reduction_on_two_token_toy():
    """With beta = c = lambda = 0 at theta = theta_old, grad(actor loss) = -mean(A * grad log pi)."""
    from lenctl.tokenizer import Tokenizer

    tok = Tokenizer([], max_number=1)
    cfg = ModelConfig(vocab_size=tok.vocab_size, n_layers=1, n_heads=1, d_model=8, max_context=8, anchor=2, seed=5)
    actor = PolicyModel(cfg).double()
    trajs = []
    for a_tok, adv in ((tok.number_id(0), 1.5), (tok.number_id(1), -0.5)):
        with torch.no_grad():
            from lenctl.model import make_batch, token_logprobs

            b = make_batch([[tok.bos_id, tok.sep_id]], [[a_tok]], 2, tok.pad_id)
            lp = token_logprobs(actor, b)[1][0, 0].item()
        trajs.append(Trajectory([tok.bos_id, tok.sep_id], SCP.equal(1), [a_tok], [lp], 0.0, 1, advantage=adv))
    cfg_ppo = PPOConfig(kl_beta=0.0, entropy_c=0.0, sft_lambda=0.0)
    actor.zero_grad()
    ppo_losses(actor, copy.deepcopy(actor), None, trajs, cfg_ppo, tok).actor_loss.backward()
    got = [p.grad.clone() for p in actor.parameters()]

    actor.zero_grad()
    from lenctl.model import make_batch, token_logprobs

    b = make_batch([t.input_ids for t in trajs], [t.generated_ids for t in trajs], 2, tok.pad_id)
    taken = token_logprobs(actor, b)[1][:, 0]
    adv = torch.tensor([t.advantage for t in trajs], dtype=torch.float64)
    (-(adv * taken).mean()).backward()
    want = [p.grad for p in actor.parameters()]
    for g, w in zip(got, want):
        assert torch.allclose(g, w, atol=1e-5)


def test_divergence_guard(setup, monkeypatch):
    actor, tok = setup
    import lenctl.ppo as ppo_mod

    real = ppo_mod.ppo_losses

    def exploding(*a, **k):
        out = real(*a, **k)
        out.mean_abs_ratio_dev = 50.0
        return out

    monkeypatch.setattr(ppo_mod, "ppo_losses", exploding)
    from lenctl.templates import SyntheticCorpusParams, gen_synthetic_corpus

    corpus = gen_synthetic_corpus(SyntheticCorpusParams(n_examples=50, vocab_size=200, seed=1))
    stream = rl_stream(corpus, bundled_templates(), np.random.default_rng(0), tok)
    cfg = PPOConfig(update_timestep=4, surrogate_epochs=1, surrogate_batch=4, n_buffers=1, max_new_tokens=8)
    val = lambda m: {"control_error": 1.0, "rougeL": 0.0}
    with pytest.raises(PPODivergence):
        train_rl(copy.deepcopy(actor), None, cfg, stream, RuleBasedExtractor(), tok, val)


def test_train_rl_keeps_best_within_budget(setup):
    actor, tok = setup
    from lenctl.model import param_checksum
    from lenctl.templates import SyntheticCorpusParams, gen_synthetic_corpus

    corpus = gen_synthetic_corpus(SyntheticCorpusParams(n_examples=50, vocab_size=200, seed=1))
    stream = rl_stream(corpus, bundled_templates(), np.random.default_rng(0), tok)
    cfg = PPOConfig(actor_lr=1e-3, update_timestep=4, surrogate_epochs=1, surrogate_batch=2, n_buffers=3,
                    val_every=1, max_new_tokens=8)
    # validation never improves on the start, so the starting weights come back
    start = param_checksum(actor)
    res = train_rl(copy.deepcopy(actor), None, cfg, stream, RuleBasedExtractor(), tok,
                   lambda m: {"control_error": 5.0, "rougeL": 10.0})
    assert param_checksum(res.actor) == start
    iters = [r for r in res.log if "iter" in r]
    assert len(iters) == 3
    assert set(iters[0]) >= {"iter", "policy_loss", "value_loss", "mean_reward", "kl", "entropy", "clip_fraction"}

    # a quality drop beyond budget stops training at the first validation
    calls = iter([{"control_error": 5.0, "rougeL": 10.0}] + [{"control_error": 1.0, "rougeL": 8.0}] * 5)
    res = train_rl(copy.deepcopy(actor), None, cfg, stream, RuleBasedExtractor(), tok, lambda m: next(calls))
    assert res.stopped_early and len([r for r in res.log if "iter" in r]) == 1

    # with patience 2 a single dip is tolerated; a dip followed by recovery runs to the end
    pcfg = dataclasses.replace(cfg, stop_patience=2)
    vals = [(5.0, 10.0), (1.0, 8.0), (2.0, 10.0), (3.0, 9.5)]
    calls = iter([{"control_error": e, "rougeL": r} for e, r in vals])
    res = train_rl(copy.deepcopy(actor), None, pcfg, stream, RuleBasedExtractor(), tok, lambda m: next(calls))
    assert not res.stopped_early and res.best["control_error"] == 2.0
    calls = iter([{"control_error": 5.0, "rougeL": 10.0}] + [{"control_error": 1.0, "rougeL": 8.0}] * 5)
    res = train_rl(copy.deepcopy(actor), None, pcfg, stream, RuleBasedExtractor(), tok, lambda m: next(calls))
    assert res.stopped_early and len([r for r in res.log if "iter" in r]) == 2


def test_resume_continues_from_checkpoint(setup):
    actor, tok = setup
    from lenctl.templates import SyntheticCorpusParams, gen_synthetic_corpus

    corpus = gen_synthetic_corpus(SyntheticCorpusParams(n_examples=50, vocab_size=200, seed=1))
    cfg = PPOConfig(actor_lr=1e-3, update_timestep=4, surrogate_epochs=1, surrogate_batch=2, n_buffers=3,
                    val_every=1, max_new_tokens=8)
    saved = []
    errs = iter([5.0, 4.0, 3.0, 2.0, 1.0, 0.5])
    val = lambda m: {"control_error": next(errs), "rougeL": 10.0}
    stream = rl_stream(corpus, bundled_templates(), np.random.default_rng(0), tok)
    train_rl(copy.deepcopy(actor), None, cfg, stream, RuleBasedExtractor(), tok, val,
             on_checkpoint=lambda p, a, c, b: saved.append((p, copy.deepcopy(a), b)))
    assert [p.iteration for p, _, _ in saved] == [1, 2, 3]
    prog, a1, best_state = saved[0]
    res = train_rl(a1, None, cfg, stream, RuleBasedExtractor(), tok, val, resume=(prog, best_state))
    iters = [r["iter"] for r in res.log if "iter" in r]
    assert iters == [1, 2, 3]
    assert res.log[0]["step"] == 0 and res.best["control_error"] == 0.5
