"""PPO fine-tuning against the rule-based length reward.

Each trajectory earns one terminal reward.  Its advantage (reward minus a
critic prediction, or minus a running reward average in actor-only mode) is
broadcast to every generated token in the clipped surrogate.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .model import (
    Batch,
    CriticModel,
    PolicyModel,
    adamw_step,
    generate,
    make_adamw,
    make_batch,
    token_logprobs,
)
from .scp import CONSTRAINED_TYPES, ControlType, StandardControlPrompt, compute_reward, render_scp
from .sft import SftExample, encode_prompt, sft_batch, sft_loss
from .spe import AmbiguousInstruction, ParseResult
from .templates import (
    AugmentedExample,
    Document,
    PromptTemplate,
    by_type,
    fill_template,
    sample_scp,
    sample_scp_for_reference,
)
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

ACTOR_CRITIC = "ActorCritic"
ACTOR_ONLY = "ActorOnly"
BONUS = "Bonus"
AS_WRITTEN = "AsWritten"


@dataclass
class PPOConfig:
    actor_lr: float = 3e-7
    critic_lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    actor_adam_eps: float = 1e-7
    critic_adam_eps: float = 1e-7
    weight_decay: float = 0.0
    epochs: int = 1
    update_timestep: int = 512
    surrogate_epochs: int = 16
    surrogate_batch: int = 32
    kl_beta: float = 0.1
    entropy_c: float = 0.01
    eps_clip: float = 0.2
    sft_lambda: float = 1.0
    mode: str = ACTOR_CRITIC
    entropy_sign: str = BONUS
    ratio_level: str = "token"
    normalize_advantages: bool = False
    ema_decay: float = 0.99
    max_new_tokens: int = 200
    n_buffers: int = 40
    val_every: int = 2
    quality_budget: float = 1.0
    stop_patience: int = 1
    divergence_threshold: float = 10.0
    max_grad_norm: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in (ACTOR_CRITIC, ACTOR_ONLY):
            raise ValueError(f"mode must be {ACTOR_CRITIC} or {ACTOR_ONLY}")
        if self.entropy_sign not in (BONUS, AS_WRITTEN):
            raise ValueError(f"entropy_sign must be {BONUS} or {AS_WRITTEN}")
        if self.ratio_level not in ("token", "sequence"):
            raise ValueError("ratio_level must be token or sequence")
        if self.stop_patience < 1:
            raise ValueError("stop_patience must be >= 1")
        if self.update_timestep < 1 or self.surrogate_batch < 1 or self.surrogate_epochs < 1:
            raise ValueError("update_timestep, surrogate_batch and surrogate_epochs must be >= 1")


@dataclass
class Trajectory:
    input_ids: list[int]
    scp: StandardControlPrompt
    generated_ids: list[int]
    old_logprobs: list[float]
    reward: float
    length: int
    sft: SftExample | None = None
    advantage: float | None = None
    critic_ids: list[int] | None = None


@dataclass
class RolloutBuffer:
    capacity: int
    items: list[Trajectory] = field(default_factory=list)
    skipped: int = 0

    def add(self, t: Trajectory) -> None:
        if len(self.items) >= self.capacity:
            raise OverflowError("rollout buffer full")
        self.items.append(t)

    def full(self) -> bool:
        return len(self.items) >= self.capacity

    def clear(self) -> None:
        self.items.clear()
        self.skipped = 0

    def __len__(self) -> int:
        return len(self.items)


class PPODivergence(RuntimeError):
    pass


# --- data ------------------------------------------------------------------------


@dataclass
class RLItem:
    example: AugmentedExample
    sft: SftExample


def rl_stream(
    corpus: Sequence[Document],
    templates: Sequence[PromptTemplate],
    rng: np.random.Generator,
    tok: Tokenizer,
    types: Sequence[ControlType] = CONSTRAINED_TYPES,
) -> Iterator[RLItem]:
    """Endless stream of rollout utterances with a matched supervised example.

    Rollout targets are uniform and ignore the reference.  The supervised twin
    reuses the article and template but samples targets the reference satisfies,
    so its label stays consistent.
    """
    groups = by_type(templates)
    while True:
        doc = corpus[int(rng.integers(len(corpus)))]
        ctype = types[int(rng.integers(len(types)))]
        group = groups[ctype]
        tpl = group[int(rng.integers(len(group)))]
        ex = fill_template(tpl, sample_scp(rng, ctype), doc.article, doc.summary)
        ref_scp = sample_scp_for_reference(rng, ctype, max(1, tok.count(doc.summary)))
        yield RLItem(ex, SftExample(ref_scp, fill_template(tpl, ref_scp, doc.article, doc.summary)))


Extractor = Callable[[Sequence[str]], Sequence["ParseResult | AmbiguousInstruction | None"]]


def rollout(
    actor: PolicyModel,
    extractor: Extractor,
    stream: Iterator[RLItem],
    n: int,
    tok: Tokenizer,
    rng: np.random.Generator,
    max_new_tokens: int = 200,
    chunk: int = 128,
) -> RolloutBuffer:
    """Sample ``n`` trajectories at temperature 1 with SCPs read by ``extractor``."""
    buf = RolloutBuffer(n)
    anchor = actor.cfg.anchor
    while not buf.full():
        items = [next(stream) for _ in range(min(chunk, n - len(buf)))]
        parsed = extractor([it.example.utterance for it in items])
        ok = []
        for it, p in zip(items, parsed):
            if isinstance(p, ParseResult):
                ok.append((it, p.scp))
            else:
                buf.skipped += 1
        if not ok:
            continue
        prompts = [encode_prompt(tok, scp, it.example.utterance, anchor + 1, it.example.article) for it, scp in ok]
        rngs = [np.random.default_rng(int(s)) for s in rng.integers(0, 2**63 - 1, size=len(ok))]
        gens = generate(
            actor, prompts, max_new_tokens=max_new_tokens, eos_id=tok.eos_id, pad_id=tok.pad_id,
            temperature=1.0, top_k=0, rngs=rngs,
        )
        for (it, scp), prompt, g in zip(ok, prompts, gens):
            r = compute_reward(scp, g.length).reward
            buf.add(Trajectory(prompt, scp, g.tokens, g.logprobs, r, g.length, it.sft, critic_ids=critic_prompt(tok, scp)))
    return buf


# --- advantages -----------------------------------------------------------------------


@dataclass
class EMABaseline:
    decay: float = 0.99
    value: float | None = None

    def advantages(self, rewards: Sequence[float]) -> list[float]:
        """Advantages against the current baseline, then fold the rewards in."""
        if self.value is None:
            self.value = float(np.mean(rewards))
        adv = [r - self.value for r in rewards]
        for r in rewards:
            self.value = self.decay * self.value + (1 - self.decay) * r
        return adv


def advantage(reward: float, q_old: float) -> float:
    return reward - q_old


def critic_prompt(tok: Tokenizer, scp: StandardControlPrompt) -> list[int]:
    """The critic reads only the SCP and the generated text."""
    return [tok.bos_id] + tok.encode(render_scp(scp)) + [tok.sep_id]


def _actor_batch(trajs: Sequence[Trajectory], anchor: int, pad_id: int) -> Batch:
    return make_batch([t.input_ids for t in trajs], [t.generated_ids for t in trajs], anchor, pad_id)


def _critic_batch(trajs: Sequence[Trajectory], anchor: int, pad_id: int) -> Batch:
    prompts = [t.critic_ids if t.critic_ids is not None else t.input_ids for t in trajs]
    return make_batch(prompts, [t.generated_ids for t in trajs], anchor, pad_id)


@torch.no_grad()
def critic_values(critic: CriticModel, trajs: Sequence[Trajectory], pad_id: int, chunk: int = 64) -> np.ndarray:
    critic.eval()
    out = []
    for s in range(0, len(trajs), chunk):
        b = _critic_batch(trajs[s : s + chunk], critic.cfg.anchor, pad_id)
        out.append(critic(b.ids, b.pad_mask, b.pos_offset).numpy())
    return np.concatenate(out) if out else np.zeros(0)


def assign_advantages(
    buf: RolloutBuffer, cfg: PPOConfig, critic: CriticModel | None, ema: EMABaseline, pad_id: int
) -> None:
    rewards = [t.reward for t in buf.items]
    if cfg.mode == ACTOR_CRITIC:
        if critic is None:
            raise ValueError("actor-critic mode needs a critic")
        q = critic_values(critic, buf.items, pad_id)
        adv = [advantage(r, float(v)) for r, v in zip(rewards, q)]
    else:
        adv = ema.advantages(rewards)
    adv = np.asarray(adv, dtype=np.float64)
    if cfg.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    for t, a in zip(buf.items, adv):
        t.advantage = float(a)


# --- losses --------------------------------------------------------------------------


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.minimum(ratio * adv, torch.clamp(ratio, 1 - eps, 1 + eps) * adv)


@dataclass
class LossOutput:
    actor_loss: torch.Tensor
    value_loss: torch.Tensor | None
    surrogate: float
    mean_ratio: float
    mean_abs_ratio_dev: float
    kl: float
    entropy: float
    clip_fraction: float
    sft: float


def ppo_losses(
    actor: PolicyModel,
    actor_old: PolicyModel,
    critic: CriticModel | None,
    minibatch: Sequence[Trajectory],
    cfg: PPOConfig,
    tok: Tokenizer,
) -> LossOutput:
    """Actor loss (clipped surrogate, entropy, KL, supervised term) and value loss."""
    for t in minibatch:
        if t.old_logprobs is None or len(t.old_logprobs) != len(t.generated_ids):
            raise ValueError("trajectory lacks old log-probabilities for its tokens")
        if t.advantage is None:
            raise ValueError("trajectory has no advantage assigned")
    anchor = actor.cfg.anchor
    batch = _actor_batch(minibatch, anchor, tok.pad_id)
    Lp = batch.prompt_len
    # the surrogate is reduced in float64 so advantages of tens of tokens keep 1e-6 precision
    mask = batch.target_mask[:, Lp:].to(torch.float64)
    n_tok = mask.sum(1).clamp(min=1)

    logp, taken = token_logprobs(actor, batch)
    # old log-probs are recomputed with the snapshot under the same batch layout,
    # so the first pass after a snapshot gives ratios of exactly 1; the values
    # stored at rollout agree up to cached-attention rounding
    with torch.no_grad():
        old_logp, old = token_logprobs(actor_old, batch)
    adv = torch.tensor([t.advantage for t in minibatch], dtype=torch.float64)

    log_ratio = (taken.double() - old.double()) * mask
    if cfg.ratio_level == "token":
        ratio = torch.exp(log_ratio)
        terms = clipped_surrogate(ratio, adv[:, None], cfg.eps_clip)
        surrogate = ((terms * mask).sum(1) / n_tok).mean()
        clipped = ((ratio - 1).abs() > cfg.eps_clip).to(torch.float64)
        clip_fraction = (clipped * mask).sum() / mask.sum().clamp(min=1)
        mean_ratio = (ratio * mask).sum() / mask.sum().clamp(min=1)
        abs_dev = ((ratio - 1).abs() * mask).sum() / mask.sum().clamp(min=1)
    else:
        seq_ratio = torch.exp(log_ratio.sum(1).clamp(-20.0, 20.0))
        surrogate = clipped_surrogate(seq_ratio, adv, cfg.eps_clip).mean()
        clip_fraction = ((seq_ratio - 1).abs() > cfg.eps_clip).to(torch.float32).mean()
        mean_ratio = seq_ratio.mean()
        abs_dev = (seq_ratio - 1).abs().mean()

    p = logp.exp()
    # entropy averaged over the vocabulary dimension, then over generated tokens
    ent_tok = -(p * logp).sum(-1).double() / logp.shape[-1]
    entropy = (ent_tok * mask).sum() / mask.sum().clamp(min=1)
    kl_tok = (p * (logp - old_logp)).sum(-1).double()
    kl = (kl_tok * mask).sum() / mask.sum().clamp(min=1)

    ent_term = -cfg.entropy_c * entropy if cfg.entropy_sign == BONUS else cfg.entropy_c * entropy
    actor_loss = (-surrogate + ent_term + cfg.kl_beta * kl).float()
    sft_val = 0.0
    if cfg.sft_lambda:
        sfts = [t.sft for t in minibatch if t.sft is not None]
        if sfts:
            ls = sft_loss(actor, sft_batch(tok, sfts, anchor, cfg.max_new_tokens))
            actor_loss = actor_loss + cfg.sft_lambda * ls
            sft_val = ls.item()

    value_loss = None
    if critic is not None:
        cb = _critic_batch(minibatch, critic.cfg.anchor, tok.pad_id)
        q = critic(cb.ids, cb.pad_mask, cb.pos_offset)
        r = torch.tensor([t.reward for t in minibatch], dtype=torch.float32)
        value_loss = ((q - r) ** 2).mean()

    return LossOutput(
        actor_loss, value_loss, surrogate.item(), mean_ratio.item(), abs_dev.item(),
        kl.item(), entropy.item(), clip_fraction.item(), sft_val,
    )


# --- training loop ------------------------------------------------------------------


def init_critic(actor: PolicyModel, scale: float = 10.0) -> CriticModel:
    """Critic whose encoder starts from the actor's weights."""
    critic = CriticModel(actor.cfg, scale=scale)
    critic.body.load_state_dict(actor.body.state_dict())
    return critic


@dataclass
class RLResult:
    actor: PolicyModel
    critic: CriticModel | None
    log: list[dict]
    best: dict
    baseline: dict
    stopped_early: bool = False
    skipped: int = 0


@dataclass
class RLProgress:
    """Everything besides weights needed to continue a run after ``iteration``."""

    iteration: int
    ema_value: float | None
    baseline: dict
    best_error: float
    best_record: dict
    records: list[dict]
    skipped: int = 0
    stopped: bool = False
    strikes: int = 0


Validator = Callable[[PolicyModel], dict]


def train_rl(
    actor: PolicyModel,
    critic: CriticModel | None,
    cfg: PPOConfig,
    stream: Iterator[RLItem],
    extractor: Extractor,
    tok: Tokenizer,
    validator: Validator,
    on_log: Callable[[dict], None] | None = None,
    resume: tuple[RLProgress, dict] | None = None,
    on_checkpoint: Callable[[RLProgress, PolicyModel, CriticModel | None, dict], None] | None = None,
) -> RLResult:
    """Alternate rollouts and clipped-surrogate updates.

    Returns the weights with the lowest validation control error whose ROUGE-L
    sits within ``quality_budget`` of the starting model; training stops after
    ``stop_patience`` consecutive validations outside that budget.

    ``on_checkpoint(progress, actor, critic, best_state)`` fires after every
    validation; passing ``(progress, best_state)`` back as ``resume`` (with the
    saved actor and critic) continues from there.  Optimizer moments restart.
    """
    start = resume[0].iteration if resume else 0
    rng = np.random.default_rng([cfg.seed, start] if start else cfg.seed)
    torch.manual_seed(cfg.seed + start)
    if cfg.mode == ACTOR_CRITIC and critic is None:
        critic = init_critic(actor)
    if cfg.mode == ACTOR_ONLY:
        critic = None
    opt_a = make_adamw(actor.parameters(), cfg.actor_lr, cfg.betas, cfg.actor_adam_eps, cfg.weight_decay)
    opt_c = (
        make_adamw(critic.parameters(), cfg.critic_lr, cfg.betas, cfg.critic_adam_eps, cfg.weight_decay)
        if critic is not None
        else None
    )
    ema = EMABaseline(cfg.ema_decay)
    records: list[dict] = []

    def emit(rec: dict) -> None:
        records.append(rec)
        if on_log:
            on_log(rec)

    if resume:
        prog, best_state = resume
        ema.value = prog.ema_value
        records.extend(prog.records)
        baseline = dict(prog.baseline)
        base = {k: v for k, v in baseline.items() if k != "step"}
        best = (prog.best_error, copy.deepcopy(best_state), dict(prog.best_record))
        skipped = prog.skipped
        strikes = prog.strikes
        if prog.stopped:
            start = cfg.n_buffers
    else:
        base = validator(actor)
        baseline = {"step": 0, **base}
        emit(dict(baseline))
        best = (base["control_error"], copy.deepcopy(actor.state_dict()), dict(baseline))
        skipped = 0
        strikes = 0
    stopped = bool(resume and resume[0].stopped)
    t0 = time.time()
    for it in range(start + 1, cfg.n_buffers + 1):
        actor_old = copy.deepcopy(actor).eval()
        buf = rollout(actor_old, extractor, stream, cfg.update_timestep, tok, rng, cfg.max_new_tokens)
        skipped += buf.skipped
        assign_advantages(buf, cfg, critic, ema, tok.pad_id)
        stats: dict[str, list[float]] = {k: [] for k in ("policy_loss", "value_loss", "kl", "entropy", "clip_fraction", "dev", "sft")}
        actor.train()
        if critic is not None:
            critic.train()
        for _ in range(cfg.surrogate_epochs):
            order = rng.permutation(len(buf))
            for s in range(0, len(order), cfg.surrogate_batch):
                mb = [buf.items[int(i)] for i in order[s : s + cfg.surrogate_batch]]
                out = ppo_losses(actor, actor_old, critic, mb, cfg, tok)
                out.actor_loss.backward()
                adamw_step(opt_a, actor, cfg.max_grad_norm)
                if out.value_loss is not None:
                    out.value_loss.backward()
                    adamw_step(opt_c, critic, cfg.max_grad_norm)
                    stats["value_loss"].append(out.value_loss.item())
                stats["policy_loss"].append(out.actor_loss.item())
                stats["kl"].append(out.kl)
                stats["entropy"].append(out.entropy)
                stats["clip_fraction"].append(out.clip_fraction)
                stats["dev"].append(out.mean_abs_ratio_dev)
                stats["sft"].append(out.sft)
        mean = {k: (float(np.mean(v)) if v else None) for k, v in stats.items()}
        rec = {
            "iter": it,
            "policy_loss": mean["policy_loss"],
            "value_loss": mean["value_loss"],
            "mean_reward": float(np.mean([t.reward for t in buf.items])),
            "kl": mean["kl"],
            "entropy": mean["entropy"],
            "clip_fraction": mean["clip_fraction"],
            "sft_loss": mean["sft"],
            "skipped": buf.skipped,
            "elapsed": time.time() - t0,
        }
        emit(rec)
        log.info("rl iter %d reward %.2f kl %.4f clip %.3f", it, rec["mean_reward"], rec["kl"], rec["clip_fraction"])
        if mean["dev"] is not None and mean["dev"] > cfg.divergence_threshold:
            raise PPODivergence(f"mean |ratio - 1| = {mean['dev']:.2f} over buffer {it}")
        buf.clear()
        if it % cfg.val_every == 0 or it == cfg.n_buffers:
            v = validator(actor)
            vrec = {"step": it, **v}
            emit(vrec)
            within = v["rougeL"] >= base["rougeL"] - cfg.quality_budget
            if within and v["control_error"] < best[0]:
                best = (v["control_error"], copy.deepcopy(actor.state_dict()), vrec)
            strikes = 0 if within else strikes + 1
            stop = strikes >= cfg.stop_patience
            if on_checkpoint:
                prog = RLProgress(it, ema.value, baseline, best[0], best[2], list(records), skipped, stop, strikes)
                on_checkpoint(prog, actor, critic, best[1])
            if stop:
                log.info("rl stop: rougeL %.2f below budget (baseline %.2f)", v["rougeL"], base["rougeL"])
                stopped = True
                break
    actor.load_state_dict(best[1])
    actor.eval()
    return RLResult(actor, critic, records, best[2], baseline, stopped, skipped)
