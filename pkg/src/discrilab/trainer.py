"""Discriminative finetuning loop: rewards over candidate sets, REINFORCE
with variance-reduction baselines, Adam updates, in-batch distractors.

The policy rollout produces a caption, the frozen retriever scores it
against the target and its distractors, and the resulting scalar reward
weights the gradient of the caption's log-probability. Rewards never carry
gradient (the retriever is frozen and decoding is discrete), so each step
accumulates -(R - b) * grad log P per example and applies one Adam update.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import policy as pol
from .errors import ConfigError, NumericError
from .retriever import Retriever
from .world import (Caption, CaptionStyle, Item, MAX_CAPTION_TOKENS, World,
                    reference_caption)

logger = logging.getLogger(__name__)

REWARD_KINDS = ("log-probability", "accuracy", "cosine-similarity")
BASELINE_KINDS = ("none", "running-mean", "greedy-self-critical")
ROLLOUT_MODES = ("greedy", "sample", "beam")


def compute_reward(kind: str, retr: Retriever, caption: Caption,
                   target_embedding: np.ndarray,
                   distractor_embeddings: Sequence[np.ndarray]) -> float:
    """Scalar reward of `caption` for the target against its distractors.

    log-probability: target match minus logsumexp over all candidate
        matches (max-subtracted); exactly 0 when there are no distractors.
    accuracy: 1 if the target is strictly retrieved, else 0.
    cosine-similarity: normalized dot product with the target only,
        distractors ignored; zero-norm vectors give reward 0.
    """
    if kind == "log-probability":
        text = retr.encode_text(caption)
        scores = [float(text @ retr.encode_image(target_embedding))]
        scores += [float(text @ retr.encode_image(d)) for d in distractor_embeddings]
        arr = np.asarray(scores)
        m = arr.max()
        return float(arr[0] - m - math.log(np.exp(arr - m).sum()))
    if kind == "accuracy":
        return 1.0 if retr.retrieved(caption, target_embedding, distractor_embeddings) else 0.0
    if kind == "cosine-similarity":
        text = retr.encode_text(caption)
        image = retr.encode_image(target_embedding)
        denom = float(np.linalg.norm(text)) * float(np.linalg.norm(image))
        if denom == 0.0:
            logger.warning("zero-norm vector in cosine reward; returning 0")
            return 0.0
        return float(text @ image) / denom
    raise ConfigError(f"unknown reward kind {kind!r}")


@dataclass(frozen=True)
class BaselineState:
    """Variance-reduction baseline.

    running-mean keeps the exact cumulative mean of every reward seen so
    far (EGG-style); set ema_alpha to trade it for an exponential moving
    average. greedy-self-critical is stateless here: its per-example value
    is the greedy rollout's reward, computed inside reinforce_step.
    """

    kind: str = "running-mean"
    total: float = 0.0
    count: int = 0
    ema_alpha: float | None = None
    ema_value: float = 0.0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"unknown baseline kind {self.kind!r}")

    @property
    def value(self) -> float:
        if self.kind != "running-mean":
            return 0.0
        if self.ema_alpha is not None:
            return self.ema_value
        return self.total / self.count if self.count else 0.0


def update_baseline(state: BaselineState, rewards: Sequence[float]) -> BaselineState:
    """Fold a batch of rewards into the baseline state (post-advantage)."""
    if state.kind != "running-mean" or not len(rewards):
        return state
    if state.ema_alpha is not None:
        v = state.ema_value if state.count else float(rewards[0])
        start = 0 if state.count else 1
        for r in list(rewards)[start:]:
            v = (1.0 - state.ema_alpha) * v + state.ema_alpha * float(r)
        return replace(state, count=state.count + len(rewards), ema_value=v)
    return replace(state, total=state.total + float(np.sum(rewards)),
                   count=state.count + len(rewards))


class AdamState:
    """Adam with bias correction and a constant schedule."""

    def __init__(self, params: pol.PolicyParams, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(getattr(params, n)) for n in params.field_names()}
        self.v = {n: np.zeros_like(getattr(params, n)) for n in params.field_names()}

    def update(self, params: pol.PolicyParams, grads: Mapping[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        for name in params.field_names():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1 ** t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** t)
            getattr(params, name)[...] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    reward: str = "log-probability"
    baseline: str = "running-mean"
    rollout: str = "greedy"
    epochs: int = 1
    max_steps: int | None = None
    hard_k: int = 0
    seed: int = 0
    lr: float = 1e-3
    beam_size: int = 5
    max_len: int = MAX_CAPTION_TOKENS
    probe_every: int = 0
    probe_candidates: int = 20
    probe_targets: int = 64
    ema_alpha: float | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (need in-batch distractors)")
        if self.reward not in REWARD_KINDS:
            raise ConfigError(f"unknown reward kind {self.reward!r}")
        if self.baseline not in BASELINE_KINDS:
            raise ConfigError(f"unknown baseline kind {self.baseline!r}")
        if self.rollout not in ROLLOUT_MODES:
            raise ConfigError(f"unknown rollout mode {self.rollout!r}")
        if self.hard_k < 0 or self.hard_k >= self.batch_size:
            raise ConfigError("hard_k must be in [0, batch_size)")


def _example_rng(seed: int, step: int, index: int) -> np.random.Generator:
    # one stream per (seed, step, example) so parallel rollouts cannot change results
    return np.random.default_rng(np.random.SeedSequence((seed, step, index)))


def _rollout(params: pol.PolicyParams, item: Item, mode: str, rng, beam_size: int,
             max_len: int) -> Caption:
    if mode == "greedy":
        return pol.decode_greedy(params, item, max_len=max_len)
    if mode == "sample":
        return pol.sample(params, item, rng, max_len=max_len)
    return pol.decode_beam(params, item, beam_size=beam_size, max_len=max_len)


@dataclass
class StepResult:
    mean_reward: float
    mean_loss: float
    baseline: BaselineState
    baseline_value: float


def assemble_distractors(batch: Sequence[Item], j: int,
                         mined_ids: Sequence[int] | None,
                         embeddings: Mapping[int, np.ndarray] | None,
                         hard_k: int) -> list[np.ndarray]:
    """In-batch distractors for target j, optionally with k mined-hard swaps.

    Mined ids take the first k slots; the remainder is filled from the other
    batch members (skipping any already mined) up to batch_size - 1 total.
    """
    others = [it for i, it in enumerate(batch) if i != j]
    if not hard_k:
        return [it.embedding for it in others]
    mined = list(mined_ids[:hard_k])
    vecs = [embeddings[mid] for mid in mined]
    taken = set(mined)
    for it in others:
        if len(vecs) == len(others):
            break
        if it.id in taken:
            continue
        taken.add(it.id)
        vecs.append(it.embedding)
    return vecs


def reinforce_step(params: pol.PolicyParams, retr: Retriever, batch: Sequence[Item],
                   *, reward_kind: str = "log-probability",
                   baseline: BaselineState | None = None,
                   adam: AdamState | None = None,
                   rollout: str = "greedy", beam_size: int = 5,
                   max_len: int = MAX_CAPTION_TOKENS,
                   step_seed: int = 0, step_index: int = 0,
                   mined: Mapping[int, Sequence[int]] | None = None,
                   embeddings: Mapping[int, np.ndarray] | None = None,
                   hard_k: int = 0) -> StepResult:
    """One REINFORCE batch: rollouts, rewards, -(R - b) grad log P, Adam update.

    Advantages use the pre-batch baseline value; the baseline state is
    updated with this batch's rewards only afterwards. On any non-finite
    reward or gradient the step aborts and parameters stay untouched.
    """
    if len(batch) < 2:
        raise ConfigError("batch must contain at least 2 items")
    baseline = baseline or BaselineState(kind="none")
    adam = adam or AdamState(params)

    captions = []
    rewards = []
    baselines = []
    b_mean = baseline.value
    for j, item in enumerate(batch):
        rng = _example_rng(step_seed, step_index, j)
        caption = _rollout(params, item, rollout, rng, beam_size, max_len)
        distractors = assemble_distractors(
            batch, j, None if mined is None else mined.get(item.id), embeddings, hard_k)
        r = compute_reward(reward_kind, retr, caption, item.embedding, distractors)
        if not math.isfinite(r):
            raise NumericError(f"non-finite reward {r} for item {item.id}; step aborted")
        if baseline.kind == "greedy-self-critical":
            greedy_caption = pol.decode_greedy(params, item, max_len=max_len)
            b_j = compute_reward(reward_kind, retr, greedy_caption, item.embedding, distractors)
        else:
            b_j = b_mean
        captions.append(caption)
        rewards.append(r)
        baselines.append(b_j)

    tape = ad.Tape()
    run = pol.PolicyRun(tape, params.leaves(tape))
    total = None
    for item, caption, r, b_j in zip(batch, captions, rewards, baselines):
        lp = pol.caption_logprob(run, item.embedding, caption.tokens)
        term = ad.scale(lp, -(r - b_j))
        total = term if total is None else ad.add(total, term)
    loss = ad.scale(total, 1.0 / len(batch))
    ad.backward(tape, loss)
    grads = {name: run.p[name].grad for name in params.field_names()}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}; step aborted")
    adam.update(params, grads)
    new_baseline = update_baseline(baseline, rewards)
    return StepResult(mean_reward=float(np.mean(rewards)), mean_loss=float(loss.data),
                      baseline=new_baseline, baseline_value=b_mean)


@dataclass(frozen=True)
class PretrainConfig:
    """MLE pretraining over styled reference captions.

    styles is a weighted mixture, e.g. (("vague", 1.0),) or
    (("vague", 0.5), ("abstract", 0.5)) for an alt-text-flavored corpus.
    """

    styles: tuple[tuple[str, float], ...] = (("vague", 1.0),)
    drop_probability: float = 0.5
    steps: int = 1200
    batch_size: int = 32
    lr: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.styles or any(w <= 0 for _, w in self.styles):
            raise ConfigError("styles must be a nonempty positive-weight mixture")


def mle_pretrain(config: PretrainConfig, params: pol.PolicyParams,
                 world: World, log_path=None) -> list[dict]:
    """Maximize caption likelihood on freshly drawn styled references.

    Each step draws a batch of train items with replacement, samples one
    style per item from the mixture, and takes one mle_step. Returns (and
    optionally writes as JSON Lines) per-step {"step", "loss"} entries.
    """
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x31E)))
    styles = [CaptionStyle(kind, config.drop_probability) for kind, _ in config.styles]
    weights = np.array([w for _, w in config.styles])
    weights = weights / weights.sum()
    train_items = [world.items[i] for i in world.train_ids]
    log = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(config.steps):
            idx = rng.integers(0, len(train_items), config.batch_size)
            batch = []
            for i in idx:
                item = train_items[int(i)]
                style = styles[int(rng.choice(len(styles), p=weights))]
                batch.append((item, reference_caption(world, item, style, rng)))
            loss = pol.mle_step(params, batch, lr=config.lr)
            entry = {"step": step, "loss": loss}
            log.append(entry)
            if fh:
                fh.write(json.dumps(entry) + "\n")
    finally:
        if fh:
            fh.close()
    return log


@dataclass
class FinetuneResult:
    params: pol.PolicyParams
    log: list[dict] = field(default_factory=list)
    aborted: bool = False


def finetune(config: TrainConfig, params: pol.PolicyParams, world: World,
             retr: Retriever, log_path=None) -> FinetuneResult:
    """Run epochs x batches of reinforce_step over the train split.

    Deterministic given config.seed. Emits one JSON object per step
    ({"step", "mean_reward", "baseline", "p_at_1_probe"}) to log_path when
    given, and always returns the entries. A NaN reward aborts the run,
    leaving the parameters from the last completed step.
    """
    from .metrics import precision_at_1  # local import to avoid a cycle

    embeddings = world.embeddings()
    mined = None
    if config.hard_k > 0:
        from .retriever import mine_hard
        mined = {tid: mine_hard(embeddings, tid, world.train_ids, config.hard_k)
                 for tid in world.train_ids}

    adam = AdamState(params, lr=config.lr)
    baseline = BaselineState(kind=config.baseline, ema_alpha=config.ema_alpha)
    order_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xB47C)))
    probe_ids = list(world.test_ids[: config.probe_targets])
    pool_ids = [it.id for it in world.items]

    def probe() -> float:
        pairs = [(pol.decode_greedy(params, world.items[i], max_len=config.max_len), i)
                 for i in probe_ids]
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x9E0B)))
        return precision_at_1(retr, pairs, embeddings, pool_ids,
                              n_candidates=config.probe_candidates, rng=rng)

    result = FinetuneResult(params=params)
    fh = open(log_path, "w") if log_path else None
    step = 0
    try:
        for _ in range(config.epochs):
            ids = list(world.train_ids)
            order_rng.shuffle(ids)
            for lo in range(0, len(ids), config.batch_size):
                chunk = ids[lo: lo + config.batch_size]
                if len(chunk) < 2:
                    continue
                batch = [world.items[i] for i in chunk]
                try:
                    step_res = reinforce_step(
                        params, retr, batch,
                        reward_kind=config.reward, baseline=baseline, adam=adam,
                        rollout=config.rollout, beam_size=config.beam_size,
                        max_len=config.max_len, step_seed=config.seed,
                        step_index=step, mined=mined, embeddings=embeddings,
                        hard_k=config.hard_k)
                except NumericError as err:
                    logger.error("aborting finetune at step %d: %s", step, err)
                    result.aborted = True
                    return result
                baseline = step_res.baseline
                p1 = None
                if config.probe_every and (step + 1) % config.probe_every == 0:
                    p1 = probe()
                entry = {"step": step, "mean_reward": step_res.mean_reward,
                         "baseline": step_res.baseline_value, "p_at_1_probe": p1}
                result.log.append(entry)
                if fh:
                    fh.write(json.dumps(entry) + "\n")
                step += 1
                if config.max_steps is not None and step >= config.max_steps:
                    return result
        return result
    finally:
        if fh:
            fh.close()
