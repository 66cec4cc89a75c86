"""The full training story: imitate noisy captions, then make them
discriminative.

Stage 1 (MLE) teaches the policy to mimic vague references that often omit
attributes, so its captions underdetermine the item. Stage 2 (REINFORCE
against the frozen retriever) pays the policy for captions that let the
retriever pick the right item out of an in-batch lineup, which pulls the
language back toward complete, discriminative descriptions.

Runs in about a minute; expect held-out P@1 to climb well above the
imitation baseline. The finetuned captions often repeat attribute tokens
("red ring ring ring ..."): the frozen retriever sums token embeddings, so
repetition inflates match scores, and the reward happily exploits that
quirk. The retrieval gain is real; the language drifts toward whatever the
frozen scorer pays for.
"""

import numpy as np

from discrilab import (TrainConfig, WorldConfig, finetune, generate_world,
                       init_policy, precision_at_1)
from discrilab.policy import decode_greedy
from discrilab.retriever import oracle_retriever
from discrilab.trainer import PretrainConfig, mle_pretrain

world = generate_world(WorldConfig(seed=0))
retr = oracle_retriever(world)
params = init_policy(world.vocab, world.embedding_dim, 32, 32, seed=1)


def show_captions(tag, n=4):
    print(f"  {tag}:")
    for i in world.test_ids[:n]:
        item = world.items[i]
        cap = decode_greedy(params, item)
        text = " ".join(world.vocab.tokens[t] for t in cap.tokens)
        truth = "/".join(world.slots[s].values[item.attributes[s]] for s in range(3))
        print(f"    item {truth:24s} -> {text!r}")


def held_out_p1():
    pairs = [(decode_greedy(params, world.items[i]), i) for i in world.test_ids]
    return precision_at_1(retr, pairs, world.embeddings(),
                          [it.id for it in world.items], n_candidates=20,
                          rng=np.random.default_rng(123))


print("stage 1: MLE on vague references (each non-final attribute dropped "
      "with probability 0.5)")
log = mle_pretrain(PretrainConfig(styles=(("vague", 1.0),), steps=800,
                                  batch_size=32, lr=0.5, seed=1), params, world)
print(f"  loss {log[0]['loss']:.2f} -> {log[-1]['loss']:.2f}")
show_captions("greedy captions after imitation")
pre = held_out_p1()
print(f"  held-out P@1(20 candidates) = {pre:.3f}")

print("\nstage 2: discriminative finetuning (sampled rollouts, running-mean "
      "baseline, in-batch distractors)")
cfg = TrainConfig(batch_size=32, epochs=100, max_steps=250, seed=7,
                  rollout="sample", lr=1e-3, probe_every=50)
res = finetune(cfg, params, world, retr)
rewards = [e["mean_reward"] for e in res.log]
print(f"  mean reward {rewards[0]:.2f} -> {rewards[-1]:.2f} over {len(rewards)} steps")
probes = [(e["step"], e["p_at_1_probe"]) for e in res.log if e["p_at_1_probe"] is not None]
for step, p1 in probes:
    print(f"    step {step:3d}: probe P@1 = {p1:.3f}")
show_captions("greedy captions after finetuning")
post = held_out_p1()
print(f"  held-out P@1(20 candidates) = {post:.3f}  (gain {post - pre:+.3f})")
