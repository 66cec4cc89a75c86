"""The evaluation stack: n-gram metrics and the lemma-association analysis.

BLEU@4 and CIDEr measure similarity to reference captions; local Mutual
Information measures which lemmas are most characteristic of each caption
source. Finetuned captions typically trade a little reference similarity
for a lot of discriminative power, and the LMI table makes the style shift
visible: attribute words migrate to the finetuned side, hypernyms and
filler words stay with the imitation model.
"""

from discrilab import (CaptionStyle, TrainConfig, WorldConfig, bleu4, cider,
                       finetune, generate_world, init_policy, local_mi,
                       reference_caption, top_associated)
from discrilab.metrics import TaggedCaption
from discrilab.policy import decode_greedy
from discrilab.retriever import oracle_retriever
from discrilab.trainer import PretrainConfig, mle_pretrain
from discrilab.world import N_SPECIAL

# --- BLEU / CIDEr on hand-sized corpora -------------------------------------

cand = ["a", "red", "cube", "."]
ref = ["a", "red", "cube", "there", "."]
print("BLEU@4, candidate vs single reference:",
      f"{bleu4([cand], [[ref]]):.2f}")
print("BLEU@4 of a perfect candidate:",
      f"{bleu4([ref], [[ref]]):.2f}")

corpus_cands = [tuple("a b c d".split()), tuple("e f x y".split())]
corpus_refs = [[tuple("a b c d".split())], [tuple("e f g h".split())]]
print(f"CIDEr on a 2-image corpus (one perfect, one half-right): "
      f"{cider(corpus_cands, corpus_refs):.3f}")

# --- LMI: which lemmas belong to which captioner ------------------------------

world = generate_world(WorldConfig(seed=0))
retr = oracle_retriever(world)
params = init_policy(world.vocab, world.embedding_dim, 32, 32, seed=1)

# imitate an alt-text-flavored mixture: half vague, half abstract boilerplate
mle_pretrain(PretrainConfig(styles=(("vague", 0.5), ("abstract", 0.5)),
                            steps=800, batch_size=32, lr=0.5, seed=1),
             params, world)
pretrained = params.copy()
finetune(TrainConfig(batch_size=32, epochs=100, max_steps=250, seed=7,
                     rollout="sample", lr=1e-3), params, world, retr)


def tagged_corpus(p, label):
    out = []
    for item in world.items:
        cap = decode_greedy(p, item)
        toks = tuple((world.vocab.tokens[t], world.vocab.pos_tags[t])
                     for t in cap.tokens if t >= N_SPECIAL)
        out.append(TaggedCaption(item.id, label, toks))
    return out


entries = local_mi(tagged_corpus(pretrained, "pretrained")
                   + tagged_corpus(params, "discritune"))
print("\ntop lemmas most associated with each captioner (count-weighted LMI):")
for label in ("pretrained", "discritune"):
    top = top_associated(entries, label, pos=None, k=8)
    print(f"  {label:11s}: " + ", ".join(f"{e.lemma} ({e.lmi:.0f})" for e in top))

# reference-similarity check: the finetuned model should still score well
# against descriptive references on BLEU because it rediscovers them
refs = [[reference_caption(world, it, CaptionStyle("descriptive")).tokens]
        for it in world.items]
for label, p in (("pretrained", pretrained), ("discritune", params)):
    cands = [decode_greedy(p, it).tokens for it in world.items]
    print(f"  BLEU@4 vs descriptive references, {label}: "
          f"{bleu4(cands, refs):.2f}")
