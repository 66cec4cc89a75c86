"""Desk-scale lab for discriminative finetuning of a toy caption policy
against a frozen retriever, with its evaluation and human-study stack."""

from .world import (Caption, CaptionStyle, Item, SlotSpec, Vocab, World,
                    WorldConfig, default_slots, generate_world,
                    load_embeddings, reference_caption, save_embeddings)
from .retriever import (CandidateSet, Retriever, mine_hard, neighbor_set,
                        oracle_retriever, random_retriever)
from .policy import (PolicyParams, decode_beam, decode_greedy, init_policy,
                     load_policy, log_prob, mle_step, sample, save_policy,
                     step_logits)
from .trainer import (AdamState, BaselineState, PretrainConfig, TrainConfig,
                      compute_reward, finetune, mle_pretrain, reinforce_step,
                      update_baseline)
from .metrics import (LmiEntry, TaggedCaption, bleu4, cider, local_mi,
                      precision_at_1, read_tagged_corpus, top_associated,
                      write_tagged_corpus)

__version__ = "0.1.0"
