"""Operator entry point wiring the pipeline end to end.

Subcommands: world-gen | pretrain | finetune | eval | analyze | mine |
study-build | serve. Values resolve as CLI flag > config-file section >
built-in default, and every subcommand copies its resolved configuration
into the output directory.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import metrics as mt
from . import policy as pol
from . import study as st
from . import trainer as tr
from . import world as tw
from .errors import ConfigError, DataError, NumericError
from .retriever import mine_hard, oracle_retriever
from .study_http import StudyService, serve_forever


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"bad TOML in {path}: {err}") from err


def _resolve(args, section: dict, keys: list[str]) -> dict:
    """flag > config section > built-in default, per key.

    Registered flags use argparse.SUPPRESS as their parser default, so a
    flag's presence in the namespace means the user actually typed it.
    """
    out = {}
    for key in keys:
        attr = key.replace("-", "_")
        if hasattr(args, attr):
            out[key] = getattr(args, attr)
        elif key in section:
            out[key] = section[key]
        else:
            out[key] = args._defaults_cache[key]
    return out


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, name: str, resolved: dict) -> None:
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump({"subcommand": name, "resolved": resolved}, fh, indent=1)


def _load_world(path) -> tw.World:
    world_file = Path(path) / "world.json" if Path(path).is_dir() else Path(path)
    if not world_file.exists():
        raise DataError(f"world-gen artifact missing: {world_file}")
    return tw.load_world(world_file)


def _parse_styles(spec: str):
    """'vague' or 'vague=0.5,abstract=0.5' -> weighted style tuple."""
    parts = []
    for chunk in spec.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" in chunk:
            kind, w = chunk.split("=", 1)
            try:
                parts.append((kind.strip(), float(w)))
            except ValueError as err:
                raise ConfigError(f"bad style weight in {spec!r}") from err
        else:
            parts.append((chunk, 1.0))
    if not parts:
        raise ConfigError(f"empty style spec {spec!r}")
    return tuple(parts)


def _caption_text(world: tw.World, caption: tw.Caption) -> str:
    return " ".join(world.vocab.tokens[t] for t in caption.tokens
                    if t not in (tw.BOS_ID, tw.EOS_ID))


def _decode(params, world, item, mode: str, beam_size: int):
    if mode == "greedy":
        return pol.decode_greedy(params, item)
    return pol.decode_beam(params, item, beam_size=beam_size)


def _tagged(world: tw.World, caption: tw.Caption, caption_id: int, label: str):
    tokens = [(world.vocab.tokens[t], world.vocab.pos_tags[t])
              for t in caption.tokens if t >= tw.N_SPECIAL]
    return mt.TaggedCaption(caption_id=caption_id, caption_type=label,
                            tokens=tuple(tokens))


# --- subcommands -------------------------------------------------------------

def cmd_world_gen(args, section) -> int:
    keys = ["seed", "noise-sigma", "split-fraction"]
    r = _resolve(args, section, keys)
    slots = tw.default_slots()
    if "slots" in section:
        slots = tuple(tw.SlotSpec(s["name"], tuple(s["values"]), s["hypernym"],
                                  s.get("pos", "ADJ")) for s in section["slots"])
    config = tw.WorldConfig(slots=slots, noise_sigma=r["noise-sigma"],
                            seed=r["seed"], split_fraction=r["split-fraction"])
    world = tw.generate_world(config)
    out = _out_dir(args.out)
    tw.save_world(out / "world.json", world)
    tw.save_embeddings(out / "embeddings.demb", world.embeddings())
    _write_resolved(out, "world-gen", {**r, "slots": [s.name for s in slots],
                                       "n_items": len(world.items)})
    print(f"world-gen: {len(world.items)} items, vocab {len(world.vocab)}, "
          f"train {len(world.train_ids)} / test {len(world.test_ids)} -> {out}")
    return 0


def cmd_pretrain(args, section) -> int:
    keys = ["style", "steps", "batch-size", "lr", "seed", "embed-dim",
            "hidden-dim", "drop-probability"]
    r = _resolve(args, section, keys)
    world = _load_world(args.world)
    params = pol.init_policy(world.vocab, world.embedding_dim,
                             embed_dim=r["embed-dim"], hidden_dim=r["hidden-dim"],
                             seed=r["seed"])
    cfg = tr.PretrainConfig(styles=_parse_styles(r["style"]),
                            drop_probability=r["drop-probability"],
                            steps=r["steps"], batch_size=r["batch-size"],
                            lr=r["lr"], seed=r["seed"])
    out = _out_dir(args.out)
    log = tr.mle_pretrain(cfg, params, world, log_path=out / "pretrain_log.jsonl")
    pol.save_policy(out / "policy.dpol", params)
    _write_resolved(out, "pretrain", r)
    print(f"pretrain: {len(log)} steps, final loss {log[-1]['loss']:.4f} -> {out}")
    return 0


def cmd_finetune(args, section) -> int:
    keys = ["batch-size", "reward", "baseline", "rollout", "epochs", "max-steps",
            "hard-k", "seed", "lr", "beam-size", "probe-every", "probe-candidates"]
    r = _resolve(args, section, keys)
    world = _load_world(args.world)
    params = pol.load_policy(args.checkpoint)
    retr = oracle_retriever(world)
    cfg = tr.TrainConfig(batch_size=r["batch-size"], reward=r["reward"],
                         baseline=r["baseline"], rollout=r["rollout"],
                         epochs=r["epochs"], max_steps=r["max-steps"],
                         hard_k=r["hard-k"], seed=r["seed"], lr=r["lr"],
                         beam_size=r["beam-size"], probe_every=r["probe-every"],
                         probe_candidates=r["probe-candidates"])
    out = _out_dir(args.out)
    res = tr.finetune(cfg, params, world, retr, log_path=out / "train_log.jsonl")
    pol.save_policy(out / "policy.dpol", res.params)
    _write_resolved(out, "finetune", r)
    if res.aborted:
        print("finetune: diverged; last-good checkpoint written", file=sys.stderr)
        return 4
    last = res.log[-1]["mean_reward"] if res.log else float("nan")
    print(f"finetune: {len(res.log)} steps, last mean reward {last:.4f} -> {out}")
    return 0


def cmd_eval(args, section) -> int:
    keys = ["n-candidates", "decode", "beam-size", "seed", "split", "label"]
    r = _resolve(args, section, keys)
    world = _load_world(args.world)
    params = pol.load_policy(args.checkpoint)
    retr = oracle_retriever(world)
    ids = world.test_ids if r["split"] == "test" else world.train_ids
    items = [world.items[i] for i in ids]
    captions = [_decode(params, world, it, r["decode"], r["beam-size"]) for it in items]
    embeddings = world.embeddings()
    pool = [it.id for it in world.items]
    p1 = mt.precision_at_1(retr, list(zip(captions, [it.id for it in items])),
                           embeddings, pool, n_candidates=r["n-candidates"],
                           rng=np.random.default_rng(r["seed"]))
    refs = [[tw.reference_caption(world, it, tw.CaptionStyle("descriptive")).tokens]
            for it in items]
    cands = [c.tokens for c in captions]
    report = mt.metric_report(p1, mt.bleu4(cands, refs), mt.cider(cands, refs))
    out = _out_dir(args.out)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
    if args.corpus_out:
        tagged = [_tagged(world, c, it.id, r["label"])
                  for c, it in zip(captions, items)]
        mt.write_tagged_corpus(args.corpus_out, tagged)
    _write_resolved(out, "eval", r)
    print(f"eval[{r['label']}]: p@1({r['n-candidates']}) {report['p_at_1']:.4f} "
          f"bleu4 {report['bleu4']:.2f} cider {report['cider']:.2f} -> {out}")
    return 0


def cmd_analyze(args, section) -> int:
    corpora = []
    for path in args.corpus:
        corpora.extend(mt.read_tagged_corpus(path))
    entries = mt.local_mi(corpora)
    out = _out_dir(args.out)
    mt.write_lmi_csv(out / "lmi.csv", entries)
    _write_resolved(out, "analyze", {"corpora": [str(p) for p in args.corpus]})
    types = sorted({e.caption_type for e in entries})
    for ctype in types:
        top = mt.top_associated(entries, ctype, pos=None, k=5)
        short = ", ".join(e.lemma for e in top)
        print(f"analyze[{ctype}]: top lemmas {short}")
    print(f"analyze: {len(entries)} entries -> {out / 'lmi.csv'}")
    return 0


def cmd_mine(args, section) -> int:
    keys = ["k"]
    r = _resolve(args, section, keys)
    world = _load_world(args.world)
    embeddings = world.embeddings()
    sets = {tid: mine_hard(embeddings, tid, world.train_ids, r["k"])
            for tid in world.train_ids}
    out = _out_dir(args.out)
    with open(out / "mined.json", "w", encoding="utf-8") as fh:
        json.dump({"k": r["k"], "provenance": "mined-hard",
                   "sets": {str(t): ids for t, ids in sets.items()}}, fh)
    _write_resolved(out, "mine", r)
    print(f"mine: k={r['k']} hard distractors for {len(sets)} targets -> {out}")
    return 0


def cmd_study_build(args, section) -> int:
    keys = ["n-targets", "n-controls", "seed", "beam-size", "neighbor-cap"]
    r = _resolve(args, section, keys)
    world = _load_world(args.world)
    captions_by_type: dict[str, dict[int, str]] = {"human": {}}
    for it in world.items:
        ref = tw.reference_caption(world, it, tw.CaptionStyle("descriptive"))
        captions_by_type["human"][it.id] = _caption_text(world, ref)
    for spec in args.captions or []:
        if "=" not in spec:
            raise ConfigError(f"--captions needs label=checkpoint, got {spec!r}")
        label, ckpt = spec.split("=", 1)
        params = pol.load_policy(ckpt)
        captions_by_type[label] = {
            it.id: _caption_text(world, pol.decode_beam(params, it,
                                                        beam_size=r["beam-size"]))
            for it in world.items}
    out = _out_dir(args.out)
    st.write_media(world, out / "media")
    pool = st.build_trials(world.embeddings(), captions_by_type,
                           n_targets=r["n-targets"], n_controls=r["n-controls"],
                           rng=np.random.default_rng(r["seed"]),
                           cap=r["neighbor-cap"])
    pool.save(out / "trials.json")
    _write_resolved(out, "study-build", {**r, "types": sorted(captions_by_type)})
    print(f"study-build: {len(pool.trials)} trials over {r['n-targets']} sets, "
          f"{len(pool.controls)} controls -> {out}")
    return 0


def cmd_serve(args, section) -> int:
    keys = ["host", "port", "seed"]
    r = _resolve(args, section, keys)
    study_dir = Path(args.study)
    trials = study_dir / "trials.json"
    if not trials.exists():
        raise DataError(f"study-build artifact missing: {trials}")
    pool = st.TrialPool.load(trials)
    service = StudyService(pool, study_dir, seed=r["seed"])
    serve_forever(service, r["host"], r["port"], media_dir=study_dir / "media")
    return 0


# --- argument wiring -----------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    ap = argparse.ArgumentParser(prog="discrilab", description=__doc__)
    ap.add_argument("--config", default=None, help="TOML config; flags override")
    sub = ap.add_subparsers(dest="command", required=True)
    registry: dict[str, dict] = {}

    def new(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        defaults: dict = {}
        registry[name] = defaults
        p.set_defaults(fn=fn, _section=name.replace("-", "_"))

        def add(flag, default, **kw):
            p.add_argument(f"--{flag}", default=argparse.SUPPRESS, **kw)
            defaults[flag] = default

        return p, add

    p, add = new("world-gen", cmd_world_gen, "generate the synthetic world + embeddings")
    p.add_argument("--out", required=True)
    add("seed", 0, type=int)
    add("noise-sigma", 0.0, type=float)
    add("split-fraction", 0.8, type=float)

    p, add = new("pretrain", cmd_pretrain, "MLE-pretrain the captioner on styled references")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    add("style", "vague", help="e.g. vague or vague=0.5,abstract=0.5")
    add("steps", 1200, type=int)
    add("batch-size", 32, type=int)
    add("lr", 0.5, type=float)
    add("seed", 0, type=int)
    add("embed-dim", 32, type=int)
    add("hidden-dim", 32, type=int)
    add("drop-probability", 0.5, type=float)

    p, add = new("finetune", cmd_finetune, "discriminative REINFORCE finetuning")
    p.add_argument("--world", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    add("batch-size", 100, type=int)
    add("reward", "log-probability", choices=tr.REWARD_KINDS)
    add("baseline", "running-mean", choices=tr.BASELINE_KINDS)
    add("rollout", "greedy", choices=tr.ROLLOUT_MODES)
    add("epochs", 1, type=int)
    add("max-steps", None, type=int)
    add("hard-k", 0, type=int)
    add("seed", 0, type=int)
    add("lr", 1e-3, type=float)
    add("beam-size", 5, type=int)
    add("probe-every", 0, type=int)
    add("probe-candidates", 20, type=int)

    p, add = new("eval", cmd_eval, "retrieval P@1 + BLEU/CIDEr metric report")
    p.add_argument("--world", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus-out", default=None,
                   help="also write the tagged caption corpus (JSON Lines)")
    add("n-candidates", 100, type=int)
    add("decode", "beam", choices=("beam", "greedy"))
    add("beam-size", 5, type=int)
    add("seed", 0, type=int)
    add("split", "test", choices=("test", "train"))
    add("label", "model")

    p, _ = new("analyze", cmd_analyze, "local-MI lemma association analysis")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p, add = new("mine", cmd_mine, "emit hard-negative candidate sets")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    add("k", 5, type=int)

    p, add = new("study-build", cmd_study_build, "construct human-study trials + media")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--captions", nargs="*", default=[],
                   help="label=checkpoint pairs decoded into caption types")
    add("n-targets", 100, type=int)
    add("n-controls", 5, type=int)
    add("seed", 0, type=int)
    add("beam-size", 5, type=int)
    add("neighbor-cap", 0.8, type=float)

    p, add = new("serve", cmd_serve, "serve the annotation HTTP API")
    p.add_argument("--study", required=True)
    add("host", "127.0.0.1")
    add("port", 8765, type=int)
    add("seed", 0, type=int)
    return ap, registry


def main(argv=None) -> int:
    ap, registry = build_parser()
    args = ap.parse_args(argv)
    try:
        config = _load_config(args.config)
        section = config.get(args._section, {})
        args._defaults_cache = registry[args.command]
        return args.fn(args, section)
    except ConfigError as err:
        print(f"{args.command}: config error: {err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"{args.command}: data error: {err}", file=sys.stderr)
        return 3
    except NumericError as err:
        print(f"{args.command}: numeric failure: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
