import json

import pytest

from discrilab import policy as pol
from discrilab.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    """A small once-per-module pipeline: world + short pretrain."""
    root = tmp_path_factory.mktemp("lab")
    assert run("world-gen", "--out", root / "world") == 0
    assert run("pretrain", "--world", root / "world", "--out", root / "pre",
               "--steps", 40, "--embed-dim", 12, "--hidden-dim", 12) == 0
    return root


def test_world_gen_artifacts(lab):
    out = lab / "world"
    assert (out / "world.json").exists()
    assert (out / "embeddings.demb").exists()
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["subcommand"] == "world-gen"
    assert resolved["resolved"]["n_items"] == 256


def test_finetune_zero_steps_checkpoint_identical(lab, tmp_path):
    assert run("finetune", "--world", lab / "world",
               "--checkpoint", lab / "pre" / "policy.dpol",
               "--out", tmp_path / "ft0", "--epochs", 0, "--batch-size", 8) == 0
    before = (lab / "pre" / "policy.dpol").read_bytes()
    after = (tmp_path / "ft0" / "policy.dpol").read_bytes()
    assert before == after


def test_full_pipeline_is_byte_deterministic(tmp_path):
    reports = []
    checkpoints = []
    for tag in ("a", "b"):
        root = tmp_path / tag
        assert run("world-gen", "--out", root / "world", "--seed", 3) == 0
        assert run("pretrain", "--world", root / "world", "--out", root / "pre",
                   "--steps", 30, "--embed-dim", 8, "--hidden-dim", 8,
                   "--seed", 5) == 0
        assert run("finetune", "--world", root / "world",
                   "--checkpoint", root / "pre" / "policy.dpol",
                   "--out", root / "ft", "--batch-size", 8, "--max-steps", 3,
                   "--epochs", 1, "--rollout", "sample", "--seed", 11) == 0
        assert run("eval", "--world", root / "world",
                   "--checkpoint", root / "ft" / "policy.dpol",
                   "--out", root / "eval", "--n-candidates", 10,
                   "--decode", "greedy", "--seed", 2) == 0
        reports.append((root / "eval" / "report.json").read_bytes())
        checkpoints.append((root / "ft" / "policy.dpol").read_bytes())
    assert reports[0] == reports[1]
    assert checkpoints[0] == checkpoints[1]


def test_eval_report_fields_and_corpus(lab, tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    assert run("eval", "--world", lab / "world",
               "--checkpoint", lab / "pre" / "policy.dpol",
               "--out", tmp_path / "eval", "--n-candidates", 10,
               "--decode", "greedy", "--label", "pretrained",
               "--corpus-out", corpus) == 0
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert set(report) == {"p_at_1", "bleu4", "cider"}
    assert 0.0 <= report["p_at_1"] <= 1.0
    lines = [json.loads(l) for l in corpus.read_text().splitlines()]
    assert all(l["type"] == "pretrained" for l in lines)
    assert all({"lemma", "pos"} == set(t) for l in lines for t in l["tokens"])


def test_analyze_writes_csv(lab, tmp_path):
    corpus_a = tmp_path / "a.jsonl"
    corpus_b = tmp_path / "b.jsonl"
    run("eval", "--world", lab / "world", "--checkpoint", lab / "pre" / "policy.dpol",
        "--out", tmp_path / "ea", "--n-candidates", 10, "--decode", "greedy",
        "--label", "one", "--corpus-out", corpus_a)
    run("eval", "--world", lab / "world", "--checkpoint", lab / "pre" / "policy.dpol",
        "--out", tmp_path / "eb", "--n-candidates", 10, "--decode", "beam",
        "--label", "two", "--corpus-out", corpus_b)
    assert run("analyze", "--corpus", corpus_a, corpus_b,
               "--out", tmp_path / "lmi") == 0
    lines = (tmp_path / "lmi" / "lmi.csv").read_text().splitlines()
    assert lines[0] == "type,pos,lemma,lmi,count"
    assert len(lines) > 1


def test_mine_matches_library(lab, tmp_path):
    from discrilab.retriever import mine_hard
    from discrilab.world import load_world
    assert run("mine", "--world", lab / "world", "--out", tmp_path / "m", "--k", 4) == 0
    mined = json.loads((tmp_path / "m" / "mined.json").read_text())
    assert mined["k"] == 4
    world = load_world(lab / "world" / "world.json")
    emb = world.embeddings()
    some_target = world.train_ids[0]
    assert mined["sets"][str(some_target)] == mine_hard(emb, some_target,
                                                        world.train_ids, 4)


def test_study_build_artifacts(lab, tmp_path):
    assert run("study-build", "--world", lab / "world", "--out", tmp_path / "study",
               "--captions", f"pretrained={lab / 'pre' / 'policy.dpol'}",
               "--n-targets", 6, "--n-controls", 2) == 0
    pool = json.loads((tmp_path / "study" / "trials.json").read_text())
    assert len(pool["trials"]) == 12  # 6 sets x (human + pretrained)
    assert len(pool["controls"]) == 2
    assert (tmp_path / "study" / "media" / "item_00000.svg").exists()


def test_exit_code_config_error(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("this is not toml [[[")
    assert run("--config", bad, "world-gen", "--out", tmp_path / "w") == 2


def test_exit_code_data_error(tmp_path):
    assert run("pretrain", "--world", tmp_path / "missing", "--out", tmp_path / "p",
               "--steps", 1) == 3


def test_exit_code_insufficient_study(lab, tmp_path):
    assert run("study-build", "--world", lab / "world", "--out", tmp_path / "s",
               "--n-targets", 200) == 3


def test_explicit_flag_equal_to_default_still_beats_config(lab, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text("[pretrain]\nsteps = 9\n")
    assert run("--config", cfg, "pretrain", "--world", lab / "world",
               "--out", tmp_path / "p", "--steps", 1200, "--embed-dim", 8,
               "--hidden-dim", 8) == 0
    log = (tmp_path / "p" / "pretrain_log.jsonl").read_text().splitlines()
    assert len(log) == 1200


def test_config_file_supplies_defaults_flags_override(lab, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('[pretrain]\nsteps = 7\nembed_dim = 8\n'.replace("embed_dim", "embed-dim"))
    assert run("--config", cfg, "pretrain", "--world", lab / "world",
               "--out", tmp_path / "p1") == 0
    log = (tmp_path / "p1" / "pretrain_log.jsonl").read_text().splitlines()
    assert len(log) == 7  # from the config file
    assert run("--config", cfg, "pretrain", "--world", lab / "world",
               "--out", tmp_path / "p2", "--steps", 3) == 0
    log2 = (tmp_path / "p2" / "pretrain_log.jsonl").read_text().splitlines()
    assert len(log2) == 3  # flag wins
    params = pol.load_policy(tmp_path / "p1" / "policy.dpol")
    assert params.embed_dim == 8


def test_finetune_divergence_exits_4(tmp_path, lab, monkeypatch):
    import discrilab.cli as cli
    import discrilab.trainer as trainer

    def exploding(*args, **kwargs):
        from discrilab.errors import NumericError
        raise NumericError("boom")

    monkeypatch.setattr(trainer, "reinforce_step", exploding)
    code = run("finetune", "--world", lab / "world",
               "--checkpoint", lab / "pre" / "policy.dpol",
               "--out", tmp_path / "ft", "--batch-size", 8, "--max-steps", 1)
    assert code == 4
    assert (tmp_path / "ft" / "policy.dpol").exists()  # last-good checkpoint
