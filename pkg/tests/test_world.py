import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from discrilab import world as tw
from discrilab.errors import ConfigError


def small_config(**kw):
    slots = (
        tw.SlotSpec("color", ("red", "green", "blue", "black"), "thing", "ADJ"),
        tw.SlotSpec("shape", ("cube", "sphere", "cone", "ring"), "object", "NOUN"),
        tw.SlotSpec("size", ("tiny", "small", "big", "huge"), "item", "ADJ"),
    )
    return tw.WorldConfig(slots=slots, **kw)


def test_world_size_is_slot_product():
    world = tw.generate_world(small_config())
    assert len(world.items) == 4 * 4 * 4


def test_same_seed_identical_worlds():
    cfg = small_config(noise_sigma=0.3, seed=11)
    w1 = tw.generate_world(cfg)
    w2 = tw.generate_world(cfg)
    assert w1.train_ids == w2.train_ids and w1.test_ids == w2.test_ids
    for a, b in zip(w1.items, w2.items):
        assert a.attributes == b.attributes
        assert a.embedding.tobytes() == b.embedding.tobytes()


def test_clean_embedding_is_concatenated_onehots():
    world = tw.generate_world(tw.WorldConfig(seed=5))  # default 8/8/4 slots
    item = next(it for it in world.items if it.attributes == (2, 1, 3))
    expected = np.zeros(20)
    expected[2] = 1.0
    expected[8 + 1] = 1.0
    expected[16 + 3] = 1.0
    np.testing.assert_array_equal(item.embedding, expected)


def test_distinct_items_distinct_embeddings():
    world = tw.generate_world(small_config())
    for a, b in itertools.combinations(world.items[:20], 2):
        hamming = sum(x != y for x, y in zip(a.attributes, b.attributes))
        assert hamming >= 1
        dist = np.linalg.norm(a.embedding - b.embedding)
        assert dist >= np.sqrt(2) - 1e-12


def test_split_disjoint_exhaustive_deterministic():
    cfg = small_config(seed=3, split_fraction=0.8)
    world = tw.generate_world(cfg)
    train, test = set(world.train_ids), set(world.test_ids)
    assert train.isdisjoint(test)
    assert train | test == {it.id for it in world.items}
    assert len(train) == round(0.8 * 64)
    again = tw.generate_world(cfg)
    assert again.train_ids == world.train_ids


def test_item_cap_refused():
    slots = tuple(tw.SlotSpec(f"s{i}", tuple(f"v{i}_{j}" for j in range(10)), f"h{i}")
                  for i in range(7))
    with pytest.raises(ConfigError, match="refus"):
        tw.generate_world(tw.WorldConfig(slots=slots))


def test_config_validation():
    with pytest.raises(ConfigError):
        tw.WorldConfig(slots=(tw.SlotSpec("only", ("a", "b"), "h"),)).validate()
    with pytest.raises(ConfigError):
        tw.WorldConfig(slots=(tw.SlotSpec("a", ("x",), "h"),
                              tw.SlotSpec("b", ("y", "z"), "h2"))).validate()
    with pytest.raises(ConfigError):
        small_config(split_fraction=1.5).validate()


def test_descriptive_caption_names_every_attribute():
    world = tw.generate_world(small_config())
    item = world.items[17]
    cap = tw.reference_caption(world, item, tw.CaptionStyle("descriptive"))
    words = [world.vocab.tokens[t] for t in cap.tokens]
    assert words[-1] == "."
    assert words[:-1] == [world.slots[s].values[item.attributes[s]] for s in range(3)]


def test_descriptive_captions_unique_per_item():
    world = tw.generate_world(small_config())
    caps = {tw.reference_caption(world, it, tw.CaptionStyle("descriptive")).tokens
            for it in world.items}
    assert len(caps) == len(world.items)


def test_vague_zero_drop_equals_descriptive():
    world = tw.generate_world(small_config())
    rng = np.random.default_rng(0)
    for item in world.items[:10]:
        vague = tw.reference_caption(world, item, tw.CaptionStyle("vague", 0.0), rng)
        desc = tw.reference_caption(world, item, tw.CaptionStyle("descriptive"))
        assert vague.tokens == desc.tokens


def test_vague_keeps_final_attribute_and_collides():
    world = tw.generate_world(small_config())
    rng = np.random.default_rng(42)
    style = tw.CaptionStyle("vague", 0.5)
    seen = []
    final_tokens = set(world.attr_token_ids[-1])
    for item in world.items:
        cap = tw.reference_caption(world, item, style, rng)
        assert cap.tokens[-1] == tw.PERIOD_ID
        assert len(cap.tokens) >= 2
        assert cap.tokens[-2] in final_tokens
        seen.append(cap.tokens)
    # many-to-one: some items share a caption
    assert len(set(seen)) < len(seen)


def test_abstract_caption_has_no_attribute_tokens():
    world = tw.generate_world(small_config())
    attr_ids = world.attribute_value_token_ids()
    for item in world.items[:5]:
        cap = tw.reference_caption(world, item, tw.CaptionStyle("abstract"))
        assert not set(cap.tokens) & attr_ids
        assert cap.tokens[-1] == tw.PERIOD_ID
        assert set(cap.tokens[:-1]) == set(world.hypernym_ids) | set(world.filler_ids)


@given(st.integers(min_value=0, max_value=2 ** 63 - 1))
@settings(max_examples=20, deadline=None)
def test_split_is_deterministic_function_of_seed(seed):
    cfg = small_config(seed=seed)
    assert tw.generate_world(cfg).train_ids == tw.generate_world(cfg).train_ids


def test_caption_invariants():
    with pytest.raises(ValueError, match="40"):
        tw.Caption(tokens=tuple([3] * 41))
    with pytest.raises(ValueError, match="BOS"):
        tw.Caption(tokens=(tw.BOS_ID, 3, tw.PERIOD_ID))
    with pytest.raises(ValueError, match="logprobs"):
        tw.Caption(tokens=(3, tw.PERIOD_ID), token_logprobs=(0.0,))


def test_vocab_layout():
    world = tw.generate_world(small_config())
    v = world.vocab
    assert v.tokens[:3] == ("<bos>", "<eos>", ".")
    assert v.id_of("red") == 3
    assert len(set(v.tokens)) == len(v.tokens)
    assert v.n_emittable == len(v) - 2


# --- DEMB embedding file format ----------------------------------------------

def test_embeddings_round_trip_bit_identical(tmp_path):
    path = tmp_path / "t.demb"
    table = {0: np.array([1.0, 0.0, 0.25]), 7: np.array([0.5, -2.0, 3.0])}
    tw.save_embeddings(path, table)
    loaded = tw.load_embeddings(path)
    assert set(loaded) == {0, 7}
    for k in table:
        assert loaded[k].tobytes() == table[k].tobytes()
    assert all(v.shape == (3,) for v in loaded.values())


def test_embeddings_magic_error(tmp_path):
    path = tmp_path / "bad.demb"
    path.write_bytes(b"NOPE" + b"\x00" * 30)
    with pytest.raises(tw.EmbeddingMagicError, match="DEMB"):
        tw.load_embeddings(path)


def test_embeddings_truncated_names_byte_counts(tmp_path):
    path = tmp_path / "t.demb"
    tw.save_embeddings(path, {0: np.zeros(4), 1: np.ones(4)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(tw.EmbeddingTruncatedError, match=r"expected \d+ bytes, got \d+"):
        tw.load_embeddings(path)


def test_embeddings_duplicate_id(tmp_path):
    import struct
    path = tmp_path / "t.demb"
    vec = np.zeros(2, dtype="<f4").tobytes()
    payload = (b"DEMB" + struct.pack("<H", 1) + struct.pack("<I", 2)
               + struct.pack("<Q", 2)
               + struct.pack("<Q", 5) + vec + struct.pack("<Q", 5) + vec)
    path.write_bytes(payload)
    with pytest.raises(tw.EmbeddingDuplicateIdError, match="5"):
        tw.load_embeddings(path)


def test_embeddings_dimension_disagreement(tmp_path):
    path = tmp_path / "t.demb"
    tw.save_embeddings(path, {0: np.zeros(3)})
    with pytest.raises(tw.EmbeddingDimensionError, match="3"):
        tw.load_embeddings(path, expect_dim=5)
    with pytest.raises(tw.EmbeddingDimensionError):
        tw.save_embeddings(tmp_path / "u.demb", {0: np.zeros(3), 1: np.zeros(4)})


def test_embeddings_header_echo(tmp_path):
    path = tmp_path / "t.demb"
    tw.save_embeddings(path, {3: np.zeros(3), 9: np.ones(3)})
    loaded = tw.load_embeddings(path)
    assert len(loaded) == 2 and all(v.size == 3 for v in loaded.values())
