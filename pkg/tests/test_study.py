import json
import threading
from dataclasses import asdict
from urllib.error import HTTPError
from urllib.request import Request, urlopen

import numpy as np
import pytest

from discrilab import study as st
from discrilab import world as tw
from discrilab.errors import DataError
from discrilab.study import StudyProtocolError
from discrilab.study_http import StudyService, make_server

TYPES = ("human", "pretrained", "discritune")


def synthetic_inputs(n_items, seed=0, dim=8):
    rng = np.random.default_rng(seed)
    emb = {i: rng.standard_normal(dim) for i in range(n_items)}
    caps = {t: {i: f"{t} caption for {i}" for i in range(n_items)} for t in TYPES}
    return emb, caps, rng


@pytest.fixture(scope="module")
def big_pool():
    emb, caps, rng = synthetic_inputs(1400, seed=1)
    return st.build_trials(emb, caps, n_targets=120, n_controls=15,
                           rng=np.random.default_rng(2))


# --- build_trials ---------------------------------------------------------------

def test_build_trials_counts_and_pairing():
    emb, caps, _ = synthetic_inputs(120)
    pool = st.build_trials(emb, caps, n_targets=5, n_controls=2,
                           rng=np.random.default_rng(0))
    assert len(pool.trials) == 15  # 5 sets x 3 types
    by_set = {}
    for t in pool.trials:
        by_set.setdefault(t.set_id, []).append(t)
    for trials in by_set.values():
        assert sorted(t.caption_type for t in trials) == sorted(TYPES)
        sets = {(t.target_id, t.distractor_ids) for t in trials}
        assert len(sets) == 1  # identical candidate set per type


def test_build_trials_sets_are_disjoint():
    emb, caps, _ = synthetic_inputs(200)
    pool = st.build_trials(emb, caps, n_targets=8, n_controls=3,
                           rng=np.random.default_rng(5))
    seen = set()
    for set_id in {t.set_id for t in pool.trials}:
        trial = next(t for t in pool.trials if t.set_id == set_id)
        items = {trial.target_id, *trial.distractor_ids}
        assert not items & seen
        seen |= items


def test_control_items_absent_from_main_trials():
    emb, caps, _ = synthetic_inputs(150)
    pool = st.build_trials(emb, caps, n_targets=6, n_controls=4,
                           rng=np.random.default_rng(1))
    main_items = {i for t in pool.trials for i in (t.target_id, *t.distractor_ids)}
    for c in pool.controls:
        assert c.caption_type == "control"
        assert not ({c.target_id, *c.distractor_ids} & main_items)
        # control captions come from the human set
        assert c.caption == caps["human"][c.target_id]


def test_build_trials_pigeonhole_on_toyworld():
    # 64 items support at most floor(64/10) = 6 disjoint sets
    slots = (
        tw.SlotSpec("color", ("red", "green", "blue", "black"), "thing", "ADJ"),
        tw.SlotSpec("shape", ("cube", "sphere", "cone", "ring"), "object", "NOUN"),
        tw.SlotSpec("size", ("tiny", "small", "big", "huge"), "item", "ADJ"),
    )
    world = tw.generate_world(tw.WorldConfig(slots=slots, seed=0))
    emb = world.embeddings()
    caps = {t: {it.id: f"{t} {it.id}" for it in world.items} for t in TYPES}
    pool = st.build_trials(emb, caps, n_targets=6, n_controls=0,
                           rng=np.random.default_rng(0))
    assert len({t.set_id for t in pool.trials}) == 6
    with pytest.raises(DataError, match="only 6"):
        st.build_trials(emb, caps, n_targets=7, n_controls=0,
                        rng=np.random.default_rng(0))


def test_trial_invariants():
    with pytest.raises(ValueError, match="unique"):
        st.Trial(0, 0, 1, (1, 2, 3, 4, 5, 6, 7, 8, 9), "c", "human",
                 (1, 2, 3, 4, 5, 6, 7, 8, 9, 1), 0, tuple("m" * 10))


# --- assemble_block ---------------------------------------------------------------

def test_block_is_105_screens_with_5_controls(big_pool):
    session = st.assemble_block(big_pool, np.random.default_rng(0), "s0")
    assert len(session.screens) == 105
    by_id = big_pool.by_id()
    types = [by_id[t].caption_type for t in session.screens]
    assert types.count("control") == 5
    # at most one trial per candidate set within a session
    set_ids = [by_id[t].set_id for t in session.screens if by_id[t].caption_type != "control"]
    assert len(set_ids) == len(set(set_ids)) == 100


def test_blocks_never_share_trials(big_pool):
    rng = np.random.default_rng(7)
    s1 = st.assemble_block(big_pool, rng, "a")
    s2 = st.assemble_block(big_pool, rng, "b")
    assert not set(s1.screens) & set(s2.screens)


def test_control_positions_vary_with_seed():
    emb, caps, _ = synthetic_inputs(1400, seed=3)
    positions = []
    for seed in (0, 1):
        pool = st.build_trials(emb, caps, n_targets=110, n_controls=5,
                               rng=np.random.default_rng(4))
        session = st.assemble_block(pool, np.random.default_rng(seed), "x")
        by_id = pool.by_id()
        positions.append(tuple(i for i, t in enumerate(session.screens)
                               if by_id[t].caption_type == "control"))
        assert len(positions[-1]) == 5
    assert positions[0] != positions[1]


def test_block_pool_exhaustion_error():
    emb, caps, _ = synthetic_inputs(300)
    pool = st.build_trials(emb, caps, n_targets=20, n_controls=5,
                           rng=np.random.default_rng(0))
    with pytest.raises(DataError, match="servable|exhausted"):
        st.assemble_block(pool, np.random.default_rng(0), "s")


# --- record_response ---------------------------------------------------------------

def hand_session(n=3):
    trials = []
    for i in range(n):
        ids = list(range(i * 10, i * 10 + 10))
        trials.append(st.Trial(i, i, ids[0], tuple(ids[1:]), f"cap {i}", "human",
                               tuple(ids), 0, tuple(f"/media/{k}.svg" for k in ids)))
    session = st.Session("s", tuple(t.trial_id for t in trials))
    return session, {t.trial_id: t for t in trials}


def test_record_response_happy_path_and_completion():
    session, _ = hand_session(2)
    st.record_response(session, 0, 3, timestamp=1.0)
    assert session.cursor == 1 and session.status == "active"
    st.record_response(session, 1, 0, timestamp=2.0)
    assert session.status == "complete"


def test_record_response_rejects_out_of_order():
    session, _ = hand_session(3)
    with pytest.raises(StudyProtocolError, match="current screen"):
        st.record_response(session, 1, 3, timestamp=1.0)
    assert session.cursor == 0 and not session.answers


def test_record_response_rejects_bad_position():
    session, _ = hand_session(1)
    with pytest.raises(StudyProtocolError, match="out of"):
        st.record_response(session, 0, 10, timestamp=1.0)
    assert not session.answers


def test_record_response_rejects_after_completion():
    session, _ = hand_session(1)
    st.record_response(session, 0, 1, timestamp=1.0)
    with pytest.raises(StudyProtocolError, match="complete"):
        st.record_response(session, 0, 1, timestamp=2.0)


# --- score_study -------------------------------------------------------------------

def scored_session(answers_correct, control_mistakes, sid="s"):
    """10 human trials + 5 controls; target always at position 0."""
    trials = []
    tid = 0
    for i in range(10):
        ids = list(range(1000 + i * 10, 1000 + i * 10 + 10))
        trials.append(st.Trial(tid, i, ids[0], tuple(ids[1:]), "c", "human",
                               tuple(ids), 0, tuple("m") * 10))
        tid += 1
    for i in range(5):
        ids = list(range(5000 + i * 10, 5000 + i * 10 + 10))
        trials.append(st.Trial(tid, 100 + i, ids[0], tuple(ids[1:]), "c", "control",
                               tuple(ids), 0, tuple("m") * 10))
        tid += 1
    session = st.Session(sid, tuple(t.trial_id for t in trials))
    for i in range(10):
        st.record_response(session, i, 0 if i < answers_correct else 5, float(i))
    for i in range(5):
        st.record_response(session, 10 + i, 5 if i < control_mistakes else 0, float(i))
    return session, {t.trial_id: t for t in trials}


def test_two_control_mistakes_exclude_session():
    session, trials = scored_session(answers_correct=10, control_mistakes=2)
    report = st.score_study([session], trials)
    assert report["excluded_sessions"] == ["s"]
    assert report["aggregate"] == {}
    assert report["sessions"][0].excluded


def test_one_control_mistake_keeps_session():
    session, trials = scored_session(answers_correct=5, control_mistakes=1)
    report = st.score_study([session], trials)
    assert report["excluded_sessions"] == []
    assert report["aggregate"]["human"]["accuracy"] == 0.5


def test_all_correct_annotator():
    session, trials = scored_session(answers_correct=10, control_mistakes=0)
    report = st.score_study([session], trials)
    r = report["sessions"][0]
    assert r.per_type_accuracy == {"human": 1.0}
    assert (r.control_correct, r.control_total) == (5, 5)


def test_partial_sessions_need_flag():
    session, trials = hand_session(2)
    st.record_response(session, 0, 1, timestamp=1.0)
    with pytest.raises(DataError, match="incomplete"):
        st.score_study([session], trials)
    report = st.score_study([session], trials, allow_partial=True)
    assert len(report["sessions"]) == 1


# --- persistence + replay ------------------------------------------------------------

def test_answer_log_replay_reproduces_state(tmp_path, big_pool):
    pool = st.TrialPool(trials=list(big_pool.trials), controls=list(big_pool.controls))
    svc = StudyService(pool, tmp_path, seed=3)
    made = svc.create_session()
    sid = made["session_id"]
    rng = np.random.default_rng(0)
    for i in range(40):
        svc.submit_answer(sid, i, int(rng.integers(0, 10)))
    state = {s: asdict(sess) for s, sess in svc.sessions.items()}
    served = set(svc.pool.served)
    svc.close()

    fresh_pool = st.TrialPool(trials=list(big_pool.trials),
                              controls=list(big_pool.controls))
    svc2 = StudyService(fresh_pool, tmp_path, seed=99)
    state2 = {s: asdict(sess) for s, sess in svc2.sessions.items()}
    assert json.dumps(state, sort_keys=True) == json.dumps(state2, sort_keys=True)
    assert served == set(svc2.pool.served)
    svc2.close()


# --- HTTP service ---------------------------------------------------------------------

class Client:
    def __init__(self, port):
        self.base = f"http://127.0.0.1:{port}"

    def get(self, path):
        return json.loads(urlopen(self.base + path).read())

    def post(self, path, body=None):
        req = Request(self.base + path, data=json.dumps(body or {}).encode(),
                      headers={"Content-Type": "application/json"}, method="POST")
        try:
            return 200, json.loads(urlopen(req).read())
        except HTTPError as err:
            return err.code, json.loads(err.read())


@pytest.fixture
def http_service(tmp_path, big_pool):
    pool = st.TrialPool(trials=list(big_pool.trials), controls=list(big_pool.controls))
    svc = StudyService(pool, tmp_path, seed=11)
    server = make_server(svc, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield Client(server.server_address[1]), svc
    server.shutdown()
    server.server_close()
    svc.close()


def test_http_session_flow(http_service):
    client, svc = http_service
    _, made = client.post("/sessions")
    assert made["total_screens"] == 105
    assert "instructions" in made
    sid = made["session_id"]

    screen = client.get(f"/sessions/{sid}/current")
    assert set(screen) == {"screen_index", "caption", "items"}
    assert len(screen["items"]) == 10
    # the payload must never reveal the target
    assert "target" not in json.dumps(screen)

    code, ans = client.post(f"/sessions/{sid}/answers",
                            {"screen_index": 0, "chosen_position": 4})
    assert code == 200 and ans == {"accepted": True, "next_screen_index": 1}

    code, dup = client.post(f"/sessions/{sid}/answers",
                            {"screen_index": 0, "chosen_position": 4})
    assert code == 409 and dup["accepted"] is False

    code, bad = client.post(f"/sessions/{sid}/answers",
                            {"screen_index": 1, "chosen_position": 11})
    assert code == 409 and bad["accepted"] is False

    code, skip = client.post(f"/sessions/{sid}/answers",
                             {"screen_index": 5, "chosen_position": 1})
    assert code == 409

    assert client.get(f"/sessions/{sid}/current")["screen_index"] == 1


def test_http_complete_session_and_results(http_service):
    # an all-knowing annotator (reads truth server-side; the API never leaks it)
    client, svc = http_service
    _, made = client.post("/sessions")
    sid = made["session_id"]
    trials = svc.pool.by_id()
    screens = svc.sessions[sid].screens
    for i in range(105):
        code, out = client.post(
            f"/sessions/{sid}/answers",
            {"screen_index": i, "chosen_position": trials[screens[i]].target_position})
        assert code == 200 and out["accepted"]
    assert out == {"accepted": True, "complete": True}
    assert client.get(f"/sessions/{sid}/current") == {"complete": True}
    results = client.get("/results")
    session_report = next(s for s in results["sessions"] if s["session_id"] == sid)
    assert session_report["control_total"] == 5
    assert session_report["control_correct"] == 5
    assert not session_report["excluded"]
    assert sorted(results["aggregate"]) == sorted(set(
        t.caption_type for t in svc.pool.trials))
    for agg in results["aggregate"].values():
        assert agg["accuracy"] == 1.0


def test_http_unknown_session_404(http_service):
    client, _ = http_service
    code, out = client.post("/sessions/nope/answers",
                            {"screen_index": 0, "chosen_position": 0})
    assert code == 404


def test_uniform_random_annotator_near_chance(http_service):
    # 2 full sessions = 210 answers; chance is 1/10
    client, svc = http_service
    rng = np.random.default_rng(17)
    hits = 0
    total = 0
    trials = svc.pool.by_id()
    for _ in range(2):
        _, made = client.post("/sessions")
        sid = made["session_id"]
        session = svc.sessions[sid]
        for i in range(105):
            pick = int(rng.integers(0, 10))
            client.post(f"/sessions/{sid}/answers",
                        {"screen_index": i, "chosen_position": pick})
        for a in session.answers:
            hits += a.chosen_position == trials[a.trial_id].target_position
            total += 1
    rate = hits / total
    sigma = (0.1 * 0.9 / total) ** 0.5
    assert abs(rate - 0.10) <= 4 * sigma  # loose here; the 1000-trial version is in acceptance
