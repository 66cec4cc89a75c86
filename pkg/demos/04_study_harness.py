"""The human discrimination study, end to end and headless.

Builds target+distractor trials (9 nearest neighbors under the 0.8 cosine
cap, disjoint across sets), serves 105-screen annotator blocks with 5
hidden controls, records answers through the HTTP service, and scores
accuracy with the control-based exclusion rule.

Three simulated annotators: one careful (always right), one sloppy (wrong
on controls, so excluded), one clicking uniformly at random (near the 10%
chance floor).
"""

import json
import tempfile
import threading
from urllib.request import Request, urlopen

import numpy as np

from discrilab import study as st
from discrilab.study_http import StudyService, make_server

rng = np.random.default_rng(0)
n_items = 3400
embeddings = {i: rng.standard_normal(12) for i in range(n_items)}
captions = {t: {i: f"{t} caption for item {i}" for i in range(n_items)}
            for t in ("human", "pretrained", "discritune")}

pool = st.build_trials(embeddings, captions, n_targets=310, n_controls=16,
                       rng=rng)
print(f"built {len(pool.trials)} trials over 310 disjoint candidate sets "
      f"(+{len(pool.controls)} controls)")

tmp = tempfile.mkdtemp(prefix="study_demo_")
service = StudyService(pool, tmp, seed=1)
server = make_server(service, port=0)
port = server.server_address[1]
threading.Thread(target=server.serve_forever, daemon=True).start()
print(f"service listening on 127.0.0.1:{port}, persisting to {tmp}")


def post(path, body=None):
    req = Request(f"http://127.0.0.1:{port}{path}",
                  data=json.dumps(body or {}).encode(),
                  headers={"Content-Type": "application/json"}, method="POST")
    return json.loads(urlopen(req).read())


def get(path):
    return json.loads(urlopen(f"http://127.0.0.1:{port}{path}").read())


def run_annotator(name, pick):
    made = post("/sessions")
    sid = made["session_id"]
    screens = service.sessions[sid].screens
    trials = pool.by_id()
    for i, tid in enumerate(screens):
        post(f"/sessions/{sid}/answers",
             {"screen_index": i, "chosen_position": pick(trials[tid])})
    print(f"  {name}: completed {made['total_screens']} screens as {sid}")


arng = np.random.default_rng(42)
run_annotator("careful  ", lambda t: t.target_position)
run_annotator("sloppy   ", lambda t: (t.target_position + 1) % 10
              if t.caption_type == "control" else t.target_position)
run_annotator("random   ", lambda t: int(arng.integers(0, 10)))

results = get("/results")
print("\naggregate accuracy over non-excluded sessions:")
for ctype, row in results["aggregate"].items():
    print(f"  {ctype:11s}: {row['accuracy']:.3f} over {row['answers']} answers")
print(f"excluded sessions (>1 control mistake): {results['excluded_sessions']}")

# the persistence log replays to the same state
service2 = StudyService(st.TrialPool(trials=list(pool.trials),
                                     controls=list(pool.controls)), tmp, seed=9)
same = all(service2.sessions[s].answers == service.sessions[s].answers
           for s in service.sessions)
print(f"replaying {tmp}/answers.jsonl reproduces every session: {same}")
server.shutdown()
service.close()
service2.close()
