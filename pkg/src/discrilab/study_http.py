"""HTTP/JSON façade for the study harness.

Contract:
  POST /sessions                      -> {session_id, total_screens, instructions}
  GET  /sessions/{id}/current         -> {screen_index, caption, items: [{position, media_ref}]}
                                         or {complete: true}; target position never exposed
  POST /sessions/{id}/answers         <- {screen_index, chosen_position}
                                      -> {accepted: true, next_screen_index} or
                                         {accepted: true, complete: true}; rejects leave
                                         state untouched
  GET  /results                       -> aggregate StudyResult JSON
  GET  /media/<file>                  -> static media

Answers hit the append-only log and are flushed before the response is
sent; replaying sessions.jsonl + answers.jsonl from an empty service
reproduces all session states exactly.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from dataclasses import asdict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .errors import DataError
from .study import (Session, StudyProtocolError, TrialPool, assemble_block,
                    record_response, INSTRUCTIONS)


class StudyService:
    """Thread-safe session manager with JSON Lines persistence."""

    def __init__(self, pool: TrialPool, data_dir, seed: int = 0):
        self.pool = pool
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, Session] = {}
        self._trials = pool.by_id()
        self._lock = threading.RLock()
        self._rng = np.random.default_rng(seed)
        self._sessions_path = self.data_dir / "sessions.jsonl"
        self._answers_path = self.data_dir / "answers.jsonl"
        self._replay()
        self._sessions_log = open(self._sessions_path, "a", encoding="utf-8")
        self._answers_log = open(self._answers_path, "a", encoding="utf-8")

    def _replay(self) -> None:
        if self._sessions_path.exists():
            with open(self._sessions_path, encoding="utf-8") as fh:
                for line_no, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        obj = json.loads(line)
                        session = Session(session_id=obj["session_id"],
                                          screens=tuple(obj["screens"]))
                    except (KeyError, TypeError, ValueError) as err:
                        raise DataError(
                            f"{self._sessions_path}:{line_no}: bad session "
                            f"event: {err}") from err
                    self.sessions[session.session_id] = session
                    self.pool.served.update(session.screens)
        if self._answers_path.exists():
            with open(self._answers_path, encoding="utf-8") as fh:
                for line_no, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        obj = json.loads(line)
                        record_response(self.sessions[obj["session_id"]],
                                        obj["trial_id"], obj["chosen_position"],
                                        obj["timestamp"])
                    except (KeyError, TypeError, ValueError,
                            StudyProtocolError) as err:
                        raise DataError(
                            f"{self._answers_path}:{line_no}: bad answer "
                            f"event: {err}") from err

    def close(self) -> None:
        self._sessions_log.close()
        self._answers_log.close()

    def _append(self, fh, obj: dict) -> None:
        fh.write(json.dumps(obj) + "\n")
        fh.flush()
        os.fsync(fh.fileno())

    def create_session(self) -> dict:
        with self._lock:
            sid = uuid.uuid4().hex[:12]
            session = assemble_block(self.pool, self._rng, sid)
            self._append(self._sessions_log, {
                "session_id": sid, "screens": list(session.screens),
                "created_ts": time.time()})
            self.sessions[sid] = session
            return {"session_id": sid, "total_screens": len(session.screens),
                    "instructions": INSTRUCTIONS}

    def current_screen(self, session_id: str) -> dict:
        with self._lock:
            session = self._get(session_id)
            if session.status == "complete":
                return {"complete": True}
            trial = self._trials[session.current_trial_id()]
            return {
                "screen_index": session.cursor,
                "caption": trial.caption,
                "items": [{"position": i, "media_ref": ref}
                          for i, ref in enumerate(trial.media_refs)],
            }

    def submit_answer(self, session_id: str, screen_index, chosen_position) -> dict:
        with self._lock:
            session = self._get(session_id)
            if session.status == "complete":
                raise StudyProtocolError("session already complete")
            if screen_index != session.cursor:
                raise StudyProtocolError(
                    f"answer for screen {screen_index} but the cursor is at "
                    f"{session.cursor}")
            if not isinstance(chosen_position, int) or not (0 <= chosen_position <= 9):
                raise StudyProtocolError(f"chosen_position {chosen_position!r} out of [0, 9]")
            trial_id = session.screens[screen_index]
            ts = time.time()
            # write-ahead: the validated answer is durable before any ack
            self._append(self._answers_log, {
                "session_id": session_id, "screen_index": screen_index,
                "trial_id": trial_id, "chosen_position": chosen_position,
                "timestamp": ts})
            record_response(session, trial_id, chosen_position, ts)
            if session.status == "complete":
                return {"accepted": True, "complete": True}
            return {"accepted": True, "next_screen_index": session.cursor}

    def results(self) -> dict:
        from .study import score_study
        with self._lock:
            report = score_study(self.sessions.values(), self._trials,
                                 allow_partial=True)
            return {
                "aggregate": report["aggregate"],
                "excluded_sessions": report["excluded_sessions"],
                "sessions": [asdict(r) for r in report["sessions"]],
            }

    def _get(self, session_id: str) -> Session:
        if session_id not in self.sessions:
            raise KeyError(session_id)
        return self.sessions[session_id]


class _Handler(BaseHTTPRequestHandler):
    service: StudyService
    media_dir: str | None = None

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _json(self, code: int, obj: dict) -> None:
        payload = json.dumps(obj).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self._cors()
        self.end_headers()
        self.wfile.write(payload)

    def _cors(self) -> None:
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")

    def do_OPTIONS(self):
        self.send_response(204)
        self._cors()
        self.end_headers()

    def do_POST(self):
        parts = [p for p in self.path.split("/") if p]
        try:
            if parts == ["sessions"]:
                self._json(200, self.service.create_session())
            elif len(parts) == 3 and parts[0] == "sessions" and parts[2] == "answers":
                body = self._read_body()
                out = self.service.submit_answer(parts[1], body.get("screen_index"),
                                                 body.get("chosen_position"))
                self._json(200, out)
            else:
                self._json(404, {"error": f"no route for POST {self.path}"})
        except KeyError as err:
            self._json(404, {"accepted": False, "error": f"unknown session {err}"})
        except StudyProtocolError as err:
            self._json(409, {"accepted": False, "error": str(err)})
        except (DataError, ValueError) as err:
            self._json(400, {"accepted": False, "error": str(err)})

    def do_GET(self):
        parts = [p for p in self.path.split("/") if p]
        try:
            if parts == ["results"]:
                self._json(200, self.service.results())
            elif len(parts) == 3 and parts[0] == "sessions" and parts[2] == "current":
                self._json(200, self.service.current_screen(parts[1]))
            elif parts and parts[0] == "media" and self.media_dir:
                self._serve_media(parts[1:])
            else:
                self._json(404, {"error": f"no route for GET {self.path}"})
        except KeyError as err:
            self._json(404, {"error": f"unknown session {err}"})

    def _serve_media(self, parts):
        name = "/".join(parts)
        base = os.path.abspath(self.media_dir)
        full = os.path.abspath(os.path.join(base, name))
        if not full.startswith(base + os.sep) or not os.path.isfile(full):
            self._json(404, {"error": f"no media {name!r}"})
            return
        ctype = {"svg": "image/svg+xml", "png": "image/png",
                 "jpg": "image/jpeg", "jpeg": "image/jpeg"}.get(
                     full.rsplit(".", 1)[-1].lower(), "application/octet-stream")
        with open(full, "rb") as fh:
            data = fh.read()
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self._cors()
        self.end_headers()
        self.wfile.write(data)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b"{}"
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as err:
            raise ValueError(f"bad JSON body: {err}") from err
        if not isinstance(obj, dict):
            raise ValueError("JSON body must be an object")
        return obj


def make_server(service: StudyService, host: str = "127.0.0.1", port: int = 0,
                media_dir=None) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,),
                   {"service": service,
                    "media_dir": str(media_dir) if media_dir else None})
    return ThreadingHTTPServer((host, port), handler)


def serve_forever(service: StudyService, host: str, port: int, media_dir=None) -> None:
    server = make_server(service, host, port, media_dir)
    print(f"study service on http://{host}:{server.server_address[1]}/ "
          f"({len(service.pool.trials)} trials, {len(service.pool.controls)} controls)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        service.close()
