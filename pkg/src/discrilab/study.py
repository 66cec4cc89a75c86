"""Human discrimination study harness: trial construction, annotator
sessions, answer recording, and accuracy scoring with the control-based
exclusion rule.

One trial shows a caption above 10 media tiles (the target plus its 9
nearest neighbors under the 0.8 cosine cap). Every candidate set is served
once per caption type, never twice to the same session. Each session is a
block of 100 mixed-type trials plus 5 easy controls at random positions;
more than one control mistake excludes the session from scoring.

Persistence is append-only JSON Lines (sessions.jsonl + answers.jsonl);
replaying the logs from an empty service reproduces every session state
exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError
from .retriever import neighbor_set
from .world import World

BLOCK_TRIALS = 100
BLOCK_CONTROLS = 5
SET_SIZE = 10  # target + 9 distractors

INSTRUCTIONS = (
    "You will see a caption above ten images. Click the image that matches "
    "the caption best, then confirm. Some captions are machine-generated; "
    "always pick the most plausible image. A few easy control questions are "
    "mixed in. There is no time limit."
)


class StudyProtocolError(ValueError):
    """An answer violated the session contract (ordering, duplicate, range)."""


@dataclass(frozen=True)
class Trial:
    trial_id: int
    set_id: int
    target_id: int
    distractor_ids: tuple[int, ...]
    caption: str
    caption_type: str  # human | pretrained | discritune | ... | control
    display_order: tuple[int, ...]  # item ids, fixed at construction
    target_position: int
    media_refs: tuple[str, ...]     # aligned with display_order

    def __post_init__(self):
        items = (self.target_id,) + self.distractor_ids
        if len(set(items)) != SET_SIZE or len(self.display_order) != SET_SIZE:
            raise ValueError(f"trial {self.trial_id} does not show {SET_SIZE} unique items")
        if set(self.display_order) != set(items):
            raise ValueError(f"trial {self.trial_id} display order disagrees with its items")
        if self.display_order[self.target_position] != self.target_id:
            raise ValueError(f"trial {self.trial_id} target position is wrong")

    def to_json(self) -> dict:
        return {
            "trial_id": self.trial_id, "set_id": self.set_id,
            "target_id": self.target_id, "distractor_ids": list(self.distractor_ids),
            "caption": self.caption, "caption_type": self.caption_type,
            "display_order": list(self.display_order),
            "target_position": self.target_position,
            "media_refs": list(self.media_refs),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Trial":
        return cls(trial_id=int(obj["trial_id"]), set_id=int(obj["set_id"]),
                   target_id=int(obj["target_id"]),
                   distractor_ids=tuple(obj["distractor_ids"]),
                   caption=str(obj["caption"]), caption_type=str(obj["caption_type"]),
                   display_order=tuple(obj["display_order"]),
                   target_position=int(obj["target_position"]),
                   media_refs=tuple(obj["media_refs"]))


@dataclass
class TrialPool:
    trials: list[Trial]
    controls: list[Trial]
    served: set[int] = field(default_factory=set)

    def by_id(self) -> dict[int, Trial]:
        return {t.trial_id: t for t in self.trials + self.controls}

    def unserved_trials(self) -> list[Trial]:
        return [t for t in self.trials if t.trial_id not in self.served]

    def unserved_controls(self) -> list[Trial]:
        return [t for t in self.controls if t.trial_id not in self.served]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"trials": [t.to_json() for t in self.trials],
                       "controls": [t.to_json() for t in self.controls]}, fh, indent=1)

    @classmethod
    def load(cls, path) -> "TrialPool":
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
            return cls(trials=[Trial.from_json(t) for t in obj["trials"]],
                       controls=[Trial.from_json(t) for t in obj["controls"]])
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as err:
            raise DataError(f"bad trial pool file {path}: {err}") from err


def default_media_ref(item_id: int) -> str:
    return f"/media/item_{item_id:05d}.svg"


def _make_trial(trial_id, set_id, target_id, distractor_ids, caption, caption_type,
                rng, media_ref) -> Trial:
    order = [target_id] + list(distractor_ids)
    rng.shuffle(order)
    return Trial(trial_id=trial_id, set_id=set_id, target_id=target_id,
                 distractor_ids=tuple(distractor_ids), caption=caption,
                 caption_type=caption_type, display_order=tuple(order),
                 target_position=order.index(target_id),
                 media_refs=tuple(media_ref(i) for i in order))


def build_trials(embeddings: Mapping[int, np.ndarray],
                 captions_by_type: Mapping[str, Mapping[int, str]],
                 n_targets: int, n_controls: int = BLOCK_CONTROLS,
                 rng: np.random.Generator | None = None,
                 n_distractors: int = 9, cap: float = 0.8,
                 media_ref=default_media_ref) -> TrialPool:
    """Build one trial per caption type over n_targets disjoint candidate sets.

    Targets and distractors never repeat across sets. Each set's trials share
    the identical candidate set (paired design) but get their own display
    shuffle. Controls consume leftover items: easy sets with random
    distractors that appear in no other trial, captioned with the target's
    human caption.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if "human" not in captions_by_type:
        raise DataError("captions_by_type must include a 'human' entry for controls")
    types = sorted(captions_by_type)
    usable = [i for i in sorted(embeddings)
              if all(i in captions_by_type[t] for t in types)]
    order = list(usable)
    rng.shuffle(order)

    used: set[int] = set()
    sets: list[tuple[int, tuple[int, ...]]] = []
    for target in order:
        if len(sets) == n_targets:
            break
        if target in used:
            continue
        available = {i: embeddings[i] for i in usable if i not in used}
        if len(available) < SET_SIZE:
            break
        try:
            cand = neighbor_set(available, target, n=n_distractors, cap=cap)
        except DataError:
            continue
        used.add(target)
        used.update(cand.distractor_ids)
        sets.append((target, cand.distractor_ids))
    if len(sets) < n_targets:
        raise DataError(
            f"only {len(sets)} disjoint candidate sets achievable, need {n_targets}")

    trials: list[Trial] = []
    trial_id = 0
    for set_id, (target, distractors) in enumerate(sets):
        for ctype in types:
            trials.append(_make_trial(trial_id, set_id, target, distractors,
                                      captions_by_type[ctype][target], ctype,
                                      rng, media_ref))
            trial_id += 1

    controls: list[Trial] = []
    leftovers = [i for i in usable if i not in used]
    rng.shuffle(leftovers)
    for c in range(n_controls):
        chunk = leftovers[c * SET_SIZE: (c + 1) * SET_SIZE]
        if len(chunk) < SET_SIZE:
            raise DataError(
                f"only {c} control sets fit after {len(sets)} main sets; "
                f"need {n_controls}")
        target = chunk[0]
        controls.append(_make_trial(trial_id, 10_000 + c, target, tuple(chunk[1:]),
                                    captions_by_type["human"][target], "control",
                                    rng, media_ref))
        trial_id += 1
    return TrialPool(trials=trials, controls=controls)


@dataclass
class Answer:
    screen_index: int
    trial_id: int
    chosen_position: int
    timestamp: float

    def to_json(self) -> dict:
        return {"screen_index": self.screen_index, "trial_id": self.trial_id,
                "chosen_position": self.chosen_position, "timestamp": self.timestamp}


@dataclass
class Session:
    session_id: str
    screens: tuple[int, ...]  # trial ids, length 105
    cursor: int = 0
    answers: list[Answer] = field(default_factory=list)

    @property
    def status(self) -> str:
        return "complete" if self.cursor >= len(self.screens) else "active"

    def current_trial_id(self) -> int:
        if self.status == "complete":
            raise StudyProtocolError("session is complete")
        return self.screens[self.cursor]


def assemble_block(pool: TrialPool, rng: np.random.Generator,
                   session_id: str) -> Session:
    """One 105-screen block: 100 unserved mixed trials (at most one per
    candidate set) plus 5 unserved controls at uniform-random positions.
    Marks everything it serves."""
    mains = pool.unserved_trials()
    controls = pool.unserved_controls()
    if len(controls) < BLOCK_CONTROLS:
        raise DataError(f"only {len(controls)} unserved controls, need {BLOCK_CONTROLS}")
    order = list(mains)
    rng.shuffle(order)
    chosen: list[Trial] = []
    seen_sets: set[int] = set()
    for t in order:
        if len(chosen) == BLOCK_TRIALS:
            break
        if t.set_id in seen_sets:
            continue
        seen_sets.add(t.set_id)
        chosen.append(t)
    if len(chosen) < BLOCK_TRIALS:
        raise DataError(
            f"pool exhausted: {len(chosen)} servable trials, need {BLOCK_TRIALS}")
    picked_controls = list(controls)
    rng.shuffle(picked_controls)
    picked_controls = picked_controls[:BLOCK_CONTROLS]
    total = BLOCK_TRIALS + BLOCK_CONTROLS
    control_positions = sorted(int(p) for p in
                               rng.choice(total, size=BLOCK_CONTROLS, replace=False))
    screens: list[int] = []
    main_iter = iter(chosen)
    control_iter = iter(picked_controls)
    for pos in range(total):
        src = control_iter if pos in control_positions else main_iter
        screens.append(next(src).trial_id)
    for tid in screens:
        pool.served.add(tid)
    return Session(session_id=session_id, screens=tuple(screens))


def record_response(session: Session, trial_id: int, chosen_position: int,
                    timestamp: float) -> Session:
    """Append one answer: must be the current screen, once, in range."""
    if session.status == "complete":
        raise StudyProtocolError("session already complete")
    current = session.screens[session.cursor]
    if trial_id != current:
        raise StudyProtocolError(
            f"answer for trial {trial_id} but the current screen is trial {current}")
    if any(a.trial_id == trial_id for a in session.answers):
        raise StudyProtocolError(f"trial {trial_id} already answered")
    if not (0 <= chosen_position < SET_SIZE):
        raise StudyProtocolError(f"chosen_position {chosen_position} out of [0, 9]")
    session.answers.append(Answer(screen_index=session.cursor, trial_id=trial_id,
                                  chosen_position=chosen_position, timestamp=timestamp))
    session.cursor += 1
    return session


@dataclass(frozen=True)
class StudyResult:
    session_id: str
    per_type_accuracy: dict
    control_correct: int
    control_total: int
    excluded: bool


def score_study(sessions: Iterable[Session], trials_by_id: Mapping[int, Trial],
                allow_partial: bool = False) -> dict:
    """Per-type accuracy over non-excluded sessions plus per-session results.

    A session is excluded iff it makes more than one control mistake.
    Returns {"sessions": [StudyResult...], "aggregate": {type: {...}},
    "excluded_sessions": [...]}.
    """
    results = []
    agg_correct: dict[str, int] = {}
    agg_total: dict[str, int] = {}
    for s in sessions:
        if s.status != "complete" and not allow_partial:
            raise DataError(f"session {s.session_id} is incomplete; "
                            "pass allow_partial=True to score it anyway")
        control_correct = 0
        control_total = 0
        correct: dict[str, int] = {}
        total: dict[str, int] = {}
        for a in s.answers:
            t = trials_by_id[a.trial_id]
            hit = a.chosen_position == t.target_position
            if t.caption_type == "control":
                control_total += 1
                control_correct += hit
            else:
                total[t.caption_type] = total.get(t.caption_type, 0) + 1
                correct[t.caption_type] = correct.get(t.caption_type, 0) + hit
        excluded = (control_total - control_correct) > 1
        results.append(StudyResult(
            session_id=s.session_id,
            per_type_accuracy={k: correct.get(k, 0) / total[k] for k in total},
            control_correct=control_correct, control_total=control_total,
            excluded=excluded))
        if not excluded:
            for k in total:
                agg_correct[k] = agg_correct.get(k, 0) + correct.get(k, 0)
                agg_total[k] = agg_total.get(k, 0) + total[k]
    aggregate = {k: {"accuracy": agg_correct.get(k, 0) / agg_total[k],
                     "answers": agg_total[k]}
                 for k in sorted(agg_total)}
    return {
        "sessions": results,
        "aggregate": aggregate,
        "excluded_sessions": [r.session_id for r in results if r.excluded],
    }


# --- toy media rendering ------------------------------------------------------

_SVG = """<svg xmlns="http://www.w3.org/2000/svg" width="120" height="120">
<rect width="120" height="120" fill="{bg}"/>
<text x="60" y="{y0}" font-size="15" text-anchor="middle" fill="{fg}">{lines}</text>
</svg>
"""


def item_swatch_svg(world: World, item_id: int) -> str:
    """A small text swatch for a toy item; color slots become the fill."""
    item = world.items[item_id]
    bg = "#dddddd"
    words = []
    for slot, value in zip(world.slots, item.attributes):
        word = slot.values[value]
        words.append(word)
        if slot.name == "color":
            bg = word
    fg = "#000000" if bg not in ("black", "blue", "purple") else "#ffffff"
    lines = "".join(f'<tspan x="60" dy="18">{w}</tspan>' for w in words)
    return _SVG.format(bg=bg, fg=fg, y0=30, lines=lines)


def write_media(world: World, media_dir) -> dict[int, str]:
    """Write one SVG per item; returns id -> media ref (server path)."""
    import os
    os.makedirs(media_dir, exist_ok=True)
    refs = {}
    for item in world.items:
        ref = default_media_ref(item.id)
        with open(os.path.join(media_dir, ref.rsplit("/", 1)[1]), "w") as fh:
            fh.write(item_swatch_svg(world, item.id))
        refs[item.id] = ref
    return refs
