"""The trainable captioner: a prefix-conditioned single-layer GRU policy
with greedy, beam, and ancestral-sampling decoding.

Generation feeds the projected image embedding as the first input (a soft
image prompt), then the embedding of each emitted token. BOS (id 0) and EOS
(id 1) are reserved: the emission distribution is the softmax restricted to
ids >= 2, so PERIOD is the lowest selectable id and every produced caption
ends with PERIOD unless the length cap binds. `step_logits` still exposes
the raw full-vocabulary log-softmax.

Scoring and decoding run through the same tape ops, so the log-probs a
decoder records are bit-identical to a later `log_prob` re-score.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError
from .world import (Caption, EOS_ID, Item, MAX_CAPTION_TOKENS, PERIOD_ID,
                    N_SPECIAL, Vocab)

TERMINALS = (PERIOD_ID, EOS_ID)


@dataclass
class PolicyParams:
    """All trainable weights. Field order is the checkpoint serialization order."""

    token_embedding: np.ndarray   # (V, d)
    prefix_projection: np.ndarray  # (image_dim, d)
    w_xz: np.ndarray              # (d, h)
    w_hz: np.ndarray              # (h, h)
    b_z: np.ndarray               # (h,)
    w_xr: np.ndarray
    w_hr: np.ndarray
    b_r: np.ndarray
    w_xn: np.ndarray
    w_hn: np.ndarray
    b_n: np.ndarray
    out_w: np.ndarray             # (h, V)
    out_b: np.ndarray             # (V,)

    @property
    def vocab_size(self) -> int:
        return self.token_embedding.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.token_embedding.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_hz.shape[0]

    @property
    def image_dim(self) -> int:
        return self.prefix_projection.shape[0]

    def field_names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.field_names()]

    def copy(self) -> "PolicyParams":
        return PolicyParams(*[a.copy() for a in self.arrays()])

    def leaves(self, tape: ad.Tape) -> dict[str, ad.Tensor]:
        return {name: tape.leaf(getattr(self, name)) for name in self.field_names()}


def init_policy(vocab: Vocab | int, image_dim: int, embed_dim: int = 32,
                hidden_dim: int = 32, seed: int = 0) -> PolicyParams:
    """Weights uniform in [-0.1, 0.1] from seed; biases exactly zero."""
    vocab_size = len(vocab) if isinstance(vocab, Vocab) else int(vocab)
    if vocab_size < N_SPECIAL:
        raise ConfigError(f"vocab of size {vocab_size} has no emittable tokens")
    if min(image_dim, embed_dim, hidden_dim) <= 0:
        raise ConfigError("all dimensions must be positive")
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-0.1, 0.1, size=shape)

    d, h, v = embed_dim, hidden_dim, vocab_size
    return PolicyParams(
        token_embedding=u(v, d),
        prefix_projection=u(image_dim, d),
        w_xz=u(d, h), w_hz=u(h, h), b_z=np.zeros(h),
        w_xr=u(d, h), w_hr=u(h, h), b_r=np.zeros(h),
        w_xn=u(d, h), w_hn=u(h, h), b_n=np.zeros(h),
        out_w=u(h, v), out_b=np.zeros(v),
    )


class PolicyRun:
    """One forward execution of the policy on a tape.

    Decoders use it with a throwaway tape; losses keep the tape and call
    backward. Sharing the op sequence is what makes recorded sample
    log-probs bit-identical to re-scored ones.
    """

    def __init__(self, tape: ad.Tape, leaves: dict[str, ad.Tensor]):
        self.tape = tape
        self.p = leaves
        self.vocab_size = leaves["out_b"].data.shape[0]

    def initial_state(self) -> ad.Tensor:
        return self.tape.leaf(np.zeros((1, self.p["w_hz"].data.shape[0])))

    def prefix_input(self, item_embedding: np.ndarray) -> ad.Tensor:
        row = self.tape.leaf(np.asarray(item_embedding, dtype=np.float64).reshape(1, -1))
        return ad.matmul(row, self.p["prefix_projection"])

    def token_input(self, token_id: int) -> ad.Tensor:
        return ad.embedding_lookup(self.p["token_embedding"], (token_id,))

    def step(self, x: ad.Tensor, h: ad.Tensor) -> ad.Tensor:
        p = self.p
        z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p["w_xz"]), ad.matmul(h, p["w_hz"])), p["b_z"]))
        r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p["w_xr"]), ad.matmul(h, p["w_hr"])), p["b_r"]))
        n = ad.tanh(ad.add(ad.add(ad.matmul(x, p["w_xn"]),
                                  ad.mul(r, ad.matmul(h, p["w_hn"]))), p["b_n"]))
        # h' = n + z * (h - n)
        return ad.add(n, ad.mul(z, ad.add(h, ad.scale(n, -1.0))))

    def logits(self, h: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(h, self.p["out_w"]), self.p["out_b"])

    def raw_logprobs(self, h: ad.Tensor) -> ad.Tensor:
        return ad.log_softmax(self.logits(h))

    def emit_logprobs(self, h: ad.Tensor) -> ad.Tensor:
        """Log-probs of the emission distribution (reserved ids excluded)."""
        return ad.log_softmax(ad.slice_cols(self.logits(h), 2, self.vocab_size))


def _fresh_run(params: PolicyParams) -> PolicyRun:
    tape = ad.Tape()
    return PolicyRun(tape, params.leaves(tape))


def step_logits(params: PolicyParams, state: np.ndarray,
                token_or_prefix) -> tuple[np.ndarray, np.ndarray]:
    """One recurrence step: raw log-probs over the full vocab + new state.

    `token_or_prefix` is either a token id (int) or an image-embedding
    vector, which enters through the prefix projection.
    """
    run = _fresh_run(params)
    h = run.tape.leaf(np.asarray(state, dtype=np.float64).reshape(1, -1))
    if isinstance(token_or_prefix, (int, np.integer)):
        tok = int(token_or_prefix)
        if not (0 <= tok < params.vocab_size):
            raise ValueError(f"token id {tok} outside vocab of {params.vocab_size}")
        x = run.token_input(tok)
    else:
        x = run.prefix_input(token_or_prefix)
    h_new = run.step(x, h)
    return run.raw_logprobs(h_new).data[0].copy(), h_new.data[0].copy()


def _check_caption_tokens(params: PolicyParams, tokens: Sequence[int]) -> None:
    if len(tokens) == 0:
        raise ValueError("cannot score an empty caption")
    for tok in tokens:
        if not (0 <= tok < params.vocab_size):
            raise ValueError(f"token id {tok} outside vocab of {params.vocab_size}")
        if tok < 2:
            raise ValueError(
                f"token id {tok} is reserved (BOS/EOS) and not producible by this policy")


def caption_logprob(run: PolicyRun, item_embedding: np.ndarray,
                    tokens: Sequence[int]) -> ad.Tensor:
    """Differentiable sum of emission log-probs of `tokens`, terminal included."""
    h = run.initial_state()
    x = run.prefix_input(item_embedding)
    total = None
    for tok in tokens:
        h = run.step(x, h)
        lp = ad.gather(run.emit_logprobs(h), (tok - 2,))
        total = lp if total is None else ad.add(total, lp)
        x = run.token_input(tok)
    return ad.sum_all(total)


def log_prob(params: PolicyParams, item: Item | np.ndarray, caption: Caption) -> float:
    """Log-probability of `caption` for `item` under the emission distribution."""
    _check_caption_tokens(params, caption.tokens)
    emb = item.embedding if isinstance(item, Item) else item
    run = _fresh_run(params)
    return float(caption_logprob(run, emb, caption.tokens).data)


def _decode_loop(params: PolicyParams, item_embedding: np.ndarray, choose,
                 max_len: int) -> Caption:
    """Shared greedy/sample loop; `choose(emit_logprobs_row) -> emit index`."""
    if not (1 <= max_len <= MAX_CAPTION_TOKENS):
        raise ValueError(f"max_len must be in [1, {MAX_CAPTION_TOKENS}]")
    run = _fresh_run(params)
    h = run.initial_state()
    x = run.prefix_input(item_embedding)
    tokens: list[int] = []
    logprobs: list[float] = []
    for _ in range(max_len):
        h = run.step(x, h)
        lp_row = run.emit_logprobs(h).data[0]
        idx = choose(lp_row)
        tok = idx + 2
        tokens.append(tok)
        logprobs.append(float(lp_row[idx]))
        if tok in TERMINALS:
            break
        x = run.token_input(tok)
    return Caption(tokens=tuple(tokens), token_logprobs=tuple(logprobs))


def decode_greedy(params: PolicyParams, item: Item | np.ndarray,
                  max_len: int = MAX_CAPTION_TOKENS) -> Caption:
    """Argmax decoding; ties break to the lowest token id."""
    emb = item.embedding if isinstance(item, Item) else item
    return _decode_loop(params, emb, lambda row: int(np.argmax(row)), max_len)


def sample(params: PolicyParams, item: Item | np.ndarray, rng: np.random.Generator,
           max_len: int = MAX_CAPTION_TOKENS) -> Caption:
    """Ancestral sampling from the per-step emission distribution."""
    emb = item.embedding if isinstance(item, Item) else item

    def choose(row):
        probs = np.exp(row)
        return int(rng.choice(probs.size, p=probs / probs.sum()))

    return _decode_loop(params, emb, choose, max_len)


def decode_beam(params: PolicyParams, item: Item | np.ndarray, beam_size: int = 5,
                max_len: int = MAX_CAPTION_TOKENS) -> Caption:
    """Beam search over summed log-probs, no length normalization.

    A hypothesis finishes on PERIOD/EOS or at the length cap; the best
    finished hypothesis wins, score ties resolved by lexicographically
    smallest token sequence (which makes beam_size=1 bit-identical to
    greedy decoding).
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if not (1 <= max_len <= MAX_CAPTION_TOKENS):
        raise ValueError(f"max_len must be in [1, {MAX_CAPTION_TOKENS}]")
    emb = item.embedding if isinstance(item, Item) else item
    run = _fresh_run(params)
    start = (run.initial_state(), run.prefix_input(emb))
    # alive: (score, tokens, logprobs, state, next_input)
    alive = [(0.0, (), (), *start)]
    finished: list[tuple[float, tuple[int, ...], tuple[float, ...]]] = []
    for depth in range(max_len):
        candidates = []
        for score, tokens, lps, h, x in alive:
            h_new = run.step(x, h)
            lp_row = run.emit_logprobs(h_new).data[0]
            for idx in range(lp_row.size):
                tok = idx + 2
                candidates.append((score + float(lp_row[idx]), tokens + (tok,),
                                   lps + (float(lp_row[idx]),), h_new, tok))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        for score, tokens, lps, h_new, tok in candidates[: beam_size]:
            if tok in TERMINALS or depth == max_len - 1:
                finished.append((score, tokens, lps))
            else:
                alive.append((score, tokens, lps, h_new, run.token_input(tok)))
        if not alive:
            break
        # additive log-probs only decrease, so a finished score at least as
        # good as the best alive prefix cannot be beaten
        if finished:
            best_fin = min(finished, key=lambda f: (-f[0], f[1]))
            if best_fin[0] >= alive[0][0]:
                break
    best = min(finished, key=lambda f: (-f[0], f[1]))
    return Caption(tokens=best[1], token_logprobs=best[2])


def mle_step(params: PolicyParams, batch: Sequence[tuple[Item, Caption]],
             lr: float) -> float:
    """One SGD step on the mean negative caption log-prob; returns pre-step loss."""
    if not batch:
        raise ValueError("mle_step needs a nonempty batch")
    tape = ad.Tape()
    run = PolicyRun(tape, params.leaves(tape))
    total = None
    for item, caption in batch:
        _check_caption_tokens(params, caption.tokens)
        lp = caption_logprob(run, item.embedding, caption.tokens)
        total = lp if total is None else ad.add(total, lp)
    loss = ad.scale(total, -1.0 / len(batch))
    ad.backward(tape, loss)
    for name in params.field_names():
        getattr(params, name)[...] -= lr * run.p[name].grad
    return float(loss.data)


# --- checkpoint format ------------------------------------------------------

_DPOL_MAGIC = b"DPOL"
_DPOL_VERSION = 1


def save_policy(path, params: PolicyParams) -> None:
    """DPOL v1: magic | u16 version | u32 (V, d, h, image_dim) | float64 LE
    arrays in PolicyParams field order. Round-trips bit-exactly."""
    with open(path, "wb") as fh:
        fh.write(_DPOL_MAGIC)
        fh.write(struct.pack("<H", _DPOL_VERSION))
        fh.write(struct.pack("<IIII", params.vocab_size, params.embed_dim,
                             params.hidden_dim, params.image_dim))
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_policy(path) -> PolicyParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    header = struct.calcsize("<4sHIIII")
    if len(raw) < header:
        raise DataError(f"checkpoint too short for header: {len(raw)} bytes")
    magic, version, v, d, h, e = struct.unpack_from("<4sHIIII", raw, 0)
    if magic != _DPOL_MAGIC:
        raise DataError(f"bad checkpoint magic {magic!r}")
    if version != _DPOL_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    shapes = [(v, d), (e, d),
              (d, h), (h, h), (h,), (d, h), (h, h), (h,), (d, h), (h, h), (h,),
              (h, v), (v,)]
    need = header + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != need:
        raise DataError(f"checkpoint payload mismatch: expected {need} bytes, got {len(raw)}")
    arrays = []
    off = header
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off)
                      .astype(np.float64).reshape(shape))
        off += 8 * n
    return PolicyParams(*arrays)
