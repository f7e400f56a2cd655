"""Standard and bidirectional beam search, plus attention export helpers."""

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, UsageError
from .model import EOS_ID, L2R, L2R_ID, PAD_ID, R2L, R2L_ID, START_ID, UNK_ID
from .tensor import no_grad

BANNED_EMISSIONS = (PAD_ID, UNK_ID, L2R_ID, R2L_ID)
MODES = ("bidirectional", "l2r", "r2l")
_DIRECTION_RANK = {L2R: 0, R2L: 1}


@dataclass
class DecodeConfig:
    beam_size: int = 2
    length_penalty: float = 0.6
    penalty_form: str = "gnmt"      # "gnmt": ((5+|Y|)/6)^a ; "pow": |Y|^a
    max_len_extra: int = 10
    max_positions: int = 512
    capture_attention: bool = False
    mode: str = "bidirectional"

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.length_penalty < 0:
            raise ConfigError("length_penalty exponent must be >= 0")
        if self.penalty_form not in ("gnmt", "pow"):
            raise ConfigError(f"unknown penalty_form {self.penalty_form!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")


@dataclass
class Hypothesis:
    direction: str
    tokens: Tuple[int, ...]             # body in emission order, start/EOS excluded
    score: float = 0.0                  # summed log-probs, EOS included once finished
    finished: bool = False
    forced: bool = False                # EOS appended because the length cap was hit
    attention: Optional[List[np.ndarray]] = None
    penalized: float = float("nan")

    def output_tokens(self):
        """Tokens in reading order (R2L bodies reversed)."""
        return list(self.tokens[::-1]) if self.direction == R2L else list(self.tokens)


def length_penalty(length, exponent=0.6, form="gnmt"):
    if form == "gnmt":
        return ((5.0 + length) / 6.0) ** exponent
    return float(length) ** exponent


def length_penalized_score(hyp, cfg=None):
    """Raw log-prob divided by the length penalty; |Y| counts body tokens plus EOS."""
    cfg = cfg or DecodeConfig()
    n = len(hyp.tokens) + 1
    return hyp.score / length_penalty(n, cfg.length_penalty, cfg.penalty_form)


def _final_key(h):
    return (-h.penalized, _DIRECTION_RANK[h.direction], len(h.tokens), h.tokens)


class ModelScorer:
    """Next-token log-probabilities for one utterance, recomputing the full prefix."""

    def __init__(self, model, enc, cfg=None):
        cfg = cfg or DecodeConfig()
        if enc.H.shape[0] != 1:
            raise UsageError("ModelScorer takes a single-utterance encoder output")
        if enc.frame_count < 1:
            raise UsageError("empty encoder output")
        self.model = model
        self.enc = enc
        self.capture = cfg.capture_attention
        cap = min(cfg.max_positions, model.cfg.max_positions) - 1
        self.max_len = min(enc.frame_count + cfg.max_len_extra, cap)

    def __call__(self, direction, prefixes):
        n = len(prefixes)
        ids = np.array([[START_ID[direction], *p] for p in prefixes], dtype=np.int64)
        with no_grad():
            enc = self.enc.take(np.zeros(n, dtype=np.int64))
            logits, attn = self.model.decode(enc, ids, return_attention=True)
        last = logits.data[:, -1, :].astype(np.float64)
        last = last - last.max(axis=1, keepdims=True)
        logp = last - np.log(np.exp(last).sum(axis=1, keepdims=True))
        rows = attn[:, -1, :].astype(np.float64) if (self.capture and attn is not None) else None
        return logp, rows


def beam_search_unidirectional(scorer, direction, cfg=None, beam=None):
    """Beam search in one direction; returns finished hypotheses, best first.

    At every step each alive hypothesis is expanded over all emittable
    tokens and the top ``beam`` candidates by raw cumulative log-prob are
    kept (ties: lower token id, then earlier parent). Candidates ending in
    EOS move to the finished pool and the alive set shrinks accordingly.
    At the length cap only EOS may be emitted.
    """
    cfg = cfg or DecodeConfig()
    n_beam = beam or cfg.beam_size
    if n_beam < 1:
        raise UsageError("beam must be >= 1")
    max_len = int(scorer.max_len)
    if max_len < 0:
        raise UsageError("max_len must be >= 0")
    capture = getattr(scorer, "capture", False)
    alive = [Hypothesis(direction, (), 0.0, attention=[] if capture else None)]
    done = []
    for step in range(max_len + 1):
        logp, rows = scorer(direction, [h.tokens for h in alive])
        logp = np.array(logp, dtype=np.float64)
        logp[:, list(BANNED_EMISSIONS)] = -np.inf
        if step == max_len:
            eos = logp[:, EOS_ID].copy()
            logp[:] = -np.inf
            logp[:, EOS_ID] = eos
        cand = np.array([h.score for h in alive])[:, None] + logp
        parent, token = np.nonzero(np.isfinite(cand))
        if parent.size == 0:
            break
        scores = cand[parent, token]
        order = np.lexsort((parent, token, -scores))[:n_beam]
        next_alive = []
        for i in order:
            p, t = alive[parent[i]], int(token[i])
            att = None
            if p.attention is not None:
                att = p.attention if t == EOS_ID else p.attention + [rows[parent[i]]]
            if t == EOS_ID:
                h = Hypothesis(direction, p.tokens, float(scores[i]), True, step == max_len, att)
                h.penalized = length_penalized_score(h, cfg)
                done.append(h)
            else:
                next_alive.append(Hypothesis(direction, p.tokens + (t,), float(scores[i]), attention=att))
        alive = next_alive
        if not alive:
            break
    done.sort(key=_final_key)
    return done


def split_beam(n):
    """(L2R beams, R2L beams); odd sizes favour L2R and N=1 runs one of each."""
    return max(1, math.ceil(n / 2)), max(1, n // 2)


@dataclass
class BidirectionalResult:
    best: Hypothesis
    tokens: List[int]
    direction: str
    hypotheses: List[Hypothesis] = field(default_factory=list)

    @property
    def penalized(self):
        return self.best.penalized


def beam_search_bidirectional(scorer, cfg=None, beam=None):
    """Half the beam from ``<L2R>``, half from ``<R2L>``; pool and pick the best.

    The two searches share nothing but the scorer. A winning R2L hypothesis
    is reversed into reading order. Ties between directions go to L2R.
    """
    cfg = cfg or DecodeConfig()
    n_l2r, n_r2l = split_beam(beam or cfg.beam_size)
    pool = beam_search_unidirectional(scorer, L2R, cfg, n_l2r) + beam_search_unidirectional(scorer, R2L, cfg, n_r2l)
    if not pool:
        raise UsageError("search produced no finished hypothesis")
    pool.sort(key=_final_key)
    best = pool[0]
    return BidirectionalResult(best, best.output_tokens(), best.direction, pool)


def decode_utterance(model, features, cfg=None, beam=None):
    """Encode one utterance and search according to ``cfg.mode``."""
    cfg = cfg or DecodeConfig()
    with no_grad():
        enc = model.encode(features)
    scorer = ModelScorer(model, enc, cfg)
    if cfg.mode == "bidirectional":
        return beam_search_bidirectional(scorer, cfg, beam)
    direction = L2R if cfg.mode == "l2r" else R2L
    hyps = beam_search_unidirectional(scorer, direction, cfg, beam)
    return BidirectionalResult(hyps[0], hyps[0].output_tokens(), direction, hyps)


def greedy_decode_batch(model, enc, direction, cfg=None):
    """Batched greedy decoding; identical to beam 1 per utterance.

    Returns a list of finished hypotheses, one per batch row.
    """
    cfg = cfg or DecodeConfig()
    b = enc.H.shape[0]
    cap = min(cfg.max_positions, model.cfg.max_positions) - 1
    max_len = np.minimum(enc.lengths + cfg.max_len_extra, cap)
    ids = np.full((b, 1), START_ID[direction], dtype=np.int64)
    scores = np.zeros(b)
    finished = np.zeros(b, dtype=bool)
    forced = np.zeros(b, dtype=bool)
    bodies = [[] for _ in range(b)]
    for step in range(int(max_len.max()) + 1):
        with no_grad():
            logits = model.decode(enc, ids)
        last = logits.data[:, -1, :].astype(np.float64)
        last = last - last.max(axis=1, keepdims=True)
        logp = last - np.log(np.exp(last).sum(axis=1, keepdims=True))
        logp[:, list(BANNED_EMISSIONS)] = -np.inf
        at_cap = step >= max_len
        logp[at_cap] = np.where(np.arange(logp.shape[1]) == EOS_ID, logp[at_cap], -np.inf)
        tok = logp.argmax(axis=1)
        for i in np.nonzero(~finished)[0]:
            scores[i] += logp[i, tok[i]]
            if tok[i] == EOS_ID:
                finished[i] = True
                forced[i] = at_cap[i]
            else:
                bodies[i].append(int(tok[i]))
        if finished.all():
            break
        ids = np.concatenate([ids, np.where(finished, EOS_ID, tok)[:, None]], axis=1)
    out = []
    for i in range(b):
        h = Hypothesis(direction, tuple(bodies[i]), float(scores[i]), True, bool(forced[i]))
        h.penalized = length_penalized_score(h, cfg)
        out.append(h)
    return out


def greedy_bidirectional_batch(model, enc, cfg=None):
    """Per row, the better of the L2R and R2L greedy hypotheses."""
    l2r = greedy_decode_batch(model, enc, L2R, cfg)
    r2l = greedy_decode_batch(model, enc, R2L, cfg)
    return [min((a, b), key=_final_key) for a, b in zip(l2r, r2l)]


# ---------------------------------------------------------------------------
# attention alignment


def capture_attention(hyp):
    """Cross-attention rows (one per emitted body token) as ``(tokens, frames)``."""
    if hyp.attention is None:
        raise UsageError("hypothesis carries no attention trace; decode with capture_attention=True")
    if not hyp.attention:
        return np.zeros((0, 0))
    return np.stack(hyp.attention)


def monotone_steps(matrix, direction):
    """(monotone transitions, total transitions) of the per-row argmax frame.

    L2R counts non-decreasing steps, R2L non-increasing.
    """
    if matrix.shape[0] < 2:
        return 0, 0
    diffs = np.diff(matrix.argmax(axis=1))
    good = diffs >= 0 if direction == L2R else diffs <= 0
    return int(good.sum()), int(diffs.size)


def write_attention_csv(path, matrix, direction, tokens=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["direction", "step", "token"] + [f"f{j}" for j in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            tok = "" if tokens is None else tokens[i]
            w.writerow([direction, i, tok] + [f"{v:.6g}" for v in row])


def write_pgm(path, matrix):
    """Plain (P2) PGM; height = tokens, width = frames, min-max scaled to 0..255."""
    m = np.asarray(matrix, dtype=np.float64)
    span = m.max() - m.min() if m.size else 0.0
    pix = np.zeros(m.shape, dtype=int) if span <= 0 else np.rint(255 * (m - m.min()) / span).astype(int)
    lines = ["P2", f"{m.shape[1]} {m.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pix]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pgm(path):
    parts = open(path).read().split()
    if parts[0] != "P2":
        raise UsageError(f"{path}: not a P2 PGM")
    w, h, _ = int(parts[1]), int(parts[2]), int(parts[3])
    return np.array(parts[4:], dtype=int).reshape(h, w)


def write_hypotheses_csv(path, hyps, vocab=None):
    """``rank,direction,penalized_score,raw_score,tokens`` with tokens in reading order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "direction", "penalized_score", "raw_score", "tokens"])
        for rank, h in enumerate(hyps):
            toks = h.output_tokens()
            text = " ".join(vocab.decode(toks)) if vocab else " ".join(map(str, toks))
            w.writerow([rank, h.direction, f"{h.penalized:.6g}", f"{h.score:.6g}", text])
