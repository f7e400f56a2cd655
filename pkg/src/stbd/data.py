"""Synthetic monotonic transduction corpus, feature pipeline, and CER."""

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from . import _kernels as K
from .errors import DataError, UsageError
from .model import EOS_ID, L2R, L2R_ID, R2L, R2L_ID, SPECIAL_TOKENS

FEAT_DIM = 80
CMVN_FLOOR = 1e-10


class Vocabulary:
    """Token/id bijection; the five special tokens always take ids 0-4."""

    def __init__(self, content_tokens):
        tokens = list(SPECIAL_TOKENS) + list(content_tokens)
        if len(set(tokens)) != len(tokens):
            raise UsageError("vocabulary tokens must be unique and disjoint from specials")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def synthetic(cls, n_content):
        return cls([f"w{i:02d}" for i in range(n_content)])

    def __len__(self):
        return len(self.tokens)

    @property
    def n_special(self):
        return len(SPECIAL_TOKENS)

    def encode(self, words):
        unk = self.index["<UNK>"]
        return [self.index.get(w, unk) for w in words]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError(f"{path}: vocabulary does not start with the special tokens")
        return cls(lines[len(SPECIAL_TOKENS):])


@dataclass
class Utterance:
    utt_id: str
    frames: np.ndarray          # (n, FEAT_DIM) raw, pre-CMVN
    tokens: List[int]           # reference ids, no specials

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class Corpus:
    vocab: Vocabulary
    splits: Dict[str, List[Utterance]] = field(default_factory=dict)

    def __getitem__(self, split):
        return self.splits[split]


def generate_toy_corpus(seed=0, n_utts=2000, vocab_size=30, len_range=(3, 12),
                        frames_per_token_range=(3, 3), noise_sigma=1.0,
                        feat_dim=FEAT_DIM, split_fractions=(0.8, 0.1, 0.1)):
    """Sample a monotonic token-to-frames corpus.

    Each content token owns a fixed normal(0, 1) template; an utterance
    renders each of its tokens as r copies of the template plus Gaussian
    noise, r drawn per token. Adjacent tokens are never equal, so token
    boundaries are visible in the frames. Splits are 80/10/10 by a seeded
    shuffle.
    """
    lo, hi = len_range
    flo, fhi = frames_per_token_range
    if vocab_size < 2:
        raise UsageError("vocab_size must be >= 2")
    if not 1 <= lo <= hi <= 50:
        raise UsageError(f"len_range {len_range} must lie within [1, 50]")
    if not 1 <= flo <= fhi:
        raise UsageError(f"bad frames_per_token_range {frames_per_token_range}")
    if noise_sigma < 0 or n_utts < 1:
        raise UsageError("noise_sigma must be >= 0 and n_utts >= 1")
    rng = np.random.default_rng(seed)
    vocab = Vocabulary.synthetic(vocab_size)
    first = vocab.n_special
    templates = rng.standard_normal((vocab_size, feat_dim))
    utts = []
    for u in range(n_utts):
        m = int(rng.integers(lo, hi + 1))
        seq = []
        for _ in range(m):
            choice = int(rng.integers(0, vocab_size - 1 if seq else vocab_size))
            if seq and choice >= seq[-1]:
                choice += 1
            seq.append(choice)
        reps = rng.integers(flo, fhi + 1, size=m)
        frames = np.repeat(templates[seq], reps, axis=0)
        if noise_sigma > 0:
            frames = frames + noise_sigma * rng.standard_normal(frames.shape)
        utts.append(Utterance(f"utt{u:05d}", frames.astype(np.float32), [first + s for s in seq]))
    order = rng.permutation(n_utts)
    n_train = int(round(split_fractions[0] * n_utts))
    n_dev = int(round(split_fractions[1] * n_utts))
    pick = lambda idx: sorted((utts[i] for i in idx), key=lambda x: x.utt_id)
    splits = {
        "train": pick(order[:n_train]),
        "dev": pick(order[n_train:n_train + n_dev]),
        "test": pick(order[n_train + n_dev:]),
    }
    return Corpus(vocab, splits)


# ---------------------------------------------------------------------------
# features


@dataclass
class CmvnStats:
    mean: np.ndarray
    var: np.ndarray
    frame_count: int = 0

    def apply(self, frames):
        return ((frames - self.mean) / np.sqrt(self.var + CMVN_FLOOR)).astype(np.float32)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(self.mean)))
            fh.write(np.asarray(self.mean, dtype="<f8").tobytes())
            fh.write(np.asarray(self.var, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        buf = Path(path).read_bytes()
        if len(buf) < 4:
            raise DataError(f"{path}: truncated CMVN stats")
        (dim,) = struct.unpack("<I", buf[:4])
        if len(buf) != 4 + 16 * dim:
            raise DataError(f"{path}: expected {dim}-dim CMVN stats")
        mean = np.frombuffer(buf, dtype="<f8", count=dim, offset=4).copy()
        var = np.frombuffer(buf, dtype="<f8", count=dim, offset=4 + 8 * dim).copy()
        return cls(mean, var)


def fit_cmvn(utterances: Sequence[Utterance]):
    """Global per-dimension mean/variance over every frame of ``utterances``."""
    if not utterances:
        raise DataError("cannot fit CMVN on an empty corpus")
    stacked = np.concatenate([u.frames for u in utterances]).astype(np.float64)
    if stacked.shape[0] == 0:
        raise DataError("cannot fit CMVN on zero frames")
    return CmvnStats(stacked.mean(axis=0), stacked.var(axis=0), stacked.shape[0])


def apply_cmvn(stats, frames):
    return stats.apply(frames)


def downsample3(frames):
    """Stack consecutive triples of frames; the last group is zero-padded."""
    n, d = frames.shape
    if n < 1:
        raise UsageError("downsample3 needs at least one frame")
    groups = -(-n // 3)
    padded = np.zeros((groups * 3, d), dtype=frames.dtype)
    padded[:n] = frames
    return padded.reshape(groups, 3 * d)


def prepare_features(stats, frames):
    return downsample3(stats.apply(frames))


# ---------------------------------------------------------------------------
# targets and metric


@dataclass
class DecoderStream:
    direction: str
    input_ids: List[int]
    target_ids: List[int]


def build_streams(tokens, n_special=len(SPECIAL_TOKENS)):
    """Teacher-forcing input/target pairs for both directions."""
    tokens = list(tokens)
    if not tokens:
        raise UsageError("reference must be non-empty")
    if any(t < n_special for t in tokens):
        raise UsageError("reference contains special tokens")
    rev = tokens[::-1]
    return (DecoderStream(L2R, [L2R_ID] + tokens, tokens + [EOS_ID]),
            DecoderStream(R2L, [R2L_ID] + rev, rev + [EOS_ID]))


def edit_distance(ref, hyp):
    return K.edit_distance(np.asarray(ref, dtype=np.int64), np.asarray(hyp, dtype=np.int64))


def cer(ref, hyp):
    """Levenshtein distance divided by reference length (not clipped at 1)."""
    if len(ref) == 0:
        raise UsageError("CER is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_cer(refs, hyps):
    """Sum of edit distances over sum of reference lengths."""
    errs = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    total = sum(len(r) for r in refs)
    if total == 0:
        raise UsageError("CER is undefined for empty references")
    return errs / total


# ---------------------------------------------------------------------------
# on-disk corpus


def write_features(path, frames):
    frames = np.asarray(frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *frames.shape))
        fh.write(frames.tobytes())


def read_features(path):
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise DataError(f"{path}: truncated feature header")
    n, d = struct.unpack("<II", buf[:8])
    if len(buf) != 8 + 4 * n * d:
        raise DataError(f"{path}: expected {n}x{d} float32 values")
    return np.frombuffer(buf, dtype="<f4", offset=8).reshape(n, d).astype(np.float32)


def save_corpus(corpus, out_dir):
    """Write manifests, features (raw), vocabulary, and train-split CMVN stats."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(out / "vocab.txt")
    for split, utts in corpus.splits.items():
        with open(out / f"{split}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["utt_id", "n_frames", "transcript"])
            for u in utts:
                w.writerow([u.utt_id, u.n_frames, " ".join(corpus.vocab.decode(u.tokens))])
                write_features(out / "feats" / f"{u.utt_id}.bin", u.frames)
    fit_cmvn(corpus["train"]).save(out / "cmvn.bin")


def load_corpus(in_dir, splits=("train", "dev", "test")):
    src = Path(in_dir)
    if not (src / "vocab.txt").exists():
        raise DataError(f"{src}: no corpus found (vocab.txt missing)")
    vocab = Vocabulary.load(src / "vocab.txt")
    corpus = Corpus(vocab)
    for split in splits:
        manifest = src / f"{split}.csv"
        if not manifest.exists():
            raise DataError(f"{manifest} missing")
        utts = []
        with open(manifest, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                frames = read_features(src / "feats" / f"{row['utt_id']}.bin")
                if frames.shape[0] != int(row["n_frames"]):
                    raise DataError(f"{row['utt_id']}: manifest frame count disagrees with feature file")
                utts.append(Utterance(row["utt_id"], frames, vocab.encode(row["transcript"].split())))
        corpus.splits[split] = utts
    return corpus
