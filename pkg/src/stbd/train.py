"""Joint bidirectional loss, warmup Adam, dynamic batching, and the epoch loop."""

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .data import build_streams, corpus_cer, prepare_features
from .decode import DecodeConfig, greedy_bidirectional_batch, greedy_decode_batch
from .errors import CheckpointError, ConfigError, NumericError, UsageError
from .model import L2R, PAD_ID, R2L, Checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from .tensor import cross_entropy, no_grad

log = logging.getLogger(__name__)

TRAIN_MODES = ("stbd", "st-l2r", "st-r2l")


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    k: float = 0.1
    warmup_steps: int = 400
    clip_norm: float = 5.0          # <= 0 disables clipping

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.eps <= 0 or self.k <= 0:
            raise ConfigError("eps and k must be positive")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")


@dataclass
class LossConfig:
    alpha: float = 0.5
    label_smoothing: float = 0.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    history: List[dict] = field(default_factory=list)


def lr_at(step, cfg=None):
    """k * min(step^-0.5, step * warmup^-1.5)."""
    cfg = cfg or OptimizerConfig()
    if step < 1:
        raise UsageError("learning-rate schedule is defined for step >= 1")
    return cfg.k * min(step ** -0.5, step * cfg.warmup_steps ** -1.5)


def joint_loss(logits_l2r, logits_r2l, targets_l2r, targets_r2l, pad_mask, alpha=0.5,
               label_smoothing=0.0):
    """alpha * CE(L2R) + (1 - alpha) * CE(R2L), each a mean over non-pad tokens."""
    l2r = cross_entropy(logits_l2r, targets_l2r, pad_mask, label_smoothing)
    r2l = cross_entropy(logits_r2l, targets_r2l, pad_mask, label_smoothing)
    return l2r * alpha + r2l * (1.0 - alpha)


def clip_grad_norm(grads, max_norm):
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def adam_step(state, params, grads, lr, cfg=None):
    """Bias-corrected Adam update applied in place to ``params[name].data``.

    ``state.step`` must already count the current step.
    """
    cfg = cfg or OptimizerConfig()
    if lr <= 0:
        raise UsageError("learning rate must be positive")
    t = state.step
    if t < 1:
        raise UsageError("increment state.step before calling adam_step")
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {t}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (p.data - lr * update).astype(p.dtype)


def make_batches(lengths, max_frames_per_batch, rng=None):
    """Greedy length-sorted packing so each batch holds at most the frame cap.

    Returns lists of utterance indices. Batch order is shuffled by ``rng``
    when given; the packing itself is deterministic.
    """
    lengths = np.asarray(lengths)
    if lengths.size and lengths.max() > max_frames_per_batch:
        raise ConfigError(f"utterance of {lengths.max()} frames exceeds batch cap {max_frames_per_batch}")
    order = np.lexsort((np.arange(lengths.size), lengths))
    batches, cur, total = [], [], 0
    for i in order:
        n = int(lengths[i])
        if cur and total + n > max_frames_per_batch:
            batches.append(cur)
            cur, total = [], 0
        cur.append(int(i))
        total += n
    if cur:
        batches.append(cur)
    if rng is not None:
        perm = rng.permutation(len(batches))
        batches = [batches[i] for i in perm]
    return batches


# ---------------------------------------------------------------------------
# prepared data


@dataclass
class PreparedUtterance:
    utt_id: str
    feats: np.ndarray          # CMVN-normalised, downsampled
    tokens: List[int]


def prepare(utterances, stats):
    return [PreparedUtterance(u.utt_id, prepare_features(stats, u.frames), list(u.tokens)) for u in utterances]


def collate_features(items):
    n = max(u.feats.shape[0] for u in items)
    d = items[0].feats.shape[1]
    x = np.zeros((len(items), n, d), dtype=np.float32)
    lengths = np.empty(len(items), dtype=np.int64)
    for i, u in enumerate(items):
        x[i, :u.feats.shape[0]] = u.feats
        lengths[i] = u.feats.shape[0]
    return x, lengths


def collate_streams(items):
    """Padded (inputs, targets) for both directions plus the shared pad mask."""
    t = max(len(u.tokens) for u in items) + 1
    shape = (len(items), t)
    arrays = {k: np.full(shape, PAD_ID, dtype=np.int64) for k in ("li", "lt", "ri", "rt")}
    lengths = np.empty(len(items), dtype=np.int64)
    for i, u in enumerate(items):
        l2r, r2l = build_streams(u.tokens)
        n = len(l2r.input_ids)
        arrays["li"][i, :n] = l2r.input_ids
        arrays["lt"][i, :n] = l2r.target_ids
        arrays["ri"][i, :n] = r2l.input_ids
        arrays["rt"][i, :n] = r2l.target_ids
        lengths[i] = n
    mask = np.arange(t)[None, :] < lengths[:, None]
    return arrays, lengths, mask


def batch_loss(model, items, mode="stbd", loss_cfg=None):
    """Forward pass and loss for one batch; returns ``(loss, parts)``."""
    loss_cfg = loss_cfg or LossConfig()
    x, flen = collate_features(items)
    s, slen, mask = collate_streams(items)
    enc = model.encode(x, flen)
    ls = loss_cfg.label_smoothing
    if mode == "stbd":
        lo_l, lo_r = model.decode_bidirectional(enc, s["li"], s["ri"], slen)
        l_l2r = cross_entropy(lo_l, s["lt"], mask, ls)
        l_r2l = cross_entropy(lo_r, s["rt"], mask, ls)
        loss = l_l2r * loss_cfg.alpha + l_r2l * (1.0 - loss_cfg.alpha)
        return loss, {"l2r": float(l_l2r.data), "r2l": float(l_r2l.data)}
    key_in, key_t, name = ("li", "lt", "l2r") if mode == "st-l2r" else ("ri", "rt", "r2l")
    loss = cross_entropy(model.decode(enc, s[key_in], slen), s[key_t], mask, ls)
    return loss, {name: float(loss.data)}


def evaluate_cer(model, items, mode="stbd", decode_cfg=None, batch_size=64):
    """Corpus CER of batched greedy decoding (bidirectional for STBD)."""
    model.eval()
    refs, hyps = [], []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        x, flen = collate_features(chunk)
        with no_grad():
            enc = model.encode(x, flen)
        if mode == "stbd":
            found = greedy_bidirectional_batch(model, enc, decode_cfg)
        else:
            found = greedy_decode_batch(model, enc, L2R if mode == "st-l2r" else R2L, decode_cfg)
        refs += [u.tokens for u in chunk]
        hyps += [h.output_tokens() for h in found]
    return corpus_cer(refs, hyps)


@dataclass
class TrainConfig:
    mode: str = "stbd"
    epochs: int = 30
    max_frames_per_batch: int = 100
    seed: int = 0
    best_n: int = 5

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}")
        if self.epochs < 1 or self.best_n < 1:
            raise ConfigError("epochs and best_n must be >= 1")


def train_epoch(model, train_items, dev_items, state, train_cfg, opt_cfg, loss_cfg, rng,
                decode_cfg=None):
    """One pass over ``train_items`` followed by a dev-CER measurement."""
    if train_cfg.mode != "stbd":
        loss_cfg = LossConfig(alpha=1.0, label_smoothing=loss_cfg.label_smoothing)
    params = dict(model.named_parameters())
    lengths = [u.feats.shape[0] for u in train_items]
    batches = make_batches(lengths, train_cfg.max_frames_per_batch, rng)
    model.train()
    losses, weights, parts_sum = [], [], {}
    for idx in batches:
        items = [train_items[i] for i in idx]
        model.zero_grad()
        loss, parts = batch_loss(model, items, train_cfg.mode, loss_cfg)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at step {state.step + 1}")
        loss.backward()
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        clip_grad_norm(grads, opt_cfg.clip_norm)
        state.step += 1
        adam_step(state, params, grads, lr_at(state.step, opt_cfg), opt_cfg)
        losses.append(float(loss.data))
        weights.append(len(items))
        for k, v in parts.items():
            parts_sum[k] = parts_sum.get(k, 0.0) + v * len(items)
    state.epoch += 1
    total = float(sum(weights))
    dev = evaluate_cer(model, dev_items, train_cfg.mode, decode_cfg)
    row = {"epoch": state.epoch, "step": state.step,
           "train_loss": float(np.dot(losses, weights) / total), "dev_cer": dev,
           "best_dev_cer": min([dev] + [r["dev_cer"] for r in state.history])}
    for k in ("l2r", "r2l"):
        if k in parts_sum:
            row[f"loss_{k}"] = parts_sum[k] / total
    state.history.append(row)
    return row


CURVE_FIELDS = ["epoch", "step", "train_loss", "dev_cer", "best_dev_cer"]


def append_curve(path, row):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(CURVE_FIELDS)
        w.writerow([row["epoch"], row["step"], f"{row['train_loss']:.6g}", f"{row['dev_cer']:.6g}",
                    f"{row['best_dev_cer']:.6g}"])


def read_curve(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def select_best(history, n=5):
    """Epochs with the lowest dev CER (ties: earlier epoch), best first."""
    ranked = sorted(history, key=lambda r: (r["dev_cer"], r["epoch"]))
    return [int(r["epoch"]) for r in ranked[:n]]


def average_checkpoints(paths):
    """Elementwise mean of every tensor across the given checkpoint files."""
    if not paths:
        raise UsageError("average_checkpoints needs at least one checkpoint")
    ckpts = [read_checkpoint(p) for p in paths]
    ref = ckpts[0]
    acc = {k: v.astype(np.float64) for k, v in ref.tensors.items()}
    for path, ck in zip(paths[1:], ckpts[1:]):
        if list(ck.tensors) != list(ref.tensors):
            bad = next((n for n in ref.tensors if n not in ck.tensors), None) or \
                next(n for n in ck.tensors if n not in ref.tensors)
            raise CheckpointError(f"{path}: tensor name set differs at {bad!r}")
        for name, arr in ck.tensors.items():
            if arr.shape != acc[name].shape:
                raise CheckpointError(f"{path}: tensor {name!r} has shape {arr.shape}, expected {acc[name].shape}")
            acc[name] += arr
    n = len(ckpts)
    tensors = {k: (v / n).astype(np.float32) for k, v in acc.items()}
    meta = {k: v for k, v in ref.metadata.items() if k.startswith("model.")}
    meta["averaged_from"] = ",".join(str(Path(p).name) for p in paths)
    return Checkpoint(tensors, meta)


def fit(model, train_items, dev_items, out_dir, train_cfg=None, opt_cfg=None, loss_cfg=None,
        decode_cfg=None, on_epoch=None):
    """Full training run: per-epoch checkpoints, validation curve, best-N average.

    Writes ``epochNNN.ckpt``, ``curve.csv`` and ``averaged.ckpt`` into
    ``out_dir``; returns the TrainState.
    """
    train_cfg = train_cfg or TrainConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    loss_cfg = loss_cfg or LossConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curve = out / "curve.csv"
    if curve.exists():
        curve.unlink()
    rng = np.random.default_rng(train_cfg.seed)
    state = TrainState()
    for _ in range(train_cfg.epochs):
        t0 = time.perf_counter()
        row = train_epoch(model, train_items, dev_items, state, train_cfg, opt_cfg, loss_cfg, rng, decode_cfg)
        save_checkpoint(model, out / f"epoch{row['epoch']:03d}.ckpt",
                        {"epoch": row["epoch"], "step": row["step"], "dev_cer": f"{row['dev_cer']:.17g}",
                         "mode": train_cfg.mode})
        append_curve(curve, row)
        extra = " ".join(f"{k}={row[k]:.4f}" for k in ("loss_l2r", "loss_r2l") if k in row)
        log.info("epoch %d step %d loss %.4f %s dev_cer %.4f (%.1fs)", row["epoch"], row["step"],
                 row["train_loss"], extra, row["dev_cer"], time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(row)
    best = select_best(state.history, train_cfg.best_n)
    avg = average_checkpoints([out / f"epoch{e:03d}.ckpt" for e in best])
    avg.metadata["mode"] = train_cfg.mode
    write_checkpoint(avg, out / "averaged.ckpt")
    model.load_state_dict(avg.tensors)
    model.eval()
    return state
