"""Experiment drivers shared by the CLI and the acceptance suite.

Covers corpus-level beam decoding, the direction fraction, the beam-size
sweep, attention diagonality, and the multi-seed comparison table.
"""

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from .data import corpus_cer, edit_distance, fit_cmvn, generate_toy_corpus
from .decode import DecodeConfig, capture_attention, decode_utterance, monotone_steps
from .model import L2R, R2L, Transformer
from .train import fit, prepare

log = logging.getLogger(__name__)

# name -> (training mode, decode mode)
CONDITIONS = {
    "ST-L2R": ("st-l2r", "l2r"),
    "ST-R2L": ("st-r2l", "r2l"),
    "STBD": ("stbd", "bidirectional"),
    "STBD-BS_L2R": ("stbd", "l2r"),
    "STBD-BS_R2L": ("stbd", "r2l"),
}
BEAM_SWEEP = (1, 2, 4, 8)


@dataclass
class DecodedUtterance:
    utt_id: str
    reference: List[int]
    tokens: List[int]
    direction: str
    penalized: float
    raw: float

    @property
    def edits(self):
        return edit_distance(self.reference, self.tokens)


def decode_items(model, items, cfg, beam=None, jobs=1):
    """Beam-decode prepared utterances; results keep the input order."""
    def one(u):
        res = decode_utterance(model, u.feats, cfg, beam)
        return DecodedUtterance(u.utt_id, list(u.tokens), res.tokens, res.direction,
                                res.best.penalized, res.best.score)

    model.eval()
    if jobs <= 1:
        return [one(u) for u in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, items))


def decoded_cer(results):
    return corpus_cer([r.reference for r in results], [r.tokens for r in results])


def backward_fraction(results):
    """Share of utterances whose winning hypothesis came from the R2L search."""
    if not results:
        return 0.0
    return sum(r.direction == R2L for r in results) / len(results)


def beam_sweep(model, items, cfg, beams=BEAM_SWEEP, jobs=1):
    rows = []
    for n in beams:
        res = decode_items(model, items, cfg, n, jobs)
        rows.append({"beam": n, "cer": decoded_cer(res), "backward_fraction": backward_fraction(res)})
    return rows


def attention_diagonality(model, items, cfg):
    """Pooled monotone-step fraction per direction over ``items``.

    Each utterance is decoded once per direction with attention capture;
    a step counts when the argmax frame does not move against the reading
    direction (non-decreasing for L2R, non-increasing for R2L).
    """
    totals = {L2R: [0, 0], R2L: [0, 0]}
    for direction, mode in ((L2R, "l2r"), (R2L, "r2l")):
        dcfg = DecodeConfig(beam_size=cfg.beam_size, length_penalty=cfg.length_penalty,
                            penalty_form=cfg.penalty_form, max_len_extra=cfg.max_len_extra,
                            max_positions=cfg.max_positions, capture_attention=True, mode=mode)
        for u in items:
            res = decode_utterance(model, u.feats, dcfg)
            good, total = monotone_steps(capture_attention(res.best), direction)
            totals[direction][0] += good
            totals[direction][1] += total
    return {d: (g / t if t else float("nan")) for d, (g, t) in totals.items()}


# ---------------------------------------------------------------------------
# multi-seed comparison


def train_condition(corpus, stats, mode, seed, out_dir, run_cfg):
    """Train one model for ``mode`` and seed; returns the averaged model."""
    cfg = run_cfg.replace(seed=seed, mode=mode)
    model = Transformer(cfg.model_config(len(corpus.vocab)))
    train_items = prepare(corpus["train"], stats)
    dev_items = prepare(corpus["dev"], stats)
    fit(model, train_items, dev_items, out_dir, cfg.train_config(), cfg.optimizer_config(),
        cfg.loss_config(), cfg.decode_config())
    return model


def compare(run_cfg, seeds, out_dir, split="test", jobs=1, corpus=None, trained=None):
    """Train the three models per seed and decode the five conditions.

    Returns ``(per_seed_rows, summary_rows, flags)``; writes
    ``compare_seeds.csv`` and ``compare.csv`` under ``out_dir``. When
    ``trained`` is a dict it receives ``(mode, seed) -> (model, seconds)``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = corpus or generate_toy_corpus(**run_cfg.corpus_kwargs())
    stats = fit_cmvn(corpus["train"])
    items = prepare(corpus[split], stats)
    per_seed = []
    for seed in seeds:
        models = {}
        for mode in ("st-l2r", "st-r2l", "stbd"):
            log.info("training %s seed %d", mode, seed)
            t0 = time.perf_counter()
            models[mode] = train_condition(corpus, stats, mode, seed, out / f"{mode}_seed{seed}", run_cfg)
            if trained is not None:
                trained[(mode, seed)] = (models[mode], time.perf_counter() - t0)
        for name, (mode, dmode) in CONDITIONS.items():
            res = decode_items(models[mode], items, run_cfg.decode_config(mode=dmode), jobs=jobs)
            per_seed.append({"condition": name, "seed": seed, "cer": decoded_cer(res),
                             "backward_fraction": backward_fraction(res)})
    summary = summarize(per_seed)
    flags = regression_flags(summary)
    _write_rows(out / "compare_seeds.csv", per_seed, ["condition", "seed", "cer", "backward_fraction"])
    _write_rows(out / "compare.csv", summary, ["condition", "mean_cer", "std_cer", "n_seeds"])
    return per_seed, summary, flags


def summarize(per_seed):
    rows = []
    for name in CONDITIONS:
        vals = [r["cer"] for r in per_seed if r["condition"] == name]
        if vals:
            rows.append({"condition": name, "mean_cer": float(np.mean(vals)),
                         "std_cer": float(np.std(vals)), "n_seeds": len(vals)})
    return rows


def regression_flags(summary, parity_tol=0.02):
    """Human-readable notes on the expected orderings that did not hold."""
    m: Dict[str, float] = {r["condition"]: r["mean_cer"] for r in summary}
    flags = []
    if "ST-L2R" in m and "ST-R2L" in m and abs(m["ST-L2R"] - m["ST-R2L"]) > parity_tol:
        flags.append(f"direction parity: ST-L2R {m['ST-L2R']:.4f} vs ST-R2L {m['ST-R2L']:.4f}")
    if "STBD" in m and "ST-L2R" in m and m["STBD"] > m["ST-L2R"] + parity_tol:
        flags.append(f"regression: STBD {m['STBD']:.4f} worse than ST-L2R {m['ST-L2R']:.4f}")
    for sub in ("STBD-BS_L2R", "STBD-BS_R2L"):
        if sub in m and "STBD" in m and m["STBD"] > m[sub]:
            flags.append(f"ordering: STBD {m['STBD']:.4f} worse than {sub} {m[sub]:.4f}")
    return flags


def _write_rows(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([f"{r[k]:.6g}" if isinstance(r[k], float) else r[k] for k in fields])
