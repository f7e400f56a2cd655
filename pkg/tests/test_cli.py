import csv

import numpy as np
import pytest

from stbd.cli import main
from stbd.config import RunConfig
from stbd.data import cer, corpus_cer
from stbd.errors import ConfigError
from stbd.model import read_checkpoint

TINY = """\
# small enough to train in seconds
seed = 0
n_utts = 60
vocab_size = 6
feat_dim = 8
len_min = 2
len_max = 4
n_enc_layers = 1
n_dec_layers = 1
d_m = 16
d_f = 32
h = 2
epochs = 3
k = 1.0
best_n = 2
warmup_steps = 10
max_frames_per_batch = 60
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY + f"corpus_dir = {root / 'corpus'}\nout_dir = {root / 'run'}\n")
    base = ["--config", str(cfg)]
    assert main(base + ["generate"]) == 0
    assert main(base + ["train"]) == 0
    return root, base


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- configuration -------------------------------------------------------------

def test_config_file_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nd_m = 32\ntie_embeddings = true\nalpha = 0.25\nnorm = post\n")
    cfg = RunConfig.from_file(p)
    assert (cfg.d_m, cfg.tie_embeddings, cfg.alpha, cfg.norm) == (32, True, 0.25, "post")
    assert RunConfig.from_file(_round_trip(tmp_path, cfg)) == cfg


def _round_trip(tmp_path, cfg):
    q = tmp_path / "rt.cfg"
    q.write_text(cfg.to_text())
    return q


def test_config_rejects_bad_input(tmp_path):
    for text in ("bogus_key = 1\n", "d_m = 8\nd_m = 16\n", "alpha = 1.0\n", "d_m = 10\nh = 4\n", "no equals sign\n"):
        p = tmp_path / "bad.cfg"
        p.write_text(text)
        with pytest.raises(ConfigError):
            RunConfig.from_file(p)


def test_defaults():
    cfg = RunConfig()
    assert (cfg.d_m, cfg.d_f, cfg.h, cfg.n_enc_layers, cfg.n_dec_layers) == (64, 256, 4, 2, 2)
    assert (cfg.k, cfg.warmup_steps, cfg.epochs, cfg.best_n, cfg.alpha) == (0.1, 400, 30, 5, 0.5)
    assert cfg.model_config(35).d_in == 240


# -- exit codes -----------------------------------------------------------------

def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["no-such-command"]) == 1
    p = tmp_path / "bad.cfg"
    p.write_text("bogus = 1\n")
    assert main(["--config", str(p), "generate"]) == 1
    assert main(["--seed", "-1", "generate", "--out", str(tmp_path / "c")]) == 1
    assert main(["average", "--out", str(tmp_path / "x.ckpt")]) == 1


def test_data_errors_exit_2(workspace, tmp_path):
    root, base = workspace
    assert main(base + ["decode", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)]) == 2
    assert main(base + ["average", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "a")]) == 2
    other = tmp_path / "other.cfg"
    other.write_text(TINY.replace("vocab_size = 6", "vocab_size = 7") + f"corpus_dir = {root / 'corpus'}\n")
    assert main(["--config", str(other), "train", "--out", str(tmp_path / "r")]) == 2


# -- end to end ------------------------------------------------------------------

def test_generate_is_idempotent(workspace, tmp_path):
    root, base = workspace
    assert main(base + ["generate", "--out", str(tmp_path / "again")]) == 0
    for name in ("vocab.txt", "train.csv", "dev.csv", "test.csv", "cmvn.bin"):
        assert (tmp_path / "again" / name).read_bytes() == (root / "corpus" / name).read_bytes()
    assert len((root / "corpus" / "vocab.txt").read_text().splitlines()) == 11


def test_train_outputs(workspace):
    root, _ = workspace
    run = root / "run"
    assert (run / "averaged.ckpt").exists()
    assert [int(r["epoch"]) for r in _rows(run / "curve.csv")] == [1, 2, 3]
    assert (run / "epoch001.ckpt").exists() and (run / "epoch002.ckpt").exists()


def test_decode_and_eval(workspace, tmp_path, capsys):
    root, base = workspace
    out = tmp_path / "dec"
    assert main(base + ["--jobs", "2", "decode", "--checkpoint", str(root / "run" / "averaged.ckpt"),
                        "--split", "dev", "--beam", "2", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "backward_fraction=" in text and "forward_fraction=" in text
    hyps = _rows(out / "hyps.csv")
    refs = _rows(root / "corpus" / "dev.csv")
    assert [h["utt_id"] for h in hyps] == [r["utt_id"] for r in refs]
    assert {h["direction"] for h in hyps} <= {"l2r", "r2l"}
    assert len((out / "scores_full.txt").read_text().splitlines()) == len(hyps)

    per = tmp_path / "per.csv"
    assert main(base + ["eval", "--ref", str(root / "corpus" / "dev.csv"), "--hyp", str(out / "hyps.csv"),
                        "--out", str(per)]) == 0
    printed = float(capsys.readouterr().out.split("corpus_cer=")[1])
    rows = _rows(per)
    weighted = sum(float(r["cer"]) * int(r["ref_len"]) for r in rows) / sum(int(r["ref_len"]) for r in rows)
    assert printed == pytest.approx(weighted, abs=1e-5)
    ref_words = {r["utt_id"]: r["transcript"].split() for r in refs}
    hyp_words = {h["utt_id"]: h["hypothesis"].split() for h in hyps}
    ids = {}
    enc = lambda ws: [ids.setdefault(w, len(ids)) for w in ws]
    keys = sorted(ref_words)
    assert printed == pytest.approx(corpus_cer([enc(ref_words[k]) for k in keys],
                                               [enc(hyp_words[k]) for k in keys]), abs=1e-5)


def test_eval_identity_and_mismatch(workspace, tmp_path, capsys):
    root, base = workspace
    ref = root / "corpus" / "test.csv"
    hyp = tmp_path / "same.csv"
    with open(hyp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utt_id", "hypothesis"])
        for r in _rows(ref):
            w.writerow([r["utt_id"], r["transcript"]])
    assert main(base + ["eval", "--ref", str(ref), "--hyp", str(hyp)]) == 0
    assert "corpus_cer=0" in capsys.readouterr().out
    rows = _rows(ref)[1:]
    with open(hyp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utt_id", "hypothesis"])
        w.writerows([[r["utt_id"], r["transcript"]] for r in rows] + [["ghost", "w00"]])
    assert main(base + ["eval", "--ref", str(ref), "--hyp", str(hyp)]) == 2
    err = capsys.readouterr().err
    assert _rows(ref)[0]["utt_id"] in err and "ghost" in err


def test_decode_modes_and_sweep(workspace, tmp_path, capsys):
    root, base = workspace
    ckpt = str(root / "run" / "averaged.ckpt")
    out = tmp_path / "l2r"
    assert main(base + ["decode", "--checkpoint", ckpt, "--split", "dev", "--mode", "bs-l2r", "--out", str(out)]) == 0
    assert {h["direction"] for h in _rows(out / "hyps.csv")} == {"l2r"}
    assert "backward_fraction=0 " in capsys.readouterr().out
    sweep = tmp_path / "sweep"
    assert main(base + ["decode", "--checkpoint", ckpt, "--split", "dev", "--beam-sweep", "--out", str(sweep)]) == 0
    rows = _rows(sweep / "beam_sweep.csv")
    assert [int(r["beam"]) for r in rows] == [1, 2, 4, 8]
    assert all(0 <= float(r["backward_fraction"]) <= 1 for r in rows)


def test_inspect_attention(workspace, tmp_path, capsys):
    root, base = workspace
    utt = _rows(root / "corpus" / "test.csv")[0]["utt_id"]
    out = tmp_path / "att"
    assert main(base + ["inspect-attention", "--checkpoint", str(root / "run" / "averaged.ckpt"),
                        "--utt", utt, "--split", "test", "--out", str(out)]) == 0
    for d in ("l2r", "r2l"):
        lines = (out / f"attention_{d}.csv").read_text().splitlines()
        assert lines[0].startswith("direction,step,token")
        assert all(line.startswith(d + ",") for line in lines[1:])
    printed = capsys.readouterr().out
    assert "non-decreasing" in printed and "non-increasing" in printed
    assert main(base + ["inspect-attention", "--checkpoint", str(root / "run" / "averaged.ckpt"),
                        "--utt", "nope", "--out", str(out)]) == 2


def test_average_from_run_dir(workspace, tmp_path):
    root, base = workspace
    out = tmp_path / "avg.ckpt"
    assert main(base + ["average", "--run-dir", str(root / "run"), "--best", "2", "--out", str(out)]) == 0
    a, b = read_checkpoint(out), read_checkpoint(root / "run" / "averaged.ckpt")
    assert a.tensors.keys() == b.tensors.keys()
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    one = tmp_path / "one.ckpt"
    assert main(base + ["average", str(root / "run" / "epoch001.ckpt"), "--out", str(one)]) == 0
    c, d = read_checkpoint(one), read_checkpoint(root / "run" / "epoch001.ckpt")
    assert all(np.array_equal(c.tensors[k], d.tensors[k]) for k in d.tensors)
