import struct

import numpy as np
import pytest

from stbd.errors import (BadMagicError, CheckpointError, ConfigError, ShapeMismatchError,
                         TruncatedCheckpointError, UsageError, VersionMismatchError)
from stbd.model import (EOS_ID, L2R_ID, R2L_ID, Checkpoint, ModelConfig, Transformer,
                        load_checkpoint, param_count, read_checkpoint, save_checkpoint,
                        write_checkpoint)
from stbd.tensor import no_grad


def tiny(seed=0, **kw):
    base = dict(n_enc_layers=1, n_dec_layers=2, d_m=8, d_f=16, h=2, dropout=0.0, vocab_size=10,
                d_in=6, max_positions=64, dtype="float64", seed=seed)
    base.update(kw)
    m = Transformer(ModelConfig(**base))
    m.eval()
    return m


def enc_for(model, rng, b=1, n=5):
    with no_grad():
        return model.encode(rng.standard_normal((b, n, model.cfg.d_in)))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_m=10, h=3)
    with pytest.raises(ConfigError):
        ModelConfig(norm="middle")
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=4)


def test_full_scale_topology():
    cfg = ModelConfig.full_scale()
    assert (cfg.n_enc_layers, cfg.n_dec_layers, cfg.d_m, cfg.h) == (8, 4, 512, 8)
    assert cfg.d_f == 2048 and cfg.dropout == 0.2 and cfg.vocab_size == 4235


def test_encode_shape_and_errors():
    m = tiny()
    rng = np.random.default_rng(0)
    assert m.encode(rng.standard_normal((7, 6))).H.shape == (1, 7, 8)
    assert m.encode(rng.standard_normal((3, 4, 6))).H.shape == (3, 4, 8)
    with pytest.raises(UsageError):
        m.encode(np.zeros((0, 6)))
    with pytest.raises(UsageError):
        m.encode(np.zeros((3, 5)))


def _ln(x):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(np.maximum(var, 1e-10))


def _softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def test_encoder_hand_oracle():
    # one pre-norm layer, one head, small weights: recompute by hand in numpy
    m = tiny(n_enc_layers=1, n_dec_layers=0, d_m=4, d_f=3, h=1, d_in=2, seed=5)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 2))
    L = m.enc_layers[0]
    pe = np.zeros((3, 4))
    pos = np.arange(3)[:, None]
    rate = 1.0 / 10000 ** (np.arange(0, 4, 2) / 4)
    pe[:, 0::2], pe[:, 1::2] = np.sin(pos * rate), np.cos(pos * rate)
    h = x @ m.input_proj.weight.data + m.input_proj.bias.data + pe
    y = _ln(h)
    q, k, v = y @ L.self_attn.w_q.data, y @ L.self_attn.w_k.data, y @ L.self_attn.w_v.data
    h = h + _softmax(q @ k.T / 2.0) @ v @ L.self_attn.w_o.data
    y = _ln(h)
    inner = np.maximum(0, y @ L.ffn.lin1.weight.data + L.ffn.lin1.bias.data)
    h = h + inner @ L.ffn.lin2.weight.data + L.ffn.lin2.bias.data
    assert np.allclose(m.encode(x).H.data[0], _ln(h), atol=1e-5)


def test_bidirectional_matches_two_unidirectional_passes():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = tiny(seed, norm="pre" if seed % 2 else "post")
        enc = enc_for(m, rng, b=2, n=6)
        body = rng.integers(5, 10, size=(2, 4))
        l2r = np.concatenate([np.full((2, 1), L2R_ID), body], axis=1)
        r2l = np.concatenate([np.full((2, 1), R2L_ID), body[:, ::-1]], axis=1)
        with no_grad():
            lo_l, lo_r = m.decode_bidirectional(enc, l2r, r2l)
            ref_l = m.decode(enc, l2r)
            ref_r = m.decode(enc, r2l)
        assert np.allclose(lo_l.data, ref_l.data, atol=1e-6)
        assert np.allclose(lo_r.data, ref_r.data, atol=1e-6)


def test_single_token_streams():
    m = tiny()
    enc = enc_for(m, np.random.default_rng(0))
    lo_l, lo_r = m.decode_bidirectional(enc, [L2R_ID], [R2L_ID])
    assert lo_l.shape == lo_r.shape == (1, 1, 10)


def test_stream_order_in_batch_is_irrelevant():
    m = tiny()
    rng = np.random.default_rng(1)
    enc = enc_for(m, rng)
    a = np.array([[L2R_ID, 5, 6, 7]])
    b = np.array([[R2L_ID, 7, 6, 5]])
    both = enc.take([0, 0])
    with no_grad():
        ab = m.decode(both, np.concatenate([a, b])).data
        ba = m.decode(both, np.concatenate([b, a])).data
    assert np.array_equal(ab[0], ba[1]) and np.array_equal(ab[1], ba[0])


def test_decode_rejects_overlong_stream():
    m = tiny(max_positions=8)
    enc = enc_for(m, np.random.default_rng(0))
    with pytest.raises(UsageError):
        m.decode(enc, np.full((1, 9), 5))


def test_causality_both_directions():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        m = tiny(seed)
        enc = enc_for(m, rng)
        for start in (L2R_ID, R2L_ID):
            ids = np.concatenate([[start], rng.integers(5, 10, size=5)])[None]
            with no_grad():
                base = m.decode(enc, ids).data
            for t in range(1, 6):
                pert = ids.copy()
                pert[0, t:] = rng.integers(5, 10, size=6 - t)
                with no_grad():
                    out = m.decode(enc, pert).data
                assert np.array_equal(out[0, :t], base[0, :t])


def test_r2l_equals_l2r_when_start_embeddings_match():
    m = tiny(3)
    m.embed.data[R2L_ID] = m.embed.data[L2R_ID]
    enc = enc_for(m, np.random.default_rng(3))
    body = [9, 6, 8, 5]
    with no_grad():
        a = m.decode(enc, [[R2L_ID] + body]).data
        b = m.decode(enc, [[L2R_ID] + body]).data
    assert np.array_equal(a, b)


def test_greedy_continuation_is_deterministic():
    m = tiny()
    enc = enc_for(m, np.random.default_rng(0))
    with no_grad():
        a = m.decode(enc, [[L2R_ID, 5, 6]]).data[0, -1].argmax()
        b = m.decode(enc, [[L2R_ID, 5, 6]]).data[0, -1].argmax()
    assert a == b


def test_attention_capture_is_row_stochastic():
    m = tiny()
    enc = enc_for(m, np.random.default_rng(0), n=7)
    _, attn = m.decode(enc, [[L2R_ID, 5, 6]], return_attention=True)
    assert attn.shape == (1, 3, 7)
    assert np.allclose(attn.sum(-1), 1.0, atol=1e-5)


# -- parameter accounting --------------------------------------------------------

def test_param_count_independent_of_direction_setup():
    # STBD and the unidirectional baselines share one architecture; only the
    # training objective differs
    cfg = ModelConfig()
    assert param_count(Transformer(cfg)) == param_count(Transformer(ModelConfig(**cfg.to_dict())))


def test_param_count_doubling_d_f():
    cfg = dict(n_enc_layers=2, n_dec_layers=3, d_m=16, d_f=24, h=2, vocab_size=12, d_in=9)
    small = param_count(Transformer(ModelConfig(**cfg)))
    big = param_count(Transformer(ModelConfig(**{**cfg, "d_f": 48})))
    d_m, d_f = 16, 24
    per_ffn = 2 * d_m * d_f + d_f           # W1 and W2 each gain d_m*d_f, b1 gains d_f
    assert big - small == (2 + 3) * per_ffn


def test_param_count_zero_layers():
    for norm, tie in (("pre", False), ("post", False), ("pre", True)):
        m = Transformer(ModelConfig(n_enc_layers=0, n_dec_layers=0, d_m=8, vocab_size=11, d_in=6, h=2,
                                    norm=norm, tie_embeddings=tie))
        expected = 6 * 8 + 8 + 11 * 8                  # input projection, embeddings
        expected += 11 if tie else 8 * 11 + 11         # output bias or projection
        expected += 2 * 2 * 8 if norm == "pre" else 0  # final encoder and decoder norms
        assert param_count(m) == expected


def test_layer_count_formula():
    d_m, d_f, V, d_in = 16, 32, 12, 9
    m = Transformer(ModelConfig(n_enc_layers=2, n_dec_layers=1, d_m=d_m, d_f=d_f, h=4, vocab_size=V, d_in=d_in))
    attn = 4 * d_m * d_m
    ffn = 2 * d_m * d_f + d_f + d_m
    ln = 2 * d_m
    enc = attn + ffn + 2 * ln
    dec = 2 * attn + ffn + 3 * ln
    total = d_in * d_m + d_m + V * d_m + 2 * enc + dec + 2 * ln + d_m * V + V
    assert param_count(m) == total


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = tiny(dtype="float32")
    save_checkpoint(m, tmp_path / "a.ckpt", {"epoch": 3, "dev_cer": "0.25"})
    m2, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert meta["epoch"] == "3" and meta["dev_cer"] == "0.25"
    assert m2.cfg == m.cfg
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()


def test_checkpoint_layout(tmp_path):
    ck = Checkpoint({"w": np.array([[1.0, 2.0]], dtype=np.float32)}, {"k": "v"})
    write_checkpoint(ck, tmp_path / "c")
    buf = (tmp_path / "c").read_bytes()
    assert buf[:4] == b"STBD"
    assert struct.unpack("<III", buf[4:16]) == (1, 1, 1)
    assert buf[16:17] == b"w"
    assert struct.unpack("<III", buf[17:29]) == (2, 1, 2)
    assert np.frombuffer(buf[29:37], "<f4").tolist() == [1.0, 2.0]
    assert struct.unpack("<I", buf[37:41]) == (3,) and buf[41:] == b"k=v"


def test_checkpoint_errors_are_distinct(tmp_path):
    m = tiny(dtype="float32")
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    good = path.read_bytes()

    (tmp_path / "magic").write_bytes(b"XXXX" + good[4:])
    with pytest.raises(BadMagicError):
        read_checkpoint(tmp_path / "magic")

    (tmp_path / "ver").write_bytes(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(VersionMismatchError):
        read_checkpoint(tmp_path / "ver")

    for cut in (2, 10, len(good) // 2, len(good) - 1):
        (tmp_path / "trunc").write_bytes(good[:cut])
        with pytest.raises(TruncatedCheckpointError):
            read_checkpoint(tmp_path / "trunc")


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    save_checkpoint(tiny(d_m=64, h=4, dtype="float32"), tmp_path / "m.ckpt")
    with pytest.raises(ShapeMismatchError, match="input_proj"):
        load_checkpoint(tmp_path / "m.ckpt", tiny(d_m=128, h=4).cfg)


def test_checkpoint_duplicate_names_rejected(tmp_path):
    ck = Checkpoint({"a": np.zeros(2, np.float32)})
    write_checkpoint(ck, tmp_path / "d")
    buf = bytearray((tmp_path / "d").read_bytes())
    # splice a second copy of the tensor record and bump the count
    record = bytes(buf[12:12 + 4 + 1 + 4 + 4 + 8])
    buf[8:12] = struct.pack("<I", 2)
    (tmp_path / "d").write_bytes(bytes(buf[:12]) + record + bytes(buf[12:]))
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "d")


def test_eos_and_start_ids_are_fixed():
    assert (EOS_ID, L2R_ID, R2L_ID) == (2, 3, 4)
