"""Encoder, shared-weight bidirectional decoder, and checkpoint I/O."""

import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Optional

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    ShapeMismatchError,
    TruncatedCheckpointError,
    UsageError,
    VersionMismatchError,
)
from .layers import (
    AttentionConfig,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    causal_mask,
    padding_mask,
    param,
    sinusoidal_positions,
)
from .tensor import Tensor, concat, embedding, matmul

L2R = "l2r"
R2L = "r2l"

# special ids; fixed so that checkpoints and vocab files agree
PAD_ID, UNK_ID, EOS_ID, L2R_ID, R2L_ID = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<PAD>", "<UNK>", "<EOS>", "<L2R>", "<R2L>")
START_ID = {L2R: L2R_ID, R2L: R2L_ID}


@dataclass
class ModelConfig:
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_m: int = 64
    d_f: int = 256
    h: int = 4
    dropout: float = 0.2
    vocab_size: int = 35
    d_in: int = 240
    max_positions: int = 512
    norm: str = "pre"
    tie_embeddings: bool = False
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("d_m", "d_f", "h", "vocab_size", "d_in", "max_positions"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.d_m % self.h:
            raise ConfigError(f"d_m={self.d_m} is not divisible by h={self.h}")
        if self.norm not in ("pre", "post"):
            raise ConfigError(f"norm must be 'pre' or 'post', got {self.norm!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.vocab_size < len(SPECIAL_TOKENS):
            raise ConfigError("vocab_size must include the 5 special tokens")

    @classmethod
    def full_scale(cls, vocab_size=4235, **kw):
        """The 8-4-512-8 topology used for the full-scale baseline."""
        return cls(n_enc_layers=8, n_dec_layers=4, d_m=512, d_f=2048, h=8, dropout=0.2,
                   vocab_size=vocab_size, **kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            val = d[f.name]
            if isinstance(val, str) and f.type is not str:
                if f.type is bool:
                    val = val.strip().lower() in ("1", "true", "yes")
                else:
                    val = f.type(val) if callable(f.type) else val
            kw[f.name] = val
        return cls(**kw)


class EncoderLayer(Module):
    def __init__(self, cfg, rng, dtype):
        att = AttentionConfig(cfg.d_m, cfg.h)
        self.norm_placement = cfg.norm
        self.self_attn = MultiHeadAttention(att, rng, dtype)
        self.ffn = FeedForward(cfg.d_m, cfg.d_f, rng, cfg.dropout, dtype)
        self.ln1 = LayerNorm(cfg.d_m, dtype)
        self.ln2 = LayerNorm(cfg.d_m, dtype)

    def __call__(self, x, mask):
        if self.norm_placement == "pre":
            y = self.ln1(x)
            x = x + self.self_attn(y, y, y, mask)[0]
            return x + self.ffn(self.ln2(x))
        x = self.ln1(x + self.self_attn(x, x, x, mask)[0])
        return self.ln2(x + self.ffn(x))


class DecoderLayer(Module):
    def __init__(self, cfg, rng, dtype):
        att = AttentionConfig(cfg.d_m, cfg.h)
        self.norm_placement = cfg.norm
        self.self_attn = MultiHeadAttention(att, rng, dtype)
        self.cross_attn = MultiHeadAttention(att, rng, dtype)
        self.ffn = FeedForward(cfg.d_m, cfg.d_f, rng, cfg.dropout, dtype)
        self.ln1 = LayerNorm(cfg.d_m, dtype)
        self.ln2 = LayerNorm(cfg.d_m, dtype)
        self.ln3 = LayerNorm(cfg.d_m, dtype)

    def __call__(self, x, memory, self_mask, cross_mask):
        if self.norm_placement == "pre":
            y = self.ln1(x)
            x = x + self.self_attn(y, y, y, self_mask)[0]
            ctx, weights = self.cross_attn(self.ln2(x), memory, memory, cross_mask)
            x = x + ctx
            return x + self.ffn(self.ln3(x)), weights
        x = self.ln1(x + self.self_attn(x, x, x, self_mask)[0])
        ctx, weights = self.cross_attn(x, memory, memory, cross_mask)
        x = self.ln2(x + ctx)
        return self.ln3(x + self.ffn(x)), weights


@dataclass
class EncoderOutput:
    """Encoder states ``H`` of shape ``(batch, n_frames, d_m)`` plus valid lengths."""

    H: Tensor
    lengths: np.ndarray

    @property
    def frame_count(self):
        return int(self.lengths.max())

    @property
    def mask(self):
        return padding_mask(self.lengths, self.H.shape[1])

    def take(self, index):
        """Rows of the batch by index (repeats allowed), gradient-preserving."""
        index = np.asarray(index, dtype=np.int64)
        return EncoderOutput(self.H[index], self.lengths[index])


class Transformer(Module):
    """Speech transformer whose single decoder serves both directions.

    The L2R and R2L streams are independent batch items run through the
    same decoder parameters; they differ only in their start token.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        self.input_proj = Linear(cfg.d_in, cfg.d_m, rng, dtype)
        self.enc_layers = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.n_enc_layers)]
        self.embed = param(rng.normal(0.0, cfg.d_m ** -0.5, size=(cfg.vocab_size, cfg.d_m)).astype(dtype))
        self.dec_layers = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.n_dec_layers)]
        if cfg.norm == "pre":
            self.enc_norm = LayerNorm(cfg.d_m, dtype)
            self.dec_norm = LayerNorm(cfg.d_m, dtype)
        if cfg.tie_embeddings:
            self.out_bias = param(np.zeros(cfg.vocab_size, dtype=dtype))
        else:
            self.out_proj = Linear(cfg.d_m, cfg.vocab_size, rng, dtype)
        self._pe = sinusoidal_positions(cfg.max_positions, cfg.d_m).data.astype(dtype)

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def encode(self, features, lengths=None):
        """Project, add positions, and run the encoder stack.

        ``features`` is ``(n, d_in)`` or ``(batch, n, d_in)`` and must already
        be normalised and downsampled.
        """
        x = np.asarray(features, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        b, n, d = x.shape
        if n == 0:
            raise UsageError("cannot encode an empty feature sequence")
        if d != self.cfg.d_in:
            raise UsageError(f"feature dim {d} != configured d_in {self.cfg.d_in}")
        if n > self.cfg.max_positions:
            raise UsageError(f"{n} frames exceed max_positions={self.cfg.max_positions}")
        lengths = np.full(b, n) if lengths is None else np.asarray(lengths)
        h = self.input_proj(Tensor(x)) + Tensor(self._pe[:n])
        mask = padding_mask(lengths, n)[:, None, None, :]
        for layer in self.enc_layers:
            h = layer(h, mask)
        if self.cfg.norm == "pre":
            h = self.enc_norm(h)
        return EncoderOutput(h, lengths)

    def decode(self, enc, input_ids, lengths=None, return_attention=False):
        """Teacher-forced decoder pass.

        ``input_ids`` is ``(batch, T)`` starting with a direction token; ``enc``
        must have the same batch size. Returns logits ``(batch, T, V)`` and,
        when asked, the final layer's cross-attention averaged over heads
        ``(batch, T, n_frames)``.
        """
        ids = np.asarray(input_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        b, t = ids.shape
        if t == 0:
            raise UsageError("empty decoder stream")
        if t > self.cfg.max_positions:
            raise UsageError(f"stream length {t} exceeds max_positions={self.cfg.max_positions}")
        if enc.H.shape[0] != b:
            raise UsageError(f"encoder batch {enc.H.shape[0]} != decoder batch {b}")
        lengths = np.full(b, t) if lengths is None else np.asarray(lengths)
        x = embedding(self.embed, ids) + Tensor(self._pe[:t])
        self_mask = (causal_mask(t)[None] & padding_mask(lengths, t)[:, None, :])[:, None]
        cross_mask = enc.mask[:, None, None, :]
        weights = None
        for layer in self.dec_layers:
            x, weights = layer(x, enc.H, self_mask, cross_mask)
        if self.cfg.norm == "pre":
            x = self.dec_norm(x)
        if self.cfg.tie_embeddings:
            logits = matmul(x.reshape(b * t, -1), self.embed.T) + self.out_bias
            logits = logits.reshape(b, t, -1)
        else:
            logits = self.out_proj(x)
        if return_attention:
            attn = None if weights is None else weights.data.mean(axis=1)
            return logits, attn
        return logits

    def decode_unidirectional(self, enc, input_ids, lengths=None):
        return self.decode(enc, input_ids, lengths)

    def decode_bidirectional(self, enc, l2r_ids, r2l_ids, lengths=None):
        """Run both streams through the shared decoder in one batch.

        Stream i of each direction attends to encoder row i. Returns
        ``(logits_l2r, logits_r2l)``.
        """
        l2r_ids = np.atleast_2d(np.asarray(l2r_ids, dtype=np.int64))
        r2l_ids = np.atleast_2d(np.asarray(r2l_ids, dtype=np.int64))
        if l2r_ids.shape != r2l_ids.shape:
            raise UsageError(f"stream shapes differ: {l2r_ids.shape} vs {r2l_ids.shape}")
        b = l2r_ids.shape[0]
        both = EncoderOutput(concat([enc.H, enc.H]), np.concatenate([enc.lengths, enc.lengths]))
        lens = None if lengths is None else np.concatenate([lengths, lengths])
        logits = self.decode(both, np.concatenate([l2r_ids, r2l_ids]), lens)
        return logits[:b], logits[b:]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, tensors):
        own = dict(self.named_parameters())
        missing = [n for n in own if n not in tensors]
        extra = [n for n in tensors if n not in own]
        if missing or extra:
            raise ShapeMismatchError(f"tensor name sets differ: missing={missing[:3]} unexpected={extra[:3]}")
        for name, p in own.items():
            arr = np.asarray(tensors[name])
            if arr.shape != p.shape:
                raise ShapeMismatchError(f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def param_count(model):
    return int(sum(p.size for p in model.parameters()))


# ---------------------------------------------------------------------------
# checkpoint file format

MAGIC = b"STBD"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def model_config(self) -> Optional[ModelConfig]:
        keys = {k[len("model."):]: v for k, v in self.metadata.items() if k.startswith("model.")}
        return ModelConfig.from_dict(keys) if keys else None


def _meta_block(metadata):
    lines = []
    for k, v in metadata.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise UsageError(f"metadata entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def write_checkpoint(ckpt: Checkpoint, path):
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = _meta_block(ckpt.metadata)
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"{path}: not an STBD checkpoint")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    count = r.u32("tensor count")
    tensors = {}
    for _ in range(count):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(r.take(4 * n, f"values of {name}"), dtype="<f4")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = values.reshape(dims).astype(np.float32)
    meta_raw = r.take(r.u32("metadata length"), "metadata").decode("utf-8")
    metadata = {}
    for line in meta_raw.split("\n"):
        if line:
            k, _, v = line.partition("=")
            metadata[k] = v
    return Checkpoint(tensors, metadata, version)


def save_checkpoint(model, path, metadata=None):
    meta = {f"model.{k}": v for k, v in model.cfg.to_dict().items()}
    meta.update(metadata or {})
    write_checkpoint(Checkpoint(model.state_dict(), meta), path)


def load_checkpoint(path, config: Optional[ModelConfig] = None):
    """Rebuild a model from a checkpoint, validating every tensor shape.

    ``config`` defaults to the model configuration stored in the metadata.
    Returns ``(model, metadata)``.
    """
    ckpt = read_checkpoint(path)
    cfg = config or ckpt.model_config()
    if cfg is None:
        raise CheckpointError(f"{path}: no model configuration supplied or stored")
    model = Transformer(cfg)
    model.load_state_dict(ckpt.tensors)
    return model, ckpt.metadata
