"""Flat ``key = value`` run configuration covering every hyperparameter."""

from dataclasses import dataclass, fields
from pathlib import Path

from .decode import DecodeConfig
from .errors import ConfigError
from .model import ModelConfig
from .train import LossConfig, OptimizerConfig, TrainConfig

DOCS = {
    "seed": "model init, dropout, and batch-order seed",
    "corpus_dir": "directory holding manifests, features, vocab.txt, cmvn.bin",
    "out_dir": "training output directory (checkpoints, curve.csv)",
    "data_seed": "corpus generation seed",
    "n_utts": "number of synthetic utterances",
    "vocab_size": "content tokens (the 5 specials are added on top)",
    "len_min": "shortest transcript in tokens",
    "len_max": "longest transcript in tokens",
    "frames_per_token_min": "fewest raw frames rendered per token",
    "frames_per_token_max": "most raw frames rendered per token",
    "noise_sigma": "std of Gaussian noise added to token templates",
    "feat_dim": "raw feature dimension (80 fbank-like)",
    "n_enc_layers": "encoder layers",
    "n_dec_layers": "decoder layers (shared by both directions)",
    "d_m": "model width",
    "d_f": "feed-forward inner width",
    "h": "attention heads",
    "dropout": "feed-forward inner dropout",
    "max_positions": "longest encoder or decoder sequence",
    "norm": "pre | post layer-norm placement",
    "tie_embeddings": "share decoder input embedding with the output projection",
    "dtype": "float32 | float64 parameters",
    "beta1": "Adam beta1",
    "beta2": "Adam beta2",
    "eps": "Adam epsilon",
    "k": "learning-rate scale",
    "warmup_steps": "learning-rate warmup steps",
    "clip_norm": "global gradient-norm clip (<= 0 disables)",
    "alpha": "L2R weight in the joint loss",
    "label_smoothing": "cross-entropy label smoothing",
    "mode": "stbd | st-l2r | st-r2l",
    "epochs": "training epochs",
    "max_frames_per_batch": "dynamic batching cap in encoder frames",
    "best_n": "checkpoints averaged into the final model",
    "beam_size": "beam size N",
    "length_penalty": "length-penalty exponent",
    "penalty_form": "gnmt | pow",
    "max_len_extra": "output cap = encoder frames + this",
    "decode_mode": "bidirectional | l2r | r2l",
}


@dataclass
class RunConfig:
    seed: int = 0
    corpus_dir: str = "corpus"
    out_dir: str = "runs/stbd"
    # corpus
    data_seed: int = 0
    n_utts: int = 2000
    vocab_size: int = 30
    len_min: int = 3
    len_max: int = 12
    frames_per_token_min: int = 3
    frames_per_token_max: int = 3
    noise_sigma: float = 1.0
    feat_dim: int = 80
    # model
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_m: int = 64
    d_f: int = 256
    h: int = 4
    dropout: float = 0.2
    max_positions: int = 512
    norm: str = "pre"
    tie_embeddings: bool = False
    dtype: str = "float32"
    # optimiser and loss
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    k: float = 0.1
    warmup_steps: int = 400
    clip_norm: float = 5.0
    alpha: float = 0.5
    label_smoothing: float = 0.0
    # training
    mode: str = "stbd"
    epochs: int = 30
    max_frames_per_batch: int = 100
    best_n: int = 5
    # decoding
    beam_size: int = 2
    length_penalty: float = 0.6
    penalty_form: str = "gnmt"
    max_len_extra: int = 10
    decode_mode: str = "bidirectional"

    def __post_init__(self):
        # build every sub-config once so invalid values fail early
        self.model_config(self.vocab_size + 5)
        self.optimizer_config()
        self.loss_config()
        self.train_config()
        self.decode_config()
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = {}
        for key, raw in values.items():
            kw[key] = _coerce(key, known[key].type, raw)
        return cls(**kw)

    @classmethod
    def from_file(cls, path):
        values = {}
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = val.strip()
        return cls.from_dict(values)

    def to_text(self):
        lines = []
        for f in fields(self):
            lines.append(f"# {DOCS[f.name]}")
            val = getattr(self, f.name)
            lines.append(f"{f.name} = {str(val).lower() if isinstance(val, bool) else val}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return type(self)(**d)

    # -- sub-configs ---------------------------------------------------------

    def model_config(self, vocab_size):
        return ModelConfig(
            n_enc_layers=self.n_enc_layers, n_dec_layers=self.n_dec_layers, d_m=self.d_m,
            d_f=self.d_f, h=self.h, dropout=self.dropout, vocab_size=vocab_size,
            d_in=3 * self.feat_dim, max_positions=self.max_positions, norm=self.norm,
            tie_embeddings=self.tie_embeddings, seed=self.seed, dtype=self.dtype)

    def optimizer_config(self):
        return OptimizerConfig(self.beta1, self.beta2, self.eps, self.k, self.warmup_steps, self.clip_norm)

    def loss_config(self):
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie strictly between 0 and 1")
        return LossConfig(self.alpha, self.label_smoothing)

    def train_config(self):
        return TrainConfig(self.mode, self.epochs, self.max_frames_per_batch, self.seed, self.best_n)

    def decode_config(self, **overrides):
        kw = dict(beam_size=self.beam_size, length_penalty=self.length_penalty,
                  penalty_form=self.penalty_form, max_len_extra=self.max_len_extra,
                  max_positions=self.max_positions, mode=self.decode_mode)
        kw.update(overrides)
        return DecodeConfig(**kw)

    def corpus_kwargs(self):
        return dict(seed=self.data_seed, n_utts=self.n_utts, vocab_size=self.vocab_size,
                    len_range=(self.len_min, self.len_max),
                    frames_per_token_range=(self.frames_per_token_min, self.frames_per_token_max),
                    noise_sigma=self.noise_sigma, feat_dim=self.feat_dim)


def _coerce(key, typ, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from exc
    return raw
