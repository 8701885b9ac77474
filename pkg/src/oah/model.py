"""Model configuration, named parameter sets and the checkpoint container."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernel import Tensor

CKPT_MAGIC = b"OAHC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderConfig:
    tau: int = 10
    epsilon: int = 10
    num_blocks: int = 12
    d_model: int = 512
    heads: int = 4
    ffn_hidden: int = 768
    conv_channels: int = 320

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.tau < 0 or self.epsilon < 0:
            raise ValueError("tau and epsilon must be non-negative")


@dataclass
class DecoderConfig:
    num_blocks: int = 6
    heads: int = 4
    d_model: int = 512
    ffn_hidden: int = 768
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")


@dataclass
class ModelConfig:
    vocab_size: int = 4233
    feat_dim: int = 40
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.encoder.d_model != self.decoder.d_model:
            raise ValueError("encoder and decoder d_model differ")

    @property
    def d_model(self):
        return self.encoder.d_model

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder"))
        dec = DecoderConfig(**d.pop("decoder"))
        return cls(encoder=enc, decoder=dec, **d)


def toy_config(vocab_size=30, feat_dim=40, *, tau=10, epsilon=5, d_model=64, heads=4,
               enc_blocks=3, dec_blocks=2, ffn_hidden=128, conv_channels=64,
               label_smoothing=0.1) -> ModelConfig:
    """Desk-scale defaults used by the synthetic experiments."""
    return ModelConfig(
        vocab_size=vocab_size,
        feat_dim=feat_dim,
        encoder=EncoderConfig(tau=tau, epsilon=epsilon, num_blocks=enc_blocks, d_model=d_model,
                              heads=heads, ffn_hidden=ffn_hidden, conv_channels=conv_channels),
        decoder=DecoderConfig(num_blocks=dec_blocks, heads=heads, d_model=d_model,
                              ffn_hidden=ffn_hidden, label_smoothing=label_smoothing),
    )


class ModelParams:
    """Ordered mapping of parameter name -> Tensor plus the architecture config."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def names(self):
        return list(self.tensors)

    def values(self):
        return list(self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.copy(), k) for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))


def _xavier(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    enc, dec = config.encoder, config.decoder
    d, C, V, D = enc.d_model, enc.conv_channels, config.vocab_size, config.feat_dim
    t: dict[str, np.ndarray] = {}

    def linear(name, n_in, n_out):
        t[f"{name}.w"] = _xavier(rng, (n_in, n_out), n_in, n_out)
        t[f"{name}.b"] = np.zeros(n_out)

    def norm(name, n):
        t[f"{name}.g"] = np.ones(n)
        t[f"{name}.b"] = np.zeros(n)

    def attn(name):
        for p in ("q", "k", "v", "o"):
            linear(f"{name}.{p}", d, d)

    def ffn(name, hidden):
        linear(f"{name}.1", d, hidden)
        linear(f"{name}.2", hidden, d)

    t["enc.conv1.w"] = _xavier(rng, (3, D, C), 3 * D, C)
    t["enc.conv1.b"] = np.zeros(C)
    t["enc.conv2.w"] = _xavier(rng, (3, C, C), 3 * C, C)
    t["enc.conv2.b"] = np.zeros(C)
    linear("enc.proj", C, d)
    for i in range(enc.num_blocks):
        norm(f"enc.{i}.ln1", d)
        attn(f"enc.{i}.att")
        norm(f"enc.{i}.ln2", d)
        ffn(f"enc.{i}.ffn", enc.ffn_hidden)
    norm("enc.ln_f", d)
    k = enc.epsilon + 1
    t["enc.ctx.w"] = _xavier(rng, (k, d, d), k * d, d)
    t["enc.ctx.b"] = np.zeros(d)
    linear("ctc", d, V)
    t["dec.embed"] = rng.normal(0.0, d ** -0.5, size=(V, d))
    for i in range(dec.num_blocks):
        norm(f"dec.{i}.ln1", d)
        attn(f"dec.{i}.self")
        norm(f"dec.{i}.ln2", d)
        attn(f"dec.{i}.src")
        norm(f"dec.{i}.ln3", d)
        ffn(f"dec.{i}.ffn", dec.ffn_hidden)
    norm("dec.ln_f", d)
    linear("dec.out", d, V)
    return ModelParams(config, {k: Tensor(v, k) for k, v in t.items()})


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic "OAHC" | version u16 | header_len u32 | header JSON (utf-8)
#   | count u32 | count x (name_len u16, name, ndim u8, dims u32*ndim, f64 LE data)
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, extra_tensors: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    header = json.dumps({"config": params.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    items = [(k, v.data) for k, v in params.tensors.items()]
    items += list((extra_tensors or {}).items())
    chunks = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(header)), header,
              struct.pack("<I", len(items))]
    for name, arr in items:
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Returns ``(params, extra_tensors, meta)``."""
    buf = Path(path).read_bytes()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError(f"{path}: truncated while reading {what} at byte {off}")
        piece = buf[off:off + n]
        off += n
        return piece

    if take(4, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    version, hlen = struct.unpack("<HI", take(6, "version"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(take(hlen, "header").decode())
    config = ModelConfig.from_dict(header["config"])
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors, extra = {}, {}
    for _ in range(count):
        nlen, ndim = struct.unpack("<HB", take(3, "tensor record"))
        name = take(nlen, "tensor name").decode()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"shape of {name}"))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * size, f"data of {name}"), dtype="<f8").reshape(shape).astype(np.float64)
        if name.startswith("optim/"):
            extra[name] = arr
        else:
            tensors[name] = Tensor(arr, name)
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes at byte {off}")
    return ModelParams(config, tensors), extra, header.get("meta", {})
