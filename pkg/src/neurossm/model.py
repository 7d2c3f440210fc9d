"""The S4D classifier: encoder, S4D blocks with ReLU and channel mixing, decoder.

Each block computes ``relu(mix(relu(ssm(u) + ssm_bias)))`` with no
normalization and no residual path. The decoder runs on every token, and a
sample's label is the argmax of the time-averaged logits.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import container
from .ssm import (
    DiagonalSSMParams,
    DiscreteSSMParams,
    SSMState,
    conv_apply,
    discretize,
    materialize_kernel,
    recurrent_step,
)

CHECKPOINT_MAGIC = b"NSSMCKPT"


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 1
    model_dim: int = 64
    state_dim: int = 32
    num_blocks: int = 4
    num_classes: int = 10
    seq_len: int = 784
    readout: str = "mean"  # "mean" pooling over time or "last" token

    def __post_init__(self):
        for name in ("input_dim", "model_dim", "state_dim", "num_blocks", "num_classes", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.readout not in ("mean", "last"):
            raise ValueError(f"readout must be 'mean' or 'last', got {self.readout!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


SMALL = NetworkConfig(input_dim=1, model_dim=64, state_dim=32, seq_len=784)
LARGE = NetworkConfig(input_dim=3, model_dim=128, state_dim=64, seq_len=1024)


@dataclass
class Block:
    ssm: DiagonalSSMParams
    ssm_bias: np.ndarray  # (H,)
    mix_w: np.ndarray  # (H, H)
    mix_b: np.ndarray  # (H,)


@dataclass
class Network:
    config: NetworkConfig
    encoder_w: np.ndarray  # (H, I)
    encoder_b: np.ndarray  # (H,)
    blocks: list[Block]
    decoder_w: np.ndarray  # (C, H)
    decoder_b: np.ndarray  # (C,)
    seed: int | None = None

    @cached_property
    def discrete(self) -> list[DiscreteSSMParams]:
        return [discretize(b.ssm) for b in self.blocks]

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every stored parameter; complex tensors are kept complex."""
        out = {"encoder.w": self.encoder_w, "encoder.b": self.encoder_b}
        for i, b in enumerate(self.blocks):
            p = f"blocks.{i}."
            out.update({p + "a": b.ssm.a, p + "b": b.ssm.b, p + "c": b.ssm.c, p + "dt": b.ssm.dt,
                        p + "ssm_bias": b.ssm_bias, p + "mix.w": b.mix_w, p + "mix.b": b.mix_b})
        out.update({"decoder.w": self.decoder_w, "decoder.b": self.decoder_b})
        return out

    def astype(self, dtype) -> "Network":
        """Copy with real arrays cast to ``dtype`` and complex ones to its complex twin."""
        cdtype = np.result_type(dtype, np.complex64)

        def cast(x):
            return np.asarray(x, dtype=cdtype if np.iscomplexobj(x) else dtype)

        return network_from_arrays(self.config, {k: cast(v) for k, v in self.named_arrays().items()},
                                   seed=self.seed)


def network_from_arrays(config: NetworkConfig, arrays: dict, seed=None) -> Network:
    blocks = []
    for i in range(config.num_blocks):
        p = f"blocks.{i}."
        ssm = DiagonalSSMParams(a=arrays[p + "a"], b=arrays[p + "b"], c=arrays[p + "c"], dt=arrays[p + "dt"])
        blocks.append(Block(ssm, arrays[p + "ssm_bias"], arrays[p + "mix.w"], arrays[p + "mix.b"]))
    return Network(config, arrays["encoder.w"], arrays["encoder.b"], blocks,
                   arrays["decoder.w"], arrays["decoder.b"], seed=seed)


def init_network(config: NetworkConfig, seed: int) -> Network:
    """S4D-Lin initialization.

    a = -0.5 + i*pi*n, b = 1, c ~ CN(0, 1), dt log-uniform in [1e-3, 1e-1],
    linear layers uniform in +-1/sqrt(fan_in).
    """
    rng = np.random.default_rng(seed)
    I, H, N, C = config.input_dim, config.model_dim, config.state_dim, config.num_classes

    def linear(fan_out, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)

    enc_w, enc_b = linear(H, I)
    blocks = []
    for _ in range(config.num_blocks):
        a = np.broadcast_to(-0.5 + 1j * np.pi * np.arange(N), (H, N)).copy()
        b = np.ones((H, N), dtype=np.complex128)
        c = (rng.standard_normal((H, N)) + 1j * rng.standard_normal((H, N))) / np.sqrt(2.0)
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), H))
        mix_w, mix_b = linear(H, H)
        blocks.append(Block(DiagonalSSMParams(a, b, c, dt), np.zeros(H), mix_w, mix_b))
    dec_w, dec_b = linear(C, H)
    return Network(config, enc_w, enc_b, blocks, dec_w, dec_b, seed=seed)


def count_parameters(config: NetworkConfig) -> int:
    """Real scalars in the network; complex entries count twice."""
    I, H, N, C = config.input_dim, config.model_dim, config.state_dim, config.num_classes
    per_block = 3 * 2 * H * N + H + H + H * H + H
    return H * I + H + config.num_blocks * per_block + C * H + C


def enumerate_parameters(net: Network) -> int:
    return sum(a.size * (2 if np.iscomplexobj(a) else 1) for a in net.named_arrays().values())


def _check_input(net: Network, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u)
    if u.ndim < 2 or u.shape[-2] != net.config.input_dim:
        raise ValueError(f"expected input of shape (..., {net.config.input_dim}, L), got {u.shape}")
    return u


def forward_conv(net: Network, u: np.ndarray, trace: dict | None = None) -> np.ndarray:
    """Convolution-mode forward: (..., I, L) tokens to (..., C, L) per-token logits.

    When ``trace`` is a dict, post-activation tensors are stored in it under
    ``encoder``, ``blocks.i.ssm`` (pre-ReLU), ``blocks.i.relu``, ``blocks.i.mix``.
    """
    u = _check_input(net, u)
    L = u.shape[-1]
    h = np.einsum("hi,...il->...hl", net.encoder_w, u) + net.encoder_b[:, None]
    if trace is not None:
        trace["encoder"] = h
    for i, (blk, d) in enumerate(zip(net.blocks, net.discrete)):
        y = conv_apply(materialize_kernel(d, L), h) + blk.ssm_bias[:, None]
        r = np.maximum(y, 0)
        h = np.maximum(np.einsum("gh,...hl->...gl", blk.mix_w, r) + blk.mix_b[:, None], 0)
        if trace is not None:
            trace[f"blocks.{i}.ssm"], trace[f"blocks.{i}.relu"], trace[f"blocks.{i}.mix"] = y, r, h
    return np.einsum("ch,...hl->...cl", net.decoder_w, h) + net.decoder_b[:, None]


def relu_sparsity(net: Network, u: np.ndarray) -> dict[str, float]:
    """Fraction of exactly-zero activations after every ReLU."""
    trace: dict = {}
    forward_conv(net, u, trace)
    return {k: float(np.mean(v == 0)) for k, v in trace.items() if k.endswith((".relu", ".mix"))}


@dataclass(frozen=True)
class StreamingContext:
    states: tuple[SSMState, ...]
    logit_accumulator: np.ndarray
    last_logits: np.ndarray
    tokens_seen: int = 0
    readout: str = field(default="mean", compare=False)

    @classmethod
    def reset(cls, net: Network) -> "StreamingContext":
        cfg = net.config
        states = tuple(SSMState.zeros((cfg.model_dim, cfg.state_dim)) for _ in net.blocks)
        zeros = np.zeros(cfg.num_classes)
        return cls(states, zeros, zeros, 0, cfg.readout)


def forward_stream(net: Network, ctx: StreamingContext, token) -> tuple[StreamingContext, np.ndarray]:
    """Advance one token in recurrent mode; returns the new context and this token's logits."""
    token = np.asarray(token)
    if token.shape != (net.config.input_dim,):
        raise ValueError(f"expected token of shape ({net.config.input_dim},), got {token.shape}")
    if len(ctx.states) != len(net.blocks):
        raise ValueError("context was created for a different network")
    h = net.encoder_w @ token + net.encoder_b
    states = []
    for blk, d, st in zip(net.blocks, net.discrete, ctx.states):
        st, y = recurrent_step(d, st, h)
        states.append(st)
        r = np.maximum(y + blk.ssm_bias, 0)
        h = np.maximum(blk.mix_w @ r + blk.mix_b, 0)
    logits = net.decoder_w @ h + net.decoder_b
    new = StreamingContext(tuple(states), ctx.logit_accumulator + logits, logits,
                           ctx.tokens_seen + 1, ctx.readout)
    return new, logits


def classify(ctx: StreamingContext) -> int:
    """Argmax of the pooled logits; ties resolve to the lowest class index."""
    if ctx.tokens_seen < 1:
        raise ValueError("no tokens seen yet")
    if ctx.readout == "last":
        return int(np.argmax(ctx.last_logits))
    return int(np.argmax(ctx.logit_accumulator / ctx.tokens_seen))


def pool_logits(logits: np.ndarray, readout: str = "mean") -> np.ndarray:
    """Reduce (..., C, L) per-token logits to (..., C)."""
    return logits[..., -1] if readout == "last" else logits.mean(axis=-1)


def predict(net: Network, u: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class predictions for tokens of shape (B, I, L) using the conv-mode forward."""
    u = _check_input(net, u)
    out = []
    for i in range(0, len(u), batch_size):
        out.append(np.argmax(pool_logits(forward_conv(net, u[i:i + batch_size]), net.config.readout), axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def save_network(net: Network, path) -> None:
    tensors = {}
    for name, arr in net.named_arrays().items():
        if np.iscomplexobj(arr):
            tensors[name] = np.stack([arr.real, arr.imag], axis=-1)
        else:
            tensors[name] = arr
    meta = {"complex": [k for k, v in net.named_arrays().items() if np.iscomplexobj(v)], "seed": net.seed}
    container.write_container(path, CHECKPOINT_MAGIC, tensors, net.config.to_dict(), meta)


def load_network(path) -> Network:
    _, tensors, config, meta, _ = container.read_container(path, CHECKPOINT_MAGIC)
    arrays = {}
    for name, arr in tensors.items():
        arr = arr.astype(np.float64)
        arrays[name] = arr[..., 0] + 1j * arr[..., 1] if name in meta.get("complex", []) else arr
    return network_from_arrays(NetworkConfig.from_dict(config), arrays, seed=meta.get("seed"))
