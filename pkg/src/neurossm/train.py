"""Training: full precision in convolution mode, QAFT on the integer recurrence.

The torch forward passes are functional over a dict of real tensors whose
names follow ``Network.named_arrays`` with complex entries split into
``.re``/``.im`` parts, so gradients with respect to real and imaginary parts
come out directly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import quant
from .model import Network, network_from_arrays
from .ssm import fft_length

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 50
    learning_rate: float = 4e-3
    ssm_lr_factor: float = 0.1
    seed: int = 0
    mode: str = "conv"  # "conv" | "recurrent"
    quantized: bool = False
    schedule: str = "constant"  # "constant" | "cosine"
    weight_decay: float = 0.0
    eval_batch_size: int = 250

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in ("conv", "recurrent"):
            raise ValueError(f"mode must be 'conv' or 'recurrent', got {self.mode!r}")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def best_test_accuracy(self) -> float | None:
        return None if self.best_epoch is None else self.test_accuracy[self.best_epoch]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------- functional forward

def network_to_torch(net: Network, dtype=torch.float64, requires_grad=False) -> dict[str, torch.Tensor]:
    out = {}
    for name, arr in net.named_arrays().items():
        if np.iscomplexobj(arr):
            parts = {name + ".re": arr.real, name + ".im": arr.imag}
        else:
            parts = {name: arr}
        for k, v in parts.items():
            out[k] = torch.tensor(np.ascontiguousarray(v), dtype=dtype, requires_grad=requires_grad)
    return out


def torch_to_network(params: dict, config, seed=None) -> Network:
    arrays = {}
    for name, t in params.items():
        v = t.detach().cpu().double().numpy()
        if name.endswith(".re"):
            base = name[:-3]
            arrays[base] = v + 1j * params[base + ".im"].detach().cpu().double().numpy()
        elif not name.endswith(".im"):
            arrays[name] = v
    return network_from_arrays(config, arrays, seed=seed)


def _cplx(p, name):
    return torch.complex(p[name + ".re"], p[name + ".im"])


def discretize_torch(p: dict, i: int):
    pre = f"blocks.{i}."
    a, b = _cplx(p, pre + "a"), _cplx(p, pre + "b")
    dta = p[pre + "dt"][:, None] * a
    a_bar = torch.exp(dta)
    b_bar = (a_bar - 1) / a * b
    return dta, a_bar, b_bar, _cplx(p, pre + "c")


def kernel_torch(log_a_bar, b_bar, c, L: int) -> torch.Tensor:
    """k[h, l] = 2 Re(sum_n c b_bar exp(l log a_bar))."""
    ar = torch.arange(L, dtype=log_a_bar.real.dtype)
    vand = torch.exp(log_a_bar[..., None] * ar)
    return 2 * torch.einsum("hn,hnl->hl", c * b_bar, vand).real


def causal_conv_torch(k: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    L = u.shape[-1]
    n = fft_length(L)
    return torch.fft.irfft(torch.fft.rfft(u, n) * torch.fft.rfft(k, n), n)[..., :L]


def forward_conv_torch(p: dict, u: torch.Tensor, num_blocks: int) -> torch.Tensor:
    """(B, I, L) -> (B, C, L) per-token logits."""
    L = u.shape[-1]
    h = torch.einsum("hi,bil->bhl", p["encoder.w"], u) + p["encoder.b"][:, None]
    for i in range(num_blocks):
        dta, _, b_bar, c = discretize_torch(p, i)
        y = causal_conv_torch(kernel_torch(dta, b_bar, c, L), h) + p[f"blocks.{i}.ssm_bias"][:, None]
        r = torch.relu(y)
        h = torch.relu(torch.einsum("gh,bhl->bgl", p[f"blocks.{i}.mix.w"], r) + p[f"blocks.{i}.mix.b"][:, None])
    return torch.einsum("ch,bhl->bcl", p["decoder.w"], h) + p["decoder.b"][:, None]


def forward_recurrent_torch(p: dict, u: torch.Tensor, num_blocks: int) -> torch.Tensor:
    """Token-by-token forward, differentiable through the unrolled recurrence."""
    B, _, L = u.shape
    disc = [discretize_torch(p, i) for i in range(num_blocks)]
    states = [torch.zeros(B, *d[1].shape, dtype=d[1].dtype) for d in disc]
    outs = []
    for t in range(L):
        h = p["encoder.w"] @ u[:, :, t].T + p["encoder.b"][:, None]  # (H, B)
        h = h.T
        for i, (_, a_bar, b_bar, c) in enumerate(disc):
            states[i] = a_bar * states[i] + b_bar * h[:, :, None]
            y = 2 * (c * states[i]).sum(-1).real + p[f"blocks.{i}.ssm_bias"]
            r = torch.relu(y)
            h = torch.relu(r @ p[f"blocks.{i}.mix.w"].T + p[f"blocks.{i}.mix.b"])
        outs.append(h @ p["decoder.w"].T + p["decoder.b"])
    return torch.stack(outs, dim=-1)


def pooled_loss(logits: torch.Tensor, labels: torch.Tensor, readout: str = "mean") -> torch.Tensor:
    pooled = logits[..., -1] if readout == "last" else logits.mean(-1)
    return F.cross_entropy(pooled, labels)


def grad_full(net: Network, tokens, labels, mode: str = "conv", dtype=torch.float64) -> dict[str, np.ndarray]:
    """Gradients of mean cross-entropy (over pooled logits) for every parameter.

    Complex parameters get ``dL/dRe + 1j * dL/dIm``; ``dt`` is differentiated
    through the zero-order hold.
    """
    p = network_to_torch(net, dtype=dtype, requires_grad=True)
    u = torch.as_tensor(np.asarray(tokens), dtype=dtype)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    fwd = forward_conv_torch if mode == "conv" else forward_recurrent_torch
    loss = pooled_loss(fwd(p, u, net.config.num_blocks), y, net.config.readout)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {}
    for name, t in p.items():
        g = t.grad.numpy().copy()
        if name.endswith(".re"):
            grads[name[:-3]] = g + 1j * p[name[:-3] + ".im"].grad.numpy()
        elif not name.endswith(".im"):
            grads[name] = g
    return grads


def loss_numpy(net: Network, tokens, labels, mode: str = "conv") -> float:
    """Mean cross-entropy through the numpy forward (the finite-difference oracle's path)."""
    from .model import StreamingContext, forward_conv, forward_stream, pool_logits

    tokens = np.asarray(tokens)
    if mode == "conv":
        logits = forward_conv(net, tokens)
    else:
        per_sample = []
        for u in tokens:
            ctx = StreamingContext.reset(net)
            outs = []
            for t in range(u.shape[-1]):
                ctx, lg = forward_stream(net, ctx, u[:, t])
                outs.append(lg)
            per_sample.append(np.stack(outs, -1))
        logits = np.stack(per_sample)
    z = pool_logits(logits, net.config.readout)
    z = z - z.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), np.asarray(labels)]))


# ---------------------------------------------------------------- trainable module

SSM_GROUP = ("a_log_neg_re", "a.im", "log_dt")


class S4DModule(torch.nn.Module):
    """Trainable reparametrization: Re(a) = -exp(.) keeps poles stable, dt = exp(log_dt)."""

    def __init__(self, net: Network, dtype=torch.float32):
        super().__init__()
        self.config = net.config
        self.seed = net.seed
        raw = network_to_torch(net, dtype=dtype)
        self.params = torch.nn.ParameterDict()
        for name, t in raw.items():
            key = name.replace(".", "__")
            if name.endswith(".a.re"):
                self.params[key.replace("a__re", "a_log_neg_re")] = torch.nn.Parameter(torch.log(-t))
            elif name.endswith(".dt"):
                self.params[key.replace("dt", "log_dt")] = torch.nn.Parameter(torch.log(t))
            else:
                self.params[key] = torch.nn.Parameter(t.clone())

    def functional(self) -> dict[str, torch.Tensor]:
        out = {}
        for key, t in self.params.items():
            name = key.replace("__", ".")
            if name.endswith("a_log_neg_re"):
                out[name.replace("a_log_neg_re", "a.re")] = -torch.exp(t)
            elif name.endswith("log_dt"):
                out[name.replace("log_dt", "dt")] = torch.exp(t)
            else:
                out[name] = t
        return out

    def forward(self, u: torch.Tensor, mode: str = "conv") -> torch.Tensor:
        fwd = forward_conv_torch if mode == "conv" else forward_recurrent_torch
        return fwd(self.functional(), u, self.config.num_blocks)

    def to_network(self) -> Network:
        return torch_to_network(self.functional(), self.config, self.seed)

    def param_groups(self, lr: float, ssm_lr_factor: float, weight_decay: float):
        ssm, rest = [], []
        for key, t in self.params.items():
            name = key.replace("__", ".")
            (ssm if name.endswith(SSM_GROUP) else rest).append(t)
        return [{"params": rest, "lr": lr, "weight_decay": weight_decay},
                {"params": ssm, "lr": lr * ssm_lr_factor, "weight_decay": 0.0}]


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


@torch.no_grad()
def evaluate(net: Network, x, y, batch_size: int = 250, mode: str = "conv") -> float:
    """Float-model accuracy on tokens x (B, I, L)."""
    if len(x) == 0:
        return float("nan")
    p = network_to_torch(net, dtype=torch.float32 if mode == "conv" else torch.float64)
    fwd = forward_conv_torch if mode == "conv" else forward_recurrent_torch
    correct = 0
    for idx in _batches(len(x), batch_size, None):
        u = torch.as_tensor(np.asarray(x[idx]), dtype=p["encoder.w"].dtype)
        logits = fwd(p, u, net.config.num_blocks)
        pooled = logits[..., -1] if net.config.readout == "last" else logits.mean(-1)
        correct += int((pooled.argmax(-1).numpy() == np.asarray(y[idx])).sum())
    return correct / len(x)


def evaluate_quantized(fq, x, y, chunk: int = 64) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(quant.quantized_predict(fq, x, chunk) == np.asarray(y)))


def _emit(metrics_path, record: dict) -> None:
    log.info(json.dumps(record))
    if metrics_path is not None:
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def _lr_lambda(cfg: TrainConfig, steps_total: int):
    if cfg.schedule == "cosine":
        return lambda step: 0.5 * (1 + math.cos(math.pi * min(step, steps_total) / max(steps_total, 1)))
    return lambda step: 1.0


def train(net: Network, data, cfg: TrainConfig, metrics_path=None) -> tuple[Network, TrainReport]:
    """Adam in conv (or recurrent) mode; returns the best-test-accuracy network.

    ``data`` needs x_train, y_train, x_test, y_test with tokens shaped (B, I, L).
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dtype = torch.float32 if cfg.mode == "conv" else torch.float64
    module = S4DModule(net, dtype=dtype)
    opt = torch.optim.Adam(module.param_groups(cfg.learning_rate, cfg.ssm_lr_factor, cfg.weight_decay),
                           betas=(0.9, 0.999), eps=1e-8)
    steps_total = cfg.epochs * math.ceil(len(data.x_train) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(cfg, steps_total))
    report = TrainReport()
    best_net, best_acc = net, -1.0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total_loss, correct, seen = 0.0, 0, 0
        for idx in _batches(len(data.x_train), cfg.batch_size, rng):
            u = torch.as_tensor(np.asarray(data.x_train[idx]), dtype=dtype)
            y = torch.as_tensor(np.asarray(data.y_train[idx]), dtype=torch.long)
            logits = module(u, cfg.mode)
            pooled = logits[..., -1] if net.config.readout == "last" else logits.mean(-1)
            loss = F.cross_entropy(pooled, y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"loss became {loss.item()} in epoch {epoch}", report)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total_loss += loss.item() * len(idx)
            correct += int((pooled.argmax(-1) == y).sum())
            seen += len(idx)
        current = module.to_network()
        test_acc = evaluate(current, data.x_test, data.y_test, cfg.eval_batch_size)
        report.train_loss.append(total_loss / max(seen, 1))
        report.train_accuracy.append(correct / max(seen, 1))
        report.test_accuracy.append(test_acc)
        report.seconds.append(time.perf_counter() - t0)
        if test_acc > best_acc:
            best_acc, best_net, report.best_epoch = test_acc, current, epoch
        _emit(metrics_path, {"stage": "train", "epoch": epoch, "loss": report.train_loss[-1],
                             "train_accuracy": report.train_accuracy[-1], "test_accuracy": test_acc,
                             "seconds": report.seconds[-1]})
    return best_net, report


# ---------------------------------------------------------------- QAFT

class _FakeQuantSTE(torch.autograd.Function):
    """Exact fake quantization forward, clamp-masked identity backward."""

    @staticmethod
    def forward(ctx, x, bits, x_max):
        xn = x.detach().cpu().double().numpy()
        ctx.save_for_backward(torch.as_tensor(quant.saturation_mask(xn, bits, x_max)))
        return torch.as_tensor(quant.fake_quantize(xn, bits, x_max), dtype=x.dtype)

    @staticmethod
    def backward(ctx, g):
        (mask,) = ctx.saved_tensors
        return g.masked_fill(mask, 0.0), None, None


def fake_quantize_ste(x: torch.Tensor, bits: int, x_max: float) -> torch.Tensor:
    return _FakeQuantSTE.apply(x, bits, x_max)


class QAFTModule(torch.nn.Module):
    """Trainable offsets from a fake-quantized network's tensors.

    A tensor's float value is ``base + step * offset`` with offsets starting
    at zero, so step 0 reproduces the PTQ network exactly. ``step`` is 1
    except for a_bar and b_bar, where it is the channel timescale
    ``median_n(-log|a_bar|)`` (about dt times the decay rate). That mirrors
    the dt factor float training puts on these updates; without it one Adam
    step moves small-dt channels by percents. Grids stay fixed at their PTQ
    bounds, so a value that drifts past its bound saturates (and stops
    receiving gradient).
    """

    def __init__(self, fq: quant.FakeQuantNetwork):
        super().__init__()
        self.fq = fq
        self.roles = quant.tensor_roles(fq.config)
        self.base, self.step = {}, {}
        for name, t in fq.tensors.items():
            self.base[name] = torch.as_tensor(t.values, dtype=torch.float64)
            self.step[name] = torch.ones(())
        for i in range(fq.config.num_blocks):
            p = f"blocks.{i}."
            a = fq.tensors[p + "a_bar"].values
            decay = -np.log(np.maximum(np.hypot(a[..., 0], a[..., 1]), 1e-300))
            tau = torch.as_tensor(np.clip(np.median(decay, axis=-1), 1e-8, 1.0))[:, None, None]
            self.step[p + "a_bar"] = self.step[p + "b_bar"] = tau
        self.shadow = torch.nn.ParameterDict({
            k.replace(".", "__"): torch.nn.Parameter(torch.zeros_like(v)) for k, v in self.base.items()})

    def bound(self, name: str) -> float:
        return self.fq.tensors[name].x_max

    def bits(self, name: str) -> int:
        return self.fq.bits_for(self.roles[name])

    def value(self, name: str) -> torch.Tensor:
        return self.base[name] + self.step[name] * self.shadow[name.replace(".", "__")]

    def fq_tensor(self, name: str) -> torch.Tensor:
        return fake_quantize_ste(self.value(name), self.bits(name), self.bound(name))

    def quantized(self) -> quant.FakeQuantNetwork:
        tensors = {}
        for name, t in self.fq.tensors.items():
            v = self.value(name).detach().numpy()
            b, xm = self.bits(name), self.bound(name)
            tensors[name] = quant.FakeQuantTensor(quant.fake_quantize(v, b, xm), b, xm, t.is_complex)
        return quant.FakeQuantNetwork(self.fq.config, self.fq.spec, tensors, dict(self.fq.act_bounds), self.fq.seed)

    def param_groups(self, lr, ssm_lr_factor):
        ssm, rest = [], []
        for key, t in self.shadow.items():
            (ssm if key.endswith("a_bar") else rest).append(t)
        return [{"params": rest, "lr": lr}, {"params": ssm, "lr": lr * ssm_lr_factor}]

    def forward(self, tokens: np.ndarray) -> torch.Tensor:
        """Per-token logits whose values equal the integer forward exactly; gradients are straight-through."""
        fq = self.quantized()
        inet = quant.extract_integers(fq)
        tq = quant.quantize_tokens(inet, tokens)
        trace: dict = {}
        logits_q = quant.integer_forward(inet, tq, trace)
        sb = inet.spec.spike_bits
        ab = fq.act_bounds

        def exact(name, bound_name, q=None):
            q = trace[name] if q is None else q
            return torch.as_tensor(quant.dequantize(q, sb, ab[bound_name]))

        def pin(surrogate, value):
            return surrogate + (value - surrogate).detach()

        cfg = fq.config
        L = tokens.shape[-1]
        u = torch.as_tensor(quant.dequantize(tq, sb, ab["input"]))
        h = torch.einsum("hi,bil->bhl", self.fq_tensor("encoder.w"), u) + self.fq_tensor("encoder.b")[:, None]
        h = pin(h, exact("encoder", "encoder"))
        for i in range(cfg.num_blocks):
            p = f"blocks.{i}."
            a = self.fq_tensor(p + "a_bar")
            b = self.fq_tensor(p + "b_bar")
            c = self.fq_tensor(p + "c")
            a_bar = torch.complex(a[..., 0], a[..., 1])
            k = kernel_torch(torch.log(a_bar), torch.complex(b[..., 0], b[..., 1]),
                             torch.complex(c[..., 0], c[..., 1]), L)
            y = causal_conv_torch(k, h) + self.fq_tensor(p + "ssm_bias")[:, None]
            r = pin(torch.relu(y), exact(p + "relu", p + "relu"))
            m = torch.einsum("gh,bhl->bgl", self.fq_tensor(p + "mix.w"), r) + self.fq_tensor(p + "mix.b")[:, None]
            h = pin(torch.relu(m), exact(p + "mix", p + "mix"))
        out = torch.einsum("ch,bhl->bcl", self.fq_tensor("decoder.w"), h) + self.fq_tensor("decoder.b")[:, None]
        return pin(out, exact(None, "logits", logits_q))


def qaft(fq: quant.FakeQuantNetwork, data, cfg: TrainConfig, metrics_path=None):
    """Quantization-aware fine-tuning; returns the final (re-quantized) network and a report.

    The forward pass runs the integer recurrence, so the loss sees exactly
    what the quantized network computes; the backward pass is the
    straight-through estimator through that recurrence.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    if cfg.epochs == 0:
        return fq, report
    module = QAFTModule(fq)
    opt = torch.optim.Adam(module.param_groups(cfg.learning_rate, cfg.ssm_lr_factor), betas=(0.9, 0.999), eps=1e-8)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total_loss, correct, seen = 0.0, 0, 0
        for idx in _batches(len(data.x_train), cfg.batch_size, rng):
            x = np.asarray(data.x_train[idx])
            y = torch.as_tensor(np.asarray(data.y_train[idx]), dtype=torch.long)
            logits = module(x)
            pooled = logits[..., -1] if fq.config.readout == "last" else logits.mean(-1)
            loss = F.cross_entropy(pooled, y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"QAFT loss became {loss.item()} in epoch {epoch}", report)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((pooled.argmax(-1) == y).sum())
            seen += len(idx)
        current = module.quantized()
        test_acc = evaluate_quantized(current, data.x_test, data.y_test)
        report.train_loss.append(total_loss / max(seen, 1))
        report.train_accuracy.append(correct / max(seen, 1))
        report.test_accuracy.append(test_acc)
        report.seconds.append(time.perf_counter() - t0)
        report.best_epoch = epoch
        _emit(metrics_path, {"stage": "qaft", "epoch": epoch, "loss": report.train_loss[-1],
                             "train_accuracy": report.train_accuracy[-1], "test_accuracy": test_acc,
                             "seconds": report.seconds[-1]})
    return module.quantized(), report
