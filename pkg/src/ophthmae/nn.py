"""Layers, optimizer and learning-rate schedules built on ``tensor``."""

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class StateDictError(ValueError):
    """Raised when a parameter table does not fit a model."""


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad=True, name=None):
        super().__init__(data, requires_grad=requires_grad, name=name)


def trunc_normal(rng, shape, std=0.02, dtype=None):
    """Normal(0, std) truncated at two standard deviations (redrawn, not clipped)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype or T.get_default_dtype())


class Module:
    """Parameter container. Attributes that are Parameters, Modules or lists of
    Modules are discovered in assignment order."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def requires_grad_(self, flag):
        for p in self.parameters():
            p.requires_grad = bool(flag)
            p.grad = np.zeros_like(p.data) if flag else None
        return self

    def state_dict(self):
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state, strict=True, prefix=""):
        own = OrderedDict(self.named_parameters())
        missing = [n for n in own if prefix + n not in state]
        if strict and missing:
            raise StateDictError(f"missing parameters: {', '.join(missing[:5])}")
        if strict:
            extra = [k for k in state if k.startswith(prefix) and k[len(prefix):] not in own]
            if extra:
                raise StateDictError(f"unexpected parameters: {', '.join(extra[:5])}")
        for name, param in own.items():
            key = prefix + name
            if key not in state:
                continue
            value = np.asarray(state[key])
            if value.shape != param.shape:
                raise StateDictError(
                    f"shape mismatch for {key}: checkpoint {tuple(value.shape)} vs model {tuple(param.shape)}")
            param.data = value.astype(param.dtype, copy=True)
        return self

    def to(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = np.zeros_like(p.data)
        return self

    def num_parameters(self, trainable_only=False):
        return sum(p.size for p in self.parameters() if p.requires_grad or not trainable_only)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = Parameter(trunc_normal(rng, (d_out, d_in)))
        self.bias = Parameter(np.zeros(d_out, dtype=T.get_default_dtype())) if bias else None

    @property
    def d_in(self):
        return self.weight.shape[1]

    @property
    def d_out(self):
        return self.weight.shape[0]

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        dtype = T.get_default_dtype()
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Attention(Module):
    def __init__(self, dim, heads, rng, causal=False):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.causal = causal
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.last_weights = None

    def _split(self, x, b, n):
        return x.reshape(b, n, self.heads, -1).transpose(0, 2, 1, 3)

    def forward(self, x, keep_weights=False):
        b, n, d = x.shape
        dh = d // self.heads
        q = self._split(self.q(x), b, n)
        k = self._split(self.k(x), b, n)
        v = self._split(self.v(x), b, n)
        scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        if self.causal:
            blocked = np.triu(np.ones((n, n), dtype=bool), k=1)
            scores = scores + np.where(blocked, -np.inf, 0.0).astype(scores.dtype)
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data if keep_weights else None
        out = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.o(out)


class MLP(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim, heads, mlp_ratio, rng, causal=False):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng, causal=causal)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng)

    def forward(self, x, keep_weights=False):
        x = x + self.attn(self.norm1(x), keep_weights=keep_weights)
        return x + self.mlp(self.norm2(x))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def soft_cross_entropy(logits, target_probs):
    """Mean over rows of -sum(target * log_softmax(logits))."""
    targets = T.as_tensor(np.asarray(target_probs, dtype=logits.dtype))
    per_row = (T.log_softmax(logits, axis=-1) * targets).sum(axis=-1)
    return -per_row.mean()


def token_cross_entropy(logits, target_ids, weight):
    """Cross-entropy over (B, N, V) logits, averaged over positions where weight > 0."""
    logp = T.log_softmax(logits, axis=-1)
    b, n, _ = logits.shape
    picked = logp[np.arange(b)[:, None], np.arange(n)[None, :], np.asarray(target_ids)]
    w = np.asarray(weight, dtype=logits.dtype)
    total = float(w.sum())
    if total <= 0:
        raise ValueError("no supervised positions in batch")
    return -(picked * w).sum() * (1.0 / total)


def bce_loss(logits, targets):
    """Binary cross-entropy with logits, averaged over every element."""
    return T.bce_with_logits(logits, np.asarray(targets, dtype=logits.dtype)).mean()


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay. Decay skips vectors and learned tokens."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.named = [(n, p) for n, p in named_params]
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}

    @staticmethod
    def decays(name, param):
        return param.ndim >= 2 and not name.endswith("token")

    def zero_grad(self):
        for _, p in self.named:
            p.zero_grad()

    def step(self, lr):
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.named:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            data = p.data
            if self.weight_decay and self.decays(name, p):
                data = data * (1.0 - lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (data - lr * update).astype(p.dtype, copy=False)

    def state_dict(self):
        out = OrderedDict()
        for name, _ in self.named:
            out[f"optim.m.{name}"] = self.m[name].copy()
            out[f"optim.v.{name}"] = self.v[name].copy()
        return out

    def load_state_dict(self, state, step_count):
        for name, _ in self.named:
            self.m[name] = np.array(state[f"optim.m.{name}"], copy=True)
            self.v[name] = np.array(state[f"optim.v.{name}"], copy=True)
        self.step_count = int(step_count)


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------

def warmup_cosine(epoch, warmup, total, peak, floor=0.0):
    """Linear 0 -> peak over ``warmup`` epochs, then half-cosine peak -> floor."""
    if warmup > 0 and epoch <= warmup:
        return peak * (epoch / warmup)
    span = total - warmup
    t = min(max((epoch - warmup) / span, 0.0), 1.0) if span > 0 else 1.0
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * t))
