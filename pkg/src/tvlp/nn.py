"""Layers built on the autodiff tensor: linear, norm, conv, attention.

Modules register parameters and submodules automatically on attribute
assignment, so ``named_parameters`` walks the whole model for the
optimizer, checkpointing, and gradient checks.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor

EMBED_INIT_SCALE = 0.02


class Parameter(Tensor):
    """Trainable leaf tensor; ``decay_exempt`` opts out of weight decay."""

    __slots__ = ("decay_exempt",)

    def __init__(self, data, decay_exempt=False, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.decay_exempt = decay_exempt


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix=""):
        for key,p in self._params.items():
            yield (prefix + key, p)
        for key, mod in self._modules.items():
            yield from mod.named_parameters(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for mod in modules:
            self.append(mod)

    def append(self, mod):
        self._modules[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, init_scale=None):
        super().__init__()
        scale = init_scale if init_scale is not None else 1.0 / np.sqrt(in_dim)
        self.weight = Parameter(rng.normal(0.0, scale, size=(in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim), decay_exempt=True) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.weight) if x.ndim == 2 else self._batched(x)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    def _batched(self, x):
        # fold leading axes into rows so a single 2-d matmul serves any rank
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, x.shape[-1]))
        out = T.matmul(flat, self.weight)
        return T.reshape(out, lead + (self.weight.shape[1],))


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(dim), decay_exempt=True)
        self.bias = Parameter(np.zeros(dim), decay_exempt=True)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, eps=self.eps)


class Embedding(Module):
    def __init__(self, num_rows, dim, rng):
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, EMBED_INIT_SCALE, size=(num_rows, dim)),
                                decay_exempt=True)

    def __call__(self, ids):
        return T.embedding(self.weight, ids)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True):
        super().__init__()
        scale = 1.0 / np.sqrt(in_ch * kernel * kernel)
        self.weight = Parameter(rng.normal(0.0, scale, size=(out_ch, in_ch, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_ch), decay_exempt=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over batched (B, T, D) sequences.

    ``kv_dim`` lets keys/values come from a space of different width than
    the queries (cross-attention over projected patch features).
    """

    def __init__(self, dim, n_heads, rng, kv_dim=None):
        super().__init__()
        if dim % n_heads != 0:
            raise T.ShapeError(f"attention width {dim} not divisible by {n_heads} heads")
        kv_dim = kv_dim or dim
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.w_q = Linear(dim, dim, rng)
        self.w_k = Linear(kv_dim, dim, rng)
        self.w_v = Linear(kv_dim, dim, rng)
        self.w_o = Linear(dim, dim, rng)

    def _split_heads(self, x):
        b, t, _ = x.shape
        x = T.reshape(x, (b, t, self.n_heads, self.head_dim))
        x = T.transpose(x, (0, 2, 1, 3))
        return T.reshape(x, (b * self.n_heads, t, self.head_dim))

    def _merge_heads(self, x, b, t):
        x = T.reshape(x, (b, self.n_heads, t, self.head_dim))
        x = T.transpose(x, (0, 2, 1, 3))
        return T.reshape(x, (b, t, self.dim))

    def __call__(self, query, key_value=None, additive_mask=None, capture=None):
        """additive_mask: numpy (B, Tq, Tk) added to scores pre-softmax.

        When ``capture`` is a list, the post-softmax attention weights are
        appended to it as a detached (B, heads, Tq, Tk) array.
        """
        kv = query if key_value is None else key_value
        b, tq, _ = query.shape
        tk = kv.shape[1]
        q = self._split_heads(self.w_q(query))
        k = self._split_heads(self.w_k(kv))
        v = self._split_heads(self.w_v(kv))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.head_dim))
        if additive_mask is not None:
            mask = np.broadcast_to(np.asarray(additive_mask, dtype=scores.data.dtype),
                                   (b, tq, tk))
            scores = T.add(scores, Tensor(np.repeat(mask, self.n_heads, axis=0)))
        attn = T.softmax(scores, axis=-1)
        if capture is not None:
            capture.append(attn.data.reshape(b, self.n_heads, tq, tk).copy())
        ctx = T.matmul(attn, v)
        return self.w_o(self._merge_heads(ctx, b, tq))


class FeedForward(Module):
    def __init__(self, dim, hidden, rng):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class TransformerLayer(Module):
    """Post-norm encoder layer with an optional cross-attention sublayer.

    Sublayer order: self-attention, cross-attention (skipped when no
    context is supplied), feed-forward; each followed by residual + LN.
    """

    def __init__(self, dim, n_heads, ff_hidden, rng, cross_dim=None):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, n_heads, rng)
        self.norm1 = LayerNorm(dim)
        if cross_dim is not None:
            self.cross_attn = MultiHeadAttention(dim, n_heads, rng, kv_dim=cross_dim)
            self.norm_cross = LayerNorm(dim)
        else:
            self.cross_attn = None
        self.ff = FeedForward(dim, ff_hidden, rng)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x, self_mask=None, context=None, capture=None):
        attn = self.self_attn(x, additive_mask=self_mask, capture=capture)
        x = self.norm1(T.add(x, attn))
        if self.cross_attn is not None and context is not None:
            x = self.norm_cross(T.add(x, self.cross_attn(x, key_value=context)))
        x = self.norm2(T.add(x, self.ff(x)))
        return x


def causal_mask(t):
    """Additive mask (1, t, t) forbidding attention to future positions."""
    mask = np.triu(np.full((t, t), -1e9), k=1)
    return mask[None, :, :]


def padding_mask(lengths, t):
    """Additive mask (B, 1, t) hiding key positions >= per-row length."""
    b = len(lengths)
    mask = np.zeros((b, 1, t))
    for i, n in enumerate(lengths):
        mask[i, 0, n:] = -1e9
    return mask
