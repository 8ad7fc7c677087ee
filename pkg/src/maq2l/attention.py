"""Transformer encoder over spatial tokens and the mask-injected decoder.

The encoder runs self-attention + FFN blocks over 1x1-projected feature
tokens. The decoder starts from learned label-embedding queries and, per
layer, applies (i) cross-attention onto the encoded tokens with the
CAM-derived mask added to every head's score matrix, (ii) self-attention
across the label queries so co-occurring labels can exchange information,
and (iii) an FFN; each sublayer has its own residual + layer norm.
Positional information enters through the queries and keys only.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


def sinusoidal_grid(h: int, w: int, d_model: int) -> np.ndarray:
    """Fixed 2-d sin/cos table over an h x w grid, shape (h*w, d_model).

    Half the channels encode the column coordinate, half the row; a
    deterministic function of (h, w, d_model).
    """
    if d_model % 4 != 0:
        raise ConfigError(f"d_model must be divisible by 4 for the 2-d table, got {d_model}")
    quarter = d_model // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xs = xs.reshape(-1, 1) * freqs
    ys = ys.reshape(-1, 1) * freqs
    return np.concatenate([np.sin(xs), np.cos(xs), np.sin(ys), np.cos(ys)], axis=1)


class Linear:
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = T.randn(rng, (d_in, d_out), math.sqrt(1.0 / d_in), requires_grad=True)
        self.bias = T.zeros((d_out,), requires_grad=True) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out

    def parameters(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


class LayerNorm:
    def __init__(self, d):
        self.gain = T.ones((d,), requires_grad=True)
        self.bias = T.zeros((d,), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)

    def parameters(self):
        return {"gain": self.gain, "bias": self.bias}


class MultiHeadAttention:
    """Scaled dot-product attention with h heads and an optional additive
    score mask, shared identically by every head."""

    def __init__(self, d_model, heads, rng):
        if d_model % heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by {heads} heads")
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(d_model, d_model, rng, bias=False)
        self.wk = Linear(d_model, d_model, rng, bias=False)
        self.wv = Linear(d_model, d_model, rng, bias=False)
        self.wo = Linear(d_model, d_model, rng, bias=False)
        self.last_weights = None  # per-head softmax rows from the latest call

    def __call__(self, q, k, v, mask=None):
        if mask is not None and mask.shape != (q.shape[0], k.shape[0]):
            raise ShapeError(
                f"mask shape {mask.shape} != ({q.shape[0]}, {k.shape[0]})")
        qp, kp, vp = self.wq(q), self.wk(k), self.wv(v)
        scale = 1.0 / math.sqrt(self.d_head)
        outs = []
        weights = []
        for i in range(self.heads):
            lo, hi = i * self.d_head, (i + 1) * self.d_head
            qi = qp.slice_cols(lo, hi)
            ki = kp.slice_cols(lo, hi)
            vi = vp.slice_cols(lo, hi)
            scores = T.matmul(qi, ki.transpose()) * scale
            if mask is not None:
                scores = scores + mask
            attn = T.softmax(scores, axis=-1)
            weights.append(attn.data.copy())
            outs.append(T.matmul(attn, vi))
        self.last_weights = weights
        return self.wo(T.concat_cols(outs))

    def parameters(self):
        out = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            for k, v in lin.parameters().items():
                out[f"{name}.{k}"] = v
        return out


class FeedForward:
    def __init__(self, d_model, mult, rng):
        self.fc1 = Linear(d_model, d_model * mult, rng)
        self.fc2 = Linear(d_model * mult, d_model, rng)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))

    def parameters(self):
        out = {}
        for name, lin in (("fc1", self.fc1), ("fc2", self.fc2)):
            for k, v in lin.parameters().items():
                out[f"{name}.{k}"] = v
        return out


class EncoderLayer:
    def __init__(self, d_model, heads, ffn_mult, dropout, rng):
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_mult, rng)
        self.norm2 = LayerNorm(d_model)
        self.dropout = dropout

    def __call__(self, tokens, pos, rng, train):
        qk = tokens + pos
        attended = self.attn(qk, qk, tokens)
        x = self.norm1(tokens + T.dropout(attended, self.dropout, rng, train))
        fed = self.ffn(x)
        return self.norm2(x + T.dropout(fed, self.dropout, rng, train))

    def parameters(self):
        out = {}
        for prefix, mod in (("attn", self.attn), ("norm1", self.norm1),
                            ("ffn", self.ffn), ("norm2", self.norm2)):
            for k, v in mod.parameters().items():
                out[f"{prefix}.{k}"] = v
        return out


class Encoder:
    """Token embedding plus a stack of self-attention blocks over the
    flattened spatial grid."""

    def __init__(self, c_in, d_model, heads, layers, ffn_mult, dropout, rng):
        self.te = Linear(c_in, d_model, rng, bias=False)
        self.layers = [EncoderLayer(d_model, heads, ffn_mult, dropout, rng)
                       for _ in range(layers)]
        self.d_model = d_model
        self.c_in = c_in

    def token_embed(self, x: T.Tensor) -> T.Tensor:
        """1x1 projection of (C, H, W) features to (H*W, d_model) tokens."""
        if x.ndim != 3 or x.shape[0] != self.c_in:
            raise ShapeError(f"expected ({self.c_in}, H, W) features, got {x.shape}")
        c, h, w = x.shape
        return self.te(x.reshape(c, h * w).transpose())

    def __call__(self, x, rng=None, train=False):
        _, h, w = x.shape
        tokens = self.token_embed(x)
        pos = T.tensor(sinusoidal_grid(h, w, self.d_model))
        for layer in self.layers:
            tokens = layer(tokens, pos, rng, train)
        return tokens

    def parameters(self):
        out = {f"te.{k}": v for k, v in self.te.parameters().items()}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"layer{i}.{k}"] = v
        return out


class DecoderLayer:
    def __init__(self, d_model, heads, ffn_mult, dropout, rng):
        self.cross = MultiHeadAttention(d_model, heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_mult, rng)
        self.norm3 = LayerNorm(d_model)
        self.dropout = dropout

    def __call__(self, q, memory, pos, mask, label_bias, rng, train):
        keys = memory + pos
        attended = self.cross(q, keys, memory, mask=mask)
        qt = self.norm1(q + T.dropout(attended, self.dropout, rng, train))
        if label_bias is not None:
            sq = qt + label_bias
            mixed = self.self_attn(sq, sq, qt)
        else:
            mixed = self.self_attn(qt, qt, qt)
        qt1 = self.norm2(qt + T.dropout(mixed, self.dropout, rng, train))
        fed = self.ffn(qt1)
        return self.norm3(qt1 + T.dropout(fed, self.dropout, rng, train))

    def parameters(self):
        out = {}
        for prefix, mod in (("cross", self.cross), ("norm1", self.norm1),
                            ("self", self.self_attn), ("norm2", self.norm2),
                            ("ffn", self.ffn), ("norm3", self.norm3)):
            for k, v in mod.parameters().items():
                out[f"{prefix}.{k}"] = v
        return out


class Decoder:
    """Label queries attending over encoded tokens, with the CAM mask
    added to the cross-attention scores of every layer."""

    def __init__(self, n_labels, d_model, heads, layers, ffn_mult, dropout, rng,
                 label_pos=False):
        self.label_embedding = T.randn(rng, (n_labels, d_model),
                                       math.sqrt(1.0 / d_model), requires_grad=True)
        self.label_bias = (T.randn(rng, (n_labels, d_model), math.sqrt(1.0 / d_model),
                                   requires_grad=True) if label_pos else None)
        self.layers = [DecoderLayer(d_model, heads, ffn_mult, dropout, rng)
                       for _ in range(layers)]
        self.n_labels = n_labels
        self.d_model = d_model

    def __call__(self, f_enc, attn_mask=None, grid_hw=None, rng=None, train=False):
        """f_enc: (HW, d); attn_mask: (HW, N) or None for the unmasked baseline."""
        hw = f_enc.shape[0]
        if grid_hw is None:
            side = int(round(math.sqrt(hw)))
            if side * side != hw:
                raise ShapeError(f"cannot infer grid for {hw} tokens; pass grid_hw")
            grid_hw = (side, side)
        mask_t = None
        if attn_mask is not None:
            if attn_mask.shape != (hw, self.n_labels):
                raise ShapeError(
                    f"attention mask {attn_mask.shape} != ({hw}, {self.n_labels})")
            mask_t = attn_mask.transpose()      # (N, HW), matches Q K^T
        pos = T.tensor(sinusoidal_grid(grid_hw[0], grid_hw[1], self.d_model))
        q = self.label_embedding
        for layer in self.layers:
            q = layer(q, f_enc, pos, mask_t, self.label_bias, rng, train)
        return q

    def parameters(self):
        out = {"label_embedding.weight": self.label_embedding}
        if self.label_bias is not None:
            out["label_embedding.pos_bias"] = self.label_bias
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"layer{i}.{k}"] = v
        return out


class LogitProbe:
    """Per-label scalar readout: logit_n = q_n . w_n + b_n."""

    def __init__(self, n_labels, d_model, rng):
        self.weight = T.randn(rng, (n_labels, d_model), math.sqrt(1.0 / d_model),
                              requires_grad=True)
        self.bias = T.zeros((n_labels,), requires_grad=True)
        self._ones = None
        self.d_model = d_model

    def __call__(self, q: T.Tensor) -> T.Tensor:
        if q.shape != self.weight.shape:
            raise ShapeError(f"queries {q.shape} != probe weights {self.weight.shape}")
        prod = q * self.weight
        row_sums = T.matmul(prod, T.tensor(np.ones((self.d_model, 1))))
        return row_sums.reshape(self.weight.shape[0]) + self.bias

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}
