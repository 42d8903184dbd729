"""Encoder-decoder attention model for next-position regression.

Observed steps (raw 2-D positions or flattened fingerprint bit matrices) are
linearly embedded, tagged with sinusoidal position codes, and passed through
stacked multi-head self-attention + position-wise feedforward layers
(post-norm residuals). The decoder starts from a learned start vector,
cross-attends to the encoder output, and a 2-unit linear head regresses the
next position. All coordinates are scaled by ``pos_scale`` internally so the
optimizer sees O(1) targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import kv_digest
from .tensor import Tensor

INPUT_MODES = ("position", "fingerprint")
PE_DENOMINATORS = ("d_model", "t_obs")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    dropout_p: float = 0.01
    t_obs: int = 7
    input_mode: str = "fingerprint"
    input_dim: int = 512
    share_embeddings: bool = True
    pe_denominator: str = "d_model"
    pos_scale: float = 64.0
    max_len: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.pe_denominator not in PE_DENOMINATORS:
            raise ValueError(f"pe_denominator must be one of {PE_DENOMINATORS}")
        if self.input_mode == "position" and self.input_dim != 2:
            raise ValueError("position mode requires input_dim=2")
        if self.t_obs < 1 or self.max_len < self.t_obs:
            raise ValueError("need 1 <= t_obs <= max_len")

    @property
    def d_k(self):
        return self.d_model // self.n_heads

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def digest(self):
        return kv_digest({"model": "transformer", **self.as_dict()})


def positional_encoding(pos: int, j: int, d_model: int, denominator: int | None = None) -> float:
    """Sinusoidal code for sequence position ``pos`` at embedding index ``j``.

    Even indices use sin, odd use cos, both at frequency
    1 / denominator^(2*(j//2)/d_model); the denominator base is 10000.
    """
    den = d_model if denominator is None else denominator
    arg = pos / 10000.0 ** (2 * (j // 2) / den)
    return math.sin(arg) if j % 2 == 0 else math.cos(arg)


def positional_encoding_table(max_len: int, d_model: int, denominator: int) -> np.ndarray:
    """Precomputed (max_len, d_model) table of positional codes."""
    pos = np.arange(max_len)[:, None]
    j = np.arange(d_model)[None, :]
    arg = pos / 10000.0 ** (2 * (j // 2) / denominator)
    table = np.where(j % 2 == 0, np.sin(arg), np.cos(arg))
    return np.ascontiguousarray(table)


def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n) mask: entry (t, s) allows attention iff s <= t."""
    return np.tril(np.ones((n, n), dtype=bool))


def _mask_to_additive(mask) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask)
    if mask.dtype == bool:
        add = np.where(mask, 0.0, -np.inf)
    else:
        add = mask.astype(np.float64)
    return add


def scaled_dot_attention(q, k, v, mask=None, capture=None):
    """softmax(q k^T / sqrt(d_k) + mask) v over the last two axes.

    ``mask`` is boolean (True = allow) or additive 0/-inf; a query row with
    every key forbidden raises DomainError. When ``capture`` is a list the
    attention probability matrix is appended to it (as a plain array).
    """
    d_k = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose_last(k)), 1.0 / math.sqrt(d_k))
    add = _mask_to_additive(mask)
    if add is not None:
        scores = scores + Tensor(add)
    probs = T.softmax_rows(scores)
    if capture is not None:
        capture.append(probs.values.copy())
    return T.matmul(probs, v)


def multi_head(x_q, x_kv, head_params, w_o, mask=None, capture=None):
    """Concat of per-head scaled-dot attentions over projected q/k/v, times w_o.

    ``head_params`` is a sequence of (w_q, w_k, w_v) tensors, one triple per
    head; projections carry no bias.
    """
    heads = []
    for w_q, w_k, w_v in head_params:
        q = T.matmul(x_q, w_q)
        k = T.matmul(x_kv, w_k)
        v = T.matmul(x_kv, w_v)
        heads.append(scaled_dot_attention(q, k, v, mask=mask, capture=capture))
    cat = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
    return T.matmul(cat, w_o)


def feedforward(x, w1, b1, w2, b2):
    """Position-wise max(0, x w1 + b1) w2 + b2."""
    return T.matmul(T.relu(T.matmul(x, w1) + b1), w2) + b2


def _init(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


class _AttentionBlock:
    def __init__(self, cfg, rng):
        d, dk = cfg.d_model, cfg.d_k
        self.heads = [tuple(_init(rng, (d, dk), d) for _ in range(3)) for _ in range(cfg.n_heads)]
        self.w_o = _init(rng, (cfg.n_heads * dk, d), cfg.n_heads * dk)

    def named(self, prefix):
        for i, (wq, wk, wv) in enumerate(self.heads):
            yield f"{prefix}.h{i}.wq", wq
            yield f"{prefix}.h{i}.wk", wk
            yield f"{prefix}.h{i}.wv", wv
        yield f"{prefix}.wo", self.w_o


class _FeedForward:
    def __init__(self, cfg, rng):
        d, dff = cfg.d_model, cfg.d_ff
        self.w1 = _init(rng, (d, dff), d)
        self.b1 = _zeros(dff)
        self.w2 = _init(rng, (dff, d), dff)
        self.b2 = _zeros(d)

    def named(self, prefix):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


class _LayerNorm:
    def __init__(self, cfg):
        self.gain = _ones(cfg.d_model)
        self.bias = _zeros(cfg.d_model)

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)

    def named(self, prefix):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class TransformerModel:
    kind = "transformer"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        cfg = config
        d = cfg.d_model

        self.input_w = _init(rng, (cfg.input_dim, d), cfg.input_dim)
        self.input_b = _zeros(d)
        if cfg.share_embeddings and cfg.input_mode == "position":
            self.output_w, self.output_b = self.input_w, self.input_b
        else:
            self.output_w = _init(rng, (2, d), 2)
            self.output_b = _zeros(d)
        self.start_token = _init(rng, (d,), d)

        self.enc = []
        for _ in range(cfg.n_enc_layers):
            self.enc.append(
                {
                    "attn": _AttentionBlock(cfg, rng),
                    "ln1": _LayerNorm(cfg),
                    "ff": _FeedForward(cfg, rng),
                    "ln2": _LayerNorm(cfg),
                }
            )
        self.dec = []
        for _ in range(cfg.n_dec_layers):
            self.dec.append(
                {
                    "self": _AttentionBlock(cfg, rng),
                    "ln1": _LayerNorm(cfg),
                    "cross": _AttentionBlock(cfg, rng),
                    "ln2": _LayerNorm(cfg),
                    "ff": _FeedForward(cfg, rng),
                    "ln3": _LayerNorm(cfg),
                }
            )
        self.head_w = _init(rng, (d, 2), d)
        self.head_b = _zeros(2)

        den = cfg.d_model if cfg.pe_denominator == "d_model" else cfg.t_obs
        self.pe = positional_encoding_table(cfg.max_len, d, den)
        self.pe_enabled = True  # disabled only by equivariance diagnostics

    # --- parameters ---

    def params(self):
        out = [("input_embed.w", self.input_w), ("input_embed.b", self.input_b)]
        if self.output_w is not self.input_w:
            out += [("output_embed.w", self.output_w), ("output_embed.b", self.output_b)]
        out.append(("start_token", self.start_token))
        for i, layer in enumerate(self.enc):
            out += list(layer["attn"].named(f"enc{i}.self"))
            out += list(layer["ln1"].named(f"enc{i}.ln1"))
            out += list(layer["ff"].named(f"enc{i}.ff"))
            out += list(layer["ln2"].named(f"enc{i}.ln2"))
        for i, layer in enumerate(self.dec):
            out += list(layer["self"].named(f"dec{i}.self"))
            out += list(layer["ln1"].named(f"dec{i}.ln1"))
            out += list(layer["cross"].named(f"dec{i}.cross"))
            out += list(layer["ln2"].named(f"dec{i}.ln2"))
            out += list(layer["ff"].named(f"dec{i}.ff"))
            out += list(layer["ln3"].named(f"dec{i}.ln3"))
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def count_params(self):
        seen = set()
        total = 0
        for _, p in self.params():
            if id(p) not in seen:
                seen.add(id(p))
                total += p.values.size
        return total

    # --- forward ---

    def _embed_observed(self, observed):
        obs = np.asarray(observed, dtype=np.float64)
        if self.config.input_mode == "position":
            obs = obs / self.config.pos_scale
        # embeddings are scaled up by sqrt(d_model) so the content signal is
        # not drowned out by the unit-amplitude position codes added next
        x = T.scale(T.matmul(Tensor(obs), self.input_w), math.sqrt(self.config.d_model))
        return x + self.input_b

    def _drop(self, x, train, rng):
        return T.dropout(x, self.config.dropout_p, rng=rng, train=train)

    def encode(self, observed, train=False, rng=None, capture=None):
        """Map (B, T, input_dim) or (T, input_dim) steps to latent (..., T, d_model)."""
        obs = np.asarray(observed, dtype=np.float64)
        n = obs.shape[-2]
        if n == 0:
            raise T.DomainError("encode: empty observed sequence")
        x = self._embed_observed(obs)
        if self.pe_enabled:
            x = x + Tensor(self.pe[:n])
        x = self._drop(x, train, rng)
        for layer in self.enc:
            a = multi_head(x, x, layer["attn"].heads, layer["attn"].w_o, capture=capture)
            x = layer["ln1"](x + self._drop(a, train, rng))
            f = feedforward(x, layer["ff"].w1, layer["ff"].b1, layer["ff"].w2, layer["ff"].b2)
            x = layer["ln2"](x + self._drop(f, train, rng))
        return x

    def _decoder_inputs(self, z_values_shape, prev_positions):
        """Start token then embedded previous target positions, PE-tagged."""
        batched = len(z_values_shape) == 3
        start = T.reshape(self.start_token, (1, -1))
        if prev_positions is not None and np.asarray(prev_positions).shape[-2] > 0:
            prev = np.asarray(prev_positions, dtype=np.float64) / self.config.pos_scale
            emb = T.scale(T.matmul(Tensor(prev), self.output_w), math.sqrt(self.config.d_model))
            emb = emb + self.output_b
            if batched:
                b = z_values_shape[0]
                start_b = T.Tensor(np.zeros((b, 1, self.config.d_model))) + start
                x = T.concat([start_b, emb], axis=-2)
            else:
                x = T.concat([start, emb], axis=-2)
        else:
            x = start
            if batched:
                x = T.Tensor(np.zeros((z_values_shape[0], 1, self.config.d_model))) + start
        n = x.shape[-2]
        if self.pe_enabled:
            x = x + Tensor(self.pe[:n])
        return x, n

    def decode(self, z, prev_positions=None, train=False, rng=None, capture=None):
        """Run the decoder stack over [start, prev targets]; returns all states.

        Self-attention is causally masked, so the state at step t never
        depends on positions fed in after t.
        """
        x, n = self._decoder_inputs(z.shape, prev_positions)
        x = self._drop(x, train, rng)
        cmask = causal_mask(n)
        for layer in self.dec:
            a = multi_head(x, x, layer["self"].heads, layer["self"].w_o, mask=cmask, capture=capture)
            x = layer["ln1"](x + self._drop(a, train, rng))
            c = multi_head(x, z, layer["cross"].heads, layer["cross"].w_o, capture=capture)
            x = layer["ln2"](x + self._drop(c, train, rng))
            f = feedforward(x, layer["ff"].w1, layer["ff"].b1, layer["ff"].w2, layer["ff"].b2)
            x = layer["ln3"](x + self._drop(f, train, rng))
        return x

    def _head(self, states_last):
        return T.matmul(states_last, self.head_w) + self.head_b

    def forward_next(self, observed, train=False, rng=None):
        """Graph-building forward pass; returns normalized (B, 2) predictions."""
        z = self.encode(observed, train=train, rng=rng)
        states = self.decode(z, None, train=train, rng=rng)
        last = states[..., -1, :] if states.ndim == 3 else states[-1, :]
        if last.ndim == 1:
            last = T.reshape(last, (1, -1))
        return self._head(last)

    def predict_next(self, observed):
        """Predict the next 2-D position (meters) for one window or a batch."""
        obs = np.asarray(observed, dtype=np.float64)
        single = obs.ndim == 2
        with T.no_grad():
            pred = self.forward_next(obs).values * self.config.pos_scale
        if not np.isfinite(pred).all():
            raise T.DomainError("predict_next produced non-finite output")
        return pred[0] if single else pred

    def rollout(self, observed, n_steps):
        """Autoregressive multi-step prediction; row k is the (T_obs+1+k)th position."""
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        obs = np.asarray(observed, dtype=np.float64)
        single = obs.ndim == 2
        if single:
            obs = obs[None]
        preds = np.zeros((obs.shape[0], n_steps, 2))
        with T.no_grad():
            z = self.encode(obs)
            prev = None
            for k in range(n_steps):
                states = self.decode(z, prev)
                y = self._head(states[..., -1, :]).values * self.config.pos_scale
                preds[:, k] = y
                prev = preds[:, : k + 1]
        return preds[0] if single else preds

    def loss_batch(self, observed, targets, train=True, rng=None):
        """Mean squared Euclidean error (normalized units) over the batch."""
        pred = self.forward_next(observed, train=train, rng=rng)
        t = np.asarray(targets, dtype=np.float64) / self.config.pos_scale
        diff = pred - Tensor(t.reshape(pred.shape))
        return T.tmean(T.tsum(diff * diff, axis=-1))

    def loss_multi_batch(self, observed, future, train=True, rng=None):
        """Teacher-forced horizon loss: decoder sees true positions 0..k-1, predicts k."""
        obs = np.asarray(observed, dtype=np.float64)
        fut = np.asarray(future, dtype=np.float64)
        if fut.ndim == 2:
            obs, fut = obs[None], fut[None]
        z = self.encode(obs, train=train, rng=rng)
        prev = fut[:, :-1] if fut.shape[1] > 1 else None
        states = self.decode(z, prev, train=train, rng=rng)
        pred = self._head(states)
        diff = pred - Tensor(fut / self.config.pos_scale)
        return T.tmean(T.tsum(diff * diff, axis=-1))

    # --- persistence ---

    def save(self, path):
        save_checkpoint(path, [(n, p.values) for n, p in self.params()], self.config.digest())

    @classmethod
    def load(cls, path, config: ModelConfig):
        digest, arrays = load_checkpoint(path)
        if digest != config.digest():
            raise CheckpointError(
                f"{path}: checkpoint digest {digest[:12]}... does not match model config "
                f"digest {config.digest()[:12]}..."
            )
        model = cls(config, seed=0)
        for name, p in model.params():
            if name not in arrays:
                raise CheckpointError(f"{path}: missing parameter block '{name}'")
            if arrays[name].shape != p.values.shape:
                raise CheckpointError(
                    f"{path}: shape mismatch for '{name}': {arrays[name].shape} vs {p.values.shape}"
                )
            p.values[...] = arrays[name]
        return model
