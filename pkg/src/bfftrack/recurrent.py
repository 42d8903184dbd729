"""Recurrent baselines (vanilla RNN and LSTM) for next-position regression.

Both consume the same step inputs as the attention model (raw 2-D positions
or flattened fingerprint bits), unroll over the observed window, and regress
the next position from the final hidden state with a 2-unit linear head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import kv_digest
from .tensor import Tensor

KINDS = ("rnn", "lstm")
INPUT_MODES = ("position", "fingerprint")


@dataclass
class RecurrentConfig:
    kind: str = "lstm"
    hidden_dim: int = 96
    input_dim: int = 512
    n_layers: int = 1
    dropout_p: float = 0.01
    t_obs: int = 7
    input_mode: str = "fingerprint"
    pos_scale: float = 64.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.input_mode == "position" and self.input_dim != 2:
            raise ValueError("position mode requires input_dim=2")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def digest(self):
        return kv_digest({"model": self.kind, **self.as_dict()})


def rnn_step(x_t, h_prev, params):
    """h_t = tanh(x_t W_x + h_prev W_h + b)."""
    w_x, w_h, b = params
    return T.tanh(T.matmul(x_t, w_x) + T.matmul(h_prev, w_h) + b)


def lstm_step(x_t, state, params):
    """Gated update: c_t = f*c_prev + i*g, h_t = o*tanh(c_t).

    The fused projection yields gate pre-activations in [input, forget,
    candidate, output] order along the last axis.
    """
    h_prev, c_prev = state
    w_x, w_h, b = params
    n = w_h.shape[0]
    z = T.matmul(x_t, w_x) + T.matmul(h_prev, w_h) + b
    i = T.sigmoid(z[..., 0 * n : 1 * n])
    f = T.sigmoid(z[..., 1 * n : 2 * n])
    g = T.tanh(z[..., 2 * n : 3 * n])
    o = T.sigmoid(z[..., 3 * n : 4 * n])
    c_t = f * c_prev + i * g
    h_t = o * T.tanh(c_t)
    return h_t, c_t


def _init(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class RecurrentModel:
    def __init__(self, config: RecurrentConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        n = config.hidden_dim
        gates = 4 * n if config.kind == "lstm" else n
        self.layers = []
        d = config.input_dim
        for _ in range(config.n_layers):
            self.layers.append(
                {
                    "wx": _init(rng, (d, gates), d),
                    "wh": _init(rng, (n, gates), n),
                    "b": Tensor(np.zeros(gates), requires_grad=True),
                }
            )
            d = n
        self.head_w = _init(rng, (n, 2), n)
        self.head_b = Tensor(np.zeros(2), requires_grad=True)

    @property
    def kind(self):
        return self.config.kind

    def params(self):
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"l{i}.wx", layer["wx"]), (f"l{i}.wh", layer["wh"]), (f"l{i}.b", layer["b"])]
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def count_params(self):
        return sum(p.values.size for _, p in self.params())

    def _drop(self, x, train, rng):
        return T.dropout(x, self.config.dropout_p, rng=rng, train=train)

    def forward_next(self, observed, train=False, rng=None):
        """Unroll the stack over (B, T, input_dim); returns normalized (B, 2)."""
        obs = np.asarray(observed, dtype=np.float64)
        if obs.ndim == 2:
            obs = obs[None]
        if obs.shape[1] == 0:
            raise T.DomainError("empty observed sequence")
        if self.config.input_mode == "position":
            obs = obs / self.config.pos_scale
        batch, steps = obs.shape[0], obs.shape[1]
        n = self.config.hidden_dim
        xs = [Tensor(obs[:, t]) for t in range(steps)]
        for layer in self.layers:
            params = (layer["wx"], layer["wh"], layer["b"])
            h = Tensor(np.zeros((batch, n)))
            if self.config.kind == "lstm":
                c = Tensor(np.zeros((batch, n)))
                outs = []
                for x_t in xs:
                    h, c = lstm_step(x_t, (h, c), params)
                    outs.append(h)
            else:
                outs = []
                for x_t in xs:
                    h = rnn_step(x_t, h, params)
                    outs.append(h)
            xs = [self._drop(o, train, rng) for o in outs]
        return T.matmul(xs[-1], self.head_w) + self.head_b

    def predict_next(self, observed):
        """Predict the next 2-D position (meters) for one window or a batch."""
        obs = np.asarray(observed, dtype=np.float64)
        single = obs.ndim == 2
        with T.no_grad():
            pred = self.forward_next(obs).values * self.config.pos_scale
        if not np.isfinite(pred).all():
            raise T.DomainError("predict_next produced non-finite output")
        return pred[0] if single else pred

    def loss_batch(self, observed, targets, train=True, rng=None):
        """Mean squared Euclidean error (normalized units) over the batch."""
        pred = self.forward_next(observed, train=train, rng=rng)
        t = np.asarray(targets, dtype=np.float64) / self.config.pos_scale
        diff = pred - Tensor(t.reshape(pred.shape))
        return T.tmean(T.tsum(diff * diff, axis=-1))

    def save(self, path):
        save_checkpoint(path, [(n, p.values) for n, p in self.params()], self.config.digest())

    @classmethod
    def load(cls, path, config: RecurrentConfig):
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
