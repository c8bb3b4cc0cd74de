"""Transformer-encoder classifier with layer-indexed parameter groups.

Group 0 holds the token and position embeddings, group g in 1..n_layers holds
encoder layer g, and group n_layers+1 holds the classifier head (final layer
norm plus a linear map on the [CLS] state). The split ``M = U o F`` is
expressed by running groups 0..l in :func:`forward_features` and the rest in
:func:`forward_head`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, UsageError
from .tensor import Rng, Tensor

MASK_BIAS = -1e9


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 300
    d_ff: int = 512
    n_heads: int = 5
    vocab_size: int = 1000
    max_len: int = 256
    n_classes: int = 2
    dropout_f: float = 0.5
    dropout_u: float = 0.1
    ln_eps: float = 1e-5

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "d_model", "d_ff", "n_heads", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        for name in ("dropout_f", "dropout_u"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def head_group(self) -> int:
        return self.n_layers + 1


class ParameterStore:
    """Ordered name -> tensor map where every name belongs to a layer group."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._tensors: dict[str, Tensor] = {}
        self._groups: dict[str, int] = {}

    def add(self, name: str, group: int, data) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter {name}")
        t = Tensor(data, requires_grad=True, name=name)
        self._tensors[name] = t
        self._groups[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def group_of(self, name: str) -> int:
        return self._groups[name]

    def names_in_group(self, group: int) -> list[str]:
        return [n for n in self._tensors if self._groups[n] == group]

    @property
    def groups(self) -> list[int]:
        return sorted(set(self._groups.values()))

    def set_trainable(self, group: int, flag: bool) -> None:
        for n in self.names_in_group(group):
            t = self._tensors[n]
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def layer(self, g: int) -> dict[str, Tensor]:
        prefix = f"layer{g}."
        return {n[len(prefix):]: t for n, t in self._tensors.items() if n.startswith(prefix)}

    def copy(self) -> "ParameterStore":
        new = ParameterStore(self.config)
        for n, t in self._tensors.items():
            c = new.add(n, self._groups[n], t.data.copy())
            c.requires_grad = t.requires_grad
        return new


@dataclass
class TokenBatch:
    token_ids: np.ndarray       # int64 [b, L], column 0 is [CLS]
    attention_mask: np.ndarray  # bool  [b, L]

    def validate(self, config: ModelConfig) -> None:
        ids = self.token_ids
        if ids.ndim != 2 or ids.shape != self.attention_mask.shape:
            raise ShapeError(f"token_ids {ids.shape} vs attention_mask {self.attention_mask.shape}")
        if ids.shape[1] > config.max_len:
            raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_len {config.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
            raise ValueError("token id outside vocabulary")
        if not self.attention_mask[:, 0].all():
            raise ValueError("position 0 ([CLS]) must be unmasked in every row")


def init_model(config: ModelConfig, rng: Rng) -> ParameterStore:
    config.validate()
    d, ff = config.d_model, config.d_ff
    store = ParameterStore(config)
    gen = rng.gen

    def normal(shape, std):
        return gen.normal(0.0, std, size=shape)

    store.add("embed.tok", 0, normal((config.vocab_size, d), 1.0))
    store.add("embed.pos", 0, normal((config.max_len, d), 0.1))
    out_std = 1.0 / np.sqrt(2.0 * config.n_layers)
    for g in range(1, config.n_layers + 1):
        p = f"layer{g}."
        store.add(p + "ln1.gamma", g, np.ones(d))
        store.add(p + "ln1.beta", g, np.zeros(d))
        for w in ("wq", "wk", "wv"):
            store.add(p + f"attn.{w}", g, normal((d, d), 1.0 / np.sqrt(d)))
            # no key bias: it shifts every logit of a query equally, so softmax
            # ignores it and its gradient is pure rounding noise that Adam amplifies
            if w != "wk":
                store.add(p + f"attn.b{w[1]}", g, np.zeros(d))
        store.add(p + "attn.wo", g, normal((d, d), out_std / np.sqrt(d)))
        store.add(p + "attn.bo", g, np.zeros(d))
        store.add(p + "ln2.gamma", g, np.ones(d))
        store.add(p + "ln2.beta", g, np.zeros(d))
        store.add(p + "ffn.w1", g, normal((d, ff), 1.0 / np.sqrt(d)))
        store.add(p + "ffn.b1", g, np.zeros(ff))
        store.add(p + "ffn.w2", g, normal((ff, d), out_std / np.sqrt(ff)))
        store.add(p + "ffn.b2", g, np.zeros(d))
    h = config.head_group
    store.add("head.ln.gamma", h, np.ones(d))
    store.add("head.ln.beta", h, np.zeros(d))
    store.add("head.out.w", h, normal((d, config.n_classes), 1.0 / np.sqrt(d)))
    store.add("head.out.b", h, np.zeros(config.n_classes))
    return store


def attention_mask_bias(mask: np.ndarray) -> Tensor:
    """Additive bias [b, 1, 1, L] that removes padded keys from every softmax."""
    bias = np.where(mask, 0.0, MASK_BIAS)[:, None, None, :]
    return Tensor(bias)


def self_attention(x: Tensor, p: dict, bias: Tensor, n_heads: int):
    """Multi-head self-attention; returns (output, attention probabilities)."""
    b, L, d = x.shape
    dh = d // n_heads

    def heads(t):
        return t.reshape(b, L, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(x @ p["attn.wq"] + p["attn.bq"])
    k = heads(x @ p["attn.wk"])
    v = heads(x @ p["attn.wv"] + p["attn.bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + bias
    probs = T.softmax(scores, axis=-1)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, L, d)
    return ctx @ p["attn.wo"] + p["attn.bo"], probs


def encoder_layer(x: Tensor, p: dict, bias: Tensor, config: ModelConfig,
                  rate: float, rng: Rng, training: bool) -> Tensor:
    eps = config.ln_eps
    a, _ = self_attention(T.layer_norm(x, p["ln1.gamma"], p["ln1.beta"], eps), p, bias, config.n_heads)
    x = x + T.dropout(a, rate, rng, training)
    h = T.gelu(T.layer_norm(x, p["ln2.gamma"], p["ln2.beta"], eps) @ p["ffn.w1"] + p["ffn.b1"])
    f = h @ p["ffn.w2"] + p["ffn.b2"]
    return x + T.dropout(f, rate, rng, training)


def embed(params: ParameterStore, batch: TokenBatch, rate: float, rng: Rng, training: bool) -> Tensor:
    batch.validate(params.config)
    L = batch.token_ids.shape[1]
    x = T.embedding(params["embed.tok"], batch.token_ids) + params["embed.pos"][:L]
    return T.dropout(x, rate, rng, training)


def _check_level(config: ModelConfig, level: int) -> None:
    if not 0 <= level <= config.n_layers:
        raise UsageError(f"split level {level} outside [0, {config.n_layers}]")


def forward_features(params: ParameterStore, batch: TokenBatch, through_group: int,
                     rng: Rng, training: bool) -> Tensor:
    """F(x): embeddings plus encoder layers 1..through_group at the F dropout rate."""
    cfg = params.config
    _check_level(cfg, through_group)
    rate = cfg.dropout_f
    x = embed(params, batch, rate, rng, training)
    bias = attention_mask_bias(batch.attention_mask)
    for g in range(1, through_group + 1):
        x = encoder_layer(x, params.layer(g), bias, cfg, rate, rng, training)
    x.through_group = through_group
    x.mask = batch.attention_mask
    return x


def classify(params: ParameterStore, x: Tensor, rate: float, rng: Rng, training: bool) -> Tensor:
    cls = T.layer_norm(x[:, 0, :], params["head.ln.gamma"], params["head.ln.beta"], params.config.ln_eps)
    cls = T.dropout(cls, rate, rng, training)
    return cls @ params["head.out.w"] + params["head.out.b"]


def forward_head(params: ParameterStore, hidden: Tensor, from_group: int,
                 rng: Rng, training: bool) -> Tensor:
    """U(h): encoder layers from_group+1..n and the [CLS] classifier at the U dropout rate."""
    cfg = params.config
    _check_level(cfg, from_group)
    produced = getattr(hidden, "through_group", None)
    if produced != from_group:
        raise UsageError(f"hidden states come from group {produced}, head expects {from_group}")
    rate = cfg.dropout_u
    bias = attention_mask_bias(hidden.mask)
    x = hidden
    for g in range(from_group + 1, cfg.n_layers + 1):
        x = encoder_layer(x, params.layer(g), bias, cfg, rate, rng, training)
    return classify(params, x, rate, rng, training)


def forward(params: ParameterStore, batch: TokenBatch, rng: Rng | None = None,
            training: bool = False, split_level: int | None = None) -> Tensor:
    """Monolithic M(x). With ``split_level`` set, layers up to it use the F dropout rate."""
    cfg = params.config
    rng = rng or Rng(0)
    level = -1 if split_level is None else split_level

    def rate(g):
        return cfg.dropout_f if g <= level else cfg.dropout_u

    x = embed(params, batch, rate(0), rng, training)
    bias = attention_mask_bias(batch.attention_mask)
    for g in range(1, cfg.n_layers + 1):
        x = encoder_layer(x, params.layer(g), bias, cfg, rate(g), rng, training)
    return classify(params, x, cfg.dropout_u, rng, training)


def predict(params: ParameterStore, batch: TokenBatch) -> np.ndarray:
    with T.no_grad():
        return forward(params, batch).data.argmax(axis=1)
