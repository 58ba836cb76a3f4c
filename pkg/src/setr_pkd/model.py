"""SETR: a pre-norm transformer encoder over motion tokens plus a class token."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from .autodiff import Value
from .features import FEATURE_DIM
from .formats import read_checkpoint, write_checkpoint


@dataclass
class SetrConfig:
    n_tokens: int = 64
    dim: int = 256
    heads: int = 8
    layers: int = 3
    mlp_hidden: int | None = None
    dropout: float = 0.1
    classes: int = 2
    feature_dim: int = FEATURE_DIM
    # True drops the 1/sqrt(head_dim) factor on attention logits
    paper_literal_attention: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.mlp_hidden is None:
            self.mlp_hidden = 4 * self.dim
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ValueError("need at least one encoder layer")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class SetrOutput:
    logits: Value
    class_token: Value
    patch_tokens: Value
    attention: list[np.ndarray] = field(default_factory=list)


def init_params(config: SetrConfig, rng: np.random.Generator) -> dict[str, Value]:
    """Uniform(+-1/sqrt(fan_in)) projections, zero biases, unit/zero norms."""
    d, h = config.dim, config.mlp_hidden

    def uniform(fan_in: int, shape) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    raw: dict[str, np.ndarray] = {
        "embed.weight": uniform(config.feature_dim, (config.feature_dim, d)),
        "embed.bias": np.zeros(d),
        "class_embed": rng.normal(0.0, 0.02, size=d),
        "pos_embed": rng.normal(0.0, 0.02, size=(config.n_tokens + 1, d)),
    }
    for layer in range(config.layers):
        p = f"layers.{layer}."
        raw[p + "norm1.gamma"] = np.ones(d)
        raw[p + "norm1.beta"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            raw[p + "attn." + name] = uniform(d, (d, d))
        raw[p + "attn.bo"] = np.zeros(d)
        raw[p + "norm2.gamma"] = np.ones(d)
        raw[p + "norm2.beta"] = np.zeros(d)
        raw[p + "mlp.w1"] = uniform(d, (d, h))
        raw[p + "mlp.b1"] = np.zeros(h)
        raw[p + "mlp.w2"] = uniform(h, (h, d))
        raw[p + "mlp.b2"] = np.zeros(d)
    raw["head.weight"] = uniform(d, (d, config.classes))
    raw["head.bias"] = np.zeros(config.classes)
    return {name: Value(arr, requires_grad=True, name=name) for name, arr in raw.items()}


def tokenize(features, params: dict[str, Value], config: SetrConfig) -> Value:
    """Embed ``(B, N, F)`` feature rows and append the class token at index N.

    Returns ``(B, N + 1, D)`` with the positional encoding already added.
    """
    feats = features if isinstance(features, Value) else Value(features)
    if feats.ndim == 2:
        feats = ad.reshape(feats, (1,) + feats.shape)
    b, n, _ = feats.shape
    if n != config.n_tokens:
        raise ValueError(f"expected {config.n_tokens} feature rows, got {n}")
    motion = ad.add(ad.matmul(feats, params["embed.weight"]), params["embed.bias"])
    cls = ad.broadcast_to(ad.reshape(params["class_embed"], (1, 1, config.dim)), (b, 1, config.dim))
    return ad.add(ad.concat([motion, cls], axis=1), params["pos_embed"])


def _split_heads(x: Value, heads: int) -> Value:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Value) -> Value:
    b, h, t, hd = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * hd))


def mhsa(
    x: Value,
    params: dict[str, Value],
    prefix: str,
    config: SetrConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Value, np.ndarray]:
    """Multi-head self-attention on already-normalised tokens ``(B, T, D)``.

    Returns the projected output and the attention probabilities
    ``(B, heads, T, T)`` (before dropout).
    """
    q = _split_heads(ad.matmul(x, params[prefix + "wq"]), config.heads)
    k = _split_heads(ad.matmul(x, params[prefix + "wk"]), config.heads)
    v = _split_heads(ad.matmul(x, params[prefix + "wv"]), config.heads)
    scores = ad.matmul(q, ad.swap_last(k))
    if not config.paper_literal_attention:
        scores = ad.scale(scores, 1.0 / np.sqrt(config.head_dim))
    attn = ad.softmax(scores)
    weights = ad.dropout(attn, config.dropout, rng, training)
    out = _merge_heads(ad.matmul(weights, v))
    out = ad.add(ad.matmul(out, params[prefix + "wo"]), params[prefix + "bo"])
    return out, attn.data


def encoder_layer(
    x: Value,
    params: dict[str, Value],
    layer: int,
    config: SetrConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Value, np.ndarray]:
    p = f"layers.{layer}."
    normed = ad.layer_norm(x, params[p + "norm1.gamma"], params[p + "norm1.beta"], config.ln_eps)
    attended, attn = mhsa(normed, params, p + "attn.", config, training, rng)
    mid = ad.add(attended, x)
    h = ad.layer_norm(mid, params[p + "norm2.gamma"], params[p + "norm2.beta"], config.ln_eps)
    h = ad.gelu(ad.add(ad.matmul(h, params[p + "mlp.w1"]), params[p + "mlp.b1"]))
    h = ad.add(ad.matmul(h, params[p + "mlp.w2"]), params[p + "mlp.b2"])
    h = ad.dropout(h, config.dropout, rng, training)
    return ad.add(h, mid), attn


def setr_forward(
    features,
    params: dict[str, Value],
    config: SetrConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> SetrOutput:
    x = tokenize(features, params, config)
    maps = []
    for layer in range(config.layers):
        x, attn = encoder_layer(x, params, layer, config, training, rng)
        maps.append(attn)
    n = config.n_tokens
    patch = ad.getitem(x, (slice(None), slice(0, n), slice(None)))
    cls = ad.getitem(x, (slice(None), n, slice(None)))
    logits = ad.add(ad.matmul(cls, params["head.weight"]), params["head.bias"])
    return SetrOutput(logits, cls, patch, maps)


def predict(logits) -> np.ndarray:
    """Argmax over the last axis; ties go to the lower class index."""
    data = logits.data if isinstance(logits, Value) else np.asarray(logits)
    return np.argmax(data, axis=-1)


class SetrModel:
    """Config plus named parameters, with checkpoint + manifest persistence."""

    def __init__(self, config: SetrConfig, params: dict[str, Value]) -> None:
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: SetrConfig, rng: np.random.Generator) -> "SetrModel":
        return cls(config, init_params(config, rng))

    def __call__(self, features, training: bool = False, rng: np.random.Generator | None = None) -> SetrOutput:
        return setr_forward(features, self.params, self.config, training, rng)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def copy(self) -> "SetrModel":
        return SetrModel(
            SetrConfig(**asdict(self.config)),
            {n: Value(p.data.copy(), requires_grad=True, name=n) for n, p in self.params.items()},
        )

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        path = Path(path)
        write_checkpoint(path, self.state_dict())
        manifest = {"config": asdict(self.config)}
        if extra:
            manifest.update(extra)
        path.with_suffix(".yaml").write_text(yaml.safe_dump(manifest, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "SetrModel":
        path = Path(path)
        manifest = yaml.safe_load(path.with_suffix(".yaml").read_text())
        config = SetrConfig(**manifest["config"])
        state = read_checkpoint(path)
        model = cls(config, init_params(config, np.random.default_rng(0)))
        model.load_state_dict(state)
        return model
