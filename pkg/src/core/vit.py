"""Vision Transformer encoder for attribute regression.

image -> patches -> [class token; patches·E] + E_pos -> L pre-norm blocks
-> Norm(class-token row).

Every function accepts either a single item (image H×W×C, sequence T×D) or
a batch with a leading axis; a training mini-batch is one taped pass.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ModelConfig
from .exceptions import DimensionError
from .tensor import (
    LAYER_NORM_EPS,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    gelu,
    getitem,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02
_TRUNCATION = 2.0  # in standard deviations

_LAYER_FIELDS = (
    ("norm1.gain", "ones"),
    ("norm1.bias", "zeros"),
    ("attn.query.weight", "normal"),
    ("attn.query.bias", "zeros"),
    ("attn.key.weight", "normal"),
    ("attn.key.bias", "zeros"),
    ("attn.value.weight", "normal"),
    ("attn.value.bias", "zeros"),
    ("attn.out.weight", "normal"),
    ("attn.out.bias", "zeros"),
    ("norm2.gain", "ones"),
    ("norm2.bias", "zeros"),
    ("mlp.in.weight", "normal"),
    ("mlp.in.bias", "zeros"),
    ("mlp.out.weight", "normal"),
    ("mlp.out.bias", "zeros"),
)


def _parameter_layout(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...], str]]:
    """(name, shape, init) for every learnable buffer, in canonical order."""
    d, mlp = cfg.hidden_dim, cfg.mlp_width
    layer_shapes = {
        "norm1.gain": (d,), "norm1.bias": (d,),
        "attn.query.weight": (d, d), "attn.query.bias": (d,),
        "attn.key.weight": (d, d), "attn.key.bias": (d,),
        "attn.value.weight": (d, d), "attn.value.bias": (d,),
        "attn.out.weight": (d, d), "attn.out.bias": (d,),
        "norm2.gain": (d,), "norm2.bias": (d,),
        "mlp.in.weight": (d, mlp), "mlp.in.bias": (mlp,),
        "mlp.out.weight": (mlp, d), "mlp.out.bias": (d,),
    }
    layout = [
        ("patch_embed.weight", (cfg.patch_dim, d), "normal"),
        ("patch_embed.bias", (d,), "zeros"),
        ("class_token", (d,), "normal"),
        ("pos_embed", (cfg.seq_len, d), "normal"),
    ]
    for i in range(cfg.num_layers):
        for suffix, init in _LAYER_FIELDS:
            layout.append((f"layers.{i}.{suffix}", layer_shapes[suffix], init))
    layout += [
        ("final_norm.gain", (d,), "ones"),
        ("final_norm.bias", (d,), "zeros"),
        ("head.weight", (d, cfg.num_attributes), "normal"),
        ("head.bias", (cfg.num_attributes,), "zeros"),
    ]
    return layout


def weight_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Shape of every parameter buffer, without allocating any."""
    return {name: shape for name, shape, _ in _parameter_layout(cfg)}


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for shape in weight_shapes(cfg).values())


def trace_shape(cfg: ModelConfig) -> Tuple[int, int, int, int]:
    """Shape of EncoderTrace.attention for one image."""
    return cfg.num_layers, cfg.num_heads, cfg.seq_len, cfg.seq_len


@dataclass
class LayerWeights:
    """References to one encoder block's parameters."""

    norm1_gain: Tensor
    norm1_bias: Tensor
    query_weight: Tensor
    query_bias: Tensor
    key_weight: Tensor
    key_bias: Tensor
    value_weight: Tensor
    value_bias: Tensor
    out_weight: Tensor
    out_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    mlp_in_weight: Tensor
    mlp_in_bias: Tensor
    mlp_out_weight: Tensor
    mlp_out_bias: Tensor


class VitWeights:
    """All learnable parameters of the encoder plus the attribute head."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        expected = weight_shapes(config)
        missing = [name for name in expected if name not in params]
        extra = [name for name in params if name not in expected]
        if missing or extra:
            raise DimensionError(
                "VitWeights", reason=f"missing {missing[:5]}, unexpected {extra[:5]}"
            )
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"VitWeights[{name}]", params[name].shape, shape)
        self.config = config
        self._params = {name: params[name] for name in expected}

    @property
    def patch_weight(self) -> Tensor:
        return self._params["patch_embed.weight"]

    @property
    def patch_bias(self) -> Tensor:
        return self._params["patch_embed.bias"]

    @property
    def class_token(self) -> Tensor:
        return self._params["class_token"]

    @property
    def pos_embed(self) -> Tensor:
        return self._params["pos_embed"]

    @property
    def final_gain(self) -> Tensor:
        return self._params["final_norm.gain"]

    @property
    def final_bias(self) -> Tensor:
        return self._params["final_norm.bias"]

    @property
    def head_weight(self) -> Tensor:
        return self._params["head.weight"]

    @property
    def head_bias(self) -> Tensor:
        return self._params["head.bias"]

    def layer(self, index: int) -> LayerWeights:
        prefix = f"layers.{index}."
        return LayerWeights(*(self._params[prefix + suffix] for suffix, _ in _LAYER_FIELDS))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def parameters(self) -> List[Tensor]:
        return list(self._params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self._params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    @classmethod
    def from_state(cls, config: ModelConfig, state: Dict[str, np.ndarray]) -> "VitWeights":
        params = {
            name: Tensor(array, requires_grad=True, name=name) for name, array in state.items()
        }
        return cls(config, params)

    def copy(self) -> "VitWeights":
        return VitWeights.from_state(self.config, self.state_dict())


def _truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    values = rng.standard_normal(shape)
    outside = np.abs(values) > _TRUNCATION
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > _TRUNCATION
    return values * std


def init_weights(cfg: ModelConfig, seed: Union[int, np.random.Generator] = 0) -> VitWeights:
    """Truncated-normal (std 0.02) projections and embeddings, zero biases, unit norm gains."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape, init in _parameter_layout(cfg):
        if init == "normal":
            values = _truncated_normal(rng, shape, INIT_STD)
        elif init == "ones":
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        params[name] = Tensor(values, requires_grad=True, name=name)
    weights = VitWeights(cfg, params)
    logger.debug(f"Initialized {weights.parameter_count()} parameters")
    return weights


@dataclass
class EncoderTrace:
    """Attention probabilities of every layer and the final token states for one image."""

    attention: np.ndarray  # (L, heads, T, T)
    tokens: np.ndarray  # (T, D)
    grid_shape: Tuple[int, int]

    @property
    def num_layers(self) -> int:
        return self.attention.shape[0]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.attention.shape


# === Forward pass ===


def _batched(x: Tensor, rank: int) -> Tuple[Tensor, bool]:
    """Add a leading batch axis to single items."""
    if x.ndim == rank:
        return reshape(x, (1,) + x.shape), True
    return x, False


def patchify(image, patch_size: int) -> Tensor:
    """H×W×C -> N×(P²·C); row i is patch (i // (W/P), i % (W/P)), pixels then channels."""
    image = as_tensor(image)
    if image.ndim not in (3, 4):
        raise DimensionError("patchify", image.shape, reason="expected H×W×C or B×H×W×C")
    x, single = _batched(image, 3)
    batch, height, width, channels = x.shape
    if height % patch_size or width % patch_size:
        raise DimensionError(
            "patchify", image.shape, reason=f"extents not divisible by patch size {patch_size}"
        )
    rows, cols = height // patch_size, width // patch_size
    x = reshape(x, (batch, rows, patch_size, cols, patch_size, channels))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    x = reshape(x, (batch, rows * cols, patch_size * patch_size * channels))
    return x[0] if single else x


def unpatchify(patches, patch_size: int, image_shape: Tuple[int, int, int]) -> np.ndarray:
    """Inverse of patchify for a single image."""
    height, width, channels = image_shape
    rows, cols = height // patch_size, width // patch_size
    data = np.asarray(patches.data if isinstance(patches, Tensor) else patches)
    grid = data.reshape(rows, cols, patch_size, patch_size, channels)
    return grid.transpose(0, 2, 1, 3, 4).reshape(height, width, channels)


def embed_sequence(patches, w: VitWeights) -> Tensor:
    """z0 = [x_class; patches·E + b] + E_pos, class token at index 0."""
    cfg = w.config
    patches = as_tensor(patches)
    x, single = _batched(patches, 2)
    if x.ndim != 3 or x.shape[1:] != (cfg.num_patches, cfg.patch_dim):
        raise DimensionError("embed_sequence", patches.shape, (cfg.num_patches, cfg.patch_dim))
    batch = x.shape[0]
    tokens = add(matmul(x, w.patch_weight), w.patch_bias)
    cls = broadcast_to(reshape(w.class_token, (1, 1, cfg.hidden_dim)), (batch, 1, cfg.hidden_dim))
    z = add(concat([cls, tokens], axis=1), w.pos_embed)
    return z[0] if single else z


def multi_head_attention(x, layer: LayerWeights, num_heads: int) -> Tuple[Tensor, Tensor]:
    """Scaled dot-product attention per head, heads concatenated then projected by W^O.

    Returns the block output and the attention probabilities (heads×T×T,
    or B×heads×T×T for a batch).
    """
    x = as_tensor(x)
    x, single = _batched(x, 2)
    batch, seq_len, width = x.shape
    if width % num_heads:
        raise DimensionError("multi_head_attention", x.shape, reason=f"width not divisible by {num_heads} heads")
    head_dim = width // num_heads

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, seq_len, num_heads, head_dim)), (0, 2, 1, 3))

    query = split_heads(add(matmul(x, layer.query_weight), layer.query_bias))
    key = split_heads(add(matmul(x, layer.key_weight), layer.key_bias))
    value = split_heads(add(matmul(x, layer.value_weight), layer.value_bias))

    scores = scale(matmul(query, transpose(key, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    attn = softmax_rows(scores)
    context = matmul(attn, value)
    merged = reshape(transpose(context, (0, 2, 1, 3)), (batch, seq_len, width))
    out = add(matmul(merged, layer.out_weight), layer.out_bias)
    if single:
        return out[0], attn[0]
    return out, attn


def mlp_block(x, layer: LayerWeights) -> Tensor:
    hidden = gelu(add(matmul(x, layer.mlp_in_weight), layer.mlp_in_bias))
    return add(matmul(hidden, layer.mlp_out_weight), layer.mlp_out_bias)


def encoder_block(
    x,
    layer: LayerWeights,
    num_heads: int,
    eps: float = LAYER_NORM_EPS,
    attention_sink: Optional[list] = None,
) -> Tensor:
    """z' = MHA(Norm(x)) + x; out = MLP(Norm(z')) + z'.

    Attention probabilities are appended to attention_sink when given.
    """
    x = as_tensor(x)
    attended, attn = multi_head_attention(
        layer_norm(x, layer.norm1_gain, layer.norm1_bias, eps), layer, num_heads
    )
    if attention_sink is not None:
        attention_sink.append(attn)
    mid = add(attended, x)
    return add(mlp_block(layer_norm(mid, layer.norm2_gain, layer.norm2_bias, eps), layer), mid)


def _check_images(images: Tensor, cfg: ModelConfig) -> None:
    if images.shape[-3:] != cfg.image_shape:
        raise DimensionError("encode", images.shape, cfg.image_shape, reason="image does not match config")


def encode_batch(images, w: VitWeights) -> Tuple[Tensor, List[EncoderTrace]]:
    """B×H×W×C images -> (B×D representations, one trace per image)."""
    cfg = w.config
    images = as_tensor(images)
    if images.ndim != 4:
        raise DimensionError("encode_batch", images.shape, reason="expected B×H×W×C")
    _check_images(images, cfg)

    z = embed_sequence(patchify(images, cfg.patch_size), w)
    attentions: List[Tensor] = []
    for i in range(cfg.num_layers):
        z = encoder_block(z, w.layer(i), cfg.num_heads, attention_sink=attentions)
    representation = layer_norm(z[:, 0, :], w.final_gain, w.final_bias)

    batch = images.shape[0]
    if attentions:
        stacked = np.stack([a.data for a in attentions], axis=1)
    else:
        stacked = np.zeros((batch, 0, cfg.num_heads, cfg.seq_len, cfg.seq_len), dtype=z.dtype)
    traces = [
        EncoderTrace(attention=stacked[b], tokens=z.data[b].copy(), grid_shape=cfg.grid_shape)
        for b in range(batch)
    ]
    return representation, traces


def encode(image, w: VitWeights) -> Tuple[Tensor, EncoderTrace]:
    """H×W×C image -> (D representation, trace)."""
    image = as_tensor(image)
    if image.ndim != 3:
        raise DimensionError("encode", image.shape, reason="expected H×W×C")
    representation, traces = encode_batch(reshape(image, (1,) + image.shape), w)
    return representation[0], traces[0]
