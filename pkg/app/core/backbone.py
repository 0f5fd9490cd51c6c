"""
Frozen toy vision transformer standing in for a pretrained ViT encoder.

Pre-norm blocks (LN -> MHSA -> residual, LN -> FFN -> residual), a class token
at position 0 and a final layer norm; the class-token output after the final
norm is the feature h used by the prototype classifier and projection head.
"""
import logging
from dataclasses import dataclass, field, fields
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple, Union

import numpy as np

from app.core import numkernel as nk
from app.core.numkernel import Tensor
from app.models.config import BackboneConfig
from app.validators.errors import ConfigValidationError, GcdValidationError, ShapeMismatchError

if TYPE_CHECKING:
    from app.core.mea import MultiExpertAdapter

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-6


@dataclass
class BlockParams:
    # One transformer block; frozen unless the SimGCD last-block baseline unfreezes it
    ln1_gain: Tensor
    ln1_bias: Tensor
    qkv_weight: Tensor
    qkv_bias: Tensor
    proj_weight: Tensor
    proj_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    def named(self) -> Dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class EmbeddingParams:
    patch_weight: Tensor
    patch_bias: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    norm_gain: Tensor
    norm_bias: Tensor

    def named(self) -> Dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class BackboneParams:
    embedding: EmbeddingParams
    blocks: List[BlockParams]

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {f"backbone.embed.{k}": v for k, v in self.embedding.named().items()}
        for index, block in enumerate(self.blocks):
            named.update({f"backbone.block{index}.{k}": v for k, v in block.named().items()})
        return named


@dataclass
class ForwardTrace:
    # Per-block pre-FFN tokens, class-token feature h and route weights of adapted blocks
    pre_ffn_tokens: List[Tensor]
    features: Tensor
    route_weights: Dict[int, Tensor] = field(default_factory=dict)
    attention: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.pre_ffn_tokens)


def init_backbone(cfg: BackboneConfig) -> BackboneParams:
    """Deterministic scaled-Gaussian initialisation; all parameters frozen."""
    if cfg.num_blocks < 1:
        raise ConfigValidationError("backbone.num_blocks must be >= 1")
    if cfg.embed_dim % cfg.num_heads != 0:
        raise ConfigValidationError(
            f"embed_dim ({cfg.embed_dim}) must be divisible by num_heads ({cfg.num_heads})"
        )

    rng = np.random.default_rng(cfg.seed)
    d, hidden, std = cfg.embed_dim, cfg.mlp_hidden, cfg.init_std

    embedding = EmbeddingParams(
        patch_weight=nk.gaussian(rng, (d, cfg.input_dim), std),
        patch_bias=nk.zeros((d,)),
        cls_token=nk.gaussian(rng, (1, 1, d), std),
        pos_embed=nk.gaussian(rng, (cfg.token_count + 1, d), std),
        norm_gain=nk.ones((d,)),
        norm_bias=nk.zeros((d,)),
    )

    blocks = []
    for index in range(cfg.num_blocks):
        trainable = cfg.unfreeze_last_block and index == cfg.num_blocks - 1
        blocks.append(BlockParams(
            ln1_gain=nk.ones((d,), requires_grad=trainable),
            ln1_bias=nk.zeros((d,), requires_grad=trainable),
            qkv_weight=nk.gaussian(rng, (3 * d, d), std, requires_grad=trainable),
            qkv_bias=nk.zeros((3 * d,), requires_grad=trainable),
            proj_weight=nk.gaussian(rng, (d, d), std, requires_grad=trainable),
            proj_bias=nk.zeros((d,), requires_grad=trainable),
            ln2_gain=nk.ones((d,), requires_grad=trainable),
            ln2_bias=nk.zeros((d,), requires_grad=trainable),
            fc1_weight=nk.gaussian(rng, (hidden, d), std, requires_grad=trainable),
            fc1_bias=nk.zeros((hidden,), requires_grad=trainable),
            fc2_weight=nk.gaussian(rng, (d, hidden), std, requires_grad=trainable),
            fc2_bias=nk.zeros((d,), requires_grad=trainable),
        ))
    return BackboneParams(embedding=embedding, blocks=blocks)


def self_attention(x: Tensor, block: BlockParams, num_heads: int) -> Tuple[Tensor, np.ndarray]:
    """Multi-head self-attention over N x V x d tokens; returns output and attention probs."""
    n, v, d = x.shape
    head_dim = d // num_heads
    qkv = nk.linear(x, block.qkv_weight, block.qkv_bias)
    qkv = nk.transpose(nk.reshape(qkv, (n, v, 3, num_heads, head_dim)), (2, 0, 3, 1, 4))
    q, k, values = qkv[0], qkv[1], qkv[2]

    scores = nk.mul(nk.matmul(q, nk.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    probs = nk.softmax(scores, temperature=1.0)
    mixed = nk.transpose(nk.matmul(probs, values), (0, 2, 1, 3))
    out = nk.linear(nk.reshape(mixed, (n, v, d)), block.proj_weight, block.proj_bias)
    return out, probs.data


def pre_ffn_norm(x_tilde: Tensor, block: BlockParams) -> Tensor:
    return nk.layer_norm(x_tilde, block.ln2_gain, block.ln2_bias, eps=LAYER_NORM_EPS)


def feed_forward(normed: Tensor, block: BlockParams) -> Tensor:
    hidden = nk.relu(nk.linear(normed, block.fc1_weight, block.fc1_bias))
    return nk.linear(hidden, block.fc2_weight, block.fc2_bias)


def embed(x: Tensor, params: BackboneParams) -> Tensor:
    """Project input tokens to d, prepend the class token and add positions."""
    emb = params.embedding
    tokens = nk.linear(x, emb.patch_weight, emb.patch_bias)
    cls_rows = nk.add(nk.zeros((x.shape[0], 1, emb.cls_token.shape[-1])), emb.cls_token)
    return nk.add(nk.concat([cls_rows, tokens], axis=1), emb.pos_embed)


def encode(x: Union[np.ndarray, Tensor], params: BackboneParams, cfg: BackboneConfig,
           adapters: Optional["MultiExpertAdapter"] = None, record_attention: bool = False) -> ForwardTrace:
    """Pre-norm transformer forward; adapted blocks route their FFN through the MEA."""
    x = nk.as_tensor(x)
    if x.ndim != 3 or x.shape[1:] != (cfg.token_count, cfg.input_dim):
        raise ShapeMismatchError(
            f"encode expects N x {cfg.token_count} x {cfg.input_dim} tokens, got {x.shape}"
        )
    if adapters is not None and adapters.cfg.adapted_blocks > len(params.blocks):
        raise GcdValidationError(
            f"adapter placement P={adapters.cfg.adapted_blocks} exceeds block count L={len(params.blocks)}"
        )

    tokens = embed(x, params)
    pre_ffn: List[Tensor] = []
    route_weights: Dict[int, Tensor] = {}
    attention = None

    for index, block in enumerate(params.blocks):
        normed = nk.layer_norm(tokens, block.ln1_gain, block.ln1_bias, eps=LAYER_NORM_EPS)
        attended, probs = self_attention(normed, block, cfg.num_heads)
        x_tilde = nk.add(tokens, attended)
        pre_ffn.append(x_tilde)

        if adapters is not None and index in adapters:
            tokens, route_weights[index] = adapters.forward_block(index, x_tilde, block)
        else:
            tokens = nk.add(x_tilde, feed_forward(pre_ffn_norm(x_tilde, block), block))

        if record_attention and index == len(params.blocks) - 1:
            attention = probs[:, :, 0, :].copy()

    emb = params.embedding
    final = nk.layer_norm(tokens, emb.norm_gain, emb.norm_bias, eps=LAYER_NORM_EPS)
    features = final[:, 0, :]
    return ForwardTrace(pre_ffn_tokens=pre_ffn, features=features,
                        route_weights=route_weights, attention=attention)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """Split N x H x W x C images into N x (H/p * W/p) x (p*p*C) token rows."""
    if images.ndim != 4:
        raise ShapeMismatchError(f"patchify expects N x H x W x C, got {images.shape}")
    n, height, width, channels = images.shape
    if patch < 1 or height % patch or width % patch:
        raise ShapeMismatchError(f"image size {height}x{width} is not divisible by patch {patch}")
    grid = images.reshape(n, height // patch, patch, width // patch, patch, channels)
    grid = grid.transpose(0, 1, 3, 2, 4, 5)
    return grid.reshape(n, (height // patch) * (width // patch), patch * patch * channels).astype(nk.DTYPE)
