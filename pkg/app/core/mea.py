"""
Multi-expert adapter (MEA): T bottleneck experts mixed by a token-wise router,
attached in parallel to the frozen FFN of the last P transformer blocks.

    out = (x_tilde + FFN(LN(x_tilde))) + s * sum_t w_t * E_t(LN(x_tilde))
    w = softmax(W_r LN(x_tilde) / tau_r)
"""
import logging
from dataclasses import dataclass, fields
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from app.core import numkernel as nk
from app.core.backbone import BlockParams, feed_forward, pre_ffn_norm
from app.core.numkernel import Tensor
from app.models.config import MeaConfig
from app.validators.errors import GcdValidationError, ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass
class ExpertParams:
    # d -> d_hat -> d bottleneck; the up projection starts at zero
    down_weight: Tensor
    down_bias: Tensor
    up_weight: Tensor
    up_bias: Tensor

    def named(self) -> Dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class RouterParams:
    weight: Tensor  # T x d, no bias


@dataclass
class BlockAdapter:
    block_index: int
    experts: List[ExpertParams]
    router: Optional[RouterParams]


def init_expert(rng: np.random.Generator, embed_dim: int, bottleneck_dim: int, std: float) -> ExpertParams:
    return ExpertParams(
        down_weight=nk.gaussian(rng, (bottleneck_dim, embed_dim), std, requires_grad=True),
        down_bias=nk.zeros((bottleneck_dim,), requires_grad=True),
        up_weight=nk.zeros((embed_dim, bottleneck_dim), requires_grad=True),
        up_bias=nk.zeros((embed_dim,), requires_grad=True),
    )


def route(x: Tensor, router: RouterParams, temperature: float) -> Tensor:
    """Token-wise routing weights on the T-simplex."""
    if temperature <= 0:
        raise GcdValidationError(f"router temperature must be > 0, got {temperature}")
    if x.shape[-1] != router.weight.shape[1]:
        raise ShapeMismatchError(f"route: token dim {x.shape[-1]} vs router {router.weight.shape}")
    return nk.softmax(nk.linear(x, router.weight), temperature=temperature)


def expert_forward(x: Tensor, expert: ExpertParams) -> Tensor:
    if x.shape[-1] != expert.down_weight.shape[1]:
        raise ShapeMismatchError(
            f"expert_forward: token dim {x.shape[-1]} vs down projection {expert.down_weight.shape}"
        )
    hidden = nk.relu(nk.linear(x, expert.down_weight, expert.down_bias))
    return nk.linear(hidden, expert.up_weight, expert.up_bias)


def adapted_ffn(x_tilde: Tensor, block: BlockParams, adapter: BlockAdapter,
                cfg: MeaConfig) -> Tuple[Tensor, Tensor]:
    """Frozen FFN plus the scaled expert mixture; returns (block output, route weights)."""
    if len(adapter.experts) != cfg.num_experts:
        raise GcdValidationError(
            f"block {adapter.block_index} has {len(adapter.experts)} experts, config says {cfg.num_experts}"
        )
    normed = pre_ffn_norm(x_tilde, block)
    frozen = feed_forward(normed, block)

    if adapter.router is None:
        weights = nk.ones(normed.shape[:-1] + (1,))
    else:
        weights = route(normed, adapter.router, cfg.router_temperature)

    delta = None
    selectors = np.eye(len(adapter.experts))
    for t, expert in enumerate(adapter.experts):
        weight_t = nk.sum_(nk.mul(weights, selectors[t]), axis=-1, keepdims=True)
        term = nk.mul(weight_t, expert_forward(normed, expert))
        delta = term if delta is None else nk.add(delta, term)

    out = nk.add(nk.add(x_tilde, frozen), nk.mul(delta, cfg.scale))
    return out, weights


def count_tunable_params(cfg: MeaConfig, embed_dim: int) -> int:
    """Experts plus router over the P adapted blocks; a single expert has no router."""
    t, d, d_hat = cfg.num_experts, embed_dim, cfg.bottleneck_dim
    per_block = t * (2 * d * d_hat + d + d_hat)
    if t > 1:
        per_block += t * d
    return cfg.adapted_blocks * per_block


class MultiExpertAdapter:
    """Adapters for the last P blocks of an L-block backbone."""

    def __init__(self, cfg: MeaConfig, blocks: Dict[int, BlockAdapter]):
        self.cfg = cfg
        self.blocks = blocks

    @classmethod
    def init(cls, cfg: MeaConfig, embed_dim: int, num_blocks: int, seed: int) -> "MultiExpertAdapter":
        if not 1 <= cfg.adapted_blocks <= num_blocks:
            raise GcdValidationError(
                f"adapter placement P={cfg.adapted_blocks} must lie in [1, {num_blocks}]"
            )
        rng = np.random.default_rng(seed)
        blocks = {}
        for index in range(num_blocks - cfg.adapted_blocks, num_blocks):
            experts = [init_expert(rng, embed_dim, cfg.bottleneck_dim, cfg.init_std)
                       for _ in range(cfg.num_experts)]
            router = None
            if cfg.num_experts > 1:
                router = RouterParams(
                    weight=nk.gaussian(rng, (cfg.num_experts, embed_dim), cfg.init_std, requires_grad=True)
                )
            blocks[index] = BlockAdapter(block_index=index, experts=experts, router=router)
        logger.debug("initialised %d experts in blocks %s", cfg.num_experts, sorted(blocks))
        return cls(cfg, blocks)

    def __contains__(self, index: int) -> bool:
        return index in self.blocks

    def __iter__(self) -> Iterator[BlockAdapter]:
        return iter(self.blocks[index] for index in sorted(self.blocks))

    @property
    def adapted_indices(self) -> List[int]:
        return sorted(self.blocks)

    def forward_block(self, index: int, x_tilde: Tensor, block: BlockParams) -> Tuple[Tensor, Tensor]:
        return adapted_ffn(x_tilde, block, self.blocks[index], self.cfg)

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {}
        for adapter in self:
            prefix = f"mea.block{adapter.block_index}"
            for t, expert in enumerate(adapter.experts):
                for key, tensor in expert.named().items():
                    named[f"{prefix}.expert{t}.{key}"] = tensor
            if adapter.router is not None:
                named[f"{prefix}.router.weight"] = adapter.router.weight
        return named

    def num_parameters(self) -> int:
        return sum(tensor.size for tensor in self.named_parameters().values())
