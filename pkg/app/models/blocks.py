"""Residual blocks of the mask predictors.

TDCN and Conv-Tasformer blocks return only the residual branch (the caller adds
it to the input). Conformer-family blocks carry their own inner residuals and
end with a layer norm; the mask predictor still adds the block output to its
input.
"""

from __future__ import annotations

from typing import Optional

from app.models.attention import SelfAttention
from app.models.config import BlockConfig
from app.numcore import functional as F
from app.numcore.module import (
    BatchNorm,
    Dense,
    DepthwiseConv1d,
    Dropout,
    InstanceNorm,
    LayerNorm,
    Module,
    ParamFactory,
    PReLU,
    Scale,
    check_width,
)
from app.numcore.tensor import Tensor, as_tensor


def dilation_schedule(index: int, cycle: int) -> int:
    """d = 2^((i - 1) mod L_s) for a 1-based block index."""
    if index < 1 or cycle < 1:
        raise ValueError(f"Block index and cycle must be >= 1, got index={index}, cycle={cycle}")
    return 2 ** ((index - 1) % cycle)


def receptive_field_ms(kernel_size: int, dilation: int, hop_ms: float) -> float:
    return F.receptive_field(kernel_size, dilation) * hop_ms


class TdcnBlock(Module):
    """Dense up to D_c, scaled PReLU + instance norm, dilated depthwise conv, back down to D_b."""

    def __init__(self, cfg: BlockConfig, factory: ParamFactory, index: int = 0):
        self.cfg = cfg
        self.dense_in = Dense(factory, cfg.d_b, cfg.d_c)
        self.scale_in = Scale(factory, 1.0)
        self.act_in = PReLU(factory, cfg.d_c)
        self.norm_in = InstanceNorm(factory, cfg.d_c)
        self.conv = DepthwiseConv1d(factory, cfg.kernel_size, cfg.d_c)
        self.act_conv = PReLU(factory, cfg.d_c)
        self.norm_conv = InstanceNorm(factory, cfg.d_c)
        self.dense_out = Dense(factory, cfg.d_c, cfg.d_b)
        self.scale_out = Scale(factory, 0.9 ** index if cfg.scale_init == "decay" else 1.0)

    def _conv_section(self, z: Tensor, dilation: int) -> Tensor:
        r = self.norm_in(self.act_in(self.scale_in(self.dense_in(z))))
        r = self.conv(r, dilation)
        return self.norm_conv(self.act_conv(r))

    def forward(self, z, dilation: int = 1) -> Tensor:
        z = as_tensor(z)
        check_width(z, self.cfg.d_b, "tdcn block")
        r = self._conv_section(z, dilation)
        return self.scale_out(self.dense_out(r))


class ConvTasformerBlock(TdcnBlock):
    """TDCN block with a FAVOR+ residual inside the D_c-wide section (or on the D_b output)."""

    def __init__(self, cfg: BlockConfig, factory: ParamFactory, index: int = 0):
        super().__init__(cfg, factory, index)
        self.attention = SelfAttention(cfg.attention, factory)

    def attention_input(self, z, dilation: int = 1) -> Tensor:
        r = self._conv_section(as_tensor(z), dilation)
        if self.cfg.tasformer_insertion == "conv":
            return r
        return self.scale_out(self.dense_out(r))

    def forward(self, z, dilation: int = 1) -> Tensor:
        z = as_tensor(z)
        check_width(z, self.cfg.d_b, "conv-tasformer block")
        r = self._conv_section(z, dilation)
        if self.cfg.tasformer_insertion == "conv":
            r = r + self.attention(r)
        out = self.scale_out(self.dense_out(r))
        if self.cfg.tasformer_insertion == "bottleneck":
            out = out + self.attention(out)
        return out


class FeedForward(Module):
    """LayerNorm -> Dense(x expansion) -> Swish -> Dropout -> Dense -> Dropout."""

    def __init__(self, cfg: BlockConfig, factory: ParamFactory):
        width = cfg.d_b * cfg.ffn_expansion
        self.norm = LayerNorm(factory, cfg.d_b)
        self.dense_in = Dense(factory, cfg.d_b, width)
        self.dropout_in = Dropout(cfg.dropout_rate, factory.child_rng())
        self.dense_out = Dense(factory, width, cfg.d_b)
        self.dropout_out = Dropout(cfg.dropout_rate, factory.child_rng())

    def forward(self, z) -> Tensor:
        r = self.dropout_in(F.swish(self.dense_in(self.norm(z))))
        return self.dropout_out(self.dense_out(r))


class ConvModule(Module):
    """LayerNorm -> Dense(2D) -> GLU -> depthwise conv -> BatchNorm -> Swish -> Dense -> Dropout."""

    def __init__(self, cfg: BlockConfig, factory: ParamFactory):
        self.norm = LayerNorm(factory, cfg.d_b)
        self.dense_in = Dense(factory, cfg.d_b, 2 * cfg.d_b)
        self.conv = DepthwiseConv1d(factory, cfg.kernel_size, cfg.d_b)
        self.batch_norm = BatchNorm(factory, cfg.d_b)
        self.dense_out = Dense(factory, cfg.d_b, cfg.d_b)
        self.dropout = Dropout(cfg.dropout_rate, factory.child_rng())

    def forward(self, z, dilation: int = 1) -> Tensor:
        r = F.glu(self.dense_in(self.norm(z)))
        r = self.conv(r, dilation)
        r = F.swish(self.batch_norm(r))
        return self.dropout(self.dense_out(r))


class ConformerBlock(Module):
    """Macaron FFN halves around attention and convolution, followed by a layer norm."""

    def __init__(self, cfg: BlockConfig, factory: ParamFactory, index: int = 0):
        self.cfg = cfg
        self.ffn_first = FeedForward(cfg, factory)
        self.attention_norm = LayerNorm(factory, cfg.d_b)
        self.attention = SelfAttention(cfg.attention, factory)
        self.attention_dropout = Dropout(cfg.dropout_rate, factory.child_rng())
        self.conv_module = ConvModule(cfg, factory)
        self.ffn_second = FeedForward(cfg, factory)
        self.final_norm = LayerNorm(factory, cfg.d_b)

    def conv_dilation(self, dilation: int) -> int:
        return 1

    def attention_input(self, z, dilation: int = 1) -> Tensor:
        z = as_tensor(z)
        return self.attention_norm(z + 0.5 * self.ffn_first(z))

    def forward(self, z, dilation: int = 1) -> Tensor:
        z = as_tensor(z)
        check_width(z, self.cfg.d_b, f"{self.cfg.kind} block")
        z = z + 0.5 * self.ffn_first(z)
        z = z + self.attention_dropout(self.attention(self.attention_norm(z)))
        z = z + self.conv_module(z, self.conv_dilation(dilation))
        z = z + 0.5 * self.ffn_second(z)
        return self.final_norm(z)


class DFConformerBlock(ConformerBlock):
    """Conformer block with FAVOR+ attention and a dilated depthwise conv (undilated: F-Conformer)."""

    def conv_dilation(self, dilation: int) -> int:
        return dilation if self.cfg.dilated else 1


BLOCK_TYPES = {
    "tdcn": TdcnBlock,
    "conformer": ConformerBlock,
    "df_conformer": DFConformerBlock,
    "conv_tasformer": ConvTasformerBlock,
}


def build_block(cfg: BlockConfig, factory: ParamFactory, index: int = 0) -> Module:
    return BLOCK_TYPES[cfg.kind](cfg, factory, index)


def tdcn_block(z, block: TdcnBlock, dilation: int) -> Tensor:
    return block(z, dilation)


def conformer_block(z, block: ConformerBlock) -> Tensor:
    return block(z, 1)


def df_conformer_block(z, block: DFConformerBlock, dilation: int) -> Tensor:
    return block(z, dilation)


def conv_tasformer_block(z, block: ConvTasformerBlock, dilation: int) -> Tensor:
    return block(z, dilation)


def attention_of(block: Module) -> Optional[SelfAttention]:
    return getattr(block, "attention", None)
