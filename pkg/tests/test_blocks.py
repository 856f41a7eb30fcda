import numpy as np
import pytest

from app.models.blocks import (
    ConformerBlock,
    ConvTasformerBlock,
    DFConformerBlock,
    TdcnBlock,
    attention_of,
    build_block,
    conformer_block,
    conv_tasformer_block,
    df_conformer_block,
    dilation_schedule,
    receptive_field_ms,
    tdcn_block,
)
from app.models.config import AttentionConfig, BlockConfig
from app.numcore import functional as F
from app.numcore.module import ParamFactory
from app.numcore.tensor import Tensor
from app.utils.helper import DimensionError


def _cfg(kind, d_b=8, d_c=12, heads=2, num_random_features=8, attention_kind="favor", **extra):
    attention = None
    if kind in ("conformer", "df_conformer"):
        attention = AttentionConfig(d_model=d_b, heads=heads, num_random_features=num_random_features,
                                    kind="softmax" if kind == "conformer" else attention_kind)
    elif kind == "conv_tasformer":
        attention = AttentionConfig(d_model=d_c, heads=heads, num_random_features=num_random_features)
    return BlockConfig(kind=kind, d_b=d_b, d_c=d_c, attention=attention, **extra)


def _block(kind, seed=0, index=0, **extra):
    block = build_block(_cfg(kind, **extra), ParamFactory(np.random.default_rng(seed)), index=index)
    return block.eval()


def _zero_dense(dense):
    dense.weight.tensor.data = np.zeros_like(dense.weight.data)
    dense.bias.tensor.data = np.zeros_like(dense.bias.data)


# ---------- dilation and receptive field ----------

def test_dilation_schedule_examples():
    assert dilation_schedule(1, 8) == 1
    assert [dilation_schedule(i, 8) for i in range(1, 10)] == [1, 2, 4, 8, 16, 32, 64, 128, 1]
    assert dilation_schedule(7, 4) == 4
    with pytest.raises(ValueError):
        dilation_schedule(0, 4)


def test_receptive_field_in_milliseconds():
    assert receptive_field_ms(5, 1, 1.25) == pytest.approx(6.25)
    assert receptive_field_ms(5, 8, 1.25) == pytest.approx(41.25)


def test_conv_path_impulse_support_matches_receptive_field():
    block = _block("df_conformer", d_b=8, kernel_size=5)
    n, centre, dilation = 61, 30, 4
    base = np.zeros((n, 8))
    impulse = base.copy()
    impulse[centre] = np.random.default_rng(1).standard_normal(8)
    diff = block.conv_module(Tensor(impulse), dilation).data - block.conv_module(Tensor(base), dilation).data
    touched = np.nonzero(np.any(np.abs(diff) > 1e-12, axis=-1))[0]
    assert touched.max() - touched.min() + 1 == F.receptive_field(5, dilation) == 17


# ---------- shapes and wiring ----------

@pytest.mark.parametrize("kind", ["tdcn", "conformer", "df_conformer", "conv_tasformer"])
@pytest.mark.parametrize("frames", [1, 7])
def test_blocks_preserve_shape(kind, frames):
    block = _block(kind)
    z = np.random.default_rng(frames).standard_normal((frames, 8))
    assert block(z, 2).shape == (frames, 8)


def test_df_conformer_handles_long_input():
    block = _block("df_conformer")
    assert block(np.random.default_rng(0).standard_normal((800, 8)), 8).shape == (800, 8)


def test_blocks_check_input_width():
    with pytest.raises(DimensionError):
        _block("tdcn")(np.zeros((5, 9)), 1)
    with pytest.raises(DimensionError):
        _block("df_conformer")(np.zeros((5, 9)), 1)


def test_block_types_and_wrappers():
    assert isinstance(_block("tdcn"), TdcnBlock) and attention_of(_block("tdcn")) is None
    assert isinstance(_block("conformer"), ConformerBlock)
    assert isinstance(_block("df_conformer"), DFConformerBlock)
    assert isinstance(_block("conv_tasformer"), ConvTasformerBlock)
    z = np.random.default_rng(2).standard_normal((6, 8))
    for kind, call in (("tdcn", lambda b: tdcn_block(z, b, 2)),
                       ("conformer", lambda b: conformer_block(z, b)),
                       ("df_conformer", lambda b: df_conformer_block(z, b, 2)),
                       ("conv_tasformer", lambda b: conv_tasformer_block(z, b, 2))):
        block = _block(kind)
        assert np.array_equal(call(block).data, block(z, 1 if kind == "conformer" else 2).data)


def test_zero_final_scale_silences_tdcn_branch():
    block = _block("tdcn")
    block.scale_out.gamma.tensor.data = np.zeros(1)
    out = block(np.random.default_rng(3).standard_normal((9, 8)), 4).data
    assert np.array_equal(out, np.zeros((9, 8)))


def test_tdcn_scale_init_decays_with_index():
    assert _block("tdcn", index=3).scale_out.gamma.data[0] == pytest.approx(0.9 ** 3)
    assert _block("tdcn", index=3, scale_init="ones").scale_out.gamma.data[0] == 1.0


def test_conformer_eval_is_deterministic():
    block = _block("conformer")
    z = np.random.default_rng(4).standard_normal((10, 8))
    assert np.array_equal(block(z).data, block(z).data)


def test_conformer_with_silenced_branches_is_layer_norm():
    block = _block("conformer")
    for dense in (block.ffn_first.dense_out, block.attention.output,
                  block.conv_module.dense_out, block.ffn_second.dense_out):
        _zero_dense(dense)
    z = np.random.default_rng(5).standard_normal((10, 8))
    expected = F.layer_norm(z, np.ones(8), np.zeros(8)).data
    assert np.max(np.abs(block(z).data - expected)) < 1e-12


# ---------- structural equivalences ----------

def test_df_conformer_with_exact_attention_matches_conformer():
    conformer = _block("conformer", seed=11)
    df = _block("df_conformer", seed=11)
    df.attention.kind = "softmax"
    z = np.random.default_rng(6).standard_normal((12, 8))
    assert np.max(np.abs(df(z, 1).data - conformer(z, 1).data)) < 1e-8


def test_df_conformer_differs_only_in_dilation_when_undilated():
    dilated = _block("df_conformer", seed=12)
    flat = _block("df_conformer", seed=12, dilated=False)
    z = np.random.default_rng(7).standard_normal((12, 8))
    assert np.array_equal(flat(z, 4).data, dilated(z, 1).data)
    assert not np.allclose(dilated(z, 4).data, dilated(z, 1).data)


def test_conv_tasformer_with_zeroed_attention_matches_tdcn():
    tdcn = _block("tdcn", seed=13, index=2)
    tasformer = _block("conv_tasformer", seed=13, index=2)
    _zero_dense(tasformer.attention.output)
    z = np.random.default_rng(8).standard_normal((11, 8))
    assert np.max(np.abs(tasformer(z, 2).data - tdcn(z, 2).data)) < 1e-12


def test_conv_tasformer_bottleneck_insertion_runs_at_block_width():
    cfg = BlockConfig(kind="conv_tasformer", d_b=8, d_c=12, tasformer_insertion="bottleneck",
                      attention=AttentionConfig(d_model=8, heads=2, num_random_features=8))
    block = build_block(cfg, ParamFactory(np.random.default_rng(0))).eval()
    z = np.random.default_rng(9).standard_normal((7, 8))
    assert block(z, 1).shape == (7, 8)
    assert block.attention_input(z, 1).shape == (7, 8)


# ---------- parameter counts ----------

def test_tdcn_parameter_count_closed_form():
    d_b, d_c, k = 256, 512, 3
    block = build_block(BlockConfig(kind="tdcn", d_b=d_b, d_c=d_c, kernel_size=k), ParamFactory(None))
    expected = (d_b * d_c + d_c) + 1 + d_c + 2 * d_c + (k * d_c + d_c) + d_c + 2 * d_c + (d_c * d_b + d_b) + 1
    assert block.num_params() == expected == 268034


def test_conv_tasformer_count_adds_attention_projections():
    attention = AttentionConfig(d_model=512, attention_dim=128, heads=8, num_random_features=128)
    tdcn = build_block(BlockConfig(kind="tdcn", d_b=256, d_c=512), ParamFactory(None))
    tasformer = build_block(BlockConfig(kind="conv_tasformer", d_b=256, d_c=512, attention=attention),
                            ParamFactory(None))
    projections = 3 * (512 * 128 + 128) + (128 * 512 + 512)
    assert tasformer.num_params() - tdcn.num_params() == projections == 263040


@pytest.mark.parametrize("d_b", [192, 216])
def test_conformer_block_count_closed_form(d_b):
    cfg = BlockConfig(kind="df_conformer", d_b=d_b, attention=AttentionConfig(d_model=d_b))
    assert build_block(cfg, ParamFactory(None)).num_params() == 23 * d_b * d_b + 35 * d_b


# ---------- gradients ----------

@pytest.mark.parametrize("kind", ["tdcn", "conformer", "df_conformer", "conv_tasformer"])
def test_block_gradients_match_central_difference(kind, gradcheck):
    block = _block(kind, seed=21)
    z = Tensor(np.random.default_rng(10).standard_normal((6, 8)), requires_grad=True)
    tensors = [z] + [p.tensor for p in block.parameters()]
    assert gradcheck(lambda: block(z, 2), tensors, max_entries=12) < 1e-5
