"""Mask prediction, the encode-mask-decode pipeline, losses and the iterative two-stage wrapper."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from app.models.attention import SelfAttention
from app.models.blocks import build_block, dilation_schedule
from app.models.config import ModelConfig
from app.models.filterbank import Waveform, build_filterbank
from app.numcore import functional as F
from app.numcore.module import Dense, Module, ParamFactory, check_width
from app.numcore.tensor import Tensor, as_tensor, concat, log as tlog, no_grad, square, tsum
from app.utils.helper import DimensionError, log

DEFAULT_ALPHA_DB = 30.0
SPEECH_WEIGHT = 0.8


@dataclass
class MaskPair:
    speech: Tensor
    noise: Tensor

    def in_unit_range(self) -> bool:
        return bool(
            np.all((self.speech.data >= 0) & (self.speech.data <= 1))
            and np.all((self.noise.data >= 0) & (self.noise.data <= 1))
        )


class MaskPredictor(Module):
    """Input dense D_e -> D_b, L residual blocks on the dilation schedule, two mask heads."""

    def __init__(self, cfg: ModelConfig, factory: ParamFactory):
        self.cfg = cfg
        self.bounded = cfg.filterbank.kind == "trainable"
        self.input_dense = Dense(factory, cfg.d_e, cfg.d_b)
        self.blocks = [build_block(cfg.block, factory, index=i) for i in range(cfg.num_blocks)]
        self.speech_head = Dense(factory, cfg.d_b, cfg.d_e)
        self.noise_head = Dense(factory, cfg.d_b, cfg.d_e)

    def dilations(self) -> List[int]:
        return [dilation_schedule(i, self.cfg.dilation_cycle) for i in range(1, self.cfg.num_blocks + 1)]

    def trunk(self, features) -> Tensor:
        z = self.input_dense(as_tensor(features))
        for block, dilation in zip(self.blocks, self.dilations()):
            z = z + block(z, dilation)
        return z

    def forward(self, features) -> MaskPair:
        features = as_tensor(features)
        check_width(features, self.cfg.d_e, "mask predictor")
        z = self.trunk(features)
        speech, noise = self.speech_head(z), self.noise_head(z)
        if self.bounded:
            speech, noise = F.sigmoid(speech), F.sigmoid(noise)
        return MaskPair(speech=speech, noise=noise)

    def attention_layers(self) -> List[SelfAttention]:
        return [block.attention for block in self.blocks if isinstance(getattr(block, "attention", None), SelfAttention)]

    def attention_input(self, features, layer: int) -> Tuple[SelfAttention, Tensor]:
        """The attention module of block `layer` (0-based) and the frames it attends over."""
        if not 0 <= layer < len(self.blocks):
            raise ValueError(f"Layer {layer} out of range 0..{len(self.blocks) - 1}")
        block = self.blocks[layer]
        if not hasattr(block, "attention_input"):
            raise ValueError(f"Block {layer} ({self.cfg.block.kind}) has no attention")
        z = self.input_dense(as_tensor(features))
        dilations = self.dilations()
        for block_before, dilation in zip(self.blocks[:layer], dilations):
            z = z + block_before(z, dilation)
        return block.attention, block.attention_input(z, dilations[layer])


def predict_masks(features, predictor: MaskPredictor) -> MaskPair:
    return predictor(features)


def mixture_consistency(y_speech, y_noise, mixture) -> Tuple[Tensor, Tensor]:
    """Project estimates so they add up to the mixture, splitting the residual equally."""
    y_speech, y_noise, mixture = as_tensor(y_speech), as_tensor(y_noise), as_tensor(mixture)
    if not (y_speech.shape == y_noise.shape == mixture.shape):
        raise DimensionError("mixture consistency needs equal lengths", y_speech.shape, mixture.shape)
    residual = (mixture - (y_speech + y_noise)) * 0.5
    return y_speech + residual, y_noise + residual


def loss_threshold(alpha_db: float) -> float:
    """tau = 10^(-alpha/10); perfect reconstruction then scores -alpha dB."""
    return 10.0 ** (-alpha_db / 10.0)


def thresholded_snr_loss(reference, estimate, alpha_db: float = DEFAULT_ALPHA_DB) -> Tensor:
    """-10 log10(|s|^2 / (|s - y|^2 + tau |s|^2)), averaged over leading batch axes."""
    reference, estimate = as_tensor(reference), as_tensor(estimate)
    if reference.shape != estimate.shape:
        raise DimensionError("loss needs equal lengths", reference.shape, estimate.shape)
    power = (reference.data * reference.data).sum(axis=-1)
    if np.any(power <= 0):
        raise ValueError("thresholded_snr_loss: zero reference signal")
    error = tsum(square(reference - estimate), axis=-1)
    tau = loss_threshold(alpha_db)
    ratio = (error + Tensor(tau * power)) / Tensor(power)
    per_example = tlog(ratio) * (10.0 / np.log(10.0))
    return per_example.mean()


def total_loss(speech, noise, speech_estimate, noise_estimate, alpha_db: float = DEFAULT_ALPHA_DB,
               speech_weight: float = SPEECH_WEIGHT) -> Tensor:
    return (
        thresholded_snr_loss(speech, speech_estimate, alpha_db) * speech_weight
        + thresholded_snr_loss(noise, noise_estimate, alpha_db) * (1.0 - speech_weight)
    )


@dataclass
class Separation:
    speech: Tensor
    noise: Tensor
    raw_speech: Tensor
    raw_noise: Tensor
    masks: MaskPair


class EnhancementModel(Module):
    """y = Dec(Enc(x) * M(Enc(x))) for speech and noise masks, then mixture consistency."""

    def __init__(self, cfg: ModelConfig, factory: ParamFactory):
        self.cfg = cfg
        self.filterbank = build_filterbank(cfg.filterbank, factory)
        self.predictor = MaskPredictor(cfg, factory)

    def separate_features(self, features: Tensor, mixture: Tensor, masks: MaskPair) -> Separation:
        length = mixture.shape[-1]
        raw_speech = self.filterbank.decode(self.filterbank.apply_mask(features, masks.speech), length)
        raw_noise = self.filterbank.decode(self.filterbank.apply_mask(features, masks.noise), length)
        speech, noise = mixture_consistency(raw_speech, raw_noise, mixture)
        return Separation(speech, noise, raw_speech, raw_noise, masks)

    def separate(self, mixture) -> Separation:
        mixture = as_tensor(mixture)
        features = self.filterbank.encode(mixture)
        return self.separate_features(features, mixture, self.predictor(features))

    def forward(self, mixture) -> Tuple[Tensor, Tensor]:
        result = self.separate(mixture)
        return result.speech, result.noise

    def loss(self, speech, noise, mixture, alpha_db: float = DEFAULT_ALPHA_DB,
             speech_weight: float = SPEECH_WEIGHT) -> Tensor:
        speech_estimate, noise_estimate = self(mixture)
        return total_loss(speech, noise, speech_estimate, noise_estimate, alpha_db, speech_weight)

    def attention_layers(self) -> List[SelfAttention]:
        return self.predictor.attention_layers()

    def attention_input(self, mixture, layer: int) -> Tuple[SelfAttention, Tensor]:
        return self.predictor.attention_input(self.filterbank.encode(as_tensor(mixture)), layer)


class IterativeEnhancer(Module):
    """Two enhancement stages; stage 2 fuses Enc(x), Enc(y_s1), Enc(y_n1) with a dense layer."""

    def __init__(self, cfg: ModelConfig, factory: ParamFactory):
        self.cfg = cfg
        self.stage1 = EnhancementModel(cfg, factory)
        self.stage2 = EnhancementModel(cfg, factory)
        self.fusion = Dense(factory, 3 * cfg.d_e, cfg.d_e)

    def initialize_stage2_as_identity(self) -> None:
        """Copy stage 1 into stage 2 and make the fusion pass Enc(x) through unchanged."""
        self.stage2.load_state_dict(self.stage1.state_dict())
        self.stage2.load_buffers(dict(self.stage1.named_buffers()))
        d_e = self.cfg.d_e
        weight = np.zeros((3 * d_e, d_e), dtype=self.fusion.weight.tensor.dtype)
        weight[:d_e] = np.eye(d_e)
        self.fusion.weight.tensor.data = weight
        self.fusion.bias.tensor.data = np.zeros(d_e, dtype=weight.dtype)

    def _fused(self, mixture: Tensor, first: Separation) -> Tuple[Tensor, Tensor]:
        fb = self.stage2.filterbank
        features = fb.encode(mixture)
        return features, self.fusion(concat([features, fb.encode(first.speech), fb.encode(first.noise)], axis=-1))

    def stages(self, mixture) -> Tuple[Separation, Separation]:
        mixture = as_tensor(mixture)
        first = self.stage1.separate(mixture)
        features, fused = self._fused(mixture, first)
        second = self.stage2.separate_features(features, mixture, self.stage2.predictor(fused))
        return first, second

    def forward(self, mixture) -> Tuple[Tensor, Tensor]:
        _, second = self.stages(mixture)
        return second.speech, second.noise

    def loss(self, speech, noise, mixture, alpha_db: float = DEFAULT_ALPHA_DB,
             speech_weight: float = SPEECH_WEIGHT) -> Tensor:
        first, second = self.stages(mixture)
        return (
            total_loss(speech, noise, first.speech, first.noise, alpha_db, speech_weight)
            + total_loss(speech, noise, second.speech, second.noise, alpha_db, speech_weight)
        )

    def attention_layers(self) -> List[SelfAttention]:
        return self.stage1.attention_layers() + self.stage2.attention_layers()

    def attention_input(self, mixture, layer: int) -> Tuple[SelfAttention, Tensor]:
        """Layers 0..L-1 are stage 1, L..2L-1 stage 2 (attending over the fused features)."""
        count = len(self.stage1.predictor.blocks)
        if not 0 <= layer < 2 * count:
            raise ValueError(f"Layer {layer} out of range 0..{2 * count - 1}")
        if layer < count:
            return self.stage1.attention_input(mixture, layer)
        mixture = as_tensor(mixture)
        _, fused = self._fused(mixture, self.stage1.separate(mixture))
        return self.stage2.predictor.attention_input(fused, layer - count)


Enhancer = Union[EnhancementModel, IterativeEnhancer]


def build_model(cfg: ModelConfig, seed: Optional[int] = 0, dtype=None) -> Enhancer:
    """Random-initialized model; `seed=None` builds a shape-only model for counting."""
    factory = ParamFactory(None if seed is None else np.random.default_rng(seed), dtype=dtype)
    model = IterativeEnhancer(cfg, factory) if cfg.iterative else EnhancementModel(cfg, factory)
    model.assign_names()
    return model


def enhance(x: Waveform, model: Enhancer) -> Tuple[Waveform, Waveform]:
    """Inference on one waveform; outputs keep the input length and satisfy consistency."""
    model.eval()
    with no_grad():
        speech, noise = model(x.samples)
    return Waveform(speech.data, x.sample_rate), Waveform(noise.data, x.sample_rate)


def iterative_enhance(x: Waveform, model: IterativeEnhancer) -> Tuple[Waveform, Waveform]:
    if not isinstance(model, IterativeEnhancer):
        raise ValueError("iterative_enhance needs a model with two stages")
    return enhance(x, model)


# ---------- size and cost ----------

def _group(name: str) -> str:
    parts = name.split(".")
    if "blocks" in parts:
        i = parts.index("blocks")
        return ".".join(parts[:i + 2])
    return ".".join(parts[:-1]) or name


def param_breakdown(cfg: ModelConfig) -> pd.DataFrame:
    model = build_model(cfg, seed=None)
    rows: Dict[str, int] = {}
    for name, param in model.named_parameters():
        key = _group(name)
        rows[key] = rows.get(key, 0) + param.size
    frame = pd.DataFrame({"module": list(rows), "params": list(rows.values())})
    total = int(frame["params"].sum())
    frame["share"] = frame["params"] / total
    return frame


def param_count(cfg: ModelConfig) -> int:
    return int(build_model(cfg, seed=None).num_params())


def estimate_macs_per_frame(cfg: ModelConfig, n_frames: int = 800) -> float:
    """Multiply-accumulates per frame: matrix and depthwise weights plus the attention cores."""
    model = build_model(cfg, seed=None)
    macs = float(sum(p.size for p in model.parameters() if p.tensor.ndim == 2))
    for _, module in model.named_modules():
        if isinstance(module, SelfAttention):
            width = module.cfg.attention_dim
            if module.kind == "softmax":
                macs += 2.0 * n_frames * width
            else:
                macs += 4.0 * module.cfg.num_random_features * width
    return macs
