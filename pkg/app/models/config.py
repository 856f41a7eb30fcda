"""Typed architecture and training configuration."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class FilterbankConfig(BaseModel):
    """Encoder/decoder settings; window and hop default by kind (2.5/1.25 ms or 30/10 ms)."""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["trainable", "stft"] = "trainable"
    sample_rate: int = Field(16000, gt=0)
    window_ms: Optional[float] = None
    hop_ms: Optional[float] = None
    d_e: int = Field(256, ge=1)
    fft_size: int = Field(512, ge=2)

    @model_validator(mode="after")
    def _defaults_and_ranges(self) -> "FilterbankConfig":
        if self.window_ms is None:
            self.window_ms = 2.5 if self.kind == "trainable" else 30.0
        if self.hop_ms is None:
            self.hop_ms = 1.25 if self.kind == "trainable" else 10.0
        for label, ms in (("window_ms", self.window_ms), ("hop_ms", self.hop_ms)):
            samples = ms * self.sample_rate / 1000.0
            if samples < 1 or abs(samples - round(samples)) > 1e-6:
                raise ValueError(f"{label}={ms} is not a whole number of samples at {self.sample_rate} Hz")
        if self.hop_samples > self.window_samples:
            raise ValueError(f"hop ({self.hop_samples}) must not exceed window ({self.window_samples})")
        if self.kind == "stft" and self.fft_size < self.window_samples:
            raise ValueError(f"fft_size {self.fft_size} is shorter than the window ({self.window_samples} samples)")
        return self

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def feature_dim(self) -> int:
        """Channels seen by the mask predictor: D_e, or [Re | Im] of every STFT bin."""
        return self.d_e if self.kind == "trainable" else 2 * self.n_bins


class AttentionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d_model: int = Field(..., ge=1)
    heads: int = Field(6, ge=1)
    attention_dim: Optional[int] = None
    num_random_features: int = Field(384, ge=1)
    rng_seed: int = 0
    redraw_interval: int = Field(0, ge=0)
    kind: Literal["softmax", "favor"] = "favor"

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "AttentionConfig":
        if self.attention_dim is None:
            self.attention_dim = self.d_model
        if self.attention_dim % self.heads:
            raise ValueError(f"attention width {self.attention_dim} is not divisible by heads={self.heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.attention_dim // self.heads


BlockKind = Literal["tdcn", "conformer", "df_conformer", "conv_tasformer"]


class BlockConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: BlockKind
    d_b: int = Field(..., ge=1)
    d_c: int = Field(512, ge=1)
    kernel_size: Optional[int] = None
    ffn_expansion: int = Field(4, ge=1)
    dropout_rate: float = Field(0.1, ge=0.0, lt=1.0)
    attention: Optional[AttentionConfig] = None
    # df_conformer only: False gives the F-Conformer (FAVOR+ without dilation)
    dilated: bool = True
    tasformer_insertion: Literal["conv", "bottleneck"] = "conv"
    scale_init: Literal["decay", "ones"] = "decay"

    @model_validator(mode="after")
    def _check(self) -> "BlockConfig":
        if self.kernel_size is None:
            self.kernel_size = 3 if self.kind in ("tdcn", "conv_tasformer") else 5
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.kind != "tdcn" and self.attention is None:
            raise ValueError(f"{self.kind} blocks need an attention config")
        if self.attention is not None and self.kind in ("conformer", "df_conformer"):
            if self.attention.d_model != self.d_b:
                raise ValueError(f"attention d_model {self.attention.d_model} must equal d_b {self.d_b}")
        if self.kind == "conv_tasformer" and self.attention is not None:
            width = self.d_c if self.tasformer_insertion == "conv" else self.d_b
            if self.attention.d_model != width:
                raise ValueError(f"conv_tasformer attention d_model must be {width} for insertion={self.tasformer_insertion}")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "custom"
    block: BlockConfig
    num_blocks: int = Field(..., ge=1)
    dilation_cycle: int = Field(8, ge=1)
    filterbank: FilterbankConfig = Field(default_factory=FilterbankConfig)
    iterative: bool = False

    @property
    def d_e(self) -> int:
        return self.filterbank.feature_dim

    @property
    def d_b(self) -> int:
        return self.block.d_b


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(2000, ge=1)
    batch_size: int = Field(4, ge=1)
    warmup_steps: int = Field(25000, ge=1)
    weight_decay: float = Field(1e-6, ge=0.0)
    clip_norm: float = Field(5.0, gt=0.0)
    ema_decay: float = Field(0.9999, gt=0.0, lt=1.0)
    seed: int = 0
    alpha_db: float = 30.0
    speech_weight: float = Field(0.8, ge=0.0, le=1.0)
    checkpoint_every: int = Field(500, ge=1)
    validate_every: int = Field(100, ge=1)
    val_examples: int = Field(32, ge=1)

    @property
    def noise_weight(self) -> float:
        return 1.0 - self.speech_weight


class RunConfig(BaseModel):
    """Flat `key = value` run file: preset plus overrides, training and data settings."""
    model_config = ConfigDict(extra="forbid")

    preset: str = "df-conformer-tiny"
    # architecture overrides (None keeps the preset's value)
    num_blocks: Optional[int] = None
    dilation_cycle: Optional[int] = None
    d_b: Optional[int] = None
    d_c: Optional[int] = None
    heads: Optional[int] = None
    num_random_features: Optional[int] = None
    attention_kind: Optional[Literal["softmax", "favor"]] = None
    redraw_interval: Optional[int] = None
    sample_rate: Optional[int] = None
    filterbank_kind: Optional[Literal["trainable", "stft"]] = None
    dtype: Literal["float64", "float32"] = "float64"
    # training
    steps: int = Field(2000, ge=1)
    batch_size: int = Field(4, ge=1)
    warmup_steps: int = Field(25000, ge=1)
    weight_decay: float = Field(1e-6, ge=0.0)
    clip_norm: float = Field(5.0, gt=0.0)
    ema_decay: float = Field(0.9999, gt=0.0, lt=1.0)
    seed: int = 0
    checkpoint_every: int = Field(500, ge=1)
    validate_every: int = Field(100, ge=1)
    val_examples: int = Field(32, ge=1)
    # data
    num_examples: int = Field(16, ge=0)
    clip_seconds: float = Field(0.5, gt=0.0)
    snr_min_db: float = -40.0
    snr_max_db: float = 45.0
    data_seed: int = 1234

    @field_validator("snr_max_db")
    @classmethod
    def _snr_range(cls, value: float, info) -> float:
        low = info.data.get("snr_min_db", -40.0)
        if value < low:
            raise ValueError(f"snr_max_db {value} is below snr_min_db {low}")
        return value

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{key: getattr(self, key) for key in TrainConfig.model_fields if hasattr(self, key)})
