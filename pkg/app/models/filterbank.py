"""Waveform <-> frame-matrix transforms: a trainable filterbank and an STFT pair.

Both encoders zero-pad the front by (frames per sample - 1) hops so every
sample of the signal is covered by complete frames, and both decoders strip
that padding and trim back to the original length T.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.signal import get_window

from app.models.config import FilterbankConfig
from app.numcore import functional as F
from app.numcore.module import Module, ParamFactory
from app.numcore.tensor import Tensor, as_tensor, concat, getitem
from app.utils.helper import DimensionError, log


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DimensionError("Waveform must be 1-D", self.samples.shape, None)
        if self.samples.size == 0:
            raise ValueError("Waveform is empty")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("Waveform contains NaN/Inf")
        if self.sample_rate <= 0:
            raise ValueError(f"Invalid sample rate {self.sample_rate}")

    @property
    def num_samples(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate


def frame_count(num_samples: int, hop: int) -> int:
    """N = ceil(T / hop)."""
    if num_samples <= 0:
        raise ValueError("Cannot frame an empty signal")
    return -(-num_samples // hop)


def _coverage(window: int, hop: int) -> int:
    return -(-window // hop)


def frame_signal(x: Union[Tensor, np.ndarray], window: int, hop: int, extra_frames: int = 0) -> Tensor:
    """Zero-pad and cut (..., T) into (..., N, window) frames.

    N = ceil(T/hop) + extra_frames; the front pad is (ceil(window/hop) - 1) * hop.
    Differentiable with respect to x.
    """
    x = as_tensor(x)
    length = x.shape[-1]
    n = frame_count(length, hop) + extra_frames
    front = (_coverage(window, hop) - 1) * hop
    back = (n - 1) * hop + window - front - length
    lead = x.shape[:-1]
    pieces = []
    if front > 0:
        pieces.append(Tensor(np.zeros(lead + (front,), dtype=x.dtype)))
    pieces.append(x)
    if back > 0:
        pieces.append(Tensor(np.zeros(lead + (back,), dtype=x.dtype)))
    padded = concat(pieces, axis=-1) if len(pieces) > 1 else x
    index = np.arange(n)[:, None] * hop + np.arange(window)[None, :]
    return getitem(padded, (Ellipsis, index))


# ---------- trainable filterbank ----------

class TrainableFilterbank(Module):
    """Strided learned analysis basis with ReLU, and a learned synthesis basis with overlap-add."""

    def __init__(self, cfg: FilterbankConfig, factory: ParamFactory):
        if cfg.kind != "trainable":
            raise ValueError(f"TrainableFilterbank needs kind='trainable', got {cfg.kind}")
        self.cfg = cfg
        self.window = cfg.window_samples
        self.hop = cfg.hop_samples
        bound = 1.0 / np.sqrt(self.window)
        self.encoder_basis = factory.uniform("encoder_basis", (self.window, cfg.d_e), bound)
        self.decoder_basis = factory.uniform("decoder_basis", (cfg.d_e, self.window), bound)

    @property
    def feature_dim(self) -> int:
        return self.cfg.d_e

    def encode(self, x) -> Tensor:
        frames = frame_signal(x, self.window, self.hop)
        return F.relu(frames @ self.encoder_basis.tensor)

    def decode(self, features, num_samples: int) -> Tensor:
        features = as_tensor(features)
        if features.shape[-1] != self.cfg.d_e:
            raise DimensionError("decoder input width does not match D_e", features.shape, (self.cfg.d_e,))
        frames = features @ self.decoder_basis.tensor
        signal = F.overlap_add(frames, self.hop)
        front = (_coverage(self.window, self.hop) - 1) * self.hop
        return getitem(signal, (Ellipsis, slice(front, front + num_samples)))

    def apply_mask(self, features, mask) -> Tensor:
        return as_tensor(features) * mask


def encode(x: Waveform, filterbank: TrainableFilterbank) -> np.ndarray:
    """Nonnegative N x D_e frame matrix of a waveform."""
    if x.num_samples == 0:
        raise ValueError("Cannot encode an empty signal")
    return filterbank.encode(x.samples).data


def decode(features: np.ndarray, filterbank: TrainableFilterbank, num_samples: int) -> Waveform:
    y = filterbank.decode(features, num_samples).data
    return Waveform(y, filterbank.cfg.sample_rate)


# ---------- STFT ----------

def stft_window(window: int, hop: int) -> np.ndarray:
    """Square-root periodic Hann, scaled so the squared window overlap-adds to about 1."""
    hann = get_window("hann", window, fftbins=True)
    w = np.sqrt(hann)
    overlap = window / (2.0 * hop)
    return w / np.sqrt(overlap)


def _stft_frames(num_samples: int, window: int, hop: int) -> int:
    return frame_count(num_samples, hop) + _coverage(window, hop) - 1


def _window_square_sum(n_frames: int, window: np.ndarray, hop: int) -> np.ndarray:
    squares = np.broadcast_to(window * window, (n_frames, window.size))
    return F.overlap_add(Tensor(np.ascontiguousarray(squares)), hop).data


class StftFilterbank(Module):
    """STFT analysis to [Re | Im] channels and windowed-iSTFT synthesis, both as Tensor ops.

    The DFT and inverse real DFT are constant matrices, so synthesis is
    differentiable for training with complex masks.
    """

    def __init__(self, cfg: FilterbankConfig, factory: ParamFactory = None):
        if cfg.kind != "stft":
            raise ValueError(f"StftFilterbank needs kind='stft', got {cfg.kind}")
        self.cfg = cfg
        self.window_len = cfg.window_samples
        self.hop = cfg.hop_samples
        self.n_fft = cfg.fft_size
        self.n_bins = cfg.n_bins
        self.window = stft_window(self.window_len, self.hop)

        t = np.arange(self.window_len)
        k = np.arange(self.n_bins)
        phase = 2.0 * np.pi * np.outer(t, k) / self.n_fft
        # analysis: Re = sum x cos, Im = -sum x sin (windowed frame)
        self._analysis = np.concatenate([np.cos(phase), -np.sin(phase)], axis=1) * self.window[:, None]
        weights = np.full(self.n_bins, 2.0)
        weights[0] = 1.0
        if self.n_fft % 2 == 0:
            weights[-1] = 1.0
        synth_re = (weights[:, None] * np.cos(phase.T)) / self.n_fft
        synth_im = -(weights[:, None] * np.sin(phase.T)) / self.n_fft
        self._synthesis = np.concatenate([synth_re, synth_im], axis=0) * self.window[None, :]

    @property
    def feature_dim(self) -> int:
        return 2 * self.n_bins

    def _check_length(self, num_samples: int) -> None:
        if num_samples < self.window_len:
            raise ValueError(f"Signal of {num_samples} samples is shorter than one STFT window ({self.window_len})")

    def encode(self, x) -> Tensor:
        x = as_tensor(x)
        self._check_length(x.shape[-1])
        extra = _coverage(self.window_len, self.hop) - 1
        frames = frame_signal(x, self.window_len, self.hop, extra_frames=extra)
        return frames @ Tensor(self._analysis.astype(x.dtype))

    def decode(self, features, num_samples: int) -> Tensor:
        features = as_tensor(features)
        if features.shape[-1] != self.feature_dim:
            raise DimensionError("iSTFT input must carry [Re | Im] of every bin", features.shape, (self.feature_dim,))
        frames = features @ Tensor(self._synthesis.astype(features.dtype))
        signal = F.overlap_add(frames, self.hop)
        norm = _window_square_sum(features.shape[-2], self.window, self.hop)
        signal = signal * Tensor((1.0 / np.maximum(norm, 1e-12)).astype(features.dtype))
        front = (_coverage(self.window_len, self.hop) - 1) * self.hop
        return getitem(signal, (Ellipsis, slice(front, front + num_samples)))

    def apply_mask(self, features, mask) -> Tensor:
        return apply_complex_mask_channels(features, mask)


def stft_encode(x: Union[Waveform, np.ndarray], cfg: FilterbankConfig) -> np.ndarray:
    """Complex (N x F) spectrogram with the square-root Hann analysis window."""
    samples = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    window_len, hop = cfg.window_samples, cfg.hop_samples
    if samples.shape[-1] < window_len:
        raise ValueError(f"Signal of {samples.shape[-1]} samples is shorter than one STFT window ({window_len})")
    extra = _coverage(window_len, hop) - 1
    frames = frame_signal(samples, window_len, hop, extra_frames=extra).data
    return np.fft.rfft(frames * stft_window(window_len, hop), n=cfg.fft_size, axis=-1)


def stft_decode(spectrum: np.ndarray, cfg: FilterbankConfig, num_samples: int) -> np.ndarray:
    """Inverse of `stft_encode`: windowed irfft, overlap-add, divide by the window-square sum."""
    window_len, hop = cfg.window_samples, cfg.hop_samples
    if spectrum.shape[-1] != cfg.n_bins:
        raise DimensionError("spectrum bins do not match fft_size", spectrum.shape, (cfg.n_bins,))
    window = stft_window(window_len, hop)
    frames = np.fft.irfft(spectrum, n=cfg.fft_size, axis=-1)[..., :window_len] * window
    signal = F.overlap_add(Tensor(frames), hop).data
    norm = _window_square_sum(spectrum.shape[-2], window, hop)
    signal = signal / np.maximum(norm, 1e-12)
    front = (_coverage(window_len, hop) - 1) * hop
    return signal[..., front:front + num_samples]


def stft_energy(spectrum: np.ndarray, cfg: FilterbankConfig) -> float:
    """Time-domain energy implied by a one-sided spectrum (Parseval with rfft bin weights)."""
    weights = np.full(cfg.n_bins, 2.0)
    weights[0] = 1.0
    if cfg.fft_size % 2 == 0:
        weights[-1] = 1.0
    return float((weights * np.abs(spectrum) ** 2).sum() / cfg.fft_size)


def apply_complex_mask(spectrum: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if spectrum.shape != mask.shape:
        raise DimensionError("complex mask shape differs from spectrum", spectrum.shape, mask.shape)
    return spectrum * mask


def apply_complex_mask_channels(features, mask) -> Tensor:
    """Complex product on [Re | Im] channel layouts: (a+bi)(c+di) = (ac-bd) + (ad+bc)i."""
    features, mask = as_tensor(features), as_tensor(mask)
    if features.shape != mask.shape:
        raise DimensionError("complex mask shape differs from spectrum", features.shape, mask.shape)
    a, b = split_complex(features)
    c, d = split_complex(mask)
    return concat([a * c - b * d, a * d + b * c], axis=-1)


def build_filterbank(cfg: FilterbankConfig, factory: ParamFactory) -> Module:
    log(f"Building filterbank: kind={cfg.kind}, window={cfg.window_samples}, hop={cfg.hop_samples}, "
        f"features={cfg.feature_dim}", "DEBUG")
    if cfg.kind == "trainable":
        return TrainableFilterbank(cfg, factory)
    return StftFilterbank(cfg, factory)


def split_complex(features):
    """[Re | Im] channel layout to its (Re, Im) halves; works on arrays and Tensors."""
    half = features.shape[-1] // 2
    return features[..., :half], features[..., half:]
