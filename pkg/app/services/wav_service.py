import io
from typing import Optional, Union, BinaryIO

import numpy as np
from scipy.io import wavfile

from app.models.filterbank import Waveform
from app.utils.helper import WavFormatError, log

PCM_SCALE = 32768.0


class WavService:
    """Mono 16-bit PCM WAV reading and writing; samples live in [-1, 1)"""

    def read(self, source: Union[str, BinaryIO], expected_rate: Optional[int] = None) -> Waveform:
        try:
            rate, data = wavfile.read(source)
        except (ValueError, EOFError) as exc:
            raise WavFormatError(f"Malformed WAV file: {exc}") from exc
        if data.dtype != np.int16:
            raise WavFormatError(f"Unsupported WAV codec {data.dtype}; expected 16-bit PCM")
        if data.ndim != 1:
            raise WavFormatError(f"Expected mono audio, got {data.shape[1]} channels")
        if expected_rate is not None and rate != expected_rate:
            raise WavFormatError(f"Sample rate {rate} Hz does not match the model's {expected_rate} Hz")
        if data.size == 0:
            raise WavFormatError("WAV file contains no samples")
        log(f"WAV read: rate={rate}, samples={data.size}", "DEBUG")
        return Waveform(data.astype(np.float64) / PCM_SCALE, int(rate))

    def to_pcm(self, samples: np.ndarray) -> np.ndarray:
        scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
        return np.clip(scaled, -32768, 32767).astype(np.int16)

    def write(self, target: Union[str, BinaryIO], wave: Waveform) -> None:
        wavfile.write(target, wave.sample_rate, self.to_pcm(wave.samples))

    def to_bytes(self, wave: Waveform) -> bytes:
        buffer = io.BytesIO()
        self.write(buffer, wave)
        return buffer.getvalue()

    def from_bytes(self, payload: bytes, expected_rate: Optional[int] = None) -> Waveform:
        return self.read(io.BytesIO(payload), expected_rate)


def wav_read(path: str, expected_rate: Optional[int] = None) -> Waveform:
    return WavService().read(path, expected_rate)


def wav_write(path: str, wave: Waveform) -> None:
    WavService().write(path, wave)
