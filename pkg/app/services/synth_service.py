import queue
import threading
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.signal import lfilter

from app.utils.helper import SilentDrawError, log, redraw_retry, reproducible_mode

SNR_RANGE_DB = (-40.0, 45.0)
VALIDATION_SEED = 20240
SILENCE_FLOOR = 1e-8


@dataclass
class SynthExample:
    """Clean speech-like signal, noise and their exact sum at a requested SNR"""
    s: np.ndarray
    n: np.ndarray
    x: np.ndarray
    snr_db: float
    sample_rate: int
    seed: int

    @property
    def measured_snr_db(self) -> float:
        return float(10.0 * np.log10(np.sum(self.s ** 2) / np.sum(self.n ** 2)))


@redraw_retry()
def _draw_speech(rng: np.random.Generator, num_samples: int, sample_rate: int) -> np.ndarray:
    """Harmonic stack on a slowly drifting f0 with a syllabic envelope; redrawn when silent."""
    t = np.arange(num_samples) / sample_rate
    f0_base = rng.uniform(80.0, 300.0)
    drift = 0.1 * np.sin(2.0 * np.pi * rng.uniform(0.3, 2.0) * t + rng.uniform(0, 2 * np.pi))
    f0 = np.clip(f0_base * np.exp(drift), 80.0, 300.0)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate

    nyquist = 0.45 * sample_rate
    harmonics = max(1, int(min(nyquist, 4000.0) // f0_base))
    formant = rng.uniform(300.0, 1500.0)
    speech = np.zeros(num_samples)
    for k in range(1, harmonics + 1):
        tilt = 1.0 / k
        resonance = np.exp(-((k * f0_base - formant) / 600.0) ** 2)
        speech += (tilt + resonance) * rng.uniform(0.5, 1.0) * np.sin(k * phase + rng.uniform(0, 2 * np.pi))

    syllable_rate = rng.uniform(2.0, 8.0)
    envelope = np.maximum(0.0, np.sin(2.0 * np.pi * syllable_rate * t + rng.uniform(0, 2 * np.pi))) ** 1.5
    speech *= envelope
    if np.mean(speech ** 2) < SILENCE_FLOOR:
        raise SilentDrawError(f"Silent speech draw (f0={f0_base:.1f}, rate={syllable_rate:.2f})")
    return 0.5 * speech / np.max(np.abs(speech))


def _draw_noise(rng: np.random.Generator, num_samples: int, sample_rate: int) -> np.ndarray:
    """White noise through a random two-pole resonator."""
    centre = rng.uniform(200.0, 0.4 * sample_rate)
    radius = rng.uniform(0.8, 0.98)
    theta = 2.0 * np.pi * centre / sample_rate
    a = [1.0, -2.0 * radius * np.cos(theta), radius * radius]
    return lfilter([1.0 - radius], a, rng.standard_normal(num_samples))


def synth_example(seed: int, duration_s: float = 0.5, sample_rate: int = 8000, snr_db: float = 0.0,
                  snr_range: Tuple[float, float] = SNR_RANGE_DB) -> SynthExample:
    if not snr_range[0] <= snr_db <= snr_range[1]:
        raise ValueError(f"snr_db={snr_db} outside [{snr_range[0]}, {snr_range[1]}]")
    num_samples = int(round(duration_s * sample_rate))
    if num_samples < 1:
        raise ValueError(f"Duration {duration_s}s is shorter than one sample")
    rng = np.random.default_rng(seed)
    s = _draw_speech(rng, num_samples, sample_rate)
    n = _draw_noise(rng, num_samples, sample_rate)
    n *= np.sqrt(np.sum(s ** 2) / (np.sum(n ** 2) * 10.0 ** (snr_db / 10.0)))
    return SynthExample(s=s, n=n, x=s + n, snr_db=float(snr_db), sample_rate=sample_rate, seed=seed)


def make_examples(count: int, seed: int, duration_s: float, sample_rate: int,
                  snr_range: Tuple[float, float] = SNR_RANGE_DB) -> List[SynthExample]:
    rng = np.random.default_rng(seed)
    snrs = rng.uniform(snr_range[0], snr_range[1], size=count)
    return [synth_example(seed * 100003 + i, duration_s, sample_rate, float(v), snr_range) for i, v in enumerate(snrs)]


def validation_set(duration_s: float, sample_rate: int, count: int = 32,
                   snr_range: Tuple[float, float] = SNR_RANGE_DB) -> List[SynthExample]:
    """The pinned validation mini-set; identical on every call."""
    return make_examples(count, VALIDATION_SEED, duration_s, sample_rate, snr_range)


@dataclass
class Batch:
    s: np.ndarray
    n: np.ndarray
    x: np.ndarray


def stack(examples: List[SynthExample]) -> Batch:
    return Batch(
        s=np.stack([e.s for e in examples]),
        n=np.stack([e.n for e in examples]),
        x=np.stack([e.x for e in examples]),
    )


class SynthDataSource:
    """Training batches from a fixed example set, or streamed fresh draws.

    Streaming mode fills a bounded queue from a background thread unless
    reproducibility mode is on, in which case draws happen inline.
    """

    def __init__(self, batch_size: int, duration_s: float, sample_rate: int, seed: int = 1234,
                 num_examples: int = 16, snr_range: Tuple[float, float] = SNR_RANGE_DB, queue_size: int = 8):
        self.batch_size = batch_size
        self.duration_s = duration_s
        self.sample_rate = sample_rate
        self.seed = seed
        self.snr_range = snr_range
        self.rng = np.random.default_rng(seed)
        self.fixed: Optional[List[SynthExample]] = None
        self._counter = 0
        self._queue: Optional[queue.Queue] = None
        self._stop = threading.Event()
        self._worker: Optional[threading.Thread] = None

        if num_examples > 0:
            self.fixed = make_examples(num_examples, seed, duration_s, sample_rate, snr_range)
            log(f"Synthetic data: mode=fixed, examples={num_examples}, duration_s={duration_s}, sr={sample_rate}")
        elif not reproducible_mode():
            self._queue = queue.Queue(maxsize=queue_size)
            self._worker = threading.Thread(target=self._fill, daemon=True)
            self._worker.start()
            log(f"Synthetic data: mode=streaming, queue_size={queue_size}")
        else:
            log("Synthetic data: mode=streaming (synchronous)")

    def _draw_next(self) -> SynthExample:
        index = self._counter
        self._counter += 1
        snr = float(np.random.default_rng((self.seed, index)).uniform(*self.snr_range))
        return synth_example(self.seed * 100003 + 7919 * (index + 1), self.duration_s, self.sample_rate,
                             snr, self.snr_range)

    def _fill(self) -> None:
        while not self._stop.is_set():
            example = self._draw_next()
            while not self._stop.is_set():
                try:
                    self._queue.put(example, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def next_batch(self) -> Batch:
        if self.fixed is not None:
            idx = self.rng.choice(len(self.fixed), size=self.batch_size, replace=len(self.fixed) < self.batch_size)
            return stack([self.fixed[i] for i in idx])
        if self._queue is not None:
            return stack([self._queue.get() for _ in range(self.batch_size)])
        return stack([self._draw_next() for _ in range(self.batch_size)])

    def close(self) -> None:
        self._stop.set()
        if self._worker is not None:
            self._worker.join(timeout=1.0)
