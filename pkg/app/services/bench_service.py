import os
import time
from typing import Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from app.models.attention import time_attention_path
from app.models.enhancer import build_model
from app.models.presets import get_preset
from app.numcore.tensor import no_grad
from app.utils.helper import log

RTF_COLUMNS = ["preset", "duration_s", "rtf_median", "rtf_iqr"]
DEFAULT_DURATIONS = tuple(float(d) for d in range(1, 11))


def write_csv(frame: pd.DataFrame, path: str) -> None:
    """Append to `path`, emitting the header only for a new file."""
    frame.to_csv(path, mode="a", header=not os.path.exists(path), index=False)


class BenchService:
    """Real-time-factor and attention-path timing sweeps"""

    def __init__(self, reps: int = 5, warmup: int = 2, seed: int = 0, dtype=np.float32):
        self.reps = reps
        self.warmup = warmup
        self.seed = seed
        self.dtype = dtype

    def time_call(self, fn) -> List[float]:
        timings = []
        for i in range(self.warmup + self.reps):
            start = time.perf_counter()
            fn()
            elapsed = time.perf_counter() - start
            if i >= self.warmup:
                timings.append(elapsed)
        return timings

    def rtf_sweep(self, presets: Sequence[str], durations: Iterable[float] = DEFAULT_DURATIONS,
                  num_blocks: Optional[int] = None) -> pd.DataFrame:
        """RTF = wall time of the full enhance pipeline / audio duration, median over reps"""
        rows = []
        rng = np.random.default_rng(self.seed)
        for preset in presets:
            cfg = get_preset(preset)
            if num_blocks is not None:
                cfg = cfg.model_copy(update={"num_blocks": num_blocks})
            model = build_model(cfg, seed=self.seed, dtype=self.dtype)
            model.eval()
            sample_rate = cfg.filterbank.sample_rate
            for duration in durations:
                x = (0.1 * rng.standard_normal(int(duration * sample_rate))).astype(self.dtype)

                def run():
                    with no_grad():
                        model(x)

                rtf = np.asarray(self.time_call(run)) / duration
                q1, q3 = np.percentile(rtf, [25, 75])
                rows.append({
                    "preset": preset,
                    "duration_s": duration,
                    "rtf_median": float(np.median(rtf)),
                    "rtf_iqr": float(q3 - q1),
                })
                log(f"RTF measured: preset={preset}, duration_s={duration}, rtf={rows[-1]['rtf_median']:.4f}")
        return pd.DataFrame(rows, columns=RTF_COLUMNS)

    def attention_sweep(self, kinds: Sequence[str] = ("softmax", "favor"),
                        frame_counts: Sequence[int] = (1000, 4000), d_model: int = 192,
                        heads: int = 6, blocks: int = 4) -> pd.DataFrame:
        rows = []
        for kind in kinds:
            for n_frames in frame_counts:
                seconds = time_attention_path(kind, n_frames, d_model=d_model, heads=heads, blocks=blocks,
                                              reps=self.reps, warmup=self.warmup, seed=self.seed,
                                              dtype=self.dtype)
                rows.append({"kind": kind, "n_frames": n_frames, "seconds": seconds})
                log(f"Attention path: kind={kind}, n_frames={n_frames}, seconds={seconds:.4f}")
        return pd.DataFrame(rows, columns=["kind", "n_frames", "seconds"])


def rtf_trend(frame: pd.DataFrame, preset: str) -> float:
    """Spearman correlation between duration and median RTF for one preset."""
    subset = frame[frame["preset"] == preset].sort_values("duration_s")
    rho, _ = spearmanr(subset["duration_s"], subset["rtf_median"])
    return float(rho)


def rtf_ratio(frame: pd.DataFrame, preset: str) -> float:
    """RTF at the longest duration over RTF at the shortest."""
    subset = frame[frame["preset"] == preset].sort_values("duration_s")
    return float(subset["rtf_median"].iloc[-1] / subset["rtf_median"].iloc[0])


def scaling_ratio(frame: pd.DataFrame, kind: str) -> float:
    subset = frame[frame["kind"] == kind].sort_values("n_frames")
    return float(subset["seconds"].iloc[-1] / subset["seconds"].iloc[0])
