import numpy as np
import pandas as pd
from typing import Iterable, List, Optional

from app.models.enhancer import enhance
from app.models.filterbank import Waveform
from app.utils.helper import DimensionError, log

SI_SNR_CAP_DB = 120.0
SI_SNR_EPS = 1e-12


def _check_pair(y: np.ndarray, s: np.ndarray) -> None:
    if y.shape != s.shape:
        raise DimensionError("metric inputs must have equal lengths", y.shape, s.shape)
    if not np.any(s):
        raise ValueError("Reference signal is all zeros")


def si_snr(y, s) -> float:
    """Scale-invariant SNR in dB, capped at 120 dB."""
    y, s = np.asarray(y, dtype=np.float64), np.asarray(s, dtype=np.float64)
    _check_pair(y, s)
    ref_power = float(np.dot(s, s))
    target = (np.dot(y, s) / ref_power) * s
    residual = y - target
    target_power = float(np.dot(target, target))
    residual_power = float(np.dot(residual, residual))
    floor = SI_SNR_EPS * target_power
    if target_power == 0.0:
        return -SI_SNR_CAP_DB
    value = 10.0 * np.log10(target_power / (residual_power + floor))
    return float(min(value, SI_SNR_CAP_DB))


def si_snri(y, s, x) -> float:
    return si_snr(y, s) - si_snr(x, s)


def snr(y, s) -> float:
    """Plain SNR of estimate y against reference s, in dB."""
    y, s = np.asarray(y, dtype=np.float64), np.asarray(s, dtype=np.float64)
    _check_pair(y, s)
    error = float(np.sum((s - y) ** 2))
    if error == 0.0:
        return SI_SNR_CAP_DB
    return float(min(10.0 * np.log10(np.sum(s * s) / error), SI_SNR_CAP_DB))


class MetricsService:
    """Evaluates an enhancement model on a list of synthetic examples"""

    def evaluate(self, model, examples: Iterable) -> pd.DataFrame:
        """Per-example SI-SNR, SI-SNRi and SNR of the speech estimate (model in eval mode)"""
        rows: List[dict] = []
        for i, example in enumerate(examples):
            speech, _ = enhance(Waveform(example.x, example.sample_rate), model)
            rows.append({
                "example": i,
                "snr_db_input": example.snr_db,
                "si_snr": si_snr(speech.samples, example.s),
                "si_snri": si_snri(speech.samples, example.s, example.x),
                "snr": snr(speech.samples, example.s),
            })
        frame = pd.DataFrame(rows)
        if not frame.empty:
            log(
                "Evaluation complete: "
                f"examples={len(frame)}, mean_si_snri={frame['si_snri'].mean():.2f}, "
                f"mean_si_snr={frame['si_snr'].mean():.2f}"
            )
        return frame

    def mean_si_snri(self, model, examples: Iterable) -> Optional[float]:
        frame = self.evaluate(model, examples)
        return None if frame.empty else float(frame["si_snri"].mean())


def evaluate(model, examples: Iterable) -> pd.DataFrame:
    return MetricsService().evaluate(model, examples)
