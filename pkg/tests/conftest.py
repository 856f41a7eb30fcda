import numpy as np
import pytest

from app.models.enhancer import build_model
from app.models.presets import get_preset
from app.numcore.tensor import no_grad, tsum, Tensor
from app.services.checkpoint_service import CheckpointService


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


@pytest.fixture
def gradcheck():
    """Worst relative error between backward() and central differences.

    `fn` is a zero-argument closure over `tensors`; its output is contracted
    with fixed random weights so every output entry contributes.
    """

    def check(fn, tensors, h=1e-5, max_entries=None, seed=0):
        sampler = np.random.default_rng(seed)
        with no_grad():
            shape = fn().shape
        weights = Tensor(sampler.standard_normal(shape))

        def objective():
            return tsum(fn() * weights)

        for t in tensors:
            t.zero_grad()
        objective().backward()

        worst = 0.0
        for t in tensors:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            indices = list(np.ndindex(*t.shape))
            if max_entries is not None and len(indices) > max_entries:
                picked = sampler.choice(len(indices), size=max_entries, replace=False)
                indices = [indices[i] for i in picked]
            numeric, expected = [], []
            with no_grad():
                for idx in indices:
                    original = t.data[idx]
                    t.data[idx] = original + h
                    plus = objective().item()
                    t.data[idx] = original - h
                    minus = objective().item()
                    t.data[idx] = original
                    numeric.append((plus - minus) / (2.0 * h))
                    expected.append(analytic[idx])
            worst = max(worst, relative_error(np.array(expected), np.array(numeric)))
        return worst

    return check


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """Directory holding an untrained df-conformer-tiny checkpoint."""
    model = build_model(get_preset("df-conformer-tiny"), seed=0)
    service = CheckpointService()
    ckpt = service.snapshot(model, step=0, preset="df-conformer-tiny")
    directory = tmp_path_factory.mktemp("ckpt") / "step_000000"
    service.save(ckpt, str(directory))
    return str(directory)
