#!/usr/bin/env python3
"""
Overfit smoke run for the tiny DF-Conformer.

This script:
1. Trains the configured preset (default configs/overfit.conf) on a fixed synthetic set
2. Compares the step-1 training loss with the mean of the last 50 steps
3. Evaluates SI-SNRi of the EMA weights on the training examples

Exit code 0 when the loss fell by at least --min-drop-db dB and the training-example
SI-SNRi is above --min-si-snri-db dB, 1 otherwise.
Takes several minutes on one CPU core.
"""

import argparse
import os
import sys
import tempfile
from pathlib import Path
from typing import List, Optional

import pandas as pd

# Make the repository root importable when run as a plain script
sys.path.insert(0, str(Path(__file__).resolve().parents[2]))

from app.cli import load_run_config
from app.models.presets import model_config_from_run
from app.numcore.tensor import set_default_dtype
from app.services.metrics_service import MetricsService
from app.services.synth_service import SynthDataSource
from app.services.trainer_service import TrainerService, ema_weights
from app.utils.helper import log


def overfit_failures(drop_db: float, train_si_snri: Optional[float], min_drop_db: float = 10.0,
                     min_si_snri_db: float = 5.0) -> List[str]:
    failures = []
    if drop_db < min_drop_db:
        failures.append(f"Loss dropped by {drop_db:.2f} dB, expected at least {min_drop_db} dB")
    if train_si_snri is None or not train_si_snri > min_si_snri_db:
        failures.append(f"Training-example SI-SNRi is {train_si_snri}, expected above {min_si_snri_db} dB")
    return failures


def main() -> int:
    repo = Path(__file__).resolve().parents[2]
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default=str(repo / "configs" / "overfit.conf"))
    parser.add_argument("--out", help="output directory (default: a temporary directory)")
    parser.add_argument("--min-drop-db", type=float, default=10.0)
    parser.add_argument("--min-si-snri-db", type=float, default=5.0)
    args = parser.parse_args()

    os.environ.setdefault("DFC_REPRODUCIBLE", "1")
    run = load_run_config(args.config)
    set_default_dtype(run.dtype)
    model_cfg = model_config_from_run(run)
    out_dir = args.out or tempfile.mkdtemp(prefix="dfc-overfit-")
    log(f"Overfit run: preset={run.preset}, steps={run.steps}, examples={run.num_examples}, out_dir={out_dir}")

    data = SynthDataSource(run.batch_size, run.clip_seconds, model_cfg.filterbank.sample_rate,
                           seed=run.data_seed, num_examples=run.num_examples,
                           snr_range=(run.snr_min_db, run.snr_max_db))
    trainer = TrainerService(model_cfg, run.train_config(), data, out_dir, preset=run.preset,
                             validation_examples=data.fixed[:run.val_examples])
    try:
        for ckpt in trainer.train_loop():
            log(f"Checkpoint ready: step={ckpt.step}, path={ckpt.path}")
    finally:
        data.close()

    metrics = pd.read_csv(os.path.join(out_dir, "metrics.csv"))
    first = float(metrics["loss"].iloc[0])
    last = float(metrics["loss"].tail(50).mean())
    drop = first - last
    with ema_weights(trainer.model):
        train_si_snri = MetricsService().mean_si_snri(trainer.model, data.fixed)

    log(f"Overfit result: first_loss={first:.2f}, last_loss={last:.2f}, drop_db={drop:.2f}, "
        f"train_si_snri={train_si_snri}")
    failures = overfit_failures(drop, train_si_snri, args.min_drop_db, args.min_si_snri_db)
    for failure in failures:
        log(failure, "ERROR")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
