"""Command line: train, enhance, eval, bench-rtf, params, dump-attention, serve.

Exit codes: 0 success, 2 bad input/config/preset/range, 3 non-finite training abort.
"""

import argparse
import os
import sys
from typing import List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from app import BLAS_THREAD_VARS
from app.models.attention import attention_summary, dump_attention_matrix
from app.models.config import RunConfig
from app.models.enhancer import enhance, estimate_macs_per_frame, param_breakdown
from app.models.presets import REFERENCE_PARAMS_M, get_preset, list_presets, model_config_from_run
from app.numcore.tensor import no_grad, set_default_dtype
from app.services.bench_service import BenchService, rtf_ratio, rtf_trend, scaling_ratio, write_csv
from app.services.checkpoint_service import CheckpointService
from app.services.metrics_service import MetricsService
from app.services.synth_service import SynthDataSource, validation_set
from app.services.trainer_service import TrainerService
from app.services.wav_service import WavService
from app.utils.helper import (
    CheckpointError,
    ConfigError,
    DimensionError,
    DumpLimitError,
    NonFiniteError,
    TrainingDivergedError,
    WavFormatError,
    log,
)

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_DIVERGED = 3


def parse_run_config_text(text: str) -> RunConfig:
    """Flat `key = value` lines; `#` starts a comment; unknown keys raise ConfigError(key)."""
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {number}", f"expected 'key = value', got '{raw.strip()}'")
        if key not in RunConfig.model_fields:
            raise ConfigError(key, "unknown key")
        values[key] = value
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = str(first["loc"][0]) if first.get("loc") else "config"
        raise ConfigError(key, first.get("msg", str(exc))) from exc


def load_run_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run_config_text(fh.read())


# ---------- commands ----------

def cmd_train(args) -> int:
    run = load_run_config(args.config) if args.config else RunConfig()
    updates = {}
    if args.preset:
        updates["preset"] = args.preset
    if args.seed is not None:
        updates["seed"] = args.seed
    if updates:
        run = RunConfig(**{**run.model_dump(), **updates})
    set_default_dtype(run.dtype)
    model_cfg = model_config_from_run(run)
    train_cfg = run.train_config()
    sample_rate = model_cfg.filterbank.sample_rate
    data = SynthDataSource(run.batch_size, run.clip_seconds, sample_rate, seed=run.data_seed,
                           num_examples=run.num_examples, snr_range=(run.snr_min_db, run.snr_max_db))
    validation = validation_set(run.clip_seconds, sample_rate, count=run.val_examples,
                                snr_range=(run.snr_min_db, run.snr_max_db))
    trainer = TrainerService(model_cfg, train_cfg, data, args.out, preset=run.preset, validation_examples=validation)
    try:
        for ckpt in trainer.train_loop():
            log(f"Checkpoint ready: step={ckpt.step}, path={ckpt.path}")
    finally:
        data.close()
    return EXIT_OK


def _load_model(checkpoint: str, raw: bool = False):
    return CheckpointService().load_model(checkpoint, use_ema=not raw)


def cmd_enhance(args) -> int:
    model = _load_model(args.checkpoint, args.raw_weights)
    wav = WavService()
    mixture = wav.read(args.input, expected_rate=model.cfg.filterbank.sample_rate)
    speech, noise = enhance(mixture, model)
    wav.write(args.out_speech, speech)
    wav.write(args.out_noise, noise)
    log(f"Enhanced: input={args.input}, samples={mixture.num_samples}, speech={args.out_speech}, noise={args.out_noise}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint, args.raw_weights)
    examples = validation_set(args.seconds, model.cfg.filterbank.sample_rate, count=args.examples)
    frame = MetricsService().evaluate(model, examples)
    if args.out:
        write_csv(frame, args.out)
    print(frame[["si_snr", "si_snri", "snr"]].describe().loc[["mean", "std", "min", "max"]].to_string())
    return EXIT_OK


def cmd_bench_rtf(args) -> int:
    threads = {var: os.environ.get(var, "unset") for var in BLAS_THREAD_VARS}
    if set(threads.values()) != {"1"}:
        log(f"Benchmark is not pinned to one BLAS thread: {threads}", "WARNING")
    print(f"blas threads: {threads['OMP_NUM_THREADS']}")
    bench = BenchService(reps=args.reps, warmup=args.warmup, seed=args.seed or 0)
    if args.attention_only:
        frame = bench.attention_sweep(frame_counts=args.frames)
        for kind in frame["kind"].unique():
            print(f"{kind}: time ratio {scaling_ratio(frame, kind):.2f}")
    else:
        presets = [p for item in args.preset for p in item.split(",") if p]
        for name in presets:
            get_preset(name)
        frame = bench.rtf_sweep(presets, args.durations, num_blocks=args.num_blocks)
        for name in presets:
            print(f"{name}: rtf ratio {rtf_ratio(frame, name):.2f}, spearman {rtf_trend(frame, name):.3f}")
    if args.out:
        write_csv(frame, args.out)
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = get_preset(args.preset)
    frame = param_breakdown(cfg)
    total = int(frame["params"].sum())
    print(frame.to_string(index=False))
    reference = REFERENCE_PARAMS_M.get(args.preset)
    line = f"total: {total:,} ({total / 1e6:.2f} M)"
    if reference:
        line += f"  reference: {reference} M  deviation: {100.0 * (total / 1e6 - reference) / reference:+.1f}%"
    print(line)
    print(f"estimated MACs/frame: {estimate_macs_per_frame(cfg):,.0f}")
    if args.out:
        frame.to_csv(args.out, index=False)
    return EXIT_OK


def cmd_dump_attention(args) -> int:
    model = _load_model(args.checkpoint, args.raw_weights)
    wav = WavService()
    mixture = wav.read(args.input, expected_rate=model.cfg.filterbank.sample_rate)
    with no_grad():
        attention, frames = model.attention_input(mixture.samples, args.layer)
        matrix = dump_attention_matrix(frames, attention, head=args.head)
        _, _, values = attention.project(frames)
        streamed = attention.head_outputs(frames).data[..., args.head, :, :]
    gap = float(np.max(np.abs(matrix @ values.data[..., args.head, :, :] - streamed)))
    if gap > 1e-8:
        log(f"Attention dump disagrees with streaming output: max_abs_diff={gap:.3e}", "WARNING")
    summary = attention_summary(matrix)
    pd.DataFrame(matrix, columns=[str(i) for i in range(matrix.shape[-1])]).to_csv(args.out, index=False)
    log(
        "Attention dumped: "
        f"layer={args.layer}, head={args.head}, frames={matrix.shape[-1]}, max_abs_diff={gap:.2e}, "
        f"entropy={summary.mean_entropy:.3f}, diagonal_mass={summary.diagonal_mass:.3f}, out={args.out}"
    )
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    if args.checkpoint:
        os.environ["DFC_CHECKPOINT"] = args.checkpoint
    uvicorn.run("app.main:app", host=args.host, port=args.port)
    return EXIT_OK


# ---------- parser ----------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfconformer", description="DF-Conformer speech enhancement")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on synthetic mixtures")
    p.add_argument("--config", help="run config file (key = value lines)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics.csv")
    p.add_argument("--preset", help="override the config's preset")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    def with_checkpoint(p):
        p.add_argument("--checkpoint", required=True, help="checkpoint directory")
        p.add_argument("--raw-weights", action="store_true", help="use raw instead of EMA weights")

    p = sub.add_parser("enhance", help="split a WAV file into speech and noise stems")
    with_checkpoint(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-speech", required=True)
    p.add_argument("--out-noise", required=True)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="SI-SNR/SI-SNRi/SNR on the pinned synthetic set")
    with_checkpoint(p)
    p.add_argument("--examples", type=int, default=32)
    p.add_argument("--seconds", type=float, default=0.5)
    p.add_argument("--out", help="CSV report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-rtf", help="real-time factor vs input duration")
    p.add_argument("--preset", action="append", default=[], help="preset id(s), repeatable or comma separated")
    p.add_argument("--durations", type=float, nargs="+", default=[float(d) for d in range(1, 11)])
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--num-blocks", type=int, help="reduced depth for quick orderings")
    p.add_argument("--attention-only", action="store_true", help="time only the stacked attention path")
    p.add_argument("--frames", type=int, nargs="+", default=[1000, 4000])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV file (appended)")
    p.set_defaults(func=cmd_bench_rtf)

    p = sub.add_parser("params", help="parameter count with per-module breakdown")
    p.add_argument("--preset", required=True, help=f"one of: {', '.join(list_presets())}")
    p.add_argument("--out", help="CSV breakdown")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("dump-attention", help="write one block/head attention matrix as CSV")
    with_checkpoint(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--layer", type=int, required=True, help="0-based block index")
    p.add_argument("--head", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("serve", help="run the HTTP API")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=int(os.getenv("PORT", "8080")))
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        log(f"Configuration rejected: key={exc.key}", "ERROR")
        return EXIT_BAD_INPUT
    except (TrainingDivergedError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (WavFormatError, CheckpointError, DumpLimitError, DimensionError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
