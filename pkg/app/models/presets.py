"""Named model configurations addressable by string id."""

from __future__ import annotations

from typing import Callable, Dict, List

from app.models.config import AttentionConfig, BlockConfig, FilterbankConfig, ModelConfig, RunConfig
from app.utils.helper import ConfigError

# Published sizes (millions of parameters) used by the parity check
REFERENCE_PARAMS_M: Dict[str, float] = {
    "conformer-4": 3.74,
    "f-conformer-4": 3.59,
    "f-conformer-8": 8.83,
    "df-conformer-8": 8.83,
    "tdcn++": 8.75,
    "conv-tasformer": 8.71,
    "idf-conformer-8": 17.8,
    "idf-conformer-12": 37.0,
    "itdcn++": 17.6,
    "iconv-tasformer": 17.5,
    "conformer-4-stft": 3.82,
    "conformer-8-stft": 9.30,
}


def _conformer(name: str, d_b: int, num_blocks: int, kind: str, attention: str, heads: int = 6,
               dilated: bool = True, stft: bool = False, iterative: bool = False,
               sample_rate: int = 16000, num_random_features: int = 384, cycle: int = 4) -> ModelConfig:
    attention_cfg = AttentionConfig(d_model=d_b, heads=heads, num_random_features=num_random_features, kind=attention)
    return ModelConfig(
        name=name,
        block=BlockConfig(kind=kind, d_b=d_b, attention=attention_cfg, dilated=dilated),
        num_blocks=num_blocks,
        dilation_cycle=cycle,
        filterbank=FilterbankConfig(kind="stft" if stft else "trainable", sample_rate=sample_rate),
        iterative=iterative,
    )


def _tdcn(name: str, iterative: bool = False) -> ModelConfig:
    return ModelConfig(
        name=name,
        block=BlockConfig(kind="tdcn", d_b=256, d_c=512, kernel_size=3),
        num_blocks=32,
        dilation_cycle=8,
        iterative=iterative,
    )


def _conv_tasformer(name: str, iterative: bool = False) -> ModelConfig:
    # Attention runs on the D_c section through a 128-wide projection with 8 heads; full-width
    # 512 attention cannot split into 6 heads and would more than double the model parameters.
    attention_cfg = AttentionConfig(d_model=512, attention_dim=128, heads=8, num_random_features=128, kind="favor")
    return ModelConfig(
        name=name,
        block=BlockConfig(kind="conv_tasformer", d_b=256, d_c=512, kernel_size=3, attention=attention_cfg),
        num_blocks=16,
        dilation_cycle=8,
        iterative=iterative,
    )


def _tiny(name: str = "df-conformer-tiny") -> ModelConfig:
    return _conformer(name, d_b=32, num_blocks=2, kind="df_conformer", attention="favor", heads=2,
                      sample_rate=8000, num_random_features=32, cycle=2)


PRESETS: Dict[str, Callable[[], ModelConfig]] = {
    "tdcn++": lambda: _tdcn("tdcn++"),
    "itdcn++": lambda: _tdcn("itdcn++", iterative=True),
    "conv-tasformer": lambda: _conv_tasformer("conv-tasformer"),
    "iconv-tasformer": lambda: _conv_tasformer("iconv-tasformer", iterative=True),
    "conformer-4": lambda: _conformer("conformer-4", 192, 4, "conformer", "softmax"),
    "conformer-4-stft": lambda: _conformer("conformer-4-stft", 192, 4, "conformer", "softmax", stft=True),
    "f-conformer-4": lambda: _conformer("f-conformer-4", 192, 4, "df_conformer", "favor", dilated=False),
    "conformer-8-stft": lambda: _conformer("conformer-8-stft", 216, 8, "conformer", "softmax", stft=True),
    "f-conformer-8": lambda: _conformer("f-conformer-8", 216, 8, "df_conformer", "favor", dilated=False),
    "df-conformer-8": lambda: _conformer("df-conformer-8", 216, 8, "df_conformer", "favor"),
    "idf-conformer-8": lambda: _conformer("idf-conformer-8", 216, 8, "df_conformer", "favor", iterative=True),
    "idf-conformer-12": lambda: _conformer("idf-conformer-12", 256, 12, "df_conformer", "favor", heads=8,
                                           iterative=True),
    "df-conformer-tiny": _tiny,
}


def list_presets() -> List[str]:
    return sorted(PRESETS)


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError("preset", f"unknown preset '{name}'; choose one of {', '.join(list_presets())}") from None


def model_config_from_run(run: RunConfig) -> ModelConfig:
    """Apply the run file's architecture overrides to its preset."""
    cfg = get_preset(run.preset)
    block = cfg.block.model_dump()
    attention = block.pop("attention")
    filterbank = cfg.filterbank.model_dump()
    top = {"num_blocks": cfg.num_blocks, "dilation_cycle": cfg.dilation_cycle}

    for key in ("num_blocks", "dilation_cycle"):
        if getattr(run, key) is not None:
            top[key] = getattr(run, key)
    if run.d_b is not None:
        block["d_b"] = run.d_b
        if attention is not None and block["kind"] in ("conformer", "df_conformer"):
            attention["d_model"] = run.d_b
            attention["attention_dim"] = None
    if run.d_c is not None:
        block["d_c"] = run.d_c
        if attention is not None and block["kind"] == "conv_tasformer" and block["tasformer_insertion"] == "conv":
            attention["d_model"] = run.d_c
    if attention is not None:
        for run_key, key in (("heads", "heads"), ("num_random_features", "num_random_features"),
                             ("attention_kind", "kind"), ("redraw_interval", "redraw_interval")):
            if getattr(run, run_key) is not None:
                attention[key] = getattr(run, run_key)
        attention["rng_seed"] = run.seed
    if run.sample_rate is not None:
        filterbank["sample_rate"] = run.sample_rate
    if run.filterbank_kind is not None and run.filterbank_kind != filterbank["kind"]:
        filterbank = {"kind": run.filterbank_kind, "sample_rate": filterbank["sample_rate"]}

    try:
        return ModelConfig(
            name=cfg.name,
            block=BlockConfig(**block, attention=AttentionConfig(**attention) if attention else None),
            filterbank=FilterbankConfig(**filterbank),
            iterative=cfg.iterative,
            **top,
        )
    except ValueError as exc:
        raise ConfigError(run.preset, str(exc)) from exc
