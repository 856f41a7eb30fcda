import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.models.config import ModelConfig
from app.models.enhancer import Enhancer, build_model
from app.utils.helper import CheckpointError, log

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.txt"
PARAMS_NAME = "params.bin"
EMA_NAME = "ema.bin"
BLOB_DTYPE = np.dtype("<f4")


@dataclass
class TensorRecord:
    name: str
    kind: str  # "param" or "buffer"
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def nbytes(self) -> int:
        return self.size * BLOB_DTYPE.itemsize


@dataclass
class Checkpoint:
    """Raw and EMA parameter sets plus buffers, with the step they were taken at"""
    preset: str
    step: int
    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    ema: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    path: Optional[str] = None


class CheckpointService:
    """Saves and restores checkpoints as a text manifest next to float32 little-endian blobs"""

    def snapshot(self, model: Enhancer, step: int, preset: str) -> Checkpoint:
        params = {name: p.data.copy() for name, p in model.named_parameters()}
        ema = {
            name: (p.ema_shadow if p.ema_shadow is not None else p.data).copy()
            for name, p in model.named_parameters()
        }
        buffers = {name: np.array(value, copy=True) for name, value in model.named_buffers()}
        return Checkpoint(preset=preset, step=step, model_config=model.cfg, params=params, ema=ema, buffers=buffers)

    def _records(self, ckpt: Checkpoint) -> List[TensorRecord]:
        records, offset = [], 0
        for kind, tensors in (("param", ckpt.params), ("buffer", ckpt.buffers)):
            for name, value in tensors.items():
                record = TensorRecord(name=name, kind=kind, shape=tuple(np.shape(value)), offset=offset)
                records.append(record)
                offset += record.nbytes
        return records

    def save(self, ckpt: Checkpoint, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        records = self._records(ckpt)
        lines = [
            f"format_version = {FORMAT_VERSION}",
            f"preset = {ckpt.preset}",
            f"step = {ckpt.step}",
            f"model_config = {ckpt.model_config.model_dump_json()}",
            "# tensor <name> <kind> <dtype> <byte_offset> <shape>",
        ]
        for r in records:
            lines.append(f"tensor {r.name} {r.kind} float32 {r.offset} {','.join(str(d) for d in r.shape) or 'scalar'}")

        for blob_name, source in ((PARAMS_NAME, ckpt.params), (EMA_NAME, ckpt.ema)):
            with open(os.path.join(directory, blob_name), "wb") as fh:
                for r in records:
                    value = source[r.name] if r.kind == "param" else ckpt.buffers[r.name]
                    fh.write(np.ascontiguousarray(value, dtype=BLOB_DTYPE).tobytes())
        with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

        ckpt.path = directory
        log(f"Checkpoint saved: path={directory}, step={ckpt.step}, tensors={len(records)}")
        return directory

    def _parse_manifest(self, text: str) -> Tuple[Dict[str, str], List[TensorRecord]]:
        header: Dict[str, str] = {}
        records: List[TensorRecord] = []
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("tensor "):
                parts = line.split()
                if len(parts) != 6:
                    raise CheckpointError(f"Malformed tensor record on manifest line {number}")
                _, name, kind, dtype, offset, shape = parts
                if dtype != "float32" or kind not in ("param", "buffer"):
                    raise CheckpointError(f"Unsupported record on manifest line {number}: {kind}/{dtype}")
                dims = () if shape == "scalar" else tuple(int(d) for d in shape.split(","))
                records.append(TensorRecord(name=name, kind=kind, shape=dims, offset=int(offset)))
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointError(f"Manifest line {number} is neither a record nor key = value")
            header[key.strip()] = value.strip()
        return header, records

    def _read_blob(self, path: str, records: List[TensorRecord]) -> Dict[str, np.ndarray]:
        with open(path, "rb") as fh:
            data = fh.read()
        expected = sum(r.nbytes for r in records)
        if len(data) != expected:
            raise CheckpointError(f"{os.path.basename(path)} holds {len(data)} bytes, manifest expects {expected}")
        out = {}
        for r in records:
            values = np.frombuffer(data, dtype=BLOB_DTYPE, count=r.size, offset=r.offset)
            out[r.name] = values.reshape(r.shape).astype(np.float64)
        return out

    def load(self, directory: str) -> Checkpoint:
        manifest = os.path.join(directory, MANIFEST_NAME)
        if not os.path.exists(manifest):
            raise CheckpointError(f"No checkpoint manifest in {directory}")
        with open(manifest, "r", encoding="utf-8") as fh:
            header, records = self._parse_manifest(fh.read())
        try:
            version = int(header["format_version"])
            preset = header["preset"]
            step = int(header["step"])
            model_config = ModelConfig.model_validate_json(header["model_config"])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"Invalid manifest header: {exc}") from exc
        if version != FORMAT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint format version {version}")

        raw = self._read_blob(os.path.join(directory, PARAMS_NAME), records)
        ema = self._read_blob(os.path.join(directory, EMA_NAME), records)
        kinds = {r.name: r.kind for r in records}
        return Checkpoint(
            preset=preset,
            step=step,
            model_config=model_config,
            params={k: v for k, v in raw.items() if kinds[k] == "param"},
            ema={k: v for k, v in ema.items() if kinds[k] == "param"},
            buffers={k: v for k, v in raw.items() if kinds[k] == "buffer"},
            path=directory,
        )

    def restore(self, ckpt: Checkpoint, use_ema: bool = True, dtype=None) -> Enhancer:
        """Build the checkpoint's model and load EMA (default) or raw weights into it"""
        model = build_model(ckpt.model_config, seed=0, dtype=dtype)
        model.load_state_dict(ckpt.ema if use_ema else ckpt.params)
        model.load_buffers(ckpt.buffers)
        for name, param in model.named_parameters():
            param.ema_shadow = np.array(ckpt.ema[name], dtype=param.tensor.dtype)
        model.eval()
        log(f"Model restored: preset={ckpt.preset}, step={ckpt.step}, weights={'ema' if use_ema else 'raw'}")
        return model

    def load_model(self, directory: str, use_ema: bool = True) -> Enhancer:
        return self.restore(self.load(directory), use_ema=use_ema)
