"""Single-file model serialization: JSON envelope, base64 float64 tensors,
integrity checksum, required version field."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import ModelFormatError
from .network import LstmGeoConfig, LstmGeoModel

FORMAT_NAME = "raceimpute-lstm-geo"
FORMAT_VERSION = 1


def _encode_tensor(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(data.shape),
        "dtype": "float64",
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_tensor(obj: dict) -> np.ndarray:
    if obj.get("dtype") != "float64":
        raise ModelFormatError(f"unsupported tensor dtype {obj.get('dtype')!r}")
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype=np.float64).copy()
    return arr.reshape(obj["shape"])


def _payload_checksum(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "checksum"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def save_model(model: LstmGeoModel, path: str | Path) -> None:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": asdict(model.config),
        "metadata": {
            "epochs_run": model.epochs_run,
            "final_val_loss": model.final_val_loss,
        },
        "tensors": {name: _encode_tensor(arr) for name, arr in sorted(model.params.items())},
    }
    doc["checksum"] = _payload_checksum(doc)
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> LstmGeoModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    if doc.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"{path}: not a {FORMAT_NAME} file")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {doc.get('version')!r}")
    if doc.get("checksum") != _payload_checksum(doc):
        raise ModelFormatError(f"{path}: checksum mismatch (file corrupt?)")
    config = LstmGeoConfig(**doc["config"])
    params = {name: _decode_tensor(obj) for name, obj in doc["tensors"].items()}
    meta = doc.get("metadata", {})
    model = LstmGeoModel(
        config=config,
        params=params,
        epochs_run=int(meta.get("epochs_run", 0)),
        final_val_loss=meta.get("final_val_loss"),
    )
    for name, arr in model.named_parameters():  # validates presence + shapes
        if arr.ndim == 0:
            raise ModelFormatError(f"{path}: scalar tensor {name}")
    return model
