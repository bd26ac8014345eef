"""Checkpoints (versioned JSON of named arrays) and the report JSON writer."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..calibrate import BinaryCalib, ConfusionMatrix
from ..disentangle import Vae
from ..errors import BagError, StorageError
from ..model import BagModel
from ..numkit import Layer, Mlp
from ..predictor import DecomposedHead

FORMAT = "bagdg-checkpoint"
VERSION = 1


def _num(v: float) -> str:
    if math.isnan(v) or math.isinf(v):
        return "null"
    return "%.17g" % v


def dump_json(obj, indent: int = 1, _level: int = 0) -> str:
    """JSON text with every float written to 17 significant digits.

    Key order is preserved, so equal inputs give equal bytes.
    """
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dump_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dump_json(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dump_json(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(float(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, np.ndarray):
        return dump_json(obj.tolist(), indent, _level)
    return json.dumps(obj)


def _mlp_layout(mlp: Mlp) -> list[str]:
    return list(mlp.activations)


def _mlp_from(arrays: dict, prefix: str, activations: list[str]) -> Mlp:
    layers = []
    for i, act in enumerate(activations):
        layers.append(Layer(arrays[f"{prefix}.{i}.weight"], arrays[f"{prefix}.{i}.bias"], act))
    return Mlp(tuple(layers))


def _calib_json(calib):
    if calib is None:
        return None
    if isinstance(calib, BinaryCalib):
        return {"kind": "binary", "h0": calib.h0, "h1": calib.h1, "counts": calib.counts.tolist()}
    return {"kind": "confusion", "eps": calib.eps.tolist(), "counts": calib.counts.tolist()}


def _calib_from(obj):
    if obj is None:
        return None
    if obj["kind"] == "binary":
        return BinaryCalib(float(obj["h0"]), float(obj["h1"]), np.array(obj["counts"]))
    if obj["kind"] == "confusion":
        return ConfusionMatrix(np.array(obj["eps"], dtype=np.float64), np.array(obj["counts"]))
    raise StorageError(f"unknown calibration kind {obj['kind']!r}")


def _arrays_json(named: dict) -> dict:
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()} for k, v in sorted(named.items())}


def save_model(path, model, config: dict | None = None, adapted: bool = False) -> None:
    """Write a BagModel or a plain Mlp (ERM baseline) to ``path``."""
    if isinstance(model, BagModel):
        layout = {
            "kind": "bag",
            "n_c": model.vae.n_c,
            "beta": model.vae.beta,
            "encoder": _mlp_layout(model.vae.encoder),
            "decoder": _mlp_layout(model.vae.decoder),
            "invariant": _mlp_layout(model.head.invariant),
            "gate": _mlp_layout(model.head.gate),
            "experts": [_mlp_layout(ex) for ex in model.head.experts],
        }
        arrays = model.named()
        calib = _calib_json(model.calib)
    elif isinstance(model, Mlp):
        layout = {"kind": "mlp", "net": _mlp_layout(model)}
        arrays = model.named("net")
        calib = None
    else:
        raise StorageError(f"cannot checkpoint a {type(model).__name__}")
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "layout": layout,
        "adapted": bool(adapted),
        "calibration": calib,
        "config": config or {},
        "arrays": _arrays_json(arrays),
    }
    try:
        # json's float repr is the shortest string that round-trips exactly
        Path(path).write_text(json.dumps(doc, separators=(",", ":")))
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load_model(path):
    """Returns (model, metadata) where metadata holds config, adapted flag."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise StorageError(f"{path} is not a complete checkpoint (truncated or corrupt): {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise StorageError(f"{path} is not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise StorageError(f"{path} has checkpoint version {doc.get('version')}, this build reads {VERSION}")
    try:
        arrays = {}
        for name, spec in doc["arrays"].items():
            data = np.array(spec["data"], dtype=np.float64)
            shape = tuple(spec["shape"])
            if data.size != int(np.prod(shape)):
                raise StorageError(f"array {name} holds {data.size} values, shape {shape} needs {int(np.prod(shape))}")
            arrays[name] = data.reshape(shape)
        lay = doc["layout"]
        if lay["kind"] == "mlp":
            model = _mlp_from(arrays, "net", lay["net"])
        elif lay["kind"] == "bag":
            vae = Vae(_mlp_from(arrays, "encoder", lay["encoder"]), _mlp_from(arrays, "decoder", lay["decoder"]), int(lay["n_c"]), float(lay["beta"]))
            head = DecomposedHead(
                _mlp_from(arrays, "invariant", lay["invariant"]),
                arrays["prior"],
                arrays["embeddings"],
                _mlp_from(arrays, "gate", lay["gate"]),
                tuple(_mlp_from(arrays, f"expert{i}", acts) for i, acts in enumerate(lay["experts"])),
            )
            model = BagModel(vae, head, _calib_from(doc.get("calibration")))
        else:
            raise StorageError(f"unknown model kind {lay['kind']!r}")
    except StorageError:
        raise
    except (KeyError, TypeError, ValueError, BagError) as exc:
        raise StorageError(f"{path}: checkpoint contents are inconsistent: {exc}") from exc
    meta = {"config": doc.get("config", {}), "adapted": bool(doc.get("adapted", False))}
    return model, meta
