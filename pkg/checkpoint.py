# checkpoint.py
"""
Trained-model artifacts.

Deep generators are stored as a small binary container:

    b"WGCK" | uint32 LE version | uint64 LE header length | JSON header | raw '<f8' layer buffers

The header names every layer with its shape and byte offset into the
buffer section. GMM pipelines are plain sorted-key JSON. Both encodings are
byte-identical for identical models.
"""

import json
import logging
import os
import struct
from typing import Dict, Union

import numpy as np

from data import DirectionSet, Scaler, SpeedBins
from ddpm import DiffusionModel, NoiseSchedule
from fm import FlowConfig, FlowModel
from gmm import Gmm, GmmPipeline
from nn import UNetConfig, build_unet, load_arrays, named_arrays
from stats import PcaModel

logger = logging.getLogger(__name__)

MAGIC = b"WGCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

Model = Union[GmmPipeline, DiffusionModel, FlowModel]


class FormatError(ValueError):
    pass


def _vocabulary(model) -> Dict:
    return {
        "speed_bin_edges": list(model.speed_bins.edges),
        "directions": list(model.directions.tokens),
        "altitudes": np.asarray(model.altitudes, dtype=float).tolist(),
    }


def _encode_dgm(model: Union[DiffusionModel, FlowModel]) -> bytes:
    arrays = named_arrays(model.unet)
    layers = []
    offset = 0
    for name, array in arrays.items():
        layers.append({"name": name, "shape": list(array.shape), "offset": offset, "count": int(array.size)})
        offset += array.size * 8
    header = {
        "kind": model.kind,
        "unet": model.config.to_dict(),
        "scaler": model.scaler.to_dict(),
        "layers": layers,
        **_vocabulary(model),
    }
    if isinstance(model, DiffusionModel):
        header["schedule"] = model.schedule.to_dict()
    else:
        header["flow"] = model.flow.to_dict()
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + body


def _decode_dgm(raw: bytes) -> Union[DiffusionModel, FlowModel]:
    if len(raw) < _PREFIX.size:
        raise FormatError("truncated checkpoint prefix")
    _, version, header_len = _PREFIX.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    body = raw[start + header_len:]

    arrays = {}
    for layer in header["layers"]:
        end = layer["offset"] + layer["count"] * 8
        if end > len(body):
            raise FormatError(f"layer {layer['name']} runs past the end of the file")
        arrays[layer["name"]] = np.frombuffer(body, dtype="<f8", count=layer["count"],
                                              offset=layer["offset"]).reshape(layer["shape"]).astype(float)

    unet = build_unet(UNetConfig.from_dict(header["unet"]), seed=0)
    try:
        load_arrays(unet, arrays)
    except (ValueError, RuntimeError) as exc:
        raise FormatError(str(exc)) from None
    unet.eval()
    common = dict(
        scaler=Scaler.from_dict(header["scaler"]),
        altitudes=np.asarray(header["altitudes"], dtype=float),
        speed_bins=SpeedBins(tuple(header["speed_bin_edges"])),
        directions=DirectionSet(tuple(header["directions"])),
    )
    if header["kind"] == "ddpm":
        return DiffusionModel(unet, NoiseSchedule.from_dict(header["schedule"]), **common)
    if header["kind"] == "fm":
        return FlowModel(unet, FlowConfig(**header["flow"]), **common)
    raise FormatError(f"unknown deep model kind {header['kind']!r}")


def _encode_gmm(pipeline: GmmPipeline) -> bytes:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "gmm",
        "scaler": pipeline.scaler.to_dict(),
        "pca": pipeline.pca.to_dict(),
        "gmm": pipeline.gmm.to_dict(),
        "condition_layout": list(pipeline.condition_layout),
        "bic_curve": {str(k): v for k, v in sorted(pipeline.bic_curve.items())},
        "variance_curve": np.asarray(pipeline.variance_curve, dtype=float).tolist(),
        **_vocabulary(pipeline),
    }
    return json.dumps(doc, sort_keys=True, indent=1).encode("utf-8")


def _decode_gmm(raw: bytes) -> GmmPipeline:
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"not a checkpoint: {exc}") from None
    if not isinstance(doc, dict) or doc.get("kind") != "gmm":
        raise FormatError("JSON artifact is not a GMM pipeline")
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('format_version')}")
    return GmmPipeline(
        scaler=Scaler.from_dict(doc["scaler"]),
        pca=PcaModel.from_dict(doc["pca"]),
        gmm=Gmm.from_dict(doc["gmm"]),
        condition_layout=tuple(doc["condition_layout"]),
        altitudes=np.asarray(doc["altitudes"], dtype=float),
        speed_bins=SpeedBins(tuple(doc["speed_bin_edges"])),
        directions=DirectionSet(tuple(doc["directions"])),
        bic_curve={int(k): float(v) for k, v in doc["bic_curve"].items()},
        variance_curve=np.asarray(doc["variance_curve"], dtype=float),
    )


def encode_model(model: Model) -> bytes:
    if isinstance(model, GmmPipeline):
        return _encode_gmm(model)
    if isinstance(model, (DiffusionModel, FlowModel)):
        return _encode_dgm(model)
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def decode_model(raw: bytes) -> Model:
    if raw[:len(MAGIC)] == MAGIC:
        return _decode_dgm(raw)
    return _decode_gmm(raw)


def save_model(model: Model, path) -> str:
    path = os.fspath(path)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    raw = encode_model(model)
    with open(path, "wb") as fh:
        fh.write(raw)
    logger.info("[save_model] Wrote %s checkpoint (%d bytes) to %s", getattr(model, "kind", "gmm"), len(raw), path)
    return path


def load_model(path) -> Model:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    with open(path, "rb") as fh:
        raw = fh.read()
    model = decode_model(raw)
    logger.info("[load_model] Loaded %s checkpoint from %s", getattr(model, "kind", "gmm"), path)
    return model
