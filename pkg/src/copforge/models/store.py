"""Versioned on-disk model container.

A model file is a single JSON document: format tag, version, estimator
hyperparameters, parameter arrays (base64 of little-endian float64 bytes,
C order, so round trips are bit-exact), plus the optional feature
standardization stats and feature-layout descriptor a pipeline attaches
before saving.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from ..core import ParseError, VersionMismatch
from .linear import LinearCopRegressor
from .lstm import LstmCopRegressor, LstmParams

FORMAT_TAG = "copforge-model"
FORMAT_VERSION = 1


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii"),
    }


def _decode_array(obj: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(obj["data"])
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"bad array blob in model file: {exc}") from exc


def save_model(model, path: Path | str) -> Path:
    """Serialize a fitted estimator; load_model inverts it bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    if isinstance(model, LinearCopRegressor):
        kind = "linear"
        arrays = {
            "coef": _encode_array(model.coef_),
            "intercept": _encode_array(model.intercept_),
        }
        extra = {}
    elif isinstance(model, LstmCopRegressor):
        kind = "lstm"
        arrays = {name: _encode_array(a) for name, a in model.params_.arrays().items()}
        arrays["target_center"] = _encode_array(model.target_center_)
        extra = {"target_scale": float(model.target_scale_)}
    else:
        raise ParseError(f"cannot serialize model of type {type(model).__name__}")

    stats = None
    if getattr(model, "feature_mean_", None) is not None:
        stats = {
            "mean": _encode_array(model.feature_mean_),
            "std": _encode_array(model.feature_std_),
        }
    doc = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "kind": kind,
        "params": model.get_params(),
        "n_features_in": int(model.n_features_in_),
        "arrays": arrays,
        "feature_stats": stats,
        "descriptor": getattr(model, "descriptor_", None),
        **extra,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_model(path: Path | str):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read model file {path}: {exc}") from exc
    if doc.get("format") != FORMAT_TAG:
        raise ParseError(f"{path} is not a {FORMAT_TAG} file")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: version {doc.get('version')!r}, supported {FORMAT_VERSION}"
        )

    try:
        kind = doc["kind"]
        params = doc["params"]
        arrays = doc["arrays"]
        if kind == "linear":
            model = LinearCopRegressor(**params)
            model.coef_ = _decode_array(arrays["coef"])
            model.intercept_ = _decode_array(arrays["intercept"])
        elif kind == "lstm":
            model = LstmCopRegressor(**params)
            model.params_ = LstmParams(
                W=_decode_array(arrays["W"]),
                R=_decode_array(arrays["R"]),
                b=_decode_array(arrays["b"]),
                w_out=_decode_array(arrays["w_out"]),
                b_out=_decode_array(arrays["b_out"]),
            )
            model.target_center_ = _decode_array(arrays["target_center"])
            model.target_scale_ = float(doc["target_scale"])
        else:
            raise ParseError(f"{path}: unknown model kind {kind!r}")
        model.loss_curve_ = []
        model.n_features_in_ = int(doc["n_features_in"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed model file: {exc}") from exc

    if doc.get("feature_stats"):
        model.feature_mean_ = _decode_array(doc["feature_stats"]["mean"])
        model.feature_std_ = _decode_array(doc["feature_stats"]["std"])
    if doc.get("descriptor"):
        model.descriptor_ = doc["descriptor"]
    return model
