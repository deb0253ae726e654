"""JSON documents for models, solutions and strategy profiles.

Every document is an object with ``"schema": 1`` and a ``"kind"`` tag.
Tensors are row-major nested lists.  Loaders reject unknown fields, so a
typo in a hand-written file fails loudly instead of being ignored.  The
field lists live in ``docs/schemas.md``.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import SchemaError
from .model import GameModel, LyapunovCertificate, StrategyProfile

SCHEMA_VERSION = 1

_FIELDS = {
    "model": ({"rate", "cost"}, {"alpha", "theta_cap", "ref_state", "certificate", "name"}),
    "certificate": ({"W", "delta", "b", "C"}, set()),
    "ergodic_solution": ({"rho", "psi_hat", "v1", "v2"},
                         {"truncation_level", "ref_state", "diagnostics"}),
    "discounted_solution": ({"theta", "psi", "v1", "v2", "epsilon", "alpha"}, {"diagnostics"}),
    "profile": ({"v1", "v2"}, {"dt"}),
}


def _check(doc: Any, kind: str, nested: bool = False) -> dict:
    if not isinstance(doc, dict):
        raise SchemaError(f"{kind} document must be a JSON object")
    required, optional = _FIELDS[kind]
    header = set() if nested else {"schema", "kind"}
    if not nested:
        if doc.get("schema") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema {doc.get('schema')!r}, expected {SCHEMA_VERSION}")
        if doc.get("kind") != kind:
            raise SchemaError(f"expected kind {kind!r}, got {doc.get('kind')!r}")
    keys = set(doc)
    unknown = keys - required - optional - header
    if unknown:
        raise SchemaError(f"unknown fields in {kind}: {sorted(unknown)}")
    missing = required - keys
    if missing:
        raise SchemaError(f"missing fields in {kind}: {sorted(missing)}")
    return doc


def _array(doc: dict, key: str, ndim: Optional[int] = None) -> np.ndarray:
    try:
        a = np.array(doc[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"field {key!r} is not a rectangular numeric array: {exc}") from None
    if ndim is not None and a.ndim != ndim:
        raise SchemaError(f"field {key!r} must have {ndim} dimensions, got {a.ndim}")
    return a


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist()) if x.dtype.kind == "f" and not np.isfinite(x).all() else x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        # strict JSON has no inf/nan literals
        return repr(x)
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


_INNER_LIST = re.compile(r"\[[^\[\]{}]*\]")


def dumps(doc: dict) -> str:
    """Indented JSON with innermost lists kept on one line.

    Floats are written with ``repr`` precision, so a reloaded document is
    bit-identical.
    """
    text = json.dumps(_jsonable(doc), indent=1, allow_nan=False)
    # raw newlines never occur inside JSON strings, so this only touches layout
    return _INNER_LIST.sub(_one_line, text)


def _one_line(m: re.Match) -> str:
    inner = m.group(0)[1:-1].strip()
    return "[" + re.sub(r",\s*\n\s*", ", ", inner) + "]"


def read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc}") from None


def write_json(path, doc: dict) -> None:
    Path(path).write_text(dumps(doc) + "\n")


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- models -------------------------------------------------------------------


def certificate_to_dict(cert: LyapunovCertificate) -> dict:
    return {"W": cert.W, "delta": cert.delta, "b": cert.b, "C": list(cert.C)}


def certificate_from_dict(doc: dict) -> LyapunovCertificate:
    _check(doc, "certificate", nested=True)
    return LyapunovCertificate(_array(doc, "W", 1), float(doc["delta"]), float(doc["b"]),
                               tuple(int(c) for c in doc["C"]))


def model_to_dict(model: GameModel, cert: Optional[LyapunovCertificate] = None,
                  name: Optional[str] = None) -> dict:
    doc = {"schema": SCHEMA_VERSION, "kind": "model"}
    if name:
        doc["name"] = name
    doc.update(rate=model.rate, cost=model.cost, alpha=model.alpha,
               theta_cap=model.theta_cap, ref_state=model.ref_state)
    if cert is not None:
        doc["certificate"] = certificate_to_dict(cert)
    return doc


def model_from_dict(doc: dict) -> tuple[GameModel, Optional[LyapunovCertificate]]:
    _check(doc, "model")
    kw = {k: doc[k] for k in ("alpha", "theta_cap", "ref_state") if k in doc}
    model = GameModel(_array(doc, "rate", 4), _array(doc, "cost", 3), **kw)
    cert = certificate_from_dict(doc["certificate"]) if doc.get("certificate") is not None else None
    return model, cert


def load_model(path) -> tuple[GameModel, Optional[LyapunovCertificate]]:
    return model_from_dict(read_json(path))


def save_model(path, model: GameModel, cert: Optional[LyapunovCertificate] = None,
               name: Optional[str] = None) -> None:
    write_json(path, model_to_dict(model, cert, name))


# -- solutions and profiles ---------------------------------------------------


def ergodic_solution_to_dict(sol) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "ergodic_solution",
        "rho": sol.rho,
        "psi_hat": sol.psi_hat,
        "v1": sol.v1,
        "v2": sol.v2,
        "truncation_level": sol.truncation_level,
        "ref_state": sol.ref_state,
    }


def ergodic_solution_from_dict(doc: dict):
    from .ergodic import ErgodicSolution

    _check(doc, "ergodic_solution")
    psi = _array(doc, "psi_hat", 1)
    return ErgodicSolution(
        float(doc["rho"]), psi, _array(doc, "v1", 2), _array(doc, "v2", 2),
        int(doc.get("truncation_level", len(psi))), int(doc.get("ref_state", 0)),
        dict(doc.get("diagnostics") or {}),
    )


def discounted_solution_to_dict(sol) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "kind": "discounted_solution",
        "theta": sol.theta,
        "psi": sol.psi,
        "v1": sol.v1,
        "v2": sol.v2,
        "epsilon": sol.epsilon,
        "alpha": sol.alpha,
    }


def discounted_solution_from_dict(doc: dict):
    from .discounted import DiscountedSolution

    _check(doc, "discounted_solution")
    return DiscountedSolution(_array(doc, "theta", 1), _array(doc, "psi", 2), _array(doc, "v1", 3),
                              _array(doc, "v2", 3), float(doc["epsilon"]), float(doc["alpha"]),
                              dict(doc.get("diagnostics") or {}))


def profile_to_dict(profile: StrategyProfile) -> dict:
    doc = {"schema": SCHEMA_VERSION, "kind": "profile", "v1": profile.v1, "v2": profile.v2}
    if profile.dt is not None:
        doc["dt"] = profile.dt
    return doc


def profile_from_dict(doc: dict) -> StrategyProfile:
    _check(doc, "profile")
    v1, v2 = _array(doc, "v1"), _array(doc, "v2")
    dt = doc.get("dt")
    return StrategyProfile(v1, v2, None if dt is None else float(dt))


def load_document(path) -> tuple[str, Any]:
    """Load any schema-1 document; returns ``(kind, object)``."""
    doc = read_json(path)
    kind = doc.get("kind") if isinstance(doc, dict) else None
    loaders = {
        "model": model_from_dict,
        "ergodic_solution": ergodic_solution_from_dict,
        "discounted_solution": discounted_solution_from_dict,
        "profile": profile_from_dict,
    }
    if kind not in loaders:
        raise SchemaError(f"{path}: unknown document kind {kind!r}")
    return kind, loaders[kind](doc)
