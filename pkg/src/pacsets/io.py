"""JSONL forecast records and confidence-set serialization.

Record layout, one JSON object per line::

    {"id": "a1", "kind": "categorical", "payload": [-0.69, -1.2, -1.6], "true_label": 0}
    {"id": "b7", "kind": "gaussian",
     "payload": {"mean": [0.0, 1.0], "cov": [1, 0, 0, 2], "dim": 2}, "true_label": [0.3, 0.9]}
    {"id": "c2", "kind": "trajectory",
     "payload": {"x0": [0, 0], "steps": [{"mean": [0, 0], "cov": [1, 0, 0, 1]}, ...]},
     "true_label": [[0.1, -0.4], ...]}

Categorical payloads are natural-log probabilities (``-Infinity`` allowed).
Covariances are row-major. Trajectory steps hold the one-step model output
``(mu(xbar_{t-1}), Sigma(xbar_{t-1}))``; accumulation happens on load.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable

import numpy as np

from .confset import bounding_box, categorical_set, ellipsoid_set, interval_set, member
from .estimator import Example
from .forecaster import CategoricalForecast, GaussianForecast
from .trajectory import TabulatedDynamics, TrajectoryForecast, per_step_sets, rollout

__all__ = [
    "SchemaError",
    "dump_json",
    "example_to_record",
    "read_records",
    "record_to_example",
    "set_record",
    "write_jsonl",
]


class SchemaError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<input>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


def _matrix(flat, dim: int, what: str) -> np.ndarray:
    a = np.asarray(flat, dtype=float)
    if a.ndim == 1:
        if a.size != dim * dim:
            raise SchemaError(f"{what}: expected {dim * dim} covariance entries, got {a.size}")
        a = a.reshape(dim, dim)
    if a.shape != (dim, dim):
        raise SchemaError(f"{what}: covariance shape {a.shape} does not match dim {dim}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10):
        raise SchemaError(f"{what}: covariance is not symmetric")
    return a


def record_to_example(rec: dict) -> Example:
    if not isinstance(rec, dict):
        raise SchemaError("record is not a JSON object")
    for key in ("id", "kind", "payload"):
        if key not in rec:
            raise SchemaError(f"missing field {key!r}")
    rid, kind, payload = str(rec["id"]), rec["kind"], rec["payload"]
    label = rec.get("true_label")
    try:
        if kind == "categorical":
            if not isinstance(payload, list):
                raise SchemaError("categorical payload must be an array of log-probabilities")
            f = CategoricalForecast(np.asarray(payload, dtype=float))
            if label is not None:
                if not isinstance(label, int) or isinstance(label, bool):
                    raise SchemaError("categorical true_label must be an integer")
                if not 0 <= label < f.num_labels:
                    raise SchemaError(f"true_label {label} outside 0..{f.num_labels - 1}")
        elif kind == "gaussian":
            mean = np.atleast_1d(np.asarray(payload["mean"], dtype=float))
            dim = int(payload.get("dim", mean.size))
            if mean.size != dim:
                raise SchemaError(f"mean has {mean.size} entries but dim={dim}")
            f = GaussianForecast(mean, _matrix(payload["cov"], dim, "gaussian"))
            if label is not None:
                label = np.atleast_1d(np.asarray(label, dtype=float))
                if label.size != dim:
                    raise SchemaError(f"true_label has {label.size} entries but dim={dim}")
        elif kind == "trajectory":
            x0 = np.asarray(payload["x0"], dtype=float).reshape(-1)
            steps = payload["steps"]
            if not isinstance(steps, list) or not steps:
                raise SchemaError("trajectory payload needs a nonempty 'steps' array")
            d = x0.size
            parsed = []
            for t, st in enumerate(steps):
                m = np.asarray(st["mean"], dtype=float).reshape(-1)
                if m.size != d:
                    raise SchemaError(f"step {t} mean has {m.size} entries, expected {d}")
                parsed.append((m, _matrix(st["cov"], d, f"step {t}")))
            f = rollout(TabulatedDynamics.from_steps(x0, parsed), x0, len(parsed))
            if label is not None:
                label = np.asarray(label, dtype=float)
                if label.shape != f.means.shape:
                    raise SchemaError(f"true_label shape {label.shape} != {f.means.shape}")
        else:
            raise SchemaError(f"unknown kind {kind!r}")
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{kind} record {rid!r}: {exc}") from exc
    return Example(rid, f, label)


def read_records(path) -> list[Example]:
    out = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                ex = record_to_example(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", lineno, str(path)) from exc
            except SchemaError as exc:
                raise SchemaError(str(exc), lineno, str(path)) from exc
            if ex.id in seen:
                raise SchemaError(f"duplicate id {ex.id!r}", lineno, str(path))
            seen.add(ex.id)
            out.append(ex)
    if not out:
        raise SchemaError("no records", None, str(path))
    return out


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def example_to_record(ex: Example, x0=None) -> dict:
    """Inverse of ``record_to_example``.

    Trajectory records need the start state ``x0``; the one-step covariances
    are recovered by differencing the accumulated ones.
    """
    f = ex.forecast
    if isinstance(f, CategoricalForecast):
        label = None if ex.label is None else int(ex.label)
        return {"id": ex.id, "kind": "categorical", "payload": _floats(f.log_probs), "true_label": label}
    if isinstance(f, GaussianForecast):
        payload = {"mean": _floats(f.mean), "cov": _floats(f.cov.reshape(-1)), "dim": f.dim}
        label = None if ex.label is None else _floats(np.atleast_1d(ex.label))
        return {"id": ex.id, "kind": "gaussian", "payload": payload, "true_label": label}
    if isinstance(f, TrajectoryForecast):
        if x0 is None:
            raise ValueError("trajectory records need the start state x0")
        covs = np.diff(np.concatenate([np.zeros((1, f.dim, f.dim)), f.step_covs]), axis=0)
        steps = [{"mean": _floats(m), "cov": _floats(c.reshape(-1))} for m, c in zip(f.means, covs)]
        payload = {"x0": _floats(x0), "steps": steps}
        label = None if ex.label is None else _floats(ex.label)
        return {"id": ex.id, "kind": "trajectory", "payload": payload, "true_label": label}
    raise TypeError(f"cannot serialize {type(f).__name__}")


def dump_json(obj, indent: int | None = None) -> str:
    # repr-based float printing is shortest round-trip
    return json.dumps(obj, indent=indent, allow_nan=True)


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dump_json(rec) + "\n")


def _ellipsoid_json(e, box: bool) -> dict:
    out = {
        "center": _floats(e.center),
        "Lambda": _floats(e.axes),
        "radius_sq": float(e.radius_sq),
        "size": float(e.size),
        "empty": bool(e.empty),
    }
    if box:
        lo, hi = bounding_box(e)
        out["box"] = {"lo": _floats(lo), "hi": _floats(hi)}
    return out


def set_record(ex: Example, forecast, T, box: bool = False) -> dict:
    """Serialize ``C_T`` for one input; ``forecast`` is the calibrated forecast."""
    rec: dict = {"id": ex.id}
    if isinstance(forecast, CategoricalForecast):
        labels = categorical_set(forecast, T)
        rec.update(kind="categorical", set={"labels": labels}, size=float(len(labels)))
    elif isinstance(forecast, GaussianForecast) and forecast.dim == 1:
        iv = interval_set(forecast, T)
        rec.update(kind="gaussian", set={"interval": [iv.lo, iv.hi], "empty": iv.empty}, size=iv.size)
    elif isinstance(forecast, GaussianForecast):
        e = ellipsoid_set(forecast, T)
        rec.update(kind="gaussian", set=_ellipsoid_json(e, box), size=e.size)
    elif isinstance(forecast, TrajectoryForecast):
        ts = per_step_sets(forecast, T)
        rec.update(
            kind="trajectory",
            set={"radius_sq": ts.radius_sq, "steps": [_ellipsoid_json(e, box) for e in ts.steps]},
            size=ts.mean_size,
        )
    else:
        raise TypeError(f"unsupported forecast {type(forecast).__name__}")
    if ex.label is not None:
        rec["covered"] = bool(member(forecast, T, ex.label))
    return rec


def load_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def is_finite_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)
