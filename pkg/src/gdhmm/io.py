"""File formats: cohort and prediction CSVs, model JSON, configs, manifests.

Cohort CSV columns are ``subject_id, time, z, d_last_known, x1 .. xp``,
one row per visit, grouped by subject in visit order.  ``d_last_known``
is 1 on the final row of a subject whose final latent state is known (the
label in ``z`` is then that state) and 0 elsewhere.  Latent states live in
a separate truth file ``subject_id, time, d_true`` that fitting never reads.

All writes go to a temporary file in the destination directory that is
then renamed, so a reader never sees a partial file.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from .core_model import (
    Dataset,
    DiscriminativeParams,
    EmissionMatrix,
    InitialDistribution,
    ModelDims,
    ModelParams,
    SubjectRecord,
    TransitionIntensityMatrix,
)
from .errors import ConfigError, DataError, SchemaError
from .splines import knot_vector_from

MODEL_SCHEMA = "gdhmm-model/1"
COHORT_FIXED = ("subject_id", "time", "z", "d_last_known")
TRUTH_COLUMNS = ("subject_id", "time", "d_true")


# ---------------------------------------------------------------- atomic writes


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def csv_text(header, rows) -> str:
    """CSV with floats written by ``repr`` so they read back exactly."""
    import io as _io

    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_records(path, records: list[dict], header=None) -> None:
    header = list(records[0].keys()) if header is None else list(header)
    atomic_write_text(path, csv_text(header, [[r.get(h, "") for h in header] for r in records]))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- CSV reading


def _read_csv(path):
    """Header and ``(line_number, row)`` pairs of a CSV file."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}, line {reader.line_num}: expected {len(header)} fields, got {len(row)}")
            rows.append((reader.line_num, row))
    return header, rows


def _float(value, path, line, col) -> float:
    try:
        v = float(value)
    except ValueError:
        raise DataError(f"{path}, line {line}: column {col!r} is not a number: {value!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}, line {line}: column {col!r} is not finite")
    return v


def _int(value, path, line, col) -> int:
    v = _float(value, path, line, col)
    if v != int(v):
        raise DataError(f"{path}, line {line}: column {col!r} must be an integer: {value!r}")
    return int(v)


def marker_columns(header) -> list[str]:
    cols = [h for h in header if h.startswith("x") and h[1:].isdigit()]
    expected = [f"x{j}" for j in range(1, len(cols) + 1)]
    if sorted(cols, key=lambda c: int(c[1:])) != expected:
        raise SchemaError(f"marker columns must be x1..xp without gaps, got {cols}")
    return expected


def read_cohort(path, num_states: int = 4, t_star: float | None = None, read_z: bool = True) -> Dataset:
    """Load a cohort CSV.

    With ``read_z=False`` the ``z`` and ``d_last_known`` columns are not
    parsed at all and the subjects carry no labels.

    Raises
    ------
    SchemaError
        Missing columns.
    DataError
        Malformed values (the message names the line) or invalid subjects.
    """
    header, rows = _read_csv(path)
    need = ("subject_id", "time") + (("z", "d_last_known") if read_z else ())
    missing = [c for c in need if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    xcols = marker_columns(header)
    if not xcols:
        raise SchemaError(f"{path}: no marker columns x1..xp")
    col = {h: i for i, h in enumerate(header)}
    groups: dict[str, list] = {}
    order = []
    for line, row in rows:
        sid = row[col["subject_id"]].strip()
        if not sid:
            raise DataError(f"{path}, line {line}: empty subject_id")
        if sid not in groups:
            groups[sid] = []
            order.append(sid)
        elif order[-1] != sid:
            raise DataError(f"{path}, line {line}: rows of subject {sid} are not contiguous")
        t = _float(row[col["time"]], path, line, "time")
        x = [_float(row[col[c]], path, line, c) for c in xcols]
        z = known = None
        if read_z:
            z = _int(row[col["z"]], path, line, "z")
            known = _int(row[col["d_last_known"]], path, line, "d_last_known")
            if known not in (0, 1):
                raise DataError(f"{path}, line {line}: d_last_known must be 0 or 1")
            if not 0 <= z < num_states:
                raise DataError(f"{path}, line {line}: label {z} outside 0..{num_states - 1}")
        groups[sid].append((line, t, x, z, known))
    if not order:
        raise DataError(f"{path}: no data rows")
    subjects = []
    for sid in order:
        g = groups[sid]
        times = np.array([r[1] for r in g])
        markers = np.array([r[2] for r in g])
        if read_z:
            z = np.array([r[3] for r in g], dtype=np.int64)
            flags = [r[4] for r in g]
            if any(flags[:-1]):
                raise DataError(f"{path}, line {g[flags.index(1)][0]}: d_last_known set before the last visit")
            known = bool(flags[-1])
            try:
                subjects.append(SubjectRecord(sid, times, markers, z, known, int(z[-1]) if known else None))
            except DataError as exc:
                raise DataError(f"{path}, lines {g[0][0]}-{g[-1][0]}: {exc}") from None
        else:
            try:
                subjects.append(SubjectRecord(sid, times, markers, None))
            except DataError as exc:
                raise DataError(f"{path}, lines {g[0][0]}-{g[-1][0]}: {exc}") from None
    tmax = max(float(s.times[-1]) for s in subjects)
    ts = tmax if t_star is None else float(t_star)
    if ts <= 0:
        ts = 1.0
    return Dataset(tuple(subjects), ModelDims(num_states, len(xcols), ts))


def cohort_records(data: Dataset) -> tuple[list[str], list[list]]:
    header = list(COHORT_FIXED) + [f"x{j}" for j in range(1, data.dims.num_markers + 1)]
    rows = []
    for s in data.subjects:
        m = s.num_visits
        for j in range(m):
            z = int(s.surrogate[j]) if s.surrogate is not None else ""
            known = 1 if (s.final_state_known and j == m - 1) else 0
            rows.append([s.subject_id, float(s.times[j]), z, known] + [float(v) for v in s.markers[j]])
    return header, rows


def write_cohort(path, data: Dataset) -> None:
    header, rows = cohort_records(data)
    atomic_write_text(path, csv_text(header, rows))


def write_truth(path, data: Dataset, states) -> None:
    rows = []
    for s, d in zip(data.subjects, states):
        rows.extend([s.subject_id, float(t), int(k)] for t, k in zip(s.times, d))
    atomic_write_text(path, csv_text(TRUTH_COLUMNS, rows))


def read_keyed(path, value_cols, int_cols=()) -> dict:
    """Rows keyed by ``(subject_id, time)`` with the requested columns."""
    header, rows = _read_csv(path)
    missing = [c for c in ("subject_id", "time") + tuple(value_cols) if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    col = {h: i for i, h in enumerate(header)}
    out = {}
    for line, row in rows:
        key = (row[col["subject_id"]].strip(), _float(row[col["time"]], path, line, "time"))
        if key in out:
            raise DataError(f"{path}, line {line}: duplicate row for subject {key[0]} at time {key[1]}")
        vals = []
        for c in value_cols:
            vals.append(_int(row[col[c]], path, line, c) if c in int_cols else _float(row[col[c]], path, line, c))
        out[key] = vals
    return out


# ---------------------------------------------------------------- model JSON


def _json_text(obj, indent: int = 0) -> str:
    """JSON writer that prints every float with 17 significant digits."""
    pad = " " * indent
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise DataError("model contains a non-finite number")
        return format(v, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _json_text(obj.tolist(), indent)
    if isinstance(obj, (list, tuple)):
        if all(not isinstance(v, (list, tuple, dict, np.ndarray)) for v in obj):
            return "[" + ", ".join(_json_text(v) for v in obj) + "]"
        inner = ",\n".join(pad + " " + _json_text(v, indent + 1) for v in obj)
        return "[\n" + inner + "\n" + pad + "]"
    if isinstance(obj, dict):
        inner = ",\n".join(f"{pad} {json.dumps(str(k))}: {_json_text(v, indent + 1)}" for k, v in obj.items())
        return "{\n" + inner + "\n" + pad + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def model_to_dict(params: ModelParams, method: str = "proposed") -> dict:
    """Flat document: dims, pi, rho, structure_mask, emission,
    feasible_mask, knots, spline_order, eta, beta, metadata.  Parts a
    method does not estimate are null."""
    d = params.dims
    meta = {k: v for k, v in params.metadata.items() if isinstance(v, (int, float, str, bool))}
    meta.setdefault("version", __import__("gdhmm").__version__)
    out = {
        "schema": MODEL_SCHEMA,
        "method": method,
        "dims": {"num_states": d.num_states, "num_markers": d.num_markers, "t_star": float(d.t_star)},
        "pi": None,
        "rho": None,
        "structure_mask": None,
        "emission": None,
        "feasible_mask": None,
        "knots": None,
        "spline_order": None,
        "eta": None,
        "beta": None,
        "metadata": meta,
    }
    if params.init is not None:
        out["pi"] = params.init.pi
    if params.intensity is not None:
        out["rho"] = params.intensity.rho
        out["structure_mask"] = params.intensity.structure_mask.astype(int)
    if params.emission is not None:
        out["emission"] = params.emission.e
        out["feasible_mask"] = params.emission.feasible_mask.astype(int)
    if params.discrim is not None:
        out["knots"] = params.discrim.basis.knot_vector
        out["spline_order"] = params.discrim.basis.order
        out["eta"] = params.discrim.eta
        out["beta"] = params.discrim.beta
    return out


def save_model(path, params: ModelParams, method: str = "proposed") -> None:
    """Model JSON; floats carry 17 significant digits and reload bit-exactly."""
    atomic_write_text(path, _json_text(model_to_dict(params, method)) + "\n")


def _matrix(obj, key, dtype=float):
    return None if obj.get(key) is None else np.array(obj[key], dtype=dtype)


def model_from_dict(obj: dict) -> tuple[ModelParams, str]:
    if not isinstance(obj, dict) or obj.get("schema") != MODEL_SCHEMA:
        raise SchemaError(f"model schema must be {MODEL_SCHEMA!r}")
    try:
        dd = obj["dims"]
        dims = ModelDims(int(dd["num_states"]), int(dd["num_markers"]), float(dd["t_star"]))
        S = dims.num_states
        pi = _matrix(obj, "pi")
        init = InitialDistribution(pi) if pi is not None else None
        intensity = None
        if obj.get("rho") is not None:
            intensity = TransitionIntensityMatrix(_matrix(obj, "rho"), _matrix(obj, "structure_mask", bool))
        emission = None
        if obj.get("emission") is not None:
            emission = EmissionMatrix(_matrix(obj, "emission"), _matrix(obj, "feasible_mask", bool))
        discrim = None
        if obj.get("eta") is not None:
            basis = knot_vector_from(_matrix(obj, "knots"), int(obj["spline_order"]))
            discrim = DiscriminativeParams(_matrix(obj, "eta"), _matrix(obj, "beta"), basis)
            if discrim.beta.shape != (S - 1, dims.num_markers) or discrim.eta.shape != (S - 1, basis.dim):
                raise SchemaError("logistic coefficients do not match the model dimensions")
        for name, part, shape in (("pi", pi, (S,)), ("rho", intensity and intensity.rho, (S, S)), ("emission", emission and emission.e, (S, S))):
            if part is not None and np.shape(part) != shape:
                raise SchemaError(f"{name} has shape {np.shape(part)}, expected {shape}")
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed model file: {exc}") from None
    return ModelParams(dims, init, intensity, emission, discrim, dict(obj.get("metadata") or {})), str(obj.get("method", ""))


def load_model(path) -> tuple[ModelParams, str]:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    return model_from_dict(obj)


# ---------------------------------------------------------------- configs


def load_config(path, allowed) -> dict:
    """JSON object whose keys must all be in ``allowed``."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot open config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return obj


def dataclass_keys(cls) -> set:
    return {f.name for f in fields(cls)}


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(path, manifest: dict) -> None:
    atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")
