"""File formats: datasets, configurations, model records and result tables.

Every float is written with 17 significant digits so that numbers survive a
write/read cycle exactly and repeated runs produce identical bytes.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, MalformedCsv, MissingColumn
from .model import Dataset, ModelParams, NoiseSpec


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


# ---------------------------------------------------------------------------
# JSON with fixed float formatting
# ---------------------------------------------------------------------------

def _json_value(v, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json_value(x, indent, level + 1)}" for k, x in v.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(v, (list, tuple, np.ndarray)):
        v = list(v)
        if not v:
            return "[]"
        if all(not isinstance(x, (dict, list, tuple, np.ndarray)) for x in v):
            return "[" + ", ".join(_json_value(x, indent, level + 1) for x in v) + "]"
        return "[\n" + ",\n".join(pad + _json_value(x, indent, level + 1) for x in v) + "\n" + end + "]"
    if v is None:
        return "null"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            return "NaN" if math.isnan(v) else ("Infinity" if v > 0 else "-Infinity")
        return format(v, ".17g")
    if isinstance(v, (str, Path)):
        return json.dumps(str(v))
    raise TypeError(f"cannot serialize {type(v).__name__}")


def dumps(obj, indent: int = 2) -> str:
    return _json_value(obj, indent, 0) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_csv(path, header, columns) -> None:
    cols = [np.asarray(c).ravel() for c in columns]
    n = cols[0].shape[0] if cols else 0
    lines = [",".join(header)]
    for i in range(n):
        lines.append(",".join(fmt(c[i]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path):
    """Header and float rows of a numeric CSV; empty cells and 'nan' become NaN."""
    path = Path(path)
    try:
        text = path.read_text()
    except UnicodeDecodeError:
        raise MalformedCsv(path, 1, "not a text file") from None
    reader = csv.reader(text.splitlines())
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise MalformedCsv(path, 1, "empty file (no header)") from None
    if not header or any(h == "" for h in header):
        raise MalformedCsv(path, 1, "empty column name in header")
    if len(set(header)) != len(header):
        raise MalformedCsv(path, 1, "duplicate column names")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise MalformedCsv(path, lineno, f"expected {len(header)} fields, found {len(rec)}")
        vals = []
        for c in rec:
            c = c.strip()
            if c == "" or c.lower() in ("nan", "na"):
                vals.append(math.nan)
                continue
            try:
                vals.append(float(c))
            except ValueError:
                raise MalformedCsv(path, lineno, f"non-numeric value {c!r}") from None
        rows.append(vals)
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return header, data


@dataclass(eq=False)
class TableData:
    """Observation table: coordinates, observations and mean covariates.

    Rows whose observation is missing are kept apart as prediction-only
    locations.
    """

    locations: np.ndarray
    obs: np.ndarray
    B: np.ndarray
    covariate_names: list
    pred_locations: np.ndarray
    pred_B: np.ndarray

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    def to_dataset(self, B_gamma, B_mu) -> Dataset:
        return Dataset(self.locations, self.obs, self.B, B_gamma, B_mu)


def coordinate_columns(header, path, dim=None):
    if "x" not in header:
        raise MissingColumn(f"{path}: column 'x' is required")
    cols = ["x"]
    if (dim is None and "y" in header) or dim == 2:
        if "y" not in header:
            raise MissingColumn(f"{path}: column 'y' is required for 2D meshes")
        cols.append("y")
    return cols


def load_dataset(path, covariates=(), dim=None, obs_column: str = "obs") -> TableData:
    """Read a dataset CSV with coordinate columns ``x[,y]``, ``obs`` and optional covariates.

    ``B`` is an intercept followed by the named covariate columns.
    """
    header, data = read_table(path)
    xy = coordinate_columns(header, path, dim)
    if obs_column not in header:
        raise MissingColumn(f"{path}: column {obs_column!r} is required")
    for c in covariates:
        if c not in header:
            raise MissingColumn(f"{path}: covariate column {c!r} not found")
    idx = {h: i for i, h in enumerate(header)}
    locs = data[:, [idx[c] for c in xy]]
    obs = data[:, idx[obs_column]]
    B = np.column_stack([np.ones(data.shape[0])] + [data[:, idx[c]] for c in covariates])
    if np.any(~np.isfinite(locs)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(locs), axis=1))[0])
        raise MalformedCsv(path, bad + 2, "missing coordinate")
    have = np.isfinite(obs)
    if np.any(~np.all(np.isfinite(B[have]), axis=1)):
        bad = int(np.flatnonzero(have & ~np.all(np.isfinite(B), axis=1))[0])
        raise MalformedCsv(path, bad + 2, "missing covariate value")
    return TableData(locs[have], obs[have], B[have], list(covariates), locs[~have], B[~have])


def load_locations(path, dim: int) -> np.ndarray:
    header, data = read_table(path)
    xy = coordinate_columns(header, path, dim)
    idx = {h: i for i, h in enumerate(header)}
    locs = data[:, [idx[c] for c in xy]]
    if np.any(~np.isfinite(locs)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(locs), axis=1))[0])
        raise MalformedCsv(path, bad + 2, "missing coordinate")
    return locs.reshape(-1, dim)


# ---------------------------------------------------------------------------
# model records
# ---------------------------------------------------------------------------

def params_to_dict(params: ModelParams) -> dict:
    nz = params.noise
    d = {"family": nz.family, "alpha": params.alpha, "kappa": params.kappa,
         "beta": [float(b) for b in params.beta], "sigma_eps": params.sigma_eps}
    if nz.is_gaussian:
        d["phi"] = nz.phi
    else:
        d["sigma"] = nz.sigma
        d["gamma"] = [float(v) for v in nz.gamma]
        d["mu"] = [float(v) for v in nz.mu]
        if nz.family == "gal":
            d["tau"] = nz.tau
            d["gamma_unscaled"] = [float(v) for v in nz.gamma_display]
        else:
            d["nu"] = nz.nu
    return d


def params_from_dict(d: dict) -> ModelParams:
    try:
        fam = d["family"]
        noise_kw = {"family": fam}
        if str(fam).lower() == "gaussian":
            noise_kw["phi"] = d["phi"]
        else:
            noise_kw.update(sigma=d["sigma"], gamma=d.get("gamma", [0.0]), mu=d.get("mu", [0.0]))
            if str(fam).lower() == "gal":
                noise_kw["tau"] = d["tau"]
            else:
                noise_kw["nu"] = d["nu"]
        return ModelParams(kappa=d["kappa"], alpha=int(d.get("alpha", 2)), beta=d["beta"],
                           sigma_eps=d["sigma_eps"], noise=NoiseSpec(**noise_kw))
    except KeyError as exc:
        raise ConfigError(f"model record lacks field {exc}") from None
