"""CSV/JSON report writing and sectioned key = value run configs."""
from __future__ import annotations

import ast
import configparser
import csv
import dataclasses
import hashlib
import json
import math
import os

import numpy as np


class ConfigError(ValueError):
    pass


def fmt_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.9g}"
    if v is None:
        return ""
    return str(v)


def write_csv(path, rows, header) -> None:
    """Fixed header; a row key outside the header is an error, a missing key is blank."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            extra = set(row) - set(header)
            if extra:
                raise ValueError(f"row has keys outside the header: {sorted(extra)}")
            w.writerow([fmt_value(row.get(h)) for h in header])


def append_csv(path, rows, header) -> None:
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    if not fresh:
        with open(path, newline="") as fh:
            existing = next(csv.reader(fh), None)
        if existing != list(header):
            raise ValueError(f"{path} has a different header: {existing}")
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(header)
        for row in rows:
            w.writerow([fmt_value(row.get(h)) for h in header])


def _jsonable(v):
    if dataclasses.is_dataclass(v) and not isinstance(v, type):
        return {k: _jsonable(x) for k, x in dataclasses.asdict(v).items()}
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.integer, np.floating, np.bool_)):
        return v.item()
    return v


def run_id(payload) -> str:
    blob = json.dumps(_jsonable(payload), sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def write_summary(path, command: str, seed: int, config: dict, results=None, outputs=()) -> dict:
    doc = {
        "command": command,
        "seed": int(seed),
        "run_id": run_id({"command": command, "seed": seed, "config": config}),
        "config": _jsonable(config),
        "outputs": sorted(outputs),
        "results": _jsonable(results if results is not None else {}),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def _parse_scalar(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(s)
    except (ValueError, SyntaxError):
        return s


def read_config(path) -> dict:
    """``{section: {key: value}}`` from an INI-style file; values are Python literals or bare strings."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from exc
    return {sec: {k: _parse_scalar(v) for k, v in parser.items(sec)} for sec in parser.sections()}


def merge(*layers) -> dict:
    out: dict = {}
    for layer in layers:
        for sec, vals in (layer or {}).items():
            out.setdefault(sec, {}).update(vals)
    return out


def check_sections(cfg: dict, schema: dict) -> None:
    """``schema`` maps section name to the set of allowed keys."""
    for sec, vals in cfg.items():
        if sec not in schema:
            raise ConfigError(f"unknown section [{sec}]")
        bad = sorted(set(vals) - set(schema[sec]))
        if bad:
            raise ConfigError(f"unknown key {bad[0]!r} in [{sec}]")


def dc_fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def build(cls, values: dict, **fixed):
    """Instantiate a dataclass; tuples/lists from the config are kept as lists."""
    kw = {**values, **fixed}
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc
