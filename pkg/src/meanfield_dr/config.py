"""Versioned JSON run configuration, validation with line-aware messages, run manifests."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import platform
import re
import subprocess
from pathlib import Path

import jsonschema

from . import __version__

SCHEMA_VERSION = 1
SEED_ENV = "MEANFIELD_DR_SEED"


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit code 2."""


_num = {"type": "number"}
_int = {"type": "integer"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_loads": {"type": "integer", "minimum": 1},
                "m": {"type": "integer", "minimum": 1},
                "T_g_minutes": {"type": "number", "exclusiveMinimum": 0},
                "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "lower": _num,
                "upper": _num,
                "kp": _num,
                "ki": _num,
                "zeta_max": {"type": "number", "exclusiveMinimum": 0},
                "scale": _num,
                "opt_out": {"type": "boolean"},
                "I_max": {"type": "integer", "minimum": 2},
                "switch_prob": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "burn_in_steps": {"type": ["integer", "null"], "minimum": 0},
                "T_f": {"type": "integer", "minimum": 0},
                "workers": {"type": "integer", "minimum": 1},
                "hist_width": {"type": "number", "exclusiveMinimum": 0},
                "divergence_steps": {"type": "integer", "minimum": 1},
            },
        },
        "reference": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hours": {"type": "number", "exclusiveMinimum": 0},
                "cutoff": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
                "scale": _num,
                "arma": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"a1": _num, "a2": _num, "b1": _num,
                                   "sigma_w2": {"type": "number", "exclusiveMinimum": 0}},
                },
            },
        },
        "predict": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "theta_points": {"type": "integer", "minimum": 2048},
                "zeta_model": {"enum": ["ar1", "two_pole"]},
            },
        },
    },
}

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "simulation": {},
    "reference": {"hours": 400.0, "cutoff": 0.002, "scale": 1.0, "arma": {}},
    "predict": {"theta_points": 4096, "zeta_model": "ar1"},
}


def _line_of(text: str, path) -> str:
    """Best-effort 'line N' for the last key of a JSON path."""
    keys = [p for p in path if isinstance(p, str)]
    if not text or not keys:
        return ""
    m = re.search(r'"%s"\s*:' % re.escape(keys[-1]), text)
    if not m:
        return ""
    return f"line {text.count(chr(10), 0, m.start()) + 1}: "


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(doc: dict, text: str = "", source: str = "<config>") -> dict:
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            msgs.append(f"{source}: {_line_of(text, list(e.absolute_path))}{where}: {e.message}")
        raise ConfigError("\n".join(msgs))
    return doc


def load_config(path=None) -> dict:
    """Read a config (or a run manifest, whose ``config`` entry is used) and fill defaults."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if isinstance(doc, dict) and "manifest_version" in doc:
        doc = doc.get("config", {})
        text = ""
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    validate_config(doc, text, str(path))
    return _merge(DEFAULTS, doc)


def resolve_seed(cfg: dict, flag_seed=None) -> int:
    """Seed precedence: environment variable, then ``--seed``, then the file."""
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    elif flag_seed is not None:
        seed = int(flag_seed)
    else:
        seed = int(cfg.get("seed", 0))
    if not 0 <= seed < 2 ** 64:
        raise ConfigError(f"seed {seed} outside the unsigned 64-bit range")
    cfg["seed"] = seed
    return seed


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def version_string() -> str:
    """Package version, plus the git commit when the source tree is a checkout."""
    try:
        here = Path(__file__).resolve().parent
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir, command: str, cfg: dict, inputs: dict, outputs: list, duration: float,
                   extra: dict = None) -> Path:
    from . import kernels

    manifest = {
        "manifest_version": 1,
        "command": command,
        "tool_version": version_string(),
        "seed": cfg.get("seed"),
        "config": cfg,
        "inputs": {k: {"path": str(v), "sha256": file_digest(v)} for k, v in inputs.items()},
        "outputs": list(outputs),
        "wall_seconds": duration,
        "backend": kernels.backend_name(),
        "python": platform.python_version(),
    }
    if extra:
        manifest["results"] = extra
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")
    return path


def _json_default(obj):
    import numpy as np

    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
