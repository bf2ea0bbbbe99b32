"""
Report plumbing shared by the CLI and the server: pass/fail check blocks,
JSON report files validated against the shipped schemas, CSV tables.
"""

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from errors import EXIT_OK, EXIT_CHECK_FAILED, InputError

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

SCHEMA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'docs', 'schemas')


@dataclass(frozen=True)
class CheckResult:
    """One verified identity: passes when residual <= tolerance."""
    name: str
    residual: float
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.residual) and self.residual <= self.tolerance)

    def to_dict(self):
        return {"name": self.name, "residual": float(self.residual),
                "tolerance": float(self.tolerance), "pass": self.passed}


def flag_check(name, ok):
    """Boolean finding expressed as a check block."""
    return CheckResult(name, 0.0 if ok else 1.0, 0.0)


def all_passed(checks):
    return all(c.passed for c in checks)


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats for JSON."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, CheckResult):
        return obj.to_dict()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def build_report(command, config, seed, checks=(), result=None, exit_code=None):
    """Assemble the standard report payload."""
    checks = list(checks)
    if exit_code is None:
        exit_code = EXIT_OK if all_passed(checks) else EXIT_CHECK_FAILED
    return to_jsonable({
        "command": command,
        "config": config,
        "seed": seed,
        "checks": checks,
        "result": result if result is not None else {},
        "exit_code": exit_code,
    })


def load_schema(name='report'):
    path = os.path.join(SCHEMA_DIR, f'{name}.schema.json')
    with open(path, 'r') as f:
        return json.load(f)


def validate_report(report, schema=None):
    """
    Check a report against the required keys and primitive types of a schema.

    Raises:
        InputError: a required key is missing or has the wrong type
    """
    schema = schema or load_schema('report')
    _validate(report, schema, "report")
    return True


_TYPES = {
    "object": dict,
    "array": list,
    "string": str,
    "boolean": bool,
    "integer": int,
    "number": (int, float),
}


def _validate(value, schema, where):
    kind = schema.get("type")
    if kind is not None:
        kinds = kind if isinstance(kind, list) else [kind]
        ok = any(
            value is None if k == "null" else
            (isinstance(value, _TYPES[k]) and not (k in ("integer", "number") and isinstance(value, bool)))
            for k in kinds
        )
        if not ok:
            raise InputError(f"{where}: expected {kind}, got {type(value).__name__}")
    if isinstance(value, dict):
        for key in schema.get("required", []):
            if key not in value:
                raise InputError(f"{where}: missing required key '{key}'")
        for key, sub in schema.get("properties", {}).items():
            if key in value:
                _validate(value[key], sub, f"{where}.{key}")
    if isinstance(value, list) and "items" in schema:
        for i, item in enumerate(value):
            _validate(item, schema["items"], f"{where}[{i}]")


def write_report(report, out_dir, name='report.json'):
    validate_report(report)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, 'w') as f:
        json.dump(report, f, indent=2, sort_keys=True)
    logger.info(f"Wrote {path}")
    return path


def write_table(rows, out_dir, name):
    """Write a list of flat dicts as CSV."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    pd.DataFrame(list(rows)).to_csv(path, index=False)
    logger.info(f"Wrote {path}")
    return path
