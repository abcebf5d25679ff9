"""Flat key=value config files, CLI overrides, and run manifests.

Config files are diffable experiment records: one `key=value` per line,
`#` comments allowed.  Precedence when resolving a run: flag > config file >
dataclass default.  Every command writes its manifest (command, resolved
config snapshot, seed, source hash, timestamps) before doing any work.
"""

import dataclasses
import hashlib
from datetime import datetime, timezone
from pathlib import Path

from .errors import ConfigError

__all__ = [
    "parse_kv_file",
    "parse_kv_text",
    "coerce_fields",
    "build_config",
    "config_snapshot_lines",
    "source_hash",
    "write_manifest",
    "finish_manifest",
]


def parse_kv_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno} is not key=value: {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def parse_kv_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_kv_text(path.read_text())


def _coerce(value: str, target_type, key: str):
    if target_type is bool:
        lowered = str(value).strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: cannot read {value!r} as a boolean")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is tuple:
        parts = [p for p in str(value).replace(",", " ").split() if p]
        return tuple(float(p) for p in parts)
    return value


def coerce_fields(cls, values: dict, strict: bool = True) -> dict:
    """Coerce string values against the dataclass field types."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, value in values.items():
        if key not in fields:
            if strict:
                raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
            continue
        if isinstance(value, str):
            ftype = fields[key].type
            base = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}
            for name, t in base.items():
                if str(ftype).startswith(name) or ftype is t:
                    value = _coerce(value, t, key)
                    break
        out[key] = value
    return out


def build_config(cls, config_path=None, overrides: dict | None = None):
    """Dataclass instance resolved as flag > config file > default."""
    values = {}
    if config_path:
        values.update(coerce_fields(cls, parse_kv_file(config_path)))
    if overrides:
        values.update(coerce_fields(cls, {k: v for k, v in overrides.items() if v is not None}))
    return cls(**values)


def config_snapshot_lines(config) -> list:
    data = dataclasses.asdict(config) if dataclasses.is_dataclass(config) else dict(config)
    lines = []
    for key in sorted(data):
        value = data[key]
        if isinstance(value, dict):
            for sub in sorted(value):
                lines.append(f"{key}.{sub}={value[sub]}")
        elif isinstance(value, (tuple, list)):
            lines.append(f"{key}={','.join(str(v) for v in value)}")
        else:
            lines.append(f"{key}={value}")
    return lines


def source_hash() -> str:
    """Digest of this package's source files, for run provenance."""
    digest = hashlib.sha256()
    package_dir = Path(__file__).parent
    for path in sorted(package_dir.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]


def write_manifest(out_dir, command: str, config, seed, config_path=None) -> Path:
    """Write the run manifest before any work happens."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"command={command}",
        f"config_path={config_path or ''}",
        f"seed={seed}",
        f"source_hash={source_hash()}",
        f"started_at={datetime.now(timezone.utc).isoformat()}",
        f"output_dir={out_dir}",
    ]
    lines += [f"config.{line}" for line in config_snapshot_lines(config)]
    path = out_dir / "run_manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def finish_manifest(manifest_path, status: str = "completed"):
    path = Path(manifest_path)
    with path.open("a") as fh:
        fh.write(f"finished_at={datetime.now(timezone.utc).isoformat()}\n")
        fh.write(f"status={status}\n")
    return path
