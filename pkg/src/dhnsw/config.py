"""Plain-text ``key = value`` configuration shared by the CLI and the bench harness."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Mapping, Optional, Tuple

from .errors import ConfigError
from .transport import TransportConfig

ADDRESS_ENV = "DHNSW_ADDRESS"


@dataclass(frozen=True)
class Config:
    # transport
    backend: str = "inproc"
    address: str = "127.0.0.1:7471"
    doorbell_max: int = 8
    base_rtt_us: float = 2.0
    bandwidth_gbps: float = 100.0
    doorbell_penalty_us: float = 0.05
    # query engine
    b: int = 2
    k: int = 10
    ef_search: int = 48
    ef_meta: Optional[int] = None
    cache_clusters: Optional[int] = None
    cache_fraction: Optional[float] = 0.10
    batch_size: int = 2000
    workers: int = 1
    # index
    partitions: int = 64
    M: int = 16
    ef_construction: int = 200
    overflow_entries: Optional[int] = None
    overflow_capacity: Optional[int] = None
    seed: int = 0
    # workload
    dataset: str = "synthetic"
    base: Optional[str] = None
    query: Optional[str] = None
    groundtruth: Optional[str] = None
    n: int = 20_000
    nq: int = 2_000
    dim: int = 32
    blobs: int = 64
    spread: float = 1.0
    center_scale: float = 4.0
    modes: Tuple[str, ...] = ("naive", "nodoorbell", "full")
    ef_sweep: Tuple[int, ...] = (1, 8, 48)
    max_queries: Optional[int] = None

    def transport(self) -> TransportConfig:
        return TransportConfig(
            backend=self.backend,
            address=self.address,
            doorbell_max=self.doorbell_max,
            base_rtt_us=self.base_rtt_us,
            bandwidth_gbps=self.bandwidth_gbps,
            doorbell_penalty_us=self.doorbell_penalty_us,
        )

    def with_overrides(self, values: Mapping[str, object]) -> "Config":
        return replace(self, **coerce(values))


_FIELDS = {f.name: f for f in fields(Config)}


def _parse_value(key: str, raw: object) -> object:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    default = _FIELDS[key].default
    if text.lower() in ("none", ""):
        return None
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if key == "ef_sweep":
            return tuple(int(t) for t in items)
        return tuple(items)
    if key in ("ef_meta", "cache_clusters", "overflow_entries", "overflow_capacity", "max_queries"):
        return int(text)
    if key == "cache_fraction":
        return float(text)
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def coerce(values: Mapping[str, object]) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for key, raw in values.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return out


def parse_config_text(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, object]] = None) -> Config:
    """File values, then explicit overrides, then the address environment variable."""
    values: Dict[str, object] = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    if os.environ.get(ADDRESS_ENV):
        values["address"] = os.environ[ADDRESS_ENV]
    return Config().with_overrides(values)


def dump_config(cfg: Config) -> str:
    lines: List[str] = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
