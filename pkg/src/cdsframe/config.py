"""``key=value`` config files shared by the three services."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Tuple, Union

from .errors import InvalidArgument

Address = Tuple[str, int]


def load_kv(path: Union[str, Path]) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidArgument(f"{path}:{lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return values


def parse_address(text: str) -> Address:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise InvalidArgument(f"address must look like host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def as_bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")
