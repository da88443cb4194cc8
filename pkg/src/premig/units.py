"""Unit-suffixed quantities from config files, converted to base units.

Base units: bits, bits/s, Hz, cycles, cycles/s, cycles/bit, W, s, m.
Bare numbers are taken as already in base units.
"""
from __future__ import annotations

import re

BYTE = 8.0
MB = 1e6 * BYTE

_SCALES = {
    "size": {"bit": 1.0, "b": 1.0, "kb": 1e3 * BYTE, "mb": MB, "gb": 1e9 * BYTE,
             "kbit": 1e3, "mbit": 1e6, "gbit": 1e9, "byte": BYTE, "bytes": BYTE},
    "rate": {"bps": 1.0, "kbps": 1e3, "mbps": 1e6, "gbps": 1e9, "mb/s": MB, "gb/s": 1e9 * BYTE},
    "frequency": {"hz": 1.0, "khz": 1e3, "mhz": 1e6, "ghz": 1e9},
    "compute": {"hz": 1.0, "mhz": 1e6, "ghz": 1e9, "cycles/s": 1.0, "gcycles/s": 1e9},
    "cycles": {"cycles": 1.0, "mcycles": 1e6, "gcycles": 1e9, "tcycles": 1e12},
    "density": {"cycles/bit": 1.0, "cycles/byte": 1.0 / BYTE, "gcycles/mb": 1e9 / MB,
                "mcycles/mb": 1e6 / MB, "cycles/mb": 1.0 / MB},
    "power": {"w": 1.0, "mw": 1e-3},
    "time": {"s": 1.0, "ms": 1e-3, "min": 60.0},
    "length": {"m": 1.0, "km": 1e3},
    "speed": {"m/s": 1.0, "km/h": 1.0 / 3.6, "kmh": 1.0 / 3.6},
}

_RE = re.compile(r"^\s*([-+0-9.eE]+)\s*([A-Za-z/]+)?\s*$")


def quantity(value, kind: str) -> float:
    """``quantity("0.5 Gcycles/MB", "density") -> 62.5``."""
    if isinstance(value, (int, float)):
        return float(value)
    if kind == "power" and isinstance(value, str) and value.strip().lower().endswith("dbm"):
        dbm = float(value.strip()[:-3])
        return 10 ** (dbm / 10.0) * 1e-3
    m = _RE.match(str(value))
    if not m:
        raise ValueError(f"cannot parse {kind} quantity {value!r}")
    number, unit = float(m.group(1)), m.group(2)
    if unit is None:
        return number
    try:
        return number * _SCALES[kind][unit.lower()]
    except KeyError:
        raise ValueError(f"unknown {kind} unit {unit!r} in {value!r}") from None
