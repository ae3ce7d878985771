"""Instrument identifiers, in canonical order."""

from __future__ import annotations

from .errors import UsageError

C2 = "C2"
EIT = "EIT"
MDI = "MDI"
INSTRUMENTS: tuple[str, ...] = (C2, EIT, MDI)


def check_instrument(name: str) -> str:
    key = str(name).upper()
    if key not in INSTRUMENTS:
        raise UsageError(f"unknown instrument {name!r}; expected one of {INSTRUMENTS}")
    return key


def canonical_order(names) -> tuple[str, ...]:
    wanted = {check_instrument(n) for n in names}
    return tuple(i for i in INSTRUMENTS if i in wanted)
