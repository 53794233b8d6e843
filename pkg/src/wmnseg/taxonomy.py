"""Thalamic structure taxonomy: integer codes, names and nuclei groups."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

GROUPS = ("anterior", "lateral", "posterior", "medial", "others")
# Groups entering the diagnosis analysis; "others" holds the tract, not a nucleus.
NUCLEI_GROUPS = ("anterior", "lateral", "posterior", "medial")


@dataclass(frozen=True)
class Structure:
    code: int
    abbrev: str
    name: str
    group: str


STRUCTURES = (
    Structure(1, "AV", "Anterior ventral nucleus", "anterior"),
    Structure(2, "VA", "Ventral anterior nucleus", "lateral"),
    Structure(3, "VLa", "Ventral lateral anterior nucleus", "lateral"),
    Structure(4, "VLp", "Ventral lateral posterior nucleus", "lateral"),
    Structure(5, "VPl", "Ventral posterior lateral nucleus", "lateral"),
    Structure(6, "Pul", "Pulvinar nucleus", "posterior"),
    Structure(7, "LGN", "Lateral geniculate nucleus", "posterior"),
    Structure(8, "MGN", "Medial geniculate nucleus", "posterior"),
    Structure(9, "CM", "Centromedian nucleus", "medial"),
    Structure(10, "MD", "Mediodorsal nucleus", "medial"),
    Structure(11, "Hb", "Habenular nucleus", "medial"),
    Structure(12, "MTT", "Mammillothalamic tract", "others"),
)

N_STRUCTURES = len(STRUCTURES)
N_CLASSES = N_STRUCTURES + 1  # background + structures
CODES = tuple(s.code for s in STRUCTURES)
ABBREVS = tuple(s.abbrev for s in STRUCTURES)
# structures singled out as small in reports on thalamic parcellation accuracy
SMALL_STRUCTURES = ("AV", "VA", "VLa", "LGN", "MGN", "CM", "Hb", "MTT")

_BY_CODE = {s.code: s for s in STRUCTURES}
_BY_ABBREV = {s.abbrev: s for s in STRUCTURES}


def structure(key: int | str) -> Structure:
    """Look up a structure by integer code or abbreviation."""
    if isinstance(key, str):
        try:
            return _BY_ABBREV[key]
        except KeyError:
            raise KeyError(f"unknown structure abbreviation {key!r}") from None
    try:
        return _BY_CODE[int(key)]
    except KeyError:
        raise KeyError(f"unknown structure code {key!r}") from None


def code_of(abbrev: str) -> int:
    return structure(abbrev).code


def group_of(code: int) -> str:
    if int(code) == 0:
        raise KeyError("code 0 is background and belongs to no group")
    return structure(code).group


def members(group: str) -> tuple[Structure, ...]:
    if group not in GROUPS:
        raise KeyError(f"unknown group {group!r}")
    return tuple(s for s in STRUCTURES if s.group == group)


def to_json(path: str | Path | None = None) -> str:
    text = json.dumps([asdict(s) for s in STRUCTURES], indent=2)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text
