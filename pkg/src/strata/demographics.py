"""Sex x age strata shared by the generator, matching and the benchmark."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

AGE_BINS = ("18-40", "40-60", "60+")
STRATA_SEXES = ("male", "female")
REMAINDER = "other_unknown"


@dataclass(frozen=True, order=True)
class Stratum:
    sex: str
    age_bin: str

    @property
    def label(self) -> str:
        return f"{self.sex.capitalize()} {self.age_bin}"

    @classmethod
    def parse(cls, label: str) -> "Stratum":
        sex, age_bin = label.split(" ", 1)
        stratum = cls(sex.lower(), age_bin)
        if stratum not in STRATA:
            raise ValueError(f"unknown stratum {label!r}")
        return stratum


STRATA = tuple(Stratum(s, a) for s in STRATA_SEXES for a in AGE_BINS)
STRATUM_LABELS = tuple(s.label for s in STRATA)


def age_years(birth: dt.date, on: dt.date) -> int:
    """Completed years of age on ``on``."""
    return on.year - birth.year - ((on.month, on.day) < (birth.month, birth.day))


def age_bin(age: int) -> str:
    if age < 40:
        return "18-40"
    if age < 60:
        return "40-60"
    return "60+"


def stratum_label(sex: str, age: int) -> str:
    """Stratum label, or ``"other_unknown"`` for the remainder bucket."""
    if sex not in STRATA_SEXES:
        return REMAINDER
    return Stratum(sex, age_bin(age)).label


def assign_stratum(participant, index_date: dt.date) -> Stratum | None:
    """Stratum of a participant at ``index_date``; ``None`` for the remainder bucket."""
    if participant.sex_at_birth not in STRATA_SEXES:
        return None
    return Stratum(participant.sex_at_birth,
                   age_bin(age_years(participant.birth_date, index_date)))
