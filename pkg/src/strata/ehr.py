"""OMOP-lite event store: participants plus dated coded events.

Events are held in flat numpy arrays sorted by (person, day, concept) with a
per-person offset index, so windowed queries are two binary searches.
Dates are stored as integer day numbers (days since 1970-01-01).
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SEXES = ("male", "female", "other_unknown")
DOMAINS = ("condition", "procedure", "medication")

PARTICIPANT_HEADER = ["person_id", "sex_at_birth", "birth_date", "race", "ethnicity"]
EVENT_HEADER = ["person_id", "concept_code", "domain", "event_date"]

_EPOCH = dt.date(1970, 1, 1)


class StoreError(ValueError):
    """Raised when input files violate the participant/event contracts."""


def to_day(value: dt.date | str) -> int:
    """Convert a date (or ISO string) to a day number."""
    if isinstance(value, str):
        value = dt.date.fromisoformat(value)
    return (value - _EPOCH).days


def from_day(day: int) -> dt.date:
    return _EPOCH + dt.timedelta(days=int(day))


def iso_dates(days) -> np.ndarray:
    """Vectorized day numbers -> ``YYYY-MM-DD`` strings."""
    return np.datetime_as_string(np.asarray(days, dtype="datetime64[D]"), unit="D")


def _parse_date(text: str, path: Path, line: int) -> int:
    try:
        if len(text) != 10:
            raise ValueError(text)
        return to_day(dt.date.fromisoformat(text))
    except ValueError:
        raise StoreError(f"{path}:{line}: unparseable date {text!r}") from None


def _parse_id(text: str, path: Path, line: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise StoreError(f"{path}:{line}: person_id must be an integer, got {text!r}") from None
    if value < 0:
        raise StoreError(f"{path}:{line}: negative person_id {value}")
    return value


@dataclass(frozen=True)
class Participant:
    person_id: int
    sex_at_birth: str
    birth_date: dt.date
    race: str
    ethnicity: str


@dataclass(frozen=True)
class ClinicalEvent:
    person_id: int
    concept_code: str
    domain: str
    event_date: dt.date


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


class EventStore:
    """Immutable participant and event tables.

    Attributes:
        person_ids: sorted int64 array of participant ids.
        sex, race, ethnicity: object arrays aligned with ``person_ids``.
        birth_day: int64 day numbers aligned with ``person_ids``.
        concepts: sorted array of concept codes.
        concept_domain: domain of each concept, aligned with ``concepts``.
        ev_person, ev_concept, ev_day: event columns sorted by
            (person, day, concept); ``ev_person`` indexes ``person_ids`` and
            ``ev_concept`` indexes ``concepts``.
        offsets: events of person ``i`` are ``offsets[i]:offsets[i + 1]``.
    """

    def __init__(self, person_ids, sex, birth_day, race, ethnicity,
                 ev_person_id, ev_code, ev_domain, ev_day):
        person_ids = np.asarray(person_ids, dtype=np.int64)
        order = np.argsort(person_ids, kind="stable")
        person_ids = person_ids[order]
        if len(person_ids) > 1 and np.any(person_ids[1:] == person_ids[:-1]):
            dup = person_ids[1:][person_ids[1:] == person_ids[:-1]][0]
            raise StoreError(f"duplicate person_id {dup}")
        self.person_ids = person_ids
        self.sex = np.asarray(sex, dtype=object)[order]
        self.birth_day = np.asarray(birth_day, dtype=np.int64)[order]
        self.race = np.asarray(race, dtype=object)[order]
        self.ethnicity = np.asarray(ethnicity, dtype=object)[order]
        bad_sex = set(self.sex.tolist()) - set(SEXES)
        if bad_sex:
            raise StoreError(f"unknown sex_at_birth value(s): {sorted(bad_sex)}")

        ev_person_id = np.asarray(ev_person_id, dtype=np.int64)
        ev_code = np.asarray(ev_code, dtype=object)
        ev_domain = np.asarray(ev_domain, dtype=object)
        ev_day = np.asarray(ev_day, dtype=np.int64)

        pos = np.searchsorted(person_ids, ev_person_id)
        if len(person_ids):
            missing = person_ids[np.minimum(pos, len(person_ids) - 1)] != ev_person_id
        else:
            missing = np.ones(len(ev_person_id), dtype=bool)
        if np.any(missing):
            raise StoreError(
                f"event references unknown person_id {int(ev_person_id[np.argmax(missing)])}")

        concepts, ev_concept = np.unique(ev_code.astype(str), return_inverse=True)
        domain_of = np.empty(len(concepts), dtype=object)
        domain_of[ev_concept] = ev_domain
        clash = domain_of[ev_concept] != ev_domain
        if np.any(clash):
            code = concepts[ev_concept[np.argmax(clash)]]
            raise StoreError(f"concept {code} appears under more than one domain")

        order = np.lexsort((ev_concept, ev_day, pos))
        self.concepts = concepts.astype(object)
        self.concept_domain = domain_of
        self.ev_person = pos[order].astype(np.int64)
        self.ev_concept = ev_concept[order].astype(np.int64)
        self.ev_day = ev_day[order]
        self.offsets = np.searchsorted(self.ev_person, np.arange(len(person_ids) + 1))

        late = self.birth_day[self.ev_person] > self.ev_day
        if np.any(late):
            i = int(np.argmax(late))
            raise StoreError(
                f"person {person_ids[self.ev_person[i]]} has an event before birth")
        self._concept_index = {c: i for i, c in enumerate(self.concepts)}
        _freeze(self.person_ids, self.sex, self.birth_day, self.race, self.ethnicity,
                self.concepts, self.concept_domain, self.ev_person, self.ev_concept,
                self.ev_day, self.offsets)

    @property
    def n_participants(self) -> int:
        return len(self.person_ids)

    @property
    def n_events(self) -> int:
        return len(self.ev_day)

    def index_of(self, person_id) -> int:
        i = int(np.searchsorted(self.person_ids, person_id))
        if i >= len(self.person_ids) or self.person_ids[i] != person_id:
            raise KeyError(f"unknown person_id {person_id}")
        return i

    def indices_of(self, person_ids) -> np.ndarray:
        person_ids = np.asarray(person_ids, dtype=np.int64)
        idx = np.searchsorted(self.person_ids, person_ids)
        ok = idx < len(self.person_ids)
        ok[ok] = self.person_ids[idx[ok]] == person_ids[ok]
        if not np.all(ok):
            raise KeyError(f"unknown person_id {int(person_ids[np.argmin(ok)])}")
        return idx

    def concept_index(self, code: str) -> int:
        return self._concept_index[code]

    def has_concept(self, code: str) -> bool:
        return code in self._concept_index

    def participant(self, person_id) -> Participant:
        i = self.index_of(person_id)
        return Participant(int(self.person_ids[i]), self.sex[i], from_day(self.birth_day[i]),
                           self.race[i], self.ethnicity[i])

    def _event(self, k: int) -> ClinicalEvent:
        c = self.ev_concept[k]
        return ClinicalEvent(int(self.person_ids[self.ev_person[k]]), self.concepts[c],
                             self.concept_domain[c], from_day(self.ev_day[k]))

    def events(self, person_id) -> list[ClinicalEvent]:
        i = self.index_of(person_id)
        return [self._event(k) for k in range(self.offsets[i], self.offsets[i + 1])]

    def window_slice(self, person_index: int, end_day: int, window_days) -> slice:
        """Event positions of one person with ``end - window < day <= end``."""
        lo, hi = self.offsets[person_index], self.offsets[person_index + 1]
        days = self.ev_day[lo:hi]
        stop = lo + int(np.searchsorted(days, end_day, side="right"))
        if math.isinf(window_days):
            return slice(lo, stop)
        start = lo + int(np.searchsorted(days, end_day - window_days, side="right"))
        return slice(start, stop)

    def last_event_day(self, person_index: int) -> int | None:
        lo, hi = self.offsets[person_index], self.offsets[person_index + 1]
        return int(self.ev_day[hi - 1]) if hi > lo else None

    def iter_participants(self):
        for pid in self.person_ids:
            yield self.participant(int(pid))


def events_in_window(store: EventStore, person_id, end_date, window_days) -> list[ClinicalEvent]:
    """Events of ``person_id`` dated in ``(end_date - window_days, end_date]``.

    ``window_days`` may be ``math.inf`` to return the full history up to
    ``end_date``.
    """
    if not window_days > 0:
        raise ValueError("window_days must be positive")
    i = store.index_of(person_id)
    end = end_date if isinstance(end_date, (int, np.integer)) else to_day(end_date)
    sl = store.window_slice(i, end, window_days)
    return [store._event(k) for k in range(sl.start, sl.stop)]


def _read_rows(path: Path, header: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise StoreError(f"{path}: empty file") from None
        if first != header:
            raise StoreError(f"{path}:1: expected header {','.join(header)}, got {','.join(first)}")
        width = len(header)
        for line, row in enumerate(reader, start=2):
            if len(row) != width:
                raise StoreError(f"{path}:{line}: malformed row, expected {width} fields, got {len(row)}")
            yield line, row


def load_store(participants_path, events_path) -> EventStore:
    """Load and validate ``participants.csv`` and ``events.csv``."""
    participants_path, events_path = Path(participants_path), Path(events_path)
    pids, sex, birth, race, eth = [], [], [], [], []
    for line, (pid, s, b, r, e) in _read_rows(participants_path, PARTICIPANT_HEADER):
        if s not in SEXES:
            raise StoreError(f"{participants_path}:{line}: unknown sex_at_birth {s!r}")
        pids.append(_parse_id(pid, participants_path, line))
        sex.append(s)
        birth.append(_parse_date(b, participants_path, line))
        race.append(r)
        eth.append(e)
    known = set(pids)
    if len(known) != len(pids):
        raise StoreError(f"{participants_path}: duplicate person_id values")

    ev_pid, ev_code, ev_dom, ev_day = [], [], [], []
    for line, (pid, code, dom, day) in _read_rows(events_path, EVENT_HEADER):
        p = _parse_id(pid, events_path, line)
        if p not in known:
            raise StoreError(f"{events_path}:{line}: event references unknown person_id {p}")
        if dom not in DOMAINS:
            raise StoreError(f"{events_path}:{line}: unknown domain {dom!r}")
        if not code:
            raise StoreError(f"{events_path}:{line}: empty concept_code")
        ev_pid.append(p)
        ev_code.append(code)
        ev_dom.append(dom)
        ev_day.append(_parse_date(day, events_path, line))
    store = EventStore(pids, sex, birth, race, eth, ev_pid, ev_code, ev_dom, ev_day)
    logger.info("loaded %d participants, %d events", store.n_participants, store.n_events)
    return store


def write_store(store: EventStore, participants_path, events_path) -> None:
    """Serialize a store in normalized order (person, date, concept)."""
    with open(participants_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PARTICIPANT_HEADER)
        for i, pid in enumerate(store.person_ids):
            w.writerow([int(pid), store.sex[i], from_day(store.birth_day[i]).isoformat(),
                        store.race[i], store.ethnicity[i]])
    with open(events_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        pid = store.person_ids[store.ev_person].tolist()
        codes = store.concepts[store.ev_concept].tolist()
        doms = store.concept_domain[store.ev_concept].tolist()
        dates = iso_dates(store.ev_day).tolist()
        w.writerows(zip(pid, codes, doms, dates))
