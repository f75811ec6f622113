"""Per-url outcome counters at session/user/global scope and 18-dim features.

Each scope keeps six counters per url:

    level2, level1, level0   click events by relevance grade
    shown                    impressions
    missed, skipped          unclicked impressions below / above the
                             lowest-ranked clicked url of the serp

A feature vector concatenates the three scopes in (session, user, global)
order, six counters each, and applies ln(1 + x) so heavy-tailed counts do
not destabilize the linear models. Absent keys read as all-zero counters.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from serpbandit.clicklog import LabeledSerp
from serpbandit.errors import SerpBanditError

COUNTER_FIELDS = ("level2", "level1", "level0", "shown", "missed", "skipped")
FEATURE_DIM = 18

_SCOPE_SESSION, _SCOPE_USER, _SCOPE_GLOBAL = 0, 1, 2
_SCOPE_NAMES = {_SCOPE_SESSION: "session", _SCOPE_USER: "user", _SCOPE_GLOBAL: "global"}
_SNAPSHOT_MAGIC = b"CSNP"
_SNAPSHOT_VERSION = 1
_RECORD = struct.Struct("<BQQ6Q")


class UrlNotShown(SerpBanditError):
    """The url is not among the serp's ten results."""


@dataclass(slots=True)
class UrlCounters:
    level2: int = 0
    level1: int = 0
    level0: int = 0
    shown: int = 0
    missed: int = 0
    skipped: int = 0

    def as_tuple(self) -> tuple[int, ...]:
        return (self.level2, self.level1, self.level0, self.shown, self.missed, self.skipped)

    def copy(self) -> "UrlCounters":
        return UrlCounters(*self.as_tuple())


def classify_outcome(serp: LabeledSerp, url_id: int) -> tuple[str, int | None]:
    """Outcome of one shown url: ('clicked', max grade), ('skipped', None)
    or ('missed', None).

    Skipped means the url ranks strictly above the lowest-ranked clicked
    url and was not clicked itself; every other unclicked impression is
    missed (all of them when the serp has no clicks).
    """
    urls = serp.url_ids()
    if url_id not in urls:
        raise UrlNotShown(f"url {url_id} not shown on serp {serp.serp_id}")
    clicked = serp.clicked_urls()
    if url_id in clicked:
        return ("clicked", serp.grade_of(url_id))
    if clicked:
        lowest_clicked_rank = max(urls.index(u) for u in clicked)
        if urls.index(url_id) < lowest_clicked_rank:
            return ("skipped", None)
    return ("missed", None)


class CountStores:
    """Session-, user- and global-scope counter maps."""

    def __init__(self) -> None:
        self.session_store: dict[tuple[int, int], UrlCounters] = {}
        self.user_store: dict[tuple[int, int], UrlCounters] = {}
        self.global_store: dict[int, UrlCounters] = {}

    @staticmethod
    def _get(store: dict, key) -> UrlCounters:
        counters = store.get(key)
        if counters is None:
            counters = UrlCounters()
            store[key] = counters
        return counters

    def update_counts(self, serp: LabeledSerp, session_id: int, user_id: int) -> None:
        """Fold one fully-labeled serp into all three scopes.

        Every shown url gains shown += 1 per scope; a clicked url gains one
        level counter per click event (by that event's grade), an unclicked
        url gains skipped or missed.
        """
        clicks_by_url: dict[int, list[int]] = {}
        for click in serp.clicks:
            clicks_by_url.setdefault(click.url_id, []).append(click.grade)
        for url_id, _domain in serp.results:
            scoped = (
                self._get(self.session_store, (session_id, url_id)),
                self._get(self.user_store, (user_id, url_id)),
                self._get(self.global_store, url_id),
            )
            grades = clicks_by_url.get(url_id)
            kind = None
            if grades is None:
                kind, _ = classify_outcome(serp, url_id)
            for counters in scoped:
                counters.shown += 1
                if grades is not None:
                    for g in grades:
                        if g == 2:
                            counters.level2 += 1
                        elif g == 1:
                            counters.level1 += 1
                        else:
                            counters.level0 += 1
                elif kind == "skipped":
                    counters.skipped += 1
                else:
                    counters.missed += 1

    def extract_counts(self, session_id: int, user_id: int, url_id: int) -> np.ndarray:
        """Raw 18-vector of counts, (session, user, global) blocks in order."""
        zero = (0, 0, 0, 0, 0, 0)
        s = self.session_store.get((session_id, url_id))
        u = self.user_store.get((user_id, url_id))
        g = self.global_store.get(url_id)
        return np.array(
            (s.as_tuple() if s else zero)
            + (u.as_tuple() if u else zero)
            + (g.as_tuple() if g else zero),
            dtype=np.float64,
        )

    def extract_features(self, session_id: int, user_id: int, url_id: int) -> np.ndarray:
        return np.log1p(self.extract_counts(session_id, user_id, url_id))

    def candidate_features(
        self, session_id: int, user_id: int, url_ids
    ) -> np.ndarray:
        """Feature matrix for a serp's candidates, one row per url in rank order."""
        out = np.empty((len(url_ids), FEATURE_DIM))
        for i, url_id in enumerate(url_ids):
            out[i] = self.extract_counts(session_id, user_id, url_id)
        return np.log1p(out, out=out)

    def evict_session(self, session_id: int) -> None:
        """Drop a finished session's counters; bounds memory over long logs."""
        stale = [k for k in self.session_store if k[0] == session_id]
        for k in stale:
            del self.session_store[k]

    def copy(self) -> "CountStores":
        dup = CountStores()
        dup.session_store = {k: v.copy() for k, v in self.session_store.items()}
        dup.user_store = {k: v.copy() for k, v in self.user_store.items()}
        dup.global_store = {k: v.copy() for k, v in self.global_store.items()}
        return dup

    # -- persistence --------------------------------------------------------

    def _records(self):
        for (sid, url), c in sorted(self.session_store.items()):
            yield (_SCOPE_SESSION, sid, url) + c.as_tuple()
        for (uid, url), c in sorted(self.user_store.items()):
            yield (_SCOPE_USER, uid, url) + c.as_tuple()
        for url, c in sorted(self.global_store.items()):
            yield (_SCOPE_GLOBAL, 0, url) + c.as_tuple()

    def save(self, path: str) -> None:
        records = list(self._records())
        with open(path, "wb") as fh:
            fh.write(_SNAPSHOT_MAGIC)
            fh.write(struct.pack("<BQ", _SNAPSHOT_VERSION, len(records)))
            for rec in records:
                fh.write(_RECORD.pack(*rec))

    @classmethod
    def load(cls, path: str) -> "CountStores":
        stores = cls()
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _SNAPSHOT_MAGIC:
                raise SerpBanditError(f"{path}: not a counter snapshot")
            version, count = struct.unpack("<BQ", fh.read(9))
            if version != _SNAPSHOT_VERSION:
                raise SerpBanditError(f"{path}: unsupported snapshot version {version}")
            for _ in range(count):
                scope, k1, k2, *counts = _RECORD.unpack(fh.read(_RECORD.size))
                counters = UrlCounters(*counts)
                if scope == _SCOPE_SESSION:
                    stores.session_store[(k1, k2)] = counters
                elif scope == _SCOPE_USER:
                    stores.user_store[(k1, k2)] = counters
                elif scope == _SCOPE_GLOBAL:
                    stores.global_store[k2] = counters
                else:
                    raise SerpBanditError(f"{path}: unknown scope tag {scope}")
        return stores

    def to_csv(self, path: str) -> None:
        """Debug-friendly text export of the snapshot records."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("scope", "key1", "key2") + COUNTER_FIELDS)
            for scope, k1, k2, *counts in self._records():
                writer.writerow([_SCOPE_NAMES[scope], k1, k2] + counts)
