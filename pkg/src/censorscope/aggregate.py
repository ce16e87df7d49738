"""Country-level analyses over verdicts and reports.

Counting rules:

* A target is *censored in a country* when at least one vantage point in that
  country produced a censored verdict for it.
* A country's total fraction counts each censored target once, however many
  methods hit it. Per-method fractions are taken over censored targets and
  can sum past 1 when verdicts carry several methods.
* A target is a *dead site* when no vantage point anywhere loaded it (outcome
  ok or censored). Dead sites are dropped before any statistic is computed.
* Ties are broken lexicographically (country code, target name, method name).
* Days are bucketed in UTC.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta, timezone
from statistics import fmean
from typing import Iterable, Mapping, Optional, Sequence, Union

from .model import (
    AnomalyKind,
    Outcome,
    RawMeasurement,
    ReportRecord,
    VantageKind,
    VantagePoint,
    Verdict,
    url_host,
)

MARGINAL_THRESHOLD = 0.05
CENTRALIZATION_THRESHOLD = 0.6

Registry = Mapping[str, VantagePoint]


def _loaded(v: Verdict) -> bool:
    return v.outcome in (Outcome.OK, Outcome.CENSORED)


@dataclass(frozen=True)
class DeadSiteSplit:
    kept: frozenset
    discarded: frozenset


def dead_site_filter(verdicts: Iterable[Verdict]) -> DeadSiteSplit:
    """Split target URLs into those loaded somewhere and those loaded nowhere.

    A served blockpage counts as a load: it proves the name resolved and a
    path to the site exists.
    """
    seen: set[str] = set()
    loaded: set[str] = set()
    for v in verdicts:
        seen.add(v.target.url)
        if _loaded(v):
            loaded.add(v.target.url)
    return DeadSiteSplit(frozenset(loaded), frozenset(seen - loaded))


def without_dead_sites(verdicts: Iterable[Verdict]) -> list[Verdict]:
    verdicts = list(verdicts)
    split = dead_site_filter(verdicts)
    return [v for v in verdicts if v.target.url in split.kept]


def relabel_dead_sites(verdicts: Iterable[Verdict]) -> list[Verdict]:
    verdicts = list(verdicts)
    split = dead_site_filter(verdicts)
    return [
        replace(v, outcome=Outcome.DEAD_SITE, methods=frozenset()) if v.target.url in split.discarded else v
        for v in verdicts
    ]


# ---------------------------------------------------------------------------
# Fractions and ranking


@dataclass(frozen=True)
class CountryFraction:
    country: str
    tested: int
    censored: int
    method_counts: tuple = ()  # sorted (kind name, censored-target count)

    @property
    def total(self) -> float:
        return self.censored / self.tested if self.tested else 0.0

    @property
    def methods(self) -> dict[str, float]:
        return {k: n / self.censored for k, n in self.method_counts} if self.censored else {}

    @property
    def marginal(self) -> bool:
        return self.total < MARGINAL_THRESHOLD


def _by_target(verdicts: Iterable[Verdict]) -> tuple[set[str], dict[str, set]]:
    tested: set[str] = set()
    censored: dict[str, set] = {}
    for v in verdicts:
        tested.add(v.target.url)
        if v.outcome is Outcome.CENSORED:
            censored.setdefault(v.target.url, set()).update(v.methods)
    return tested, censored


def _fraction_from(country: str, verdicts: Iterable[Verdict]) -> CountryFraction:
    tested, censored = _by_target(verdicts)
    counts: dict[str, int] = defaultdict(int)
    for methods in censored.values():
        for k in methods:
            counts[AnomalyKind(k).value] += 1
    return CountryFraction(country, len(tested), len(censored), tuple(sorted(counts.items())))


def _in_country(verdicts: Iterable[Verdict], country: str, registry: Registry) -> list[Verdict]:
    return [v for v in verdicts if v.vantage in registry and registry[v.vantage].country == country]


def censorship_fraction(verdicts: Iterable[Verdict], country: str, registry: Registry) -> CountryFraction:
    """Fraction of tested targets censored in ``country`` (dead sites must already be removed)."""
    return _fraction_from(country, _in_country(verdicts, country, registry))


def least_free_ranking(verdicts: Iterable[Verdict], registry: Registry, drop_dead: bool = True) -> list[CountryFraction]:
    """Countries by descending censored fraction, ties by country code."""
    verdicts = without_dead_sites(verdicts) if drop_dead else list(verdicts)
    grouped: dict[str, list[Verdict]] = defaultdict(list)
    for v in verdicts:
        vp = registry.get(v.vantage)
        if vp is not None:
            grouped[vp.country].append(v)
    fractions = [_fraction_from(c, vs) for c, vs in grouped.items()]
    return sorted(fractions, key=lambda f: (-f.total, f.country))


# ---------------------------------------------------------------------------
# Centralization


@dataclass(frozen=True)
class Centralization:
    share: Optional[float]
    dominant_method: Optional[str]
    label: str  # centralized-indicative | decentralized-indicative | no-signal


def centralization_score(verdicts: Iterable[Verdict], threshold: float = CENTRALIZATION_THRESHOLD) -> Centralization:
    """Share of censored targets hit by the most common method.

    A single dominant method suggests one national apparatus; several methods of
    similar weight suggest ISP-level filtering.
    """
    frac = _fraction_from("", verdicts)
    if not frac.censored:
        return Centralization(None, None, "no-signal")
    method, count = min(frac.method_counts, key=lambda kv: (-kv[1], kv[0]))
    share = count / frac.censored
    label = "centralized-indicative" if share >= threshold else "decentralized-indicative"
    return Centralization(share, method, label)


def centralization_by_country(
    verdicts: Iterable[Verdict], registry: Registry, threshold: float = CENTRALIZATION_THRESHOLD, drop_dead: bool = True
) -> dict[str, Centralization]:
    verdicts = without_dead_sites(verdicts) if drop_dead else list(verdicts)
    grouped: dict[str, list[Verdict]] = defaultdict(list)
    for v in verdicts:
        if v.vantage in registry:
            grouped[registry[v.vantage].country].append(v)
    return {c: centralization_score(vs, threshold) for c, vs in sorted(grouped.items())}


# ---------------------------------------------------------------------------
# Availability and diversity

FLEET, VOLUNTEER, BOTH, NONE = "fleet", "volunteer", "both", "none"


def fleet_mode(vp: VantagePoint) -> str:
    return VOLUNTEER if vp.kind is VantageKind.VOLUNTEER else FLEET


@dataclass(frozen=True)
class AvailabilityMatrix:
    countries: tuple
    days: tuple
    cells: dict = field(default_factory=dict)  # (country, day) -> fleet | volunteer | both

    def mark(self, country: str, day: date) -> str:
        return self.cells.get((country, day), NONE)


ReportLike = Union[ReportRecord, RawMeasurement, tuple]


def _vantage_and_time(r: ReportLike) -> tuple[str, datetime]:
    if isinstance(r, ReportRecord):
        r = r.measurement
    if isinstance(r, RawMeasurement):
        return r.vantage, r.started_at
    return r[0], r[1]


def availability_matrix(reports: Iterable[ReportLike], registry: Registry, start: date, end: date) -> AvailabilityMatrix:
    """Which kinds of vantage point reported from each country on each UTC day."""
    days = tuple(start + timedelta(days=i) for i in range((end - start).days + 1))
    seen: dict[tuple, set] = defaultdict(set)
    for r in reports:
        vid, ts = _vantage_and_time(r)
        vp = registry.get(vid)
        if vp is None:
            continue
        day = ts.astimezone(timezone.utc).date()
        if start <= day <= end:
            seen[(vp.country, day)].add(fleet_mode(vp))
    cells = {k: (BOTH if len(modes) == 2 else next(iter(modes))) for k, modes in seen.items()}
    countries = tuple(sorted({vp.country for vp in registry.values()}))
    return AvailabilityMatrix(countries, days, cells)


@dataclass(frozen=True)
class Diversity:
    per_country: dict  # country -> distinct ASN count

    @property
    def mean(self) -> Optional[float]:
        return fmean(self.per_country.values()) if self.per_country else None


def as_diversity(registry: Registry, reports: Optional[Iterable[ReportLike]] = None) -> Diversity:
    """Distinct ASNs per country among vantage points that reported.

    With ``reports=None`` every registered vantage point counts as reporting.
    """
    if reports is None:
        active = set(registry)
    else:
        active = {_vantage_and_time(r)[0] for r in reports}
    asns: dict[str, set] = defaultdict(set)
    for vid in active:
        vp = registry.get(vid)
        if vp is not None:
            asns[vp.country].add(vp.asn)
    return Diversity({c: len(s) for c, s in sorted(asns.items())})


# ---------------------------------------------------------------------------
# RST ranking


def rst_ranking(verdicts: Iterable[Verdict], drop_dead: bool = True) -> list[tuple[str, int]]:
    """Targets by number of distinct vantage points whose evidence holds a premature RST."""
    verdicts = without_dead_sites(verdicts) if drop_dead else list(verdicts)
    vps: dict[str, set] = defaultdict(set)
    for v in verdicts:
        if any(a.kind is AnomalyKind.TCP_RST for a in v.evidence):
            vps[url_host(v.target.url)].add(v.vantage)
    return sorted(((t, len(s)) for t, s in vps.items()), key=lambda kv: (-kv[1], kv[0]))


# ---------------------------------------------------------------------------
# Plot data

PLOT_KINDS = ("fractions", "matrix", "rst", "diversity", "centralization")
_HEADERS = {
    "fractions": ["rank", "country", "tested", "censored", "total", "marginal", "method_counts"],
    "matrix": ["country", "day", "mark"],
    "rst": ["rank", "target", "vantage_points"],
    "diversity": ["country", "distinct_asns"],
    "centralization": ["country", "dominant_method", "share", "label"],
}


def _rows(analysis, kind: str) -> list[list]:
    if kind == "fractions":
        return [
            [i + 1, f.country, f.tested, f.censored, repr(f.total), int(f.marginal),
             ";".join(f"{k}={n}" for k, n in f.method_counts)]
            for i, f in enumerate(analysis)
        ]
    if kind == "matrix":
        return [[c, d.isoformat(), analysis.mark(c, d)] for c in analysis.countries for d in analysis.days]
    if kind == "rst":
        return [[i + 1, t, n] for i, (t, n) in enumerate(analysis)]
    if kind == "diversity":
        return [[c, n] for c, n in sorted(analysis.per_country.items())]
    if kind == "centralization":
        return [
            [c, s.dominant_method or "", "" if s.share is None else repr(s.share), s.label]
            for c, s in sorted(analysis.items())
        ]
    raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")


def emit_plot_data(analysis, kind: str) -> str:
    """Tab-separated table with a header row; row order is fixed per kind."""
    rows = _rows(analysis, kind)
    out = io.StringIO()
    writer = csv.writer(out, delimiter="\t", lineterminator="\n")
    writer.writerow(_HEADERS[kind])
    writer.writerows(rows)
    return out.getvalue()


def parse_plot_data(text: str, kind: str):
    """Inverse of :func:`emit_plot_data`."""
    reader = csv.reader(io.StringIO(text), delimiter="\t")
    header = next(reader, None)
    if header != _HEADERS[kind]:
        raise ValueError(f"unexpected header for {kind}: {header}")
    rows = list(reader)
    if kind == "fractions":
        out = []
        for _, country, tested, censored, _total, _marg, methods in rows:
            counts = tuple((k, int(n)) for k, n in (m.split("=") for m in methods.split(";") if m))
            out.append(CountryFraction(country, int(tested), int(censored), counts))
        return out
    if kind == "matrix":
        countries, days, cells = [], [], {}
        for c, d, mark in rows:
            day = date.fromisoformat(d)
            if c not in countries:
                countries.append(c)
            if day not in days:
                days.append(day)
            if mark != NONE:
                cells[(c, day)] = mark
        return AvailabilityMatrix(tuple(countries), tuple(days), cells)
    if kind == "rst":
        return [(t, int(n)) for _, t, n in rows]
    if kind == "diversity":
        return Diversity({c: int(n) for c, n in rows})
    return {
        c: Centralization(float(share) if share else None, method or None, label)
        for c, method, share, label in rows
    }


def registry_from(vantage_points: Iterable[VantagePoint]) -> dict[str, VantagePoint]:
    return {vp.id: vp for vp in vantage_points}
