"""Recall@N under a geographic match radius, per scenario."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .events import GeoTag, SampleRecord, haversine
from .retrieval import (DEFAULT_TOP_N, QueryResult, check_fingerprint, encode_arrays, load_batch,
                        order_by_score, score_candidates, search)

RECALL_NS = (1, 5, 10, 15, 20, 30)
MATCH_RADIUS_M = 35.0
MODES = ("retrieval", "hybrid")


@dataclass
class RecallTable:
    ns: tuple[int, ...] = RECALL_NS
    scenarios: list[str] = field(default_factory=list)
    values: dict[tuple[str, int], float] = field(default_factory=dict)

    def __getitem__(self, key):
        scenario, n = key
        return self.values[(scenario, n)]

    def column(self, scenario):
        return [self.values[(scenario, n)] for n in self.ns]

    def is_monotone(self) -> bool:
        return all(np.all(np.diff(self.column(s)) >= 0) for s in self.scenarios)


def first_hit_ranks(results, db_geotags: dict[str, GeoTag], query_geotags: dict[str, GeoTag],
                    radius_m: float = MATCH_RADIUS_M) -> list[float]:
    """Rank (1-based) of the first candidate within ``radius_m`` of each query; inf if none."""
    ranks = []
    for res in results:
        if res.query_id not in query_geotags:
            raise KeyError(f"unknown query id {res.query_id!r}")
        q = query_geotags[res.query_id]
        hit = np.inf
        for k, cand in enumerate(res.candidates, start=1):
            if cand.sample_id not in db_geotags:
                raise KeyError(f"unknown candidate id {cand.sample_id!r}")
            g = db_geotags[cand.sample_id]
            if haversine(q.latitude, q.longitude, g.latitude, g.longitude) < radius_m:
                hit = k
                break
        ranks.append(hit)
    return ranks


def recall_at_n(results, db_geotags, query_geotags, ns=RECALL_NS, radius_m=MATCH_RADIUS_M,
                scenario_of=None) -> RecallTable:
    """Fraction of queries whose top-N list holds a candidate within the radius.

    ``scenario_of`` maps query id to a column tag; all queries share one
    column ("all") when it is omitted.
    """
    ranks = first_hit_ranks(results, db_geotags, query_geotags, radius_m)
    groups: dict[str, list[float]] = defaultdict(list)
    for res, r in zip(results, ranks):
        groups[scenario_of(res.query_id) if scenario_of else "all"].append(r)
    table = RecallTable(tuple(ns), sorted(groups))
    for s, rs in groups.items():
        arr = np.array(rs)
        for n in ns:
            table.values[(s, n)] = float(np.mean(arr <= n))
    return table


def run_queries(db, queries: list[SampleRecord], manifest_path, model, mode: str = "hybrid",
                top_n: int = DEFAULT_TOP_N, arrays=None) -> list[QueryResult]:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    c = model.config
    if arrays is None:
        channels = {"event": 1, "image": 3}
        arrays = {}
        for modality in ("event", "image"):
            recs = [q for q in queries if q.modality == modality]
            if recs:
                arrays[modality] = dict(zip([r.id for r in recs], load_batch(
                    recs, manifest_path, channels[modality], c.input_width, c.input_height)))
    out = []
    for modality in ("event", "image"):
        recs = [q for q in queries if q.modality == modality]
        if not recs:
            continue
        retr, clsv = encode_arrays(model, np.stack([arrays[modality][r.id] for r in recs]), modality)
        for r, qr, qc in zip(recs, retr, clsv):
            cands = search(db, qr, top_n)
            if mode == "hybrid" and cands:
                out.append(order_by_score(r.id, cands, score_candidates(db, qc, cands, model)))
            else:
                out.append(QueryResult(r.id, tuple(cands)))
    order = {q.id: i for i, q in enumerate(queries)}
    out.sort(key=lambda res: order[res.query_id])
    return out


def evaluate(db, queries: list[SampleRecord], manifest_path, model, mode: str = "hybrid",
             fingerprint: bytes | None = None, ns=RECALL_NS, radius_m=MATCH_RADIUS_M,
             top_n: int = DEFAULT_TOP_N, arrays=None) -> RecallTable:
    """Run every query and tabulate Recall@N per scenario."""
    check_fingerprint(db, model.fingerprint() if fingerprint is None else fingerprint)
    top_n = max(top_n, max(ns))
    results = run_queries(db, queries, manifest_path, model, mode, top_n, arrays)
    scen = {q.id: q.scenario for q in queries}
    return recall_at_n(results, dict(zip(db.ids, db.geotags)), {q.id: q.geotag for q in queries},
                       ns, radius_m, scen.__getitem__)


# --------------------------------------------------------------------- reports


def report(table: RecallTable, fmt: str = "csv") -> str:
    if fmt == "csv":
        lines = ["scenario,N,recall"]
        lines += [f"{s},{n},{table.values[(s, n)]!r}" for s in table.scenarios for n in table.ns]
        return "\n".join(lines) + "\n"
    if fmt in ("markdown", "md"):
        header = ["N", *table.scenarios]
        rows = [[str(n), *(f"{table.values[(s, n)]:.2f}" for s in table.scenarios)] for n in table.ns]
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
        fmt_row = lambda r: "| " + " | ".join(v.rjust(w) for v, w in zip(r, widths)) + " |"
        sep = "|" + "|".join("-" * (w + 1) + ":" for w in widths) + "|"
        return "\n".join([fmt_row(header), sep, *map(fmt_row, rows)]) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report_csv(text: str) -> RecallTable:
    rows = list(csv.DictReader(io.StringIO(text)))
    ns, scenarios, values = [], [], {}
    for row in rows:
        s, n = row["scenario"], int(row["N"])
        values[(s, n)] = float(row["recall"])
        if n not in ns:
            ns.append(n)
        if s not in scenarios:
            scenarios.append(s)
    return RecallTable(tuple(ns), scenarios, values)
