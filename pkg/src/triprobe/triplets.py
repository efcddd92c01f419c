"""The instrument/verb/target label space and its component projections.

A triplet class m is a composite label (i, v, t).  Component scores for
d in {I, V, T, IV, IT, IVT} are maxima of the triplet scores over the
preimage of the projection, and component labels are ORs over the same
preimage.  Component classes with no preimage in the table are "absent":
their projected score is NaN, they carry defined=False, and metrics must
exclude them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

COMPONENTS = ("I", "V", "T", "IV", "IT", "IVT")


class TripletTableError(ValueError):
    """Malformed triplet table or map file."""


@dataclass(frozen=True)
class TripletTable:
    """Rows map each triplet class m to its (i, v, t) component indices."""

    n_instruments: int
    n_verbs: int
    n_targets: int
    rows: np.ndarray  # (n_triplets, 3) int

    iv_pairs: tuple = field(init=False, repr=False)
    it_pairs: tuple = field(init=False, repr=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        if rows.ndim != 2 or rows.shape[1] != 3:
            raise TripletTableError("rows must be (n, 3)")
        if rows.shape[0] == 0:
            raise TripletTableError("table needs at least one triplet class")
        for col, count, name in ((0, self.n_instruments, "instrument"),
                                 (1, self.n_verbs, "verb"),
                                 (2, self.n_targets, "target")):
            bad = (rows[:, col] < 0) | (rows[:, col] >= count)
            if bad.any():
                m = int(np.flatnonzero(bad)[0])
                raise TripletTableError(
                    f"row {m}: {name} index {rows[m, col]} out of range [0, {count})")
        seen = {}
        for m, tup in enumerate(map(tuple, rows)):
            if tup in seen:
                raise TripletTableError(f"duplicate triplet {tup} at rows {seen[tup]} and {m}")
            seen[tup] = m
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "iv_pairs", tuple(sorted({(int(i), int(v)) for i, v in rows[:, (0, 1)]})))
        object.__setattr__(self, "it_pairs", tuple(sorted({(int(i), int(t)) for i, t in rows[:, (0, 2)]})))

    @property
    def n_triplets(self) -> int:
        return self.rows.shape[0]

    def component_count(self, d: str) -> int:
        return {
            "I": self.n_instruments,
            "V": self.n_verbs,
            "T": self.n_targets,
            "IV": len(self.iv_pairs),
            "IT": len(self.it_pairs),
            "IVT": self.n_triplets,
        }[_check_component(d)]

    def projection(self, d: str) -> np.ndarray:
        """Vector h_d: triplet class m -> component class index."""
        d = _check_component(d)
        if d == "IVT":
            return np.arange(self.n_triplets)
        if d in ("I", "V", "T"):
            return self.rows[:, {"I": 0, "V": 1, "T": 2}[d]].copy()
        pairs = self.iv_pairs if d == "IV" else self.it_pairs
        lookup = {pair: k for k, pair in enumerate(pairs)}
        cols = (0, 1) if d == "IV" else (0, 2)
        return np.array([lookup[(int(r[cols[0]]), int(r[cols[1]]))] for r in self.rows])


def _check_component(d: str) -> str:
    if d not in COMPONENTS:
        raise TripletTableError(f"unknown component {d!r}; expected one of {COMPONENTS}")
    return d


def build_table(component_counts, rows) -> TripletTable:
    """Construct and validate a table from (I, V, T) counts and (i, v, t) rows."""
    ci, cv, ct = (int(c) for c in component_counts)
    return TripletTable(ci, cv, ct, np.asarray(list(rows), dtype=np.int64))


def full_product_table(n_instruments: int, n_verbs: int, n_targets: int) -> TripletTable:
    """Table over every (i, v, t) combination; handy default for synthetic data."""
    rows = [(i, v, t)
            for i in range(n_instruments)
            for v in range(n_verbs)
            for t in range(n_targets)]
    return build_table((n_instruments, n_verbs, n_targets), rows)


def project(table: TripletTable, d: str, m: int) -> int:
    """h_d(m): the component class of triplet class m under d."""
    if not 0 <= m < table.n_triplets:
        raise TripletTableError(f"triplet class {m} out of range [0, {table.n_triplets})")
    return int(table.projection(d)[m])


def component_logits(y_ivt: np.ndarray, table: TripletTable, d: str):
    """Project triplet scores to component scores by per-class max.

    y_ivt is (n_triplets,) or (N, n_triplets).  Returns (values, defined):
    values has the component class count on its last axis with NaN at
    absent classes, defined marks classes that have at least one preimage.
    """
    y = np.asarray(y_ivt, dtype=np.float64)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[None, :]
    if y.ndim != 2 or y.shape[1] != table.n_triplets:
        raise TripletTableError(
            f"logit width {y.shape[-1]} does not match table size {table.n_triplets}")

    proj = table.projection(d)
    n_classes = table.component_count(d)
    values = np.full((y.shape[0], n_classes), np.nan)
    defined = np.zeros(n_classes, dtype=bool)
    for k in range(n_classes):
        pre = np.flatnonzero(proj == k)
        if pre.size:
            defined[k] = True
            values[:, k] = y[:, pre].max(axis=1)
    if squeeze:
        values = values[0]
    return values, defined


def project_labels(labels: np.ndarray, table: TripletTable, d: str) -> np.ndarray:
    """Project binary triplet labels to component labels by OR over preimages."""
    lab = np.asarray(labels)
    squeeze = lab.ndim == 1
    if squeeze:
        lab = lab[None, :]
    if lab.shape[1] != table.n_triplets:
        raise TripletTableError(
            f"label width {lab.shape[-1]} does not match table size {table.n_triplets}")
    proj = table.projection(d)
    out = np.zeros((lab.shape[0], table.component_count(d)), dtype=lab.dtype)
    for k in range(table.component_count(d)):
        pre = np.flatnonzero(proj == k)
        if pre.size:
            out[:, k] = lab[:, pre].max(axis=1)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# map file: one line per class "m,i,v,t", counts declared in the header


def save_table(table: TripletTable, path) -> None:
    lines = ["#version 1",
             f"#counts {table.n_instruments} {table.n_verbs} {table.n_targets} {table.n_triplets}"]
    for m, (i, v, t) in enumerate(table.rows):
        lines.append(f"{m},{i},{v},{t}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_table(path) -> TripletTable:
    counts = None
    rows = {}
    with open(path, "r", encoding="ascii") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("#counts"):
                    parts = line.split()
                    if len(parts) != 5:
                        raise TripletTableError(f"{path}:{ln}: bad #counts header")
                    counts = tuple(int(p) for p in parts[1:])
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise TripletTableError(f"{path}:{ln}: expected 'm,i,v,t', got {line!r}")
            try:
                m, i, v, t = (int(p) for p in parts)
            except ValueError as exc:
                raise TripletTableError(f"{path}:{ln}: non-integer field") from exc
            if m in rows:
                raise TripletTableError(f"{path}:{ln}: duplicate class index {m}")
            rows[m] = (i, v, t)
    if counts is None:
        raise TripletTableError(f"{path}: missing '#counts I V T IVT' header")
    ci, cv, ct, civt = counts
    if sorted(rows) != list(range(civt)):
        raise TripletTableError(
            f"{path}: class indices must cover 0..{civt - 1} exactly, got {len(rows)} rows")
    table = build_table((ci, cv, ct), [rows[m] for m in range(civt)])
    return table
