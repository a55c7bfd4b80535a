"""Incomplete datasets, missingness patterns and their tabulation.

A dataset with nonmonotone missingness is stored as a dense ``n x K`` float
array together with a per-row pattern code.  The pattern code is the single
source of truth for which entries exist; unobserved cells hold NaN only so that
the array can be sliced with numpy, and construction checks that the NaN
layout agrees with the pattern registry.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

MISSING_TOKEN = "NA"


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


@dataclass(frozen=True)
class VariableSchema:
    names: tuple[str, ...]
    types: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 1:
            raise DataError("schema needs at least one variable")
        if len(set(self.names)) != len(self.names):
            raise DataError(f"duplicate variable names in {self.names}")
        if len(self.types) != len(self.names):
            raise DataError("one type per variable is required")
        bad = [t for t in self.types if t not in ("binary", "continuous")]
        if bad:
            raise DataError(f"unknown variable types {bad}")

    @property
    def K(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown variable {name!r}") from None

    def is_binary(self, i: int) -> bool:
        return self.types[i] == "binary"


@dataclass(frozen=True)
class PatternRegistry:
    """Pattern codes ``1..M`` mapped to observed-variable index tuples.

    ``observed[0]`` belongs to code 1 and is always the full index set.
    """

    K: int
    observed: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        full = tuple(range(self.K))
        if not self.observed or tuple(self.observed[0]) != full:
            raise DataError("pattern 1 must observe every variable")
        seen = set()
        for obs in self.observed:
            obs = tuple(obs)
            if tuple(sorted(set(obs))) != obs or any(i < 0 or i >= self.K for i in obs):
                raise DataError(f"observed set {obs} is not a sorted subset of 0..{self.K - 1}")
            if obs in seen:
                raise DataError(f"observed set {obs} registered twice")
            seen.add(obs)
        for obs in self.observed[1:]:
            if len(obs) == self.K:
                raise DataError("incomplete patterns must miss at least one variable")

    @property
    def M(self) -> int:
        return len(self.observed)

    @property
    def codes(self) -> range:
        return range(1, self.M + 1)

    def observed_for(self, code: int) -> tuple[int, ...]:
        if not 1 <= code <= self.M:
            raise DataError(f"pattern code {code} outside 1..{self.M}")
        return self.observed[code - 1]

    def mask(self, code: int) -> np.ndarray:
        m = np.zeros(self.K, dtype=bool)
        m[list(self.observed_for(code))] = True
        return m

    def mask_string(self, code: int) -> str:
        return "".join("1" if b else "0" for b in self.mask(code))

    def masks(self) -> np.ndarray:
        """``M x K`` boolean matrix of observedness, row ``m-1`` for code ``m``."""
        return np.vstack([self.mask(c) for c in self.codes])

    @classmethod
    def from_masks(cls, masks: Iterable[Sequence[bool]]) -> "PatternRegistry":
        masks = [np.asarray(m, dtype=bool) for m in masks]
        K = len(masks[0])
        return cls(K, tuple(tuple(int(i) for i in np.flatnonzero(m)) for m in masks))

    def to_dict(self) -> dict:
        return {str(c): list(self.observed_for(c)) for c in self.codes}


@dataclass(frozen=True)
class ObservedDataset:
    schema: VariableSchema
    codes: np.ndarray
    values: np.ndarray
    registry: PatternRegistry = field(repr=False)

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != self.schema.K:
            raise DataError(f"values must be n x {self.schema.K}")
        if codes.shape != (values.shape[0],):
            raise DataError("one pattern code per row is required")
        if codes.size and (codes.min() < 1 or codes.max() > self.registry.M):
            raise DataError("row pattern codes outside the registry")
        if self.registry.K != self.schema.K:
            raise DataError("registry and schema disagree on K")
        if codes.size:
            expected = self.registry.masks()[codes - 1]
            if not np.array_equal(~np.isnan(values), expected):
                raise DataError("stored values do not match the observed sets of their patterns")
        codes.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    def rows_of(self, code: int) -> np.ndarray:
        return np.flatnonzero(self.codes == code)

    @property
    def complete(self) -> np.ndarray:
        """Boolean indicator of complete cases."""
        return self.codes == 1

    def row(self, i: int) -> tuple[int, tuple[float, ...]]:
        """Pattern code and the observed values (only) of row ``i``."""
        code = int(self.codes[i])
        return code, tuple(float(self.values[i, j]) for j in self.registry.observed_for(code))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, columns=list(self.schema.names))


@dataclass(frozen=True)
class PatternTable:
    codes: tuple[int, ...]
    masks: tuple[str, ...]
    counts: tuple[int, ...]
    percents: tuple[float, ...]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"code": self.codes, "mask": self.masks,
                             "count": self.counts, "percent": self.percents})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["code", "mask", "count", "percent"])
        for row in zip(self.codes, self.masks, self.counts, self.percents):
            w.writerow([row[0], row[1], row[2], f"{row[3]:.1f}"])
        return buf.getvalue()


def _mask_key(mask: np.ndarray) -> int:
    # first variable is the most significant bit, as in the printed mask string
    return int("".join("1" if b else "0" for b in mask), 2)


def _registry_from_row_masks(row_masks: np.ndarray) -> tuple[PatternRegistry, np.ndarray]:
    K = row_masks.shape[1]
    uniq, inverse, counts = np.unique(row_masks, axis=0, return_inverse=True, return_counts=True)
    inverse = np.asarray(inverse).reshape(-1)
    full = np.all(uniq, axis=1)
    if not full.any():
        raise DataError("positivity unverifiable: no complete-case row in the data")
    order = sorted((i for i in range(len(uniq)) if not full[i]),
                   key=lambda i: (-counts[i], -_mask_key(uniq[i])))
    order = [int(np.flatnonzero(full)[0])] + order
    code_of = np.empty(len(uniq), dtype=np.int64)
    code_of[order] = np.arange(1, len(order) + 1)
    registry = PatternRegistry.from_masks([uniq[i] for i in order])
    assert registry.K == K
    return registry, code_of[inverse]


def infer_patterns(raw, schema: VariableSchema | None = None) -> tuple[PatternRegistry, ObservedDataset]:
    """Discover missingness patterns in a raw table and re-encode its rows.

    ``raw`` is a DataFrame or a 2-D array with NaN for missing cells.  Code 1
    is the complete pattern; the rest are numbered by descending count with
    ties broken by the mask read as a binary number (larger first).
    """
    if isinstance(raw, pd.DataFrame):
        names = tuple(str(c) for c in raw.columns)
        values = raw.to_numpy(dtype=float)
    else:
        values = np.asarray(raw, dtype=float)
        names = schema.names if schema is not None else tuple(f"V{i + 1}" for i in range(values.shape[1]))
    if values.ndim != 2 or values.shape[0] < 1:
        raise DataError("need a non-empty 2-D table")
    if schema is None:
        schema = VariableSchema(names, tuple(_guess_type(values[:, j]) for j in range(values.shape[1])))
    elif schema.names != names:
        raise DataError(f"columns {names} do not match schema {schema.names}")
    registry, codes = _registry_from_row_masks(~np.isnan(values))
    return registry, ObservedDataset(schema, codes, values, registry)


def _guess_type(col: np.ndarray) -> str:
    obs = col[~np.isnan(col)]
    return "binary" if obs.size and np.all((obs == 0) | (obs == 1)) else "continuous"


def combine_sparse_patterns(registry: PatternRegistry, dataset: ObservedDataset,
                            min_count: int) -> tuple[PatternRegistry, ObservedDataset]:
    """Merge incomplete patterns with fewer than ``min_count`` rows.

    The merged pattern observes the intersection of the merged observed sets;
    variables outside the intersection are dropped from the affected rows.  A
    merged set that coincides with an existing pattern joins that pattern.
    """
    if min_count < 0:
        raise DataError("min_count must be non-negative")
    counts = np.bincount(dataset.codes, minlength=registry.M + 1)[1:]
    sparse = [c for c in registry.codes if c != 1 and counts[c - 1] < min_count]
    if len(sparse) < 2:
        return registry, dataset
    inter = set(range(registry.K))
    for c in sparse:
        inter &= set(registry.observed_for(c))
    keep = np.zeros(registry.K, dtype=bool)
    keep[sorted(inter)] = True

    values = dataset.values.copy()
    hit = np.isin(dataset.codes, sparse)
    values[np.ix_(hit, ~keep)] = np.nan
    row_masks = ~np.isnan(values)
    new_registry, codes = _registry_from_row_masks(row_masks)
    return new_registry, ObservedDataset(dataset.schema, codes, values, new_registry)


def tabulate_patterns(registry: PatternRegistry, dataset: ObservedDataset) -> PatternTable:
    counts = np.bincount(dataset.codes, minlength=registry.M + 1)[1:]
    n = dataset.n
    return PatternTable(
        codes=tuple(registry.codes),
        masks=tuple(registry.mask_string(c) for c in registry.codes),
        counts=tuple(int(c) for c in counts),
        percents=tuple(float(100.0 * c / n) for c in counts),
    )


def read_csv(path_or_buffer, types: dict[str, str] | None = None) -> pd.DataFrame:
    """Read a CSV with ``NA`` or empty cells as missing.

    Any other non-numeric token raises :class:`DataError` naming the line and
    column, so that markers such as ``N/A`` are never silently accepted.
    """
    if hasattr(path_or_buffer, "read"):
        text = path_or_buffer.read()
    else:
        with open(path_or_buffer, newline="", encoding="utf-8") as fh:
            text = fh.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty CSV") from None
    header = [h.strip() for h in header]
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(rec)}")
        out = []
        for name, cell in zip(header, rec):
            cell = cell.strip()
            if cell == "" or cell == MISSING_TOKEN:
                out.append(np.nan)
                continue
            try:
                out.append(float(cell))
            except ValueError:
                raise DataError(f"line {lineno}, column {name!r}: unrecognised value {cell!r}") from None
        rows.append(out)
    if not rows:
        raise DataError("CSV has no data rows")
    frame = pd.DataFrame(rows, columns=header)
    if types:
        unknown = set(types) - set(header)
        if unknown:
            raise DataError(f"types given for unknown columns {sorted(unknown)}")
    return frame


def load_dataset(path_or_buffer, types: dict[str, str] | None = None) -> tuple[PatternRegistry, ObservedDataset]:
    frame = read_csv(path_or_buffer, types)
    guessed = {c: _guess_type(frame[c].to_numpy()) for c in frame.columns}
    guessed.update(types or {})
    schema = VariableSchema(tuple(frame.columns), tuple(guessed[c] for c in frame.columns))
    return infer_patterns(frame, schema)


def write_csv(dataset: ObservedDataset, path_or_buffer) -> None:
    def fmt(v):
        return MISSING_TOKEN if np.isnan(v) else repr(float(v))

    lines = [",".join(dataset.schema.names)]
    lines += [",".join(fmt(v) for v in row) for row in dataset.values]
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_buffer, "write"):
        path_or_buffer.write(text)
    else:
        with open(path_or_buffer, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
