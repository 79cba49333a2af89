"""Methylation record model and tab-separated text forms.

Two line layouts are accepted:

* the internal 6-column form ``chrom, start, end, strand, coverage, meth_pct``
  (strand in column 4), which is what every object written by the pipeline
  contains, and
* BED-style lines of 6 to 11 columns with strand in column 6 and, when
  present, coverage in column 10 and methylation percent in column 11
  (the bedMethyl layout), supported read-only for ingesting real files.

A line whose column 4 is ``+`` or ``-`` is taken as the internal form;
anything else is parsed BED-style.

Sort order is (chrom, start, end, strand), compared field by field.
Chromosome names compare in raw byte order, so "chr10" sorts before "chr2";
the pipeline only needs a total order, not the genomics natural order.
"""

from __future__ import annotations

import operator
from typing import Iterable, NamedTuple

from faaslab.errors import ParseError

_STRANDS = ("+", "-")


class MethRecord(NamedTuple):
    chrom: str
    start: int
    end: int
    strand: str
    coverage: int
    meth_pct: int


# Key for sorting records: equal keys compare equal regardless of
# coverage or methylation percent.
SORT_KEY = operator.itemgetter(0, 1, 2, 3)


def sort_key(record: MethRecord):
    """Return the (chrom, start, end, strand) sort key of a record."""
    return SORT_KEY(record)


def _int_field(text: str, column: int, name: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(column, f"{name} is not an integer: {text!r}") from None


def _pct_field(text: str, column: int) -> int:
    try:
        value = int(text)
    except ValueError:
        try:
            value = round(float(text))
        except ValueError:
            raise ParseError(column, f"meth_pct is not numeric: {text!r}") from None
    if not 0 <= value <= 100:
        raise ParseError(column, f"meth_pct out of [0, 100]: {text!r}")
    return value


def parse_meth_record(line: str) -> MethRecord | None:
    """Parse one text line into a MethRecord.

    Returns None for skippable lines (blank, whitespace-only, or starting
    with '#'). Raises ParseError with the offending 1-based column index
    otherwise.
    """
    if not line or line.isspace() or line.startswith("#"):
        return None
    cols = line.rstrip("\n").split("\t")
    if len(cols) < 6:
        raise ParseError(len(cols), f"expected at least 6 tab-separated columns, got {len(cols)}")

    internal = len(cols) == 6 and cols[3] in _STRANDS
    if internal:
        strand = cols[3]
        coverage = _int_field(cols[4], 5, "coverage")
        meth_pct = _pct_field(cols[5], 6)
    else:
        strand = cols[5]
        if strand not in _STRANDS:
            raise ParseError(6, f"strand must be '+' or '-', got {strand!r}")
        coverage = _int_field(cols[9], 10, "coverage") if len(cols) >= 10 else 0
        meth_pct = _pct_field(cols[10], 11) if len(cols) >= 11 else 0

    chrom = cols[0]
    if not chrom:
        raise ParseError(1, "empty chromosome name")
    start = _int_field(cols[1], 2, "start")
    end = _int_field(cols[2], 3, "end")
    if start < 0:
        raise ParseError(2, f"start is negative: {start}")
    if end <= start:
        raise ParseError(3, f"end must exceed start: start={start} end={end}")
    if coverage < 0:
        raise ParseError(10 if not internal else 5, f"coverage is negative: {coverage}")
    return MethRecord(chrom, start, end, strand, coverage, meth_pct)


def record_lines(records: Iterable[MethRecord]) -> list[bytes]:
    """Serialize records to internal TSV lines, without newlines."""
    chrom_cache: dict[str, bytes] = {}
    lines = []
    append = lines.append
    for chrom, start, end, strand, coverage, meth_pct in records:
        cb = chrom_cache.get(chrom)
        if cb is None:
            cb = chrom_cache[chrom] = chrom.encode("ascii")
        append(b"%s\t%d\t%d\t%c\t%d\t%d" % (cb, start, end, ord(strand), coverage, meth_pct))
    return lines


def records_to_tsv(records: Iterable[MethRecord]) -> bytes:
    """Serialize records to the internal 6-column TSV form."""
    lines = record_lines(records)
    if not lines:
        return b""
    return b"\n".join(lines) + b"\n"


def tsv_to_records(payload: bytes) -> list[MethRecord]:
    """Parse a TSV payload into records.

    Internal 6-column lines take a fast path; anything else falls back to
    parse_meth_record so real bedMethyl files can be ingested too.
    """
    out: list[MethRecord] = []
    append = out.append
    chrom_cache: dict[bytes, str] = {}
    for raw in payload.splitlines():
        cols = raw.split(b"\t")
        if len(cols) == 6 and (cols[3] == b"+" or cols[3] == b"-"):
            cb = cols[0]
            chrom = chrom_cache.get(cb)
            if chrom is None:
                chrom = chrom_cache[cb] = cb.decode("ascii")
            append(
                MethRecord(
                    chrom,
                    int(cols[1]),
                    int(cols[2]),
                    "+" if cols[3] == b"+" else "-",
                    int(cols[4]),
                    int(cols[5]),
                )
            )
        else:
            record = parse_meth_record(raw.decode("utf-8"))
            if record is not None:
                append(record)
    return out
