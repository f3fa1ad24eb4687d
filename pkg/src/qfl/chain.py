"""Option-chain CSV ingestion and the bundled synthetic chain.

Input grammar: UTF-8 text, header exactly ``day,strike,price``, then one row
per observed cell. ``day`` is a positive integer index (collapse weekends and
holidays before loading); ``strike`` and ``price`` are finite decimals. Days
are relabelled ``1..T`` in sorted order and cells absent from the file are
masked.
"""

import csv
import io
import math
import os
import tempfile

import numpy as np
from scipy import stats

from .errors import DataError
from .panel_model import PanelDataset

HEADER = ("day", "strike", "price")


def _decode(raw):
    try:
        return raw.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        line = raw[: exc.start].count(b"\n") + 1
        raise DataError(f"invalid UTF-8 byte at offset {exc.start}", "encoding", line) from None


def _number(text, kind, line):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{kind} {text!r} is not a number", "field", line) from None
    if not math.isfinite(value):
        raise DataError(f"{kind} {text!r} is not finite", "field", line)
    return value


def _day(text, line):
    try:
        value = int(text.strip())
    except ValueError:
        raise DataError(f"day {text!r} is not an integer", "field", line) from None
    if value < 1:
        raise DataError(f"day {value} must be positive", "field", line)
    return value


def parse_option_chain(text):
    """Parse CSV text into a :class:`PanelDataset`; see the module docstring."""
    if "\x00" in text:
        line = text[: text.index("\x00")].count("\n") + 1
        raise DataError("NUL character in input", "encoding", line)
    reader = csv.reader(io.StringIO(text, newline=""), strict=True)
    cells = {}
    header_seen = False
    try:
        for row in reader:
            line = reader.line_num
            if not row or all(not f.strip() for f in row):
                continue
            if not header_seen:
                if tuple(f.strip() for f in row) != HEADER:
                    raise DataError(f"header must be 'day,strike,price', got {','.join(row)!r}", "header", line)
                header_seen = True
                continue
            if len(row) != 3:
                raise DataError(f"expected 3 fields, got {len(row)}", "columns", line)
            key = (_day(row[0], line), _number(row[1], "strike", line))
            price = _number(row[2], "price", line)
            if key in cells:
                raise DataError(
                    f"duplicate cell day={key[0]} strike={row[1].strip()} (first seen on line {cells[key][1]})",
                    "duplicate", line,
                )
            cells[key] = (price, line)
    except csv.Error as exc:
        raise DataError(f"malformed CSV: {exc}", "syntax", reader.line_num) from None
    if not header_seen:
        raise DataError("empty file", "empty", 1)
    if not cells:
        raise DataError("empty dataset: header but no rows", "empty", reader.line_num or 1)

    days = sorted({d for d, _ in cells})
    strikes = sorted({k for _, k in cells})
    row_of = {d: t for t, d in enumerate(days)}
    col_of = {k: i for i, k in enumerate(strikes)}
    prices = np.full((len(days), len(strikes)), np.nan)
    for (d, k), (price, _) in cells.items():
        prices[row_of[d], col_of[k]] = price
    return PanelDataset(np.array(strikes), prices, days=days)


def load_option_chain(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_option_chain(_decode(raw))


def format_option_chain(data):
    lines = [",".join(HEADER)]
    for t, day in enumerate(data.days):
        for i, k in enumerate(data.strikes):
            if data.mask[t, i]:
                lines.append(f"{day},{float(k)!r},{float(data.prices[t, i])!r}")
    return "\n".join(lines) + "\n"


def atomic_write(path, text):
    """Write ``text`` to a temporary file next to ``path``, then rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_option_chain(data, path):
    atomic_write(path, format_option_chain(data))


def _call_price(spot, strikes, years, vol):
    sd = vol * math.sqrt(years)
    d1 = (np.log(spot / strikes) + 0.5 * sd**2) / sd
    return spot * stats.norm.cdf(d1) - strikes * stats.norm.cdf(d1 - sd)


def synthetic_chain(seed=0, n_strikes=36, n_days=21, shift_day=11, shift=6.0, noise=0.03):
    """SYNTHETIC call-price panel (not market data).

    Zero-rate Black-Scholes prices with 32 days to expiry and volatility 0.25
    for strikes ``80, 81, ...``. The underlying sits at 100 and moves to
    ``100 + shift`` from ``shift_day`` on, so the true surface has a single
    change. Prices carry Student-t (3 df) noise of scale ``noise``, are
    floored at zero and rounded to cents.
    """
    rng = np.random.default_rng(seed)
    strikes = 80.0 + np.arange(n_strikes, dtype=float)
    prices = np.empty((n_days, n_strikes))
    for t in range(n_days):
        spot = 100.0 + (shift if t + 1 >= shift_day else 0.0)
        clean = _call_price(spot, strikes, 32 / 365.0, 0.25)
        prices[t] = np.maximum(clean + noise * rng.standard_t(3, n_strikes), 0.0)
    return PanelDataset(strikes, np.round(prices, 2))
