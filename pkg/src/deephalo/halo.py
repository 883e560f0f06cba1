"""Exact extraction of context effects from a trained set-utility model.

Any model exposing ``universe`` and ``set_utilities(ids)`` can be
analyzed.  The marginal contribution of a source subset ``T`` to item
``j``'s utility is recovered by alternating-sign inversion over the
Boolean lattice:

    effect(j, T) = sum over R subset of T of (-1)^(|T|-|R|) u_j(R + {j})

Summing those effects over every subset of an offered set reconstructs
the utility exactly.  Individual effects are only identified up to the
softmax gauge; the *relative* effect of ``T`` on an ordered pair (j, k)

    alpha(j, k, T) = [effect(j,T) + effect(j,T+{k})]
                   - [effect(k,T) + effect(k,T+{j})]

cancels that gauge and is what gets tabulated and rendered.

Subset enumeration is exponential by design, guarded by explicit caps
rather than sampling.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Protocol

import numpy as np

MARGINAL_CAP = 12
UNIVERSE_GUARD = 10


class EnumerationCapError(ValueError):
    """A request would enumerate more subsets than the configured cap."""


class SetUtilityModel(Protocol):
    universe: int

    def set_utilities(self, ids) -> np.ndarray: ...


class _UtilityCache:
    """One forward per distinct offered set, keyed by frozenset."""

    def __init__(self, model: SetUtilityModel):
        self.model = model
        self._seen: dict[frozenset, dict[int, float]] = {}

    def utility(self, item: int, ids: tuple[int, ...]) -> float:
        key = frozenset(ids)
        table = self._seen.get(key)
        if table is None:
            values = self.model.set_utilities(ids)
            table = {i: float(v) for i, v in zip(ids, values)}
            self._seen[key] = table
        return table[item]


def _as_source(item: int, source) -> tuple[int, ...]:
    src = tuple(sorted(int(i) for i in source))
    if len(set(src)) != len(src):
        raise ValueError(f"duplicate ids in source set {source}")
    if item in src:
        raise ValueError(f"item {item} cannot appear in its own source set {src}")
    return src


def _check_cap(size: int, cap: int, what: str) -> None:
    if size > cap:
        raise EnumerationCapError(
            f"{what} needs 2^{size} = {2**size} forward passes, "
            f"above the cap of 2^{cap}; raise the cap to proceed"
        )


def marginal_effect(
    model: SetUtilityModel,
    item: int,
    source,
    cap: int = MARGINAL_CAP,
    _cache: _UtilityCache | None = None,
) -> float:
    """Marginal utility contribution of ``source`` to ``item``.

    Exact alternating sum over all subsets of the source set; each subset
    costs one model forward (shared through a cache when given).
    """
    src = _as_source(item, source)
    _check_cap(len(src), cap, f"marginal effect of {src} on item {item}")
    cache = _cache if _cache is not None else _UtilityCache(model)
    t = len(src)
    terms = []
    for bits in range(2**t):
        subset = tuple(src[i] for i in range(t) if bits >> i & 1)
        sign = -1.0 if (t - len(subset)) % 2 else 1.0
        offered = tuple(sorted(subset + (item,)))
        terms.append(sign * cache.utility(item, offered))
    return math.fsum(terms)


def reconstruct_utility(
    model: SetUtilityModel, item: int, choice_set, cap: int = MARGINAL_CAP
) -> float:
    """Sum of marginal effects over all source subsets of the offered set.

    Must equal the model's forward utility; the enumeration order of the
    subsets cannot change the result because the total is an exactly
    rounded sum.
    """
    ids = tuple(sorted(int(i) for i in choice_set))
    if item not in ids:
        raise ValueError(f"item {item} is not offered in {ids}")
    others = tuple(i for i in ids if i != item)
    _check_cap(len(ids), cap, f"utility reconstruction over {ids}")
    cache = _UtilityCache(model)
    parts = []
    for size in range(len(others) + 1):
        for src in combinations(others, size):
            parts.append(marginal_effect(model, item, src, cap=cap, _cache=cache))
    return math.fsum(parts)


def relative_halo(
    model: SetUtilityModel,
    j: int,
    k: int,
    source,
    cap: int = MARGINAL_CAP,
    _cache: _UtilityCache | None = None,
) -> float:
    """Gauge-free effect of ``source`` on the utility gap between j and k.

    Antisymmetric in (j, k) exactly: both orientations combine the same
    four marginal effects.
    """
    if j == k:
        raise ValueError("relative effect needs two distinct items")
    src = _as_source(j, source)
    if k in src:
        raise ValueError(f"item {k} cannot appear in the source set {src}")
    cache = _cache if _cache is not None else _UtilityCache(model)
    j_side = math.fsum(
        (
            marginal_effect(model, j, src, cap=cap, _cache=cache),
            marginal_effect(model, j, src + (k,), cap=cap, _cache=cache),
        )
    )
    k_side = math.fsum(
        (
            marginal_effect(model, k, src, cap=cap, _cache=cache),
            marginal_effect(model, k, src + (j,), cap=cap, _cache=cache),
        )
    )
    return j_side - k_side


def identifiability_count(n: int) -> int:
    """Number of identifiable relative effects over an n-item universe.

    Every subset of size q >= 2 supports q - 1 independent pair gaps.
    """
    if n < 2:
        raise ValueError(f"need at least 2 items, got {n}")
    return sum(math.comb(n, q) * (q - 1) for q in range(2, n + 1))


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def _sources_for(universe: int, exclude: tuple[int, ...], max_order: int):
    others = [i for i in range(universe) if i not in exclude]
    for size in range(0, min(max_order, len(others)) + 1):
        yield from combinations(others, size)


@dataclass
class ContextEffectTable:
    """Marginal effects effect(j, T) for every |T| <= max_order."""

    universe: int
    max_order: int
    entries: dict[tuple[int, tuple[int, ...]], float] = field(default_factory=dict)


@dataclass
class RelativeHaloTable:
    """Relative effects alpha(j, k, T) for item pairs j < k."""

    universe: int
    max_order: int
    entries: dict[tuple[int, int, tuple[int, ...]], float] = field(default_factory=dict)

    def pairs(self) -> list[tuple[int, int]]:
        return sorted({(j, k) for j, k, _ in self.entries})

    def sources(self) -> list[tuple[int, ...]]:
        srcs = {t for _, _, t in self.entries}
        return sorted(srcs, key=lambda t: (len(t), t))

    def get(self, j: int, k: int, source) -> float:
        src = tuple(sorted(source))
        if j < k:
            return self.entries[(j, k, src)]
        return -self.entries[(k, j, src)]


def full_context_table(
    model: SetUtilityModel, max_order: int, cap: int = MARGINAL_CAP
) -> ContextEffectTable:
    cache = _UtilityCache(model)
    table = ContextEffectTable(model.universe, max_order)
    for item in range(model.universe):
        for src in _sources_for(model.universe, (item,), max_order):
            table.entries[(item, src)] = marginal_effect(
                model, item, src, cap=cap, _cache=cache
            )
    return table


def full_relative_table(
    model: SetUtilityModel,
    max_order: int,
    pairs: list[tuple[int, int]] | None = None,
    guard: int = UNIVERSE_GUARD,
    force: bool = False,
    cap: int = MARGINAL_CAP,
) -> RelativeHaloTable:
    """Relative effects for every pair and every source up to max_order."""
    n = model.universe
    if n > guard and not force:
        cost = math.comb(n, 2) * 2 ** min(max_order, n - 2)
        raise EnumerationCapError(
            f"universe of {n} items needs about {cost} inversions "
            f"(guard is {guard} items); use the force option to run anyway"
        )
    if pairs is None:
        pairs = list(combinations(range(n), 2))
    cache = _UtilityCache(model)
    table = RelativeHaloTable(n, max_order)
    for j, k in pairs:
        if not (0 <= j < k < n):
            raise ValueError(f"pair ({j}, {k}) must satisfy 0 <= j < k < universe")
        for src in _sources_for(n, (j, k), max_order):
            table.entries[(j, k, src)] = relative_halo(
                model, j, k, src, cap=cap, _cache=cache
            )
    return table


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def write_halo_csv(table: RelativeHaloTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# universe={table.universe} max_order={table.max_order}\n")
        fh.write("pair_j,pair_k,source_set,alpha\n")
        for j, k in table.pairs():
            for src in sorted(
                (t for jj, kk, t in table.entries if (jj, kk) == (j, k)),
                key=lambda t: (len(t), t),
            ):
                src_txt = ";".join(str(i) for i in src)
                fh.write(f"{j},{k},{src_txt},{table.entries[(j, k, src)]!r}\n")


def read_halo_csv(path) -> RelativeHaloTable:
    universe = None
    max_order = None
    entries: dict[tuple[int, int, tuple[int, ...]], float] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for line in fh:
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                for token in stripped.lstrip("#").split():
                    key, _, value = token.partition("=")
                    if key == "universe":
                        universe = int(value)
                    elif key == "max_order":
                        max_order = int(value)
                continue
            row = next(csv.reader(io.StringIO(line)))
            if row[0] == "pair_j":
                continue
            j, k = int(row[0]), int(row[1])
            src = tuple(int(i) for i in row[2].split(";")) if row[2] else ()
            entries[(j, k, src)] = float(row[3])
    if universe is None:
        universe = 1 + max(max(j, k) for j, k, _ in entries)
    if max_order is None:
        max_order = max((len(t) for _, _, t in entries), default=0)
    return RelativeHaloTable(universe, max_order, entries)


def _diverging_color(value: float, scale: float) -> str:
    """White at zero, blue for negative, red for positive."""
    if scale <= 0:
        return "#ffffff"
    t = max(-1.0, min(1.0, value / scale))
    if t >= 0:
        other = int(round(255 * (1.0 - t)))
        return f"#ff{other:02x}{other:02x}"
    other = int(round(255 * (1.0 + t)))
    return f"#{other:02x}{other:02x}ff"


def _source_label(src: tuple[int, ...]) -> str:
    return "{" + ",".join(str(i) for i in src) + "}" if src else "{}"


def render_halo_svg(table: RelativeHaloTable) -> str:
    """Self-contained heatmap: pair rows, source-set columns, labeled cells."""
    pairs = table.pairs()
    sources = table.sources()
    cell_w, cell_h, left, top = 86, 30, 70, 46
    width = left + cell_w * len(sources) + 10
    height = top + cell_h * len(pairs) + 10
    scale = max((abs(v) for v in table.entries.values()), default=0.0)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="11">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{left}" y="16">relative halo effects '
        f"(blue &lt; 0 &lt; red, scale {scale:.4f})</text>",
    ]
    for c, src in enumerate(sources):
        x = left + c * cell_w + cell_w // 2
        out.append(f'<text x="{x}" y="{top - 8}" text-anchor="middle">{_source_label(src)}</text>')
    for r, (j, k) in enumerate(pairs):
        y = top + r * cell_h
        out.append(f'<text x="6" y="{y + cell_h // 2 + 4}">({j},{k})</text>')
        for c, src in enumerate(sources):
            x = left + c * cell_w
            value = table.entries.get((j, k, src))
            if value is None:
                out.append(
                    f'<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" '
                    'fill="#eeeeee" stroke="#999999"/>'
                )
                continue
            color = _diverging_color(value, scale)
            out.append(
                f'<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" '
                f'fill="{color}" stroke="#555555"/>'
            )
            out.append(
                f'<text x="{x + cell_w // 2}" y="{y + cell_h // 2 + 4}" '
                f'text-anchor="middle">{value:+.3f}</text>'
            )
    out.append("</svg>")
    return "\n".join(out)


def export_heatmap(table: RelativeHaloTable, path, format: str = "csv") -> None:
    if format == "csv":
        write_halo_csv(table, path)
    elif format == "svg":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(render_halo_svg(table))
    else:
        raise ValueError(f"unknown heatmap format '{format}'")
