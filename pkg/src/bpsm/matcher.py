"""One-to-one nearest-neighbour matching on a scalar distance measure.

All matchers take the treated and control scores as separate arrays and,
optionally, the unit indices those scores belong to. Returned ``MatchSet``
objects always speak in unit indices so they can be combined with the
originating dataset directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyControlPool, NoTreatedUnits


@dataclass(frozen=True)
class MatchSet:
    """Result of one matching pass.

    ``pairs`` is an (m, 2) integer array of (treated, control) unit indices;
    ``matched_controls`` is its second column (so reused controls appear once
    per pairing). ``dropped_controls`` holds every control not used in any pair,
    whether trimmed or simply never nearest.
    """

    pairs: np.ndarray
    dropped_treated: frozenset
    dropped_controls: frozenset
    caliper_used: float | None = None

    @property
    def matched_controls(self) -> np.ndarray:
        return self.pairs[:, 1]

    @property
    def matched_treated(self) -> np.ndarray:
        return self.pairs[:, 0]

    def kept_units(self) -> np.ndarray:
        return np.unique(self.pairs)


def _indices(idx, size):
    return np.arange(size) if idx is None else np.asarray(idx, dtype=np.intp)


def trim_common_support(ps, Z) -> np.ndarray:
    """Indices of the controls lying inside [min, max] of the treated scores.

    Treated units are never dropped here.
    """
    ps = np.asarray(ps, dtype=float)
    Z = np.asarray(Z)
    treated = Z == 1
    if not treated.any():
        raise NoTreatedUnits("common-support trimming needs at least one treated unit")
    lo, hi = ps[treated].min(), ps[treated].max()
    return np.flatnonzero(~treated & (ps >= lo) & (ps <= hi))


def match_with_replacement(treated_ps, control_ps, rng, treated_idx=None, control_idx=None) -> MatchSet:
    """Pair every treated unit with a nearest control; controls may be reused.

    Exact distance ties (including several controls sharing one score) are
    broken uniformly at random with ``rng``. Because controls are reusable the
    treated processing order has no effect, so no shuffle is performed.
    """
    t = np.asarray(treated_ps, dtype=float)
    c = np.asarray(control_ps, dtype=float)
    t_idx = _indices(treated_idx, t.size)
    c_idx = _indices(control_idx, c.size)
    if c.size == 0:
        raise EmptyControlPool("no control units available for matching")
    if t.size == 0:
        raise NoTreatedUnits("no treated units to match")

    order = np.argsort(c, kind="stable")
    values, start, counts = np.unique(c[order], return_index=True, return_counts=True)
    pos = np.searchsorted(values, t)
    left = np.clip(pos - 1, 0, values.size - 1)
    right = np.clip(pos, 0, values.size - 1)
    d_left = np.abs(t - values[left])
    d_right = np.abs(values[right] - t)

    both = (d_left == d_right) & (left != right)
    first = np.where(d_left <= d_right, left, right)
    n_first = counts[first]
    total = n_first + np.where(both, counts[right], 0)
    r = rng.integers(0, total)
    in_first = r < n_first
    sorted_pos = np.where(in_first, start[first] + r, start[right] + r - n_first)
    chosen = order[sorted_pos]

    pairs = np.column_stack([t_idx, c_idx[chosen]])
    used = np.zeros(c.size, dtype=bool)
    used[chosen] = True
    return MatchSet(
        pairs=pairs,
        dropped_treated=frozenset(),
        dropped_controls=frozenset(c_idx[~used].tolist()),
    )


def caliper_width(treated_ps, control_ps, caliper_sd: float) -> float:
    """``caliper_sd`` standard deviations of the pooled scores (sample SD)."""
    pooled = np.concatenate([np.asarray(treated_ps, float), np.asarray(control_ps, float)])
    if pooled.size < 2:
        return 0.0
    return float(caliper_sd * np.std(pooled, ddof=1))


def match_no_replacement_caliper(
    treated_ps,
    control_ps,
    caliper_sd: float,
    rng,
    treated_idx=None,
    control_idx=None,
    width: float | None = None,
) -> MatchSet:
    """Match without replacement, picking a random unused control inside the caliper.

    Treated units are visited in a random order. For each, every still-unused
    control within ``width`` (default: ``caliper_sd`` pooled SDs) is a
    candidate and one is chosen uniformly. Treated units with no candidate are
    dropped.
    """
    if not caliper_sd > 0:
        raise ValueError("caliper_sd must be positive")
    t = np.asarray(treated_ps, dtype=float)
    c = np.asarray(control_ps, dtype=float)
    t_idx = _indices(treated_idx, t.size)
    c_idx = _indices(control_idx, c.size)
    if width is None:
        width = caliper_width(t, c, caliper_sd)

    order = np.argsort(c, kind="stable")
    sc = c[order]
    lo = np.searchsorted(sc, t - width, side="left")
    hi = np.searchsorted(sc, t + width, side="right")
    available = np.ones(c.size, dtype=bool)
    pairs = []
    dropped = []
    for i in rng.permutation(t.size):
        # widen by one slot each side so rounding in t +/- width never hides a candidate
        a, b = max(lo[i] - 1, 0), min(hi[i] + 1, c.size)
        cand = a + np.flatnonzero(available[a:b])
        cand = cand[np.abs(sc[cand] - t[i]) <= width]
        if cand.size == 0:
            dropped.append(t_idx[i])
            continue
        k = cand[rng.integers(cand.size)]
        available[k] = False
        pairs.append((t_idx[i], c_idx[order[k]]))

    pairs_arr = np.array(pairs, dtype=np.intp).reshape(-1, 2)
    unused = c_idx[order[available]]
    return MatchSet(
        pairs=pairs_arr,
        dropped_treated=frozenset(np.asarray(dropped).tolist()),
        dropped_controls=frozenset(unused.tolist()),
        caliper_used=float(width),
    )


def match_units(
    distance,
    Z,
    rng,
    with_replacement: bool = True,
    caliper_sd: float | None = None,
    trim: bool = True,
) -> MatchSet:
    """Trim to common support (optional), then match treated to controls.

    ``distance`` is the per-unit score for the whole sample. Trimmed controls
    end up in ``dropped_controls``.
    """
    distance = np.asarray(distance, dtype=float)
    Z = np.asarray(Z)
    treated = np.flatnonzero(Z == 1)
    if treated.size == 0:
        raise NoTreatedUnits("no treated units to match")
    controls = trim_common_support(distance, Z) if trim else np.flatnonzero(Z == 0)
    if controls.size == 0:
        raise EmptyControlPool("no control units inside the common support")
    if with_replacement:
        ms = match_with_replacement(distance[treated], distance[controls], rng, treated, controls)
    else:
        ms = match_no_replacement_caliper(
            distance[treated], distance[controls], 0.5 if caliper_sd is None else caliper_sd, rng, treated, controls
        )
    if trim:
        trimmed = np.setdiff1d(np.flatnonzero(Z == 0), controls, assume_unique=True)
        ms = MatchSet(ms.pairs, ms.dropped_treated, ms.dropped_controls | frozenset(trimmed.tolist()), ms.caliper_used)
    return ms


def match_frequency(matchsets, n_units: int) -> tuple[np.ndarray, float]:
    """Share of matchsets in which each unit is kept, and % of units kept at least once."""
    if len(matchsets) == 0:
        raise ValueError("need at least one matchset")
    counts = np.zeros(n_units, dtype=np.int64)
    for ms in matchsets:
        counts[ms.kept_units()] += 1
    fraction = counts / len(matchsets)
    return fraction, 100.0 * float(np.mean(counts > 0))
