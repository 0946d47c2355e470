"""Discord-based anomaly scoring and pruning of anomalous training days."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .neighbors import znorm_windows


@dataclass(frozen=True)
class MatrixProfile:
    """Nearest non-trivial neighbor distance per subsequence.

    ``distances[i]`` is NaN when subsequence i has no admissible neighbor
    (e.g. a constant window with no other constant window outside the
    exclusion zone); ``indices[i]`` is -1 in that case.
    """

    distances: np.ndarray
    indices: np.ndarray
    m: int
    exclusion: float


def matrix_profile(x, m: int, exclusion=None, chunk: int = 512) -> MatrixProfile:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2 * m:
        raise ValueError(f"series length {len(x)} is shorter than 2m = {2 * m}")
    excl = m / 2 if exclusion is None else float(exclusion)
    n_sub = len(x) - m + 1
    z, valid = znorm_windows(x, m)
    pos = np.flatnonzero(valid)
    dist = np.full(n_sub, np.nan)
    idx = np.full(n_sub, -1, dtype=np.int64)

    for s in range(0, len(pos), chunk):
        rows = pos[s:s + chunk]
        corr = z[s:s + chunk] @ z.T
        corr[np.abs(rows[:, None] - pos[None, :]) <= excl] = -np.inf
        best = np.argmax(corr, axis=1)
        r = corr[np.arange(len(rows)), best]
        ok = np.isfinite(r)
        dist[rows[ok]] = np.sqrt(np.maximum(2.0 * m * (1.0 - r[ok] / m), 0.0))
        idx[rows[ok]] = pos[best[ok]]

    # constant windows: distance 0 to another constant window outside the exclusion zone
    flat = np.flatnonzero(~valid)
    for i in flat:
        far = flat[np.abs(flat - i) > excl]
        if len(far):
            dist[i] = 0.0
            idx[i] = far[np.argmin(np.abs(far - i))]
    return MatrixProfile(dist, idx, m, excl)


@dataclass(frozen=True)
class DiscordScores:
    """Per-location day scores over the training range (NaN marks an unscorable day)."""

    scores: dict
    train_range: tuple
    day_len: int

    def n_days(self, location_id) -> int:
        return len(self.scores[int(location_id)])

    def pruned_days(self, location_id, fraction: float) -> list:
        """Top ceil(fraction * n_days) scored days, highest first, ties to the earlier day."""
        s = self.scores[int(location_id)]
        k = math.ceil(round(fraction * len(s), 9))
        ranked = sorted((d for d in range(len(s)) if not np.isnan(s[d])), key=lambda d: (-s[d], d))
        return ranked[:k]


def day_scores(profile: MatrixProfile, n_days: int, day_len: int) -> np.ndarray:
    """Max profile value over subsequences starting inside each day."""
    out = np.full(n_days, np.nan)
    for d in range(n_days):
        seg = profile.distances[d * day_len:(d + 1) * day_len]
        if len(seg) and not np.all(np.isnan(seg)):
            out[d] = np.nanmax(seg)
    return out


def discord_scores(store, location_ids, train_range, m: int = 24, day_len=None) -> DiscordScores:
    day_len = store.steps_per_day if day_len is None else day_len
    lo, hi = train_range
    n_days = (hi - lo) // day_len
    scores = {}
    for lid in location_ids:
        mp = matrix_profile(store.series(lid)[lo:hi], m)
        scores[int(lid)] = day_scores(mp, n_days, day_len)
    return DiscordScores(scores, (lo, hi), day_len)


def prune_anomalous(windows, scores: DiscordScores, fraction: float):
    """Drop training windows whose input span overlaps a top-scored day of their location.

    Window sets from any range other than the scored training range pass through untouched.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    if fraction == 0.0 or len(windows) == 0 or tuple(windows.split_range) != tuple(scores.train_range):
        return windows
    lo = scores.train_range[0]
    P = scores.day_len
    keep = np.ones(len(windows), dtype=bool)
    lids = windows.entries[:, 0]
    starts = windows.entries[:, 1]
    for lid in np.unique(lids):
        days = scores.pruned_days(lid, fraction)
        if not days:
            continue
        sel = lids == lid
        s = starts[sel]
        first = (s - lo) // P
        last = (s + windows.input_len - 1 - lo) // P
        hit = np.zeros(len(s), dtype=bool)
        for d in days:
            hit |= (first <= d) & (last >= d)
        keep[np.flatnonzero(sel)[hit]] = False
    return windows.select(keep)


def save_discord_report(scores: DiscordScores, fraction: float, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["location_id", "day_index", "score", "pruned"])
        for lid in sorted(scores.scores):
            pruned = set(scores.pruned_days(lid, fraction))
            for d, v in enumerate(scores.scores[lid]):
                w.writerow([lid, d, "" if np.isnan(v) else f"{v:.6f}", int(d in pruned)])
