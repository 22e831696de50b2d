"""Fixed-radius K-nearest-neighbor queries over a static point set.

A uniform spatial hash with cell size equal to the query radius R guarantees
that every neighbor within R lives in the query point's 3x3x3 cell block.
Candidates are ranked by (distance, point id) so results are deterministic
under distance ties, and queries are fully vectorized over batches.
"""

from __future__ import annotations

import numpy as np

_COORD_LIMIT = 1 << 20  # packed-key range per axis; |cell| beyond this is rejected


def _pack(cells: np.ndarray) -> np.ndarray:
    if np.abs(cells).max(initial=0) >= _COORD_LIMIT:
        raise ValueError("points span too many hash cells for the packed key")
    c = cells + _COORD_LIMIT
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


_OFFSETS = np.array(
    [[dx, dy, dz] for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)


class FrnnIndex:
    """Immutable index answering 'K nearest neighbors within radius R'."""

    def __init__(self, positions: np.ndarray, k: int = 6, radius: float = 0.3):
        if k < 1:
            raise ValueError("k must be at least 1")
        if not (np.isfinite(radius) and radius > 0):
            raise ValueError("radius must be positive and finite")
        pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pos).all():
            raise ValueError("positions contain non-finite values")
        self.positions = pos
        self.k = int(k)
        self.radius = float(radius)
        cells = np.floor(pos / radius).astype(np.int64)
        keys = _pack(cells) if pos.shape[0] else np.zeros(0, dtype=np.int64)
        order = np.argsort(keys, kind="stable")
        self._perm = order
        sorted_keys = keys[order]
        self._cell_keys, starts = np.unique(sorted_keys, return_index=True)
        self._cell_starts = starts
        self._cell_ends = np.append(starts[1:], sorted_keys.shape[0])

    def query_batch(self, queries: np.ndarray):
        """Batched query.

        Returns (ids (Q, K) int64, dists (Q, K) float64, counts (Q,) int64).
        Rows are padded with id -1 / dist +inf past ``counts`` neighbors.
        """
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(q).all():
            raise ValueError("queries contain non-finite values")
        nq = q.shape[0]
        ids = np.full((nq, self.k), -1, dtype=np.int64)
        dists = np.full((nq, self.k), np.inf)
        counts = np.zeros(nq, dtype=np.int64)
        if nq == 0 or self.positions.shape[0] == 0:
            return ids, dists, counts

        qcells = np.floor(q / self.radius).astype(np.int64)
        # Candidate ranges from the 27 neighboring hash cells of every query.
        blocks = qcells[:, None, :] + _OFFSETS[None, :, :]
        bkeys = _pack(blocks.reshape(-1, 3))
        slot = np.searchsorted(self._cell_keys, bkeys)
        slot_ok = slot < self._cell_keys.shape[0]
        hit = np.zeros_like(slot_ok)
        hit[slot_ok] = self._cell_keys[slot[slot_ok]] == bkeys[slot_ok]
        starts = np.where(hit, self._cell_starts[np.where(hit, slot, 0)], 0)
        ends = np.where(hit, self._cell_ends[np.where(hit, slot, 0)], 0)
        lens = ends - starts

        total = int(lens.sum())
        if total == 0:
            return ids, dists, counts
        # Flatten all candidate slices into one gather.
        out_start = np.zeros(lens.shape[0], dtype=np.int64)
        np.cumsum(lens[:-1], out=out_start[1:])
        flat = np.repeat(starts - out_start, lens) + np.arange(total)
        cand_point = self._perm[flat]
        cand_query = np.repeat(
            np.arange(nq * 27) // 27, lens
        )
        d = np.linalg.norm(self.positions[cand_point] - q[cand_query], axis=1)
        keep = d <= self.radius
        cand_point = cand_point[keep]
        cand_query = cand_query[keep]
        d = d[keep]
        if d.shape[0] == 0:
            return ids, dists, counts

        order = np.lexsort((cand_point, d, cand_query))
        cand_query = cand_query[order]
        cand_point = cand_point[order]
        d = d[order]
        # Rank of each candidate within its query group, then take rank < K.
        group_start = np.zeros(d.shape[0], dtype=np.int64)
        new_group = np.empty(d.shape[0], dtype=bool)
        new_group[0] = True
        new_group[1:] = cand_query[1:] != cand_query[:-1]
        group_idx = np.cumsum(new_group) - 1
        first_of_group = np.where(new_group)[0]
        rank = np.arange(d.shape[0]) - first_of_group[group_idx]
        sel = rank < self.k
        ids[cand_query[sel], rank[sel]] = cand_point[sel]
        dists[cand_query[sel], rank[sel]] = d[sel]
        np.add.at(counts, cand_query[sel], 1)
        return ids, dists, counts

    def query(self, point: np.ndarray):
        """Single-point query returning a list of (point_id, distance)."""
        ids, dists, counts = self.query_batch(np.asarray(point).reshape(1, 3))
        n = int(counts[0])
        return [(int(ids[0, i]), float(dists[0, i])) for i in range(n)]

    def query_bruteforce(self, queries: np.ndarray):
        """Reference O(N*Q) scan with identical ranking. Exists so the hashed
        path can be validated against an implementation with no spatial logic."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        nq = q.shape[0]
        ids = np.full((nq, self.k), -1, dtype=np.int64)
        dists = np.full((nq, self.k), np.inf)
        counts = np.zeros(nq, dtype=np.int64)
        for qi in range(nq):
            d = np.linalg.norm(self.positions - q[qi], axis=1)
            within = np.where(d <= self.radius)[0]
            order = within[np.lexsort((within, d[within]))][: self.k]
            counts[qi] = order.shape[0]
            ids[qi, : order.shape[0]] = order
            dists[qi, : order.shape[0]] = d[order]
        return ids, dists, counts
