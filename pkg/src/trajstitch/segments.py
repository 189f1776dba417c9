"""Fixed-length trajectory segments and latent nearest-neighbour search (flat and IVF)."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

INDEX_FORMAT_VERSION = 1
_MAGIC = b"TSIX"


@dataclass(frozen=True)
class SegmentRecord:
    record_id: int
    traj_id: int
    start_offset: int
    length: int
    start_state: np.ndarray
    end_state: np.ndarray
    phi_start: np.ndarray
    phi_end: np.ndarray


@dataclass
class SegmentTable:
    """Column store of segment records; row ``i`` is record id ``i``."""

    traj_id: np.ndarray
    start_offset: np.ndarray
    length: int
    start_state: np.ndarray
    end_state: np.ndarray
    phi_start: np.ndarray
    phi_end: np.ndarray
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.traj_id)

    def record(self, i: int) -> SegmentRecord:
        return SegmentRecord(
            int(i),
            int(self.traj_id[i]),
            int(self.start_offset[i]),
            self.length,
            self.start_state[i],
            self.end_state[i],
            self.phi_start[i],
            self.phi_end[i],
        )

    def states(self, dataset, i: int) -> np.ndarray:
        t = dataset.trajectories[int(self.traj_id[i])]
        off = int(self.start_offset[i])
        return t.states[off : off + self.length]


def extract_segments(dataset, model, h_seg: int = 26, stride: int = 13) -> SegmentTable:
    """Sliding windows of ``h_seg`` states every ``stride`` steps; endpoints embedded with phi.

    Trajectories shorter than ``h_seg`` are skipped and counted in ``skipped``.
    """
    if h_seg < 2 or stride < 1:
        raise ValueError("need h_seg >= 2 and stride >= 1")
    tids, offs, starts, ends, skipped = [], [], [], [], 0
    for ti, t in enumerate(dataset.trajectories):
        if len(t) < h_seg:
            skipped += 1
            continue
        for off in range(0, len(t) - h_seg + 1, stride):
            tids.append(ti)
            offs.append(off)
            starts.append(t.states[off])
            ends.append(t.states[off + h_seg - 1])
    starts = np.array(starts, dtype=np.float64).reshape(-1, 2)
    ends = np.array(ends, dtype=np.float64).reshape(-1, 2)
    return SegmentTable(
        np.array(tids, dtype=np.int64),
        np.array(offs, dtype=np.int64),
        h_seg,
        starts,
        ends,
        model.phi(starts),
        model.phi(ends),
        skipped,
    )


# -- k-means and IVF -----------------------------------------------------------


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(x: np.ndarray, k: int, seed: int = 0, n_iter: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding and a fixed iteration count."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= n_list <= {n}")
    rng = np.random.default_rng([int(seed), 7])
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        else:
            pick = int(rng.integers(n))
        centers[j] = x[pick]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(1))
    for _ in range(n_iter):
        labels = np.argmin(_sq_dists(x, centers), axis=1)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
    labels = np.argmin(_sq_dists(x, centers), axis=1)
    return centers, labels


@dataclass
class IVFIndex:
    centroids: np.ndarray  # (n_list, d)
    offsets: np.ndarray  # CSR offsets, length n_list + 1
    ids: np.ndarray  # record ids grouped by list
    vectors: np.ndarray  # (count, d) searched vectors, row = record id
    n_probe: int = 8
    grouped: np.ndarray = field(init=False, repr=False)  # vectors[ids]: each list is a contiguous block

    def __post_init__(self):
        self.grouped = np.ascontiguousarray(self.vectors[self.ids])

    @property
    def n_list(self) -> int:
        return len(self.centroids)

    def list_ids(self, j: int) -> np.ndarray:
        return self.ids[self.offsets[j] : self.offsets[j + 1]]


def build_ivf(embeddings, n_list: int, seed: int = 0, n_probe: int = 8) -> IVFIndex:
    x = np.asarray(embeddings, dtype=np.float64)
    if n_list < 1:
        raise ValueError("n_list must be >= 1")
    if n_list > len(x):
        raise ValueError("n_list cannot exceed the number of records")
    centroids, labels = kmeans(x, n_list, seed)
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=n_list)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return IVFIndex(centroids, offsets, order.astype(np.int64), x, n_probe)


def _rank(ids: np.ndarray, dists: np.ndarray, k: int):
    if len(dists) > k:
        # only entries at or below the k-th smallest distance can make the cut (ties included)
        keep = dists <= np.partition(dists, k - 1)[k - 1]
        ids, dists = ids[keep], dists[keep]
    order = np.lexsort((ids, dists))[:k]
    return ids[order], dists[order]


def _row_dists(vectors: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = vectors - q
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def brute_topk(vectors, query, k: int):
    """Exact linear scan; ascending distance, ties to the smaller id."""
    vectors = np.asarray(vectors, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    return _rank(np.arange(len(vectors)), _row_dists(vectors, q), k)


def brute_topk_batch(vectors, queries, k: int, chunk: int = 256):
    """``brute_topk`` for many queries at once; returns (ids, dists) of shape (n_queries, min(k, count)).

    Squared distances from one matrix product pick a shortlist per query, with a
    margin wide enough to cover its rounding error; the shortlist is then ranked
    with the same per-row distances as ``brute_topk``, so results are identical.
    """
    x = np.asarray(vectors, dtype=np.float64)
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if k < 1:
        raise ValueError("k must be >= 1")
    kk = min(k, len(x))
    xx = np.einsum("ij,ij->i", x, x)
    out_ids = np.empty((len(Q), kk), dtype=np.int64)
    out_d = np.empty((len(Q), kk))
    tol = 64 * (x.shape[1] + 4) * np.finfo(np.float64).eps
    for lo in range(0, len(Q), chunk):
        qs = Q[lo : lo + chunk]
        qq = np.einsum("ij,ij->i", qs, qs)
        g = xx[None, :] - 2.0 * (qs @ x.T) + qq[:, None]
        for r, q in enumerate(qs):
            t = np.partition(g[r], kk - 1)[kk - 1]
            cand = np.flatnonzero(g[r] <= t + tol * (xx.max() + qq[r] + abs(t)))
            out_ids[lo + r], out_d[lo + r] = _rank(cand, _row_dists(x[cand], q), kk)
    return out_ids, out_d


def topk(index: IVFIndex, query, k: int = 10, n_probe: int | None = None):
    """k nearest stored vectors among the ``n_probe`` lists with the closest centroids."""
    if len(index.ids) == 0:
        raise ValueError("index is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_probe = index.n_probe if n_probe is None else n_probe
    q = np.asarray(query, dtype=np.float64)
    cd = ((index.centroids - q) ** 2).sum(1)
    probe = np.sort(np.argsort(cd, kind="stable")[: max(1, min(n_probe, index.n_list))])
    # merge adjacent lists into runs so each run is one contiguous slice of ``grouped``
    lo, hi = index.offsets[probe], index.offsets[probe + 1]
    brk = np.flatnonzero(lo[1:] != hi[:-1]) + 1
    runs = zip(lo[np.r_[0, brk]], hi[np.r_[brk - 1, len(probe) - 1]])
    cand, dists = [], []
    for a, b in runs:
        cand.append(index.ids[a:b])
        dists.append(_row_dists(index.grouped[a:b], q))
    return _rank(np.concatenate(cand), np.concatenate(dists), k)


def recall_at_k(index: IVFIndex, queries, k: int = 10, n_probe: int | None = None) -> float:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    truth, _ = brute_topk_batch(index.vectors, queries, k)
    hits = sum(len(np.intersect1d(t, topk(index, q, k, n_probe)[0])) for t, q in zip(truth, queries))
    return hits / (k * len(queries))


# -- index files -------------------------------------------------------------------


def save_index(index: IVFIndex, path) -> None:
    header = json.dumps(
        {
            "format_version": INDEX_FORMAT_VERSION,
            "n_list": index.n_list,
            "latent_dim": int(index.centroids.shape[1]),
            "count": int(len(index.ids)),
            "n_probe": int(index.n_probe),
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(header)) + header)
        fh.write(np.asarray(index.centroids, dtype="<f8").tobytes())
        fh.write(np.asarray(index.offsets, dtype="<i8").tobytes())
        fh.write(np.asarray(index.ids, dtype="<i8").tobytes())


def load_index(path, vectors) -> IVFIndex:
    """Read an index file; ``vectors`` supplies the searched embeddings (row = record id)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC or len(blob) < 8:
        raise ValueError("not an index file")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + hlen])
    if header.get("format_version") != INDEX_FORMAT_VERSION:
        raise ValueError("unsupported index format_version")
    nl, d, n = header["n_list"], header["latent_dim"], header["count"]
    pos = 8 + hlen
    need = pos + 8 * (nl * d + nl + 1 + n)
    if len(blob) != need:
        raise ValueError("index file truncated or corrupt")
    centroids = np.frombuffer(blob, "<f8", nl * d, pos).reshape(nl, d).astype(np.float64)
    pos += 8 * nl * d
    offsets = np.frombuffer(blob, "<i8", nl + 1, pos).astype(np.int64)
    pos += 8 * (nl + 1)
    ids = np.frombuffer(blob, "<i8", n, pos).astype(np.int64)
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape != (n, d):
        raise ValueError("vectors do not match the index")
    return IVFIndex(centroids, offsets, ids, vectors, int(header["n_probe"]))
