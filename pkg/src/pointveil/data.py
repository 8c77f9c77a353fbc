"""Sequence ingestion, frame bucketing, resampling, and dataset splits.

A labeled recording (`Sequence`) carries points ordered by reception time.
`grid_from_sequence` buckets those points into F frames and resamples each
frame to exactly P points, yielding the `FrameGrid` consumed by the graph
and model layers. All operations are pure functions of (input, seed).
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from pointveil.util import atomic_write_bytes, seeded_rng

SEQUENCE_FORMAT = "immcognito-seq"
SEQUENCE_VERSION = 1
GRID_MAGIC = b"IMCG"
GRID_VERSION = 1

KMEANS_MAX_ITER = 50


class SequenceFormatError(ValueError):
    """Raised for malformed or out-of-contract sequence files."""


@dataclass
class Sequence:
    """One labeled gesture recording.

    points is an (N, 4) float64 array of rows (x, y, z, t) ordered by
    reception time; t is a 1-based frame index stored as an integral float.
    """

    id: str
    subject: int
    gesture: int
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise ValueError(f"sequence {self.id}: points must be (N, 4)")
        if self.points.shape[0] == 0:
            raise ValueError(f"sequence {self.id}: empty point list")
        if not np.all(np.isfinite(self.points[:, :3])):
            raise ValueError(f"sequence {self.id}: non-finite coordinate")
        t = self.points[:, 3]
        if np.any(t < 1) or np.any(t != np.round(t)):
            raise ValueError(f"sequence {self.id}: frame indices must be integers >= 1")


@dataclass
class FrameGrid:
    """Canonical F x P x 3 coordinate block with its labels."""

    coords: np.ndarray  # (F, P, 3) float32
    subject: int
    gesture: int
    seq_id: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float32)
        if self.coords.ndim != 3 or self.coords.shape[2] != 3:
            raise ValueError("grid coords must be (F, P, 3)")

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    @property
    def points_per_frame(self) -> int:
        return self.coords.shape[1]

    @property
    def n_points(self) -> int:
        return self.coords.shape[0] * self.coords.shape[1]

    def node_coords(self) -> np.ndarray:
        """All points as an (F*P, 3) array, frame-major."""
        return self.coords.reshape(-1, 3)

    def node_frames(self) -> np.ndarray:
        """1-based frame index per node, frame-major order."""
        f, p = self.coords.shape[:2]
        return np.repeat(np.arange(1, f + 1, dtype=np.int32), p)


# ---------------------------------------------------------------------------
# Sequence file format (JSON Lines)


def sequence_file_header(subjects: int, gestures: int) -> dict:
    return {
        "format": SEQUENCE_FORMAT,
        "version": SEQUENCE_VERSION,
        "subjects": int(subjects),
        "gestures": int(gestures),
    }


def save_sequences(path: str, seqs: list[Sequence], subjects: int, gestures: int) -> None:
    lines = [json.dumps(sequence_file_header(subjects, gestures), sort_keys=True)]
    for seq in seqs:
        pts = [[float(x), float(y), float(z), int(t)] for x, y, z, t in seq.points]
        rec = {"id": seq.id, "subject": int(seq.subject), "gesture": int(seq.gesture),
               "points": pts}
        lines.append(json.dumps(rec, sort_keys=True))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_sequence_header(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    return _parse_header(first)


def _parse_header(line: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise SequenceFormatError(f"line 1: invalid JSON header: {e}") from e
    if not isinstance(header, dict) or header.get("format") != SEQUENCE_FORMAT:
        raise SequenceFormatError("line 1: missing or wrong format marker")
    if header.get("version") != SEQUENCE_VERSION:
        raise SequenceFormatError(f"line 1: unsupported version {header.get('version')!r}")
    for key in ("subjects", "gestures"):
        if not isinstance(header.get(key), int) or header[key] < 1:
            raise SequenceFormatError(f"line 1: header needs positive integer {key!r}")
    return header


def load_sequences(path: str) -> list[Sequence]:
    """Parse a JSON-Lines sequence file, validating labels against the header."""
    seqs: list[Sequence] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = None
        for lineno, line in enumerate(fh, start=1):
            if line.strip() == "":
                continue
            if lineno == 1:
                header = _parse_header(line)
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SequenceFormatError(f"line {lineno}: invalid JSON: {e}") from e
            for key in ("id", "subject", "gesture", "points"):
                if key not in rec:
                    raise SequenceFormatError(f"line {lineno}: missing key {key!r}")
            subject, gesture = rec["subject"], rec["gesture"]
            if not (isinstance(subject, int) and 0 <= subject < header["subjects"]):
                raise SequenceFormatError(
                    f"line {lineno}: subject {subject!r} outside 0..{header['subjects'] - 1}")
            if not (isinstance(gesture, int) and 0 <= gesture < header["gestures"]):
                raise SequenceFormatError(
                    f"line {lineno}: gesture {gesture!r} outside 0..{header['gestures'] - 1}")
            pts = np.asarray(rec["points"], dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 4 or pts.shape[0] == 0:
                raise SequenceFormatError(f"line {lineno}: points must be a non-empty [x,y,z,t] list")
            try:
                seqs.append(Sequence(rec["id"], subject, gesture, pts))
            except ValueError as e:
                raise SequenceFormatError(f"line {lineno}: {e}") from e
    if header is None:
        raise SequenceFormatError("line 1: empty file, expected header record")
    return seqs


# ---------------------------------------------------------------------------
# Frame bucketing and resampling


def bucket_frames(seq: Sequence, n_frames: int) -> list[np.ndarray]:
    """Split points (kept in reception order) into n_frames segments.

    Frame i receives the points with positions in [floor(i*N/F),
    floor((i+1)*N/F)); a frame can be empty when N < F. The t column of
    every returned point is rewritten to its new 1-based frame index.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    n = seq.points.shape[0]
    bounds = [(i * n) // n_frames for i in range(n_frames + 1)]
    frames = []
    for i in range(n_frames):
        chunk = seq.points[bounds[i]:bounds[i + 1]].copy()
        chunk[:, 3] = i + 1
        frames.append(chunk)
    return frames


def _farthest_point_indices(coords: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Deterministic farthest-point seeding; ties pick the lowest index."""
    n = coords.shape[0]
    rng = seeded_rng(seed, "kmeans-init")
    chosen = [int(rng.integers(n))]
    dist = np.sum((coords - coords[chosen[0]]) ** 2, axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((coords - coords[nxt]) ** 2, axis=1))
    return np.asarray(chosen)


def _kmeans_reduce(coords: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Lloyd's k-means returning centroids that are exact means of the
    final assignment; assignment ties go to the lowest cluster index."""
    centers = coords[_farthest_point_indices(coords, k, seed)].copy()
    assign = None
    for _ in range(KMEANS_MAX_ITER):
        d2 = np.sum((coords[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(d2, axis=1)
        # Re-seat empty clusters on the point farthest from its own centroid.
        counts = np.bincount(new_assign, minlength=k)
        for c in np.flatnonzero(counts == 0):
            far = int(np.argmax(d2[np.arange(len(coords)), new_assign]))
            new_assign[far] = c
            d2[far, :] = 0.0
            counts = np.bincount(new_assign, minlength=k)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = coords[assign == c]
            centers[c] = members.mean(axis=0)
    return centers


def _closest_pair_augment(coords: np.ndarray, target: int) -> np.ndarray:
    """Grow a frame to `target` points by inserting closest-pair midpoints.

    Ties pick the lexicographically smallest index pair, so duplicated
    points merge into stacks of copies deterministically.
    """
    pts = [coords[i] for i in range(coords.shape[0])]
    while len(pts) < target:
        arr = np.asarray(pts)
        d2 = np.sum((arr[:, None, :] - arr[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        flat = int(np.argmin(d2))
        i, j = divmod(flat, len(pts))
        pts.append((arr[i] + arr[j]) / 2.0)
    return np.asarray(pts)


def resample_frame(frame: np.ndarray, n_points: int, seed: int,
                   prev: np.ndarray | None = None) -> np.ndarray:
    """Return exactly n_points 3-D coordinates for one frame.

    Oversized frames are reduced to k-means centroids; undersized ones are
    grown by closest-pair midpoint insertion. An empty frame copies the
    caller-supplied previous resampled frame (origin points if none).
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    coords = np.asarray(frame, dtype=np.float64)
    if coords.size == 0:
        if prev is None:
            return np.zeros((n_points, 3), dtype=np.float64)
        return np.asarray(prev, dtype=np.float64).copy()
    coords = coords[:, :3]
    n = coords.shape[0]
    if n == n_points:
        return coords.copy()
    if n > n_points:
        return _kmeans_reduce(coords, n_points, seed)
    return _closest_pair_augment(coords, n_points)


def _frame_seed(seed: int, index: int) -> int:
    """Stable per-frame child seed for resampling."""
    return int(seeded_rng(seed, "frame", index).integers(2**31 - 1))


def grid_from_sequence(seq: Sequence, n_frames: int, n_points: int, seed: int) -> FrameGrid:
    """Bucket a sequence into frames and resample each to n_points."""
    frames = bucket_frames(seq, n_frames)
    out = np.empty((n_frames, n_points, 3), dtype=np.float64)
    prev: np.ndarray | None = None
    for i, frame in enumerate(frames):
        resampled = resample_frame(frame[:, :3], n_points, seed=_frame_seed(seed, i),
                                   prev=prev)
        out[i] = resampled
        prev = resampled
    return FrameGrid(out.astype(np.float32), seq.subject, seq.gesture, seq_id=seq.id)


def grids_from_sequences(seqs: list[Sequence], n_frames: int, n_points: int,
                         seed: int) -> list[FrameGrid]:
    return [grid_from_sequence(s, n_frames, n_points, seed) for s in seqs]


# ---------------------------------------------------------------------------
# Train/test split


def _stratified_indices(keys: list[tuple[int, int]], train_fraction: float,
                        seed: int) -> tuple[list[int], list[int]]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    strata: dict[tuple[int, int], list[int]] = {}
    for i, key in enumerate(keys):
        strata.setdefault(key, []).append(i)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for key in sorted(strata):
        members = strata[key]
        if len(members) == 1:
            warnings.warn(
                f"stratum (gesture={key[0]}, subject={key[1]}) has a single sequence; "
                "assigning it to train", stacklevel=3)
            train_idx.extend(members)
            continue
        rng = seeded_rng(seed, "split", key[0], key[1])
        order = rng.permutation(len(members))
        n_train = int(np.floor(train_fraction * len(members) + 0.5))
        n_train = min(max(n_train, 1), len(members))
        shuffled = [members[j] for j in order]
        train_idx.extend(shuffled[:n_train])
        test_idx.extend(shuffled[n_train:])
    train_idx.sort()
    test_idx.sort()
    return train_idx, test_idx


def split_dataset(seqs: list[Sequence], train_fraction: float,
                  seed: int) -> tuple[list[Sequence], list[Sequence]]:
    """Exact partition stratified jointly by (gesture, subject).

    Singleton strata go to train with a warning; the split is a pure
    function of (input order, fraction, seed).
    """
    keys = [(s.gesture, s.subject) for s in seqs]
    train_idx, test_idx = _stratified_indices(keys, train_fraction, seed)
    return [seqs[i] for i in train_idx], [seqs[i] for i in test_idx]


def split_grids(grids: list[FrameGrid], train_fraction: float,
                seed: int) -> tuple[list[FrameGrid], list[FrameGrid]]:
    """Same stratified partition, applied to preprocessed grids."""
    keys = [(g.gesture, g.subject) for g in grids]
    train_idx, test_idx = _stratified_indices(keys, train_fraction, seed)
    return [grids[i] for i in train_idx], [grids[i] for i in test_idx]


# ---------------------------------------------------------------------------
# Grid binary format


def save_grids(path: str, grids: list[FrameGrid]) -> None:
    """Write grids in the little-endian binary block format (bit-exact IO)."""
    if not grids:
        raise ValueError("no grids to save")
    f, p = grids[0].frames, grids[0].points_per_frame
    for g in grids:
        if (g.frames, g.points_per_frame) != (f, p):
            raise ValueError("all grids in one file must share F and P")
    out = bytearray()
    out += GRID_MAGIC
    out += struct.pack("<III", GRID_VERSION, len(grids), f)
    out += struct.pack("<I", p)
    for g in grids:
        out += struct.pack("<II", g.subject, g.gesture)
        out += np.ascontiguousarray(g.coords, dtype="<f4").tobytes()
    atomic_write_bytes(path, bytes(out))


def load_grids(path: str) -> list[FrameGrid]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != GRID_MAGIC:
        raise ValueError(f"{path}: not a grid file (bad magic)")
    version, count, f, p = struct.unpack_from("<IIII", blob, 4)
    if version != GRID_VERSION:
        raise ValueError(f"{path}: unsupported grid version {version}")
    offset = 20
    grid_bytes = f * p * 3 * 4
    grids = []
    for _ in range(count):
        subject, gesture = struct.unpack_from("<II", blob, offset)
        offset += 8
        coords = np.frombuffer(blob, dtype="<f4", count=f * p * 3, offset=offset)
        offset += grid_bytes
        grids.append(FrameGrid(coords.reshape(f, p, 3).copy(), subject, gesture))
    return grids
