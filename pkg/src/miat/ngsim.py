"""NGSIM-style trajectory ingestion: parsing, maneuver labels, grid samples, splits.

Raw NGSIM files are recorded at 10 Hz in feet. Everything here is converted to
meters on ingestion; model sequences are downsampled to 5 Hz while maneuver
labels are computed on the raw 10 Hz tracks.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import struct
import zlib
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .data import (
    FEET_TO_METERS,
    DatasetSplit,
    GridSpec,
    Lateral,
    Longitudinal,
    ManeuverLabel,
    TrajectorySample,
    VehicleRecord,
    all_modes,
)

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("Vehicle_ID", "Frame_ID", "Local_X", "Local_Y", "Lane_ID", "v_Vel")
MAX_LANE = 6
LABEL_WINDOW = 40
DOWNSAMPLE = 2
EXHAUSTIVE_SPLIT_LIMIT = 10


class DatasetFormatError(ValueError):
    """Raised when a serialized dataset cannot be read back faithfully."""


# --------------------------------------------------------------------------- parsing

def parse_records(csv_stream, skipped: Optional[list] = None) -> List[VehicleRecord]:
    """Read NGSIM columns from a CSV stream into SI-unit records.

    Output is sorted by (vehicle_id, frame_id); duplicated frames keep the first
    row. Rows with non-numeric or missing cells are skipped and, when
    ``skipped`` is given, appended to it as ``(line_number, reason)``.
    """
    if isinstance(csv_stream, (str, bytes)):
        raise TypeError("parse_records expects a file-like object")
    reader = csv.DictReader(csv_stream)
    header = reader.fieldnames or []
    for column in REQUIRED_COLUMNS:
        if column not in header:
            raise ValueError(f"missing required column: {column}")
    has_acc = "v_Acc" in header

    seen = set()
    records = []
    n_skipped = 0
    for line_no, row in enumerate(reader, start=2):
        try:
            vid = int(float(row["Vehicle_ID"]))
            frame = int(float(row["Frame_ID"]))
            x = float(row["Local_X"]) * FEET_TO_METERS
            y = float(row["Local_Y"]) * FEET_TO_METERS
            lane = int(float(row["Lane_ID"]))
            vel = float(row["v_Vel"]) * FEET_TO_METERS
            acc = float(row["v_Acc"]) * FEET_TO_METERS if has_acc else 0.0
            if not all(np.isfinite([x, y, vel, acc])):
                raise ValueError("non-finite value")
        except (TypeError, ValueError) as exc:
            n_skipped += 1
            if skipped is not None:
                skipped.append((line_no, str(exc)))
            continue
        if (vid, frame) in seen:
            continue
        seen.add((vid, frame))
        records.append(VehicleRecord(vid, frame, x, y, lane, max(vel, 0.0), acc))
    if n_skipped:
        log.warning("skipped %d malformed rows", n_skipped)
    records.sort(key=lambda r: (r.vehicle_id, r.frame_id))
    return records


def write_records_csv(records: Iterable[VehicleRecord], stream) -> None:
    """Write records back out in NGSIM column format (feet, 10 Hz)."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(REQUIRED_COLUMNS + ("v_Acc",))
    for r in records:
        writer.writerow([
            r.vehicle_id, r.frame_id,
            repr(r.local_x / FEET_TO_METERS), repr(r.local_y / FEET_TO_METERS),
            r.lane_id, repr(r.velocity / FEET_TO_METERS), repr(r.acceleration / FEET_TO_METERS),
        ])


def cap_lane_id(lane: int) -> int:
    if lane < 1:
        raise ValueError(f"lane id must be >= 1, got {lane}")
    return min(int(lane), MAX_LANE)


def normalize_records(records: Iterable[VehicleRecord]) -> List[VehicleRecord]:
    out = []
    for r in records:
        lane = cap_lane_id(r.lane_id)
        out.append(r if lane == r.lane_id else VehicleRecord(
            r.vehicle_id, r.frame_id, r.local_x, r.local_y, lane, r.velocity, r.acceleration))
    return out


# --------------------------------------------------------------------------- tracks

@dataclass
class VehicleTrack:
    """Column view of one vehicle's frame-sorted records."""

    vehicle_id: int
    frames: np.ndarray
    x: np.ndarray
    y: np.ndarray
    lane: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[VehicleRecord]) -> "VehicleTrack":
        records = sorted(records, key=lambda r: r.frame_id)
        if not records:
            raise ValueError("empty track")
        ids = {r.vehicle_id for r in records}
        if len(ids) != 1:
            raise ValueError(f"records of several vehicles: {sorted(ids)}")
        return cls(
            records[0].vehicle_id,
            np.array([r.frame_id for r in records], dtype=np.int64),
            np.array([r.local_x for r in records]),
            np.array([r.local_y for r in records]),
            np.array([r.lane_id for r in records], dtype=np.int64),
            np.array([r.velocity for r in records]),
            np.array([r.acceleration for r in records]),
        )

    def __len__(self):
        return len(self.frames)

    def index_of(self, frame: int) -> int:
        i = int(np.searchsorted(self.frames, frame))
        if i >= len(self.frames) or self.frames[i] != frame:
            return -1
        return i

    def window(self, lo: int, hi: int) -> slice:
        """Slice of entries with frame in [lo, hi]; clipped to the track."""
        return slice(int(np.searchsorted(self.frames, lo, "left")),
                     int(np.searchsorted(self.frames, hi, "right")))


def _as_track(records) -> VehicleTrack:
    return records if isinstance(records, VehicleTrack) else VehicleTrack.from_records(records)


def group_tracks(records: Iterable[VehicleRecord]) -> Dict[int, VehicleTrack]:
    groups = defaultdict(list)
    for r in records:
        groups[r.vehicle_id].append(r)
    return {vid: VehicleTrack.from_records(rs) for vid, rs in sorted(groups.items())}


# --------------------------------------------------------------------------- labels

def label_lateral(records_of_vehicle, anchor_frame: int, window: int = LABEL_WINDOW) -> Lateral:
    track = _as_track(records_of_vehicle)
    sl = track.window(anchor_frame - window, anchor_frame + window)
    lanes = track.lane[sl]
    if len(lanes) == 0:
        return Lateral.LK
    if lanes[-1] < lanes[0]:
        return Lateral.CLL
    if lanes[-1] > lanes[0]:
        return Lateral.CLR
    return Lateral.LK


def label_longitudinal(records_of_vehicle, anchor_frame: int, window: int = LABEL_WINDOW,
                       eps: float = 0.05) -> Longitudinal:
    track = _as_track(records_of_vehicle)
    past = track.velocity[track.window(anchor_frame - window, anchor_frame)]
    future = track.velocity[track.window(anchor_frame, anchor_frame + window)]
    if len(past) == 0 or len(future) == 0:
        return Longitudinal.CON
    v_h, v_f = float(np.mean(past)), float(np.mean(future))
    if v_h == 0.0:
        return Longitudinal.ACC if v_f > 0 else Longitudinal.CON
    if v_f > (1 + eps) * v_h:
        return Longitudinal.ACC
    if v_f < (1 - eps) * v_h:
        return Longitudinal.DEC
    return Longitudinal.CON


def label_maneuver(records_of_vehicle, anchor_frame: int, window: int = LABEL_WINDOW,
                   eps: float = 0.05) -> ManeuverLabel:
    track = _as_track(records_of_vehicle)
    return ManeuverLabel(label_lateral(track, anchor_frame, window),
                         label_longitudinal(track, anchor_frame, window, eps))


# --------------------------------------------------------------------------- grid

def grid_assign(ego: VehicleRecord, neighbor: VehicleRecord, spec: GridSpec = GridSpec()) -> Optional[int]:
    """Cell index of ``neighbor`` in the ego-centred grid, or None if outside."""
    if neighbor.vehicle_id == ego.vehicle_id:
        return None
    return _cell(ego.lane_id, ego.local_y, neighbor.lane_id, neighbor.local_y, spec)


def _cell(ego_lane, ego_y, lane, y, spec: GridSpec) -> Optional[int]:
    column = 1 + int(lane) - int(ego_lane)
    if not 0 <= column <= 2:
        return None
    # rint rounds half to even, which keeps the A-sees-B / B-sees-A rows mirrored
    row = spec.ego_row + int(np.rint((y - ego_y) / spec.cell_length))
    if not 0 <= row < spec.cells:
        return None
    return spec.cell(column, row)


# --------------------------------------------------------------------------- samples

@dataclass(frozen=True)
class SampleConfig:
    history_len: int = 16
    future_len: int = 25
    stride: int = 1
    include_kinematics: bool = False
    label_window: int = LABEL_WINDOW
    label_eps: float = 0.05

    @property
    def input_dim(self) -> int:
        return 4 if self.include_kinematics else 2


class _FrameIndex:
    """Per-frame arrays of (vehicle_id, x, y, lane, v, a) for neighbor lookups."""

    def __init__(self, tracks: Dict[int, VehicleTrack]):
        rows = defaultdict(list)
        for vid, tr in tracks.items():
            for i, f in enumerate(tr.frames):
                rows[int(f)].append((vid, tr.x[i], tr.y[i], tr.lane[i], tr.velocity[i], tr.acceleration[i]))
        self.frames = {f: np.array(v, dtype=np.float64) for f, v in rows.items()}

    def at(self, frame: int) -> np.ndarray:
        return self.frames.get(frame, np.zeros((0, 6)))


def valid_anchors(track: VehicleTrack, history_len: int, future_len: int, stride: int = 1) -> List[int]:
    """Raw anchor frames with a complete downsampled history and future."""
    back = DOWNSAMPLE * (history_len - 1)
    ahead = DOWNSAMPLE * future_len
    present = set(track.frames.tolist())
    anchors = []
    first = int(track.frames[0]) + back
    for a in range(first, int(track.frames[-1]) - ahead + 1, DOWNSAMPLE * stride):
        if all((a + k) in present for k in range(-back, ahead + 1, DOWNSAMPLE)):
            anchors.append(a)
    return anchors


def _features(x, y, v, a, origin, kin: bool) -> np.ndarray:
    cols = [x - origin[0], y - origin[1]]
    if kin:
        cols += [v, a]
    return np.stack(cols, axis=-1)


def _vehicle_samples(track: VehicleTrack, index: _FrameIndex, grid: GridSpec,
                     cfg: SampleConfig) -> List[TrajectorySample]:
    T, F, kin = cfg.history_len, cfg.future_len, cfg.include_kinematics
    D = cfg.input_dim
    out = []
    for anchor in valid_anchors(track, T, F, cfg.stride):
        hist_frames = anchor + DOWNSAMPLE * np.arange(-(T - 1), 1)
        fut_frames = anchor + DOWNSAMPLE * np.arange(1, F + 1)
        hi = np.array([track.index_of(int(f)) for f in hist_frames])
        fi = np.array([track.index_of(int(f)) for f in fut_frames])
        origin = (track.x[hi[-1]], track.y[hi[-1]])
        ego_hist = _features(track.x[hi], track.y[hi], track.velocity[hi],
                             track.acceleration[hi], origin, kin)
        future = np.stack([track.x[fi] - origin[0], track.y[fi] - origin[1]], axis=-1)

        nbr = np.zeros((grid.n_cells, T, D))
        mask = np.zeros((grid.n_cells, T), dtype=bool)
        best_gap = np.full((grid.n_cells, T), np.inf)
        for t, (frame, ei) in enumerate(zip(hist_frames, hi)):
            others = index.at(int(frame))
            for vid, x, y, lane, v, acc in others:
                if int(vid) == track.vehicle_id:
                    continue
                cell = _cell(track.lane[ei], track.y[ei], lane, y, grid)
                if cell is None:
                    continue
                gap = abs(y - track.y[ei])
                # one vehicle per cell: the longitudinally closest wins, ties by lower id
                if gap < best_gap[cell, t]:
                    best_gap[cell, t] = gap
                    mask[cell, t] = True
                    nbr[cell, t] = _features(np.array(x), np.array(y), np.array(v),
                                             np.array(acc), origin, kin)
        label = label_maneuver(track, anchor, cfg.label_window, cfg.label_eps)
        out.append(TrajectorySample(
            ego_history=ego_hist.astype(np.float32),
            neighbor_histories=nbr.astype(np.float32),
            neighbor_mask=mask,
            future=future.astype(np.float32),
            label=label,
            ego_id=int(track.vehicle_id),
            anchor_frame=int(anchor),
        ))
    return out


_WORKER_STATE = {}


def _init_worker(tracks, grid, cfg):
    _WORKER_STATE.update(tracks=tracks, index=_FrameIndex(tracks), grid=grid, cfg=cfg)


def _worker_samples(vid):
    st = _WORKER_STATE
    return _vehicle_samples(st["tracks"][vid], st["index"], st["grid"], st["cfg"])


def build_samples(records, spec: GridSpec = GridSpec(), T: int = 16, F: int = 25, stride: int = 1,
                  *, include_kinematics: bool = False, target_ids: Optional[Iterable[int]] = None,
                  workers: int = 1, label_window: int = LABEL_WINDOW,
                  label_eps: float = 0.05) -> List[TrajectorySample]:
    """Slide a window over every target vehicle and emit grid-structured samples.

    ``records`` is either a list of records or a ``{vehicle_id: VehicleTrack}``
    mapping. Output order is by vehicle id then anchor frame regardless of
    ``workers``.
    """
    tracks = records if isinstance(records, dict) else group_tracks(records)
    cfg = SampleConfig(T, F, stride, include_kinematics, label_window, label_eps)
    ids = sorted(tracks) if target_ids is None else sorted(set(target_ids) & set(tracks))
    if workers > 1 and len(ids) > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(tracks, spec, cfg)) as ex:
            chunks = list(ex.map(_worker_samples, ids, chunksize=max(1, len(ids) // (4 * workers))))
    else:
        index = _FrameIndex(tracks)
        chunks = [_vehicle_samples(tracks[vid], index, spec, cfg) for vid in ids]
    return [s for chunk in chunks for s in chunk]


# --------------------------------------------------------------------------- splitting

def _deviation(counts, total, fractions) -> float:
    return max(abs(c / total - f) for c, f in zip(counts, fractions))


def split_by_vehicle(samples: Sequence[TrajectorySample], fractions=(0.7, 0.1, 0.2),
                     seed: int = 0) -> DatasetSplit:
    """Assign whole vehicles to train/validation/test targeting sample fractions.

    Vehicles are shuffled with ``seed`` and placed greedily into the split with
    the largest remaining deficit, then single moves and pairwise swaps are
    applied while they reduce the worst fraction error. Up to
    ``EXHAUSTIVE_SPLIT_LIMIT`` vehicles every assignment is scored instead,
    since local search can stall on a handful of unevenly sized vehicles.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative values summing to 1: {fractions}")
    per_vehicle = Counter(s.ego_id for s in samples)
    if len(per_vehicle) < 3:
        raise ValueError(f"need at least 3 vehicles to split, got {len(per_vehicle)}")

    rng = np.random.default_rng(seed)
    order = [sorted(per_vehicle)[i] for i in rng.permutation(len(per_vehicle))]
    total = sum(per_vehicle.values())
    if len(order) <= EXHAUSTIVE_SPLIT_LIMIT:
        return _fill_split(samples, _exhaustive_assignment(order, per_vehicle, total, fractions))
    counts = [0, 0, 0]
    assign = {}
    for vid in order:
        j = int(np.argmax([f * total - c for f, c in zip(fractions, counts)]))
        assign[vid] = j
        counts[j] += per_vehicle[vid]

    def score(cs):
        return (_deviation(cs, total, fractions), sum((c / total - f) ** 2 for c, f in zip(cs, fractions)))

    allow_swaps = len(order) <= 200
    current = score(counts)
    while True:
        best = None
        for vid in order:
            a, n = assign[vid], per_vehicle[vid]
            for b in range(3):
                if b == a:
                    continue
                cs = list(counts)
                cs[a] -= n
                cs[b] += n
                s = score(cs)
                if s < current and (best is None or s < best[0]):
                    best = (s, [(vid, b)], cs)
        if best is None and allow_swaps:
            for i, u in enumerate(order):
                for w in order[i + 1:]:
                    a, b = assign[u], assign[w]
                    if a == b:
                        continue
                    d = per_vehicle[u] - per_vehicle[w]
                    if d == 0:
                        continue
                    cs = list(counts)
                    cs[a] -= d
                    cs[b] += d
                    s = score(cs)
                    if s < current and (best is None or s < best[0]):
                        best = (s, [(u, b), (w, a)], cs)
        if best is None:
            break
        current, moves, counts = best
        for vid, j in moves:
            assign[vid] = j

    return _fill_split(samples, assign)


def _exhaustive_assignment(order, per_vehicle, total, fractions) -> Dict[int, int]:
    """Best of all 3^n assignments; ties go to the first in shuffled enumeration order."""
    grid = np.array(list(itertools.product(range(3), repeat=len(order))), dtype=np.int8)
    sizes = np.array([per_vehicle[v] for v in order], dtype=np.float64)
    err = np.stack([(grid == j) @ sizes / total - f for j, f in enumerate(fractions)], axis=1)
    best = np.lexsort(((err ** 2).sum(1), np.abs(err).max(1)))[0]
    return {vid: int(j) for vid, j in zip(order, grid[best])}


def _fill_split(samples, assign) -> DatasetSplit:
    split = DatasetSplit()
    parts = (split.train, split.validation, split.test)
    for s in samples:
        parts[assign[s.ego_id]].append(s)
    return split


# --------------------------------------------------------------------------- serialization

MAGIC = b"MIATDSET"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sII")


def _split_arrays(samples: List[TrajectorySample], T, F, D, C):
    n = len(samples)
    if n == 0:
        return [np.zeros((0, T, D), "<f4"), np.zeros((0, C, T, D), "<f4"), np.zeros((0, C, T), "u1"),
                np.zeros((0, F, 2), "<f4"), np.zeros((0, 2), "u1"), np.zeros(0, "<i8"), np.zeros(0, "<i8")]
    return [
        np.stack([s.ego_history for s in samples]).astype("<f4"),
        np.stack([s.neighbor_histories for s in samples]).astype("<f4"),
        np.stack([s.neighbor_mask for s in samples]).astype("u1"),
        np.stack([s.future for s in samples]).astype("<f4"),
        np.array([[s.label.lateral, s.label.longitudinal] for s in samples], dtype="u1"),
        np.array([s.ego_id for s in samples], dtype="<i8"),
        np.array([s.anchor_frame for s in samples], dtype="<i8"),
    ]


def _dims(split: DatasetSplit):
    for _, part in split.parts():
        if part:
            s = part[0]
            return s.history_len, s.future_len, s.ego_history.shape[1], s.neighbor_histories.shape[0]
    return 16, 25, 2, GridSpec().n_cells


def dumps_dataset(split: DatasetSplit) -> bytes:
    T, F, D, C = _dims(split)
    header = json.dumps({
        "history_len": T, "future_len": F, "input_dim": D, "n_cells": C,
        "counts": {name: len(part) for name, part in split.parts()},
    }, sort_keys=True).encode()
    body = io.BytesIO()
    body.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
    body.write(header)
    body.write(struct.pack("<I", zlib.crc32(header)))
    for _, part in split.parts():
        for arr in _split_arrays(part, T, F, D, C):
            raw = np.ascontiguousarray(arr).tobytes()
            body.write(struct.pack("<Q", len(raw)))
            body.write(raw)
    payload = body.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def loads_dataset(blob: bytes) -> DatasetSplit:
    if len(blob) < _PREAMBLE.size + 8:
        raise DatasetFormatError("file truncated before header")
    magic, version, hlen = _PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DatasetFormatError("bad magic; not a dataset file")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} (expected {FORMAT_VERSION})")
    pos = _PREAMBLE.size
    if pos + hlen + 4 > len(blob):
        raise DatasetFormatError("file truncated inside header")
    header_bytes = blob[pos:pos + hlen]
    (hcrc,) = struct.unpack_from("<I", blob, pos + hlen)
    if zlib.crc32(header_bytes) != hcrc:
        raise DatasetFormatError("header checksum mismatch")
    header = json.loads(header_bytes)
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise DatasetFormatError("payload checksum mismatch (corrupted or truncated file)")
    pos += hlen + 4
    T, F, D, C = header["history_len"], header["future_len"], header["input_dim"], header["n_cells"]

    split = DatasetSplit()
    for name, part in split.parts():
        n = header["counts"][name]
        shapes = [((n, T, D), "<f4"), ((n, C, T, D), "<f4"), ((n, C, T), "u1"), ((n, F, 2), "<f4"),
                  ((n, 2), "u1"), ((n,), "<i8"), ((n,), "<i8")]
        arrays = []
        for shape, dtype in shapes:
            if pos + 8 > len(blob) - 4:
                raise DatasetFormatError(f"file truncated in section {name}")
            (length,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
            if length != expected or pos + length > len(blob) - 4:
                raise DatasetFormatError(f"section length mismatch in {name}")
            arrays.append(np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape))
            pos += length
        ego, nbr, mask, fut, labels, ids, anchors = arrays
        for i in range(n):
            part.append(TrajectorySample(
                ego_history=ego[i].astype(np.float32),
                neighbor_histories=nbr[i].astype(np.float32),
                neighbor_mask=mask[i].astype(bool),
                future=fut[i].astype(np.float32),
                label=ManeuverLabel(Lateral(int(labels[i, 0])), Longitudinal(int(labels[i, 1]))),
                ego_id=int(ids[i]),
                anchor_frame=int(anchors[i]),
            ))
    if pos != len(blob) - 4:
        raise DatasetFormatError("trailing bytes after last section")
    return split


def save_dataset(split: DatasetSplit, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_dataset(split))


def load_dataset(path) -> DatasetSplit:
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())


def dataset_stats(split: DatasetSplit) -> dict:
    """Sample counts per split and per maneuver class, JSON-ready."""
    stats = {"splits": {}, "vehicles": {}}
    names = [str(m) for m in all_modes()]
    for name, part in split.parts():
        hist = Counter(str(s.label) for s in part)
        stats["splits"][name] = {"samples": len(part), "classes": {k: hist.get(k, 0) for k in names}}
        stats["vehicles"][name] = len({s.ego_id for s in part})
    return stats
