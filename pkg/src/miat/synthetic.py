"""Synthetic three-lane highway episodes with known maneuver ground truth.

Each episode holds one ego vehicle executing a requested (lateral,
longitudinal) maneuver and up to eight neighbors cruising in their lanes. The
maneuver ramps start shortly before the first anchor so part of the maneuver is
visible in every history window, and the episode length keeps every anchor's
label window consistent with the requested maneuver.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .data import DatasetSplit, GridSpec, Lateral, Longitudinal, ManeuverLabel, VehicleRecord, all_modes
from .ngsim import DOWNSAMPLE, build_samples, group_tracks, split_by_vehicle

DT = 0.1
LANE_WIDTH = 3.7
N_LANES = 3
SPEED_CHANGE = 0.2
RAMP_FRAMES = 40
FRAME_GAP = 1000


def smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return 3 * u ** 2 - 2 * u ** 3


def lane_of(x) -> np.ndarray:
    return np.clip(1 + np.floor(np.asarray(x) / LANE_WIDTH), 1, N_LANES).astype(np.int64)


@dataclass(frozen=True)
class EpisodeConfig:
    history_len: int = 16
    future_len: int = 25
    n_anchors: int = 5

    @property
    def n_frames(self) -> int:
        return (DOWNSAMPLE * (self.history_len - 1) + 1 + DOWNSAMPLE * self.future_len
                + DOWNSAMPLE * (self.n_anchors - 1))

    @property
    def first_anchor(self) -> int:
        return DOWNSAMPLE * (self.history_len - 1)


def _ego_profile(rng, maneuver: ManeuverLabel, cfg: EpisodeConfig):
    n = cfg.n_frames
    k = np.arange(n)
    # ramps begin 12-18 raw frames before the first anchor
    start = cfg.first_anchor - int(rng.integers(12, 19))
    progress = smoothstep((k - start) / RAMP_FRAMES)

    v0 = float(rng.uniform(20.0, 25.0))
    factor = {Longitudinal.ACC: 1 + SPEED_CHANGE, Longitudinal.DEC: 1 - SPEED_CHANGE,
              Longitudinal.CON: 1.0}[maneuver.longitudinal]
    speed = v0 + (factor * v0 - v0) * progress

    if maneuver.lateral == Lateral.CLL:
        lane0 = int(rng.integers(2, N_LANES + 1))
        shift = -LANE_WIDTH
    elif maneuver.lateral == Lateral.CLR:
        lane0 = int(rng.integers(1, N_LANES))
        shift = LANE_WIDTH
    else:
        lane0 = int(rng.integers(1, N_LANES + 1))
        shift = 0.0
    x = (lane0 - 0.5) * LANE_WIDTH + shift * progress
    y = np.concatenate([[0.0], np.cumsum(speed[:-1] * DT)])
    return x, y, speed


def generate_episode(seed: int, maneuver: ManeuverLabel, n_neighbors: int = 2, noise_sigma: float = 0.0,
                     *, config: EpisodeConfig = EpisodeConfig(), ego_id: int = 1,
                     frame_offset: int = 0) -> List[VehicleRecord]:
    """Records of one episode; the ego gets ``ego_id`` and neighbors the following ids."""
    if not 0 <= n_neighbors <= 8:
        raise ValueError("n_neighbors must be in [0, 8]")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    n = config.n_frames
    tracks = [(ego_id, *_ego_profile(rng, maneuver, config))]
    v_ego = tracks[0][3][0]
    for j in range(n_neighbors):
        lane = int(rng.integers(1, N_LANES + 1))
        speed = np.full(n, v_ego + rng.uniform(-3.0, 3.0))
        y0 = rng.uniform(-25.0, 25.0)
        x = np.full(n, (lane - 0.5) * LANE_WIDTH)
        y = y0 + np.concatenate([[0.0], np.cumsum(speed[:-1] * DT)])
        tracks.append((ego_id + 1 + j, x, y, speed))

    records = []
    for vid, x, y, speed in tracks:
        if noise_sigma > 0:
            x = x + rng.normal(0.0, noise_sigma, n)
            y = y + rng.normal(0.0, noise_sigma, n)
        acc = np.append(np.diff(speed) / DT, 0.0)
        lanes = lane_of(x)
        for k in range(n):
            records.append(VehicleRecord(int(vid), frame_offset + k, float(x[k]), float(y[k]),
                                         int(lanes[k]), float(speed[k]), float(acc[k])))
    return records


def generate_corpus(seed: int, n_per_class: int, *, n_neighbors: Optional[int] = None,
                    noise_sigma: float = 0.0, config: EpisodeConfig = EpisodeConfig()
                    ) -> Tuple[List[VehicleRecord], List[Tuple[int, ManeuverLabel]]]:
    """Episodes for every maneuver pair laid out on disjoint frame ranges.

    Returns all records and the ``(ego_id, requested_label)`` list. When
    ``n_neighbors`` is None each episode draws it uniformly from 0..8.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    records, egos = [], []
    episode = 0
    for c, label in enumerate(all_modes()):
        for i in range(n_per_class):
            ep_rng = np.random.default_rng([seed, c, i])
            ep_seed = int(ep_rng.integers(2 ** 31))
            k = n_neighbors if n_neighbors is not None else int(ep_rng.integers(0, 9))
            ego_id = 10 * (episode + 1)
            records += generate_episode(ep_seed, label, k, noise_sigma, config=config,
                                        ego_id=ego_id, frame_offset=episode * FRAME_GAP)
            egos.append((ego_id, label))
            episode += 1
    return records, egos


def generate_dataset(seed: int, n_per_class: int, *, n_neighbors: Optional[int] = None,
                     noise_sigma: float = 0.0, fractions=(0.7, 0.1, 0.2), n_anchors: int = 5,
                     history_len: int = 16, future_len: int = 25, grid: GridSpec = GridSpec(),
                     include_kinematics: bool = False) -> DatasetSplit:
    """Balanced synthetic dataset built through the regular sample builder."""
    config = EpisodeConfig(history_len, future_len, n_anchors)
    records, egos = generate_corpus(seed, n_per_class, n_neighbors=n_neighbors,
                                    noise_sigma=noise_sigma, config=config)
    samples = build_samples(group_tracks(records), grid, history_len, future_len, 1,
                            include_kinematics=include_kinematics, target_ids=[e for e, _ in egos])
    return split_by_vehicle(samples, fractions, seed)
