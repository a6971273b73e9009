"""Core value types: maneuver taxonomy, the neighbor grid and trajectory samples.

Coordinates are meters. Lateral ``x`` grows to the right (NGSIM lane 1 is the
leftmost lane), longitudinal ``y`` grows in the driving direction. Sample
arrays are expressed relative to the ego position at the anchor frame.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import numpy as np

FEET_TO_METERS = 0.3048
N_LATERAL = 3
N_LONGITUDINAL = 3
N_MODES = N_LATERAL * N_LONGITUDINAL


class Lateral(enum.IntEnum):
    LK = 0
    CLL = 1
    CLR = 2


class Longitudinal(enum.IntEnum):
    ACC = 0
    DEC = 1
    CON = 2


@dataclass(frozen=True)
class ManeuverLabel:
    lateral: Lateral
    longitudinal: Longitudinal

    def __post_init__(self):
        object.__setattr__(self, "lateral", Lateral(self.lateral))
        object.__setattr__(self, "longitudinal", Longitudinal(self.longitudinal))

    @property
    def index(self) -> int:
        return mode_index(self.lateral, self.longitudinal)

    def __str__(self):
        return f"{self.lateral.name}/{self.longitudinal.name}"


def mode_index(lateral, longitudinal) -> int:
    """Lateral-major position of a maneuver pair among the 9 modes."""
    return N_LONGITUDINAL * int(Lateral(lateral)) + int(Longitudinal(longitudinal))


def mode_from_index(index: int) -> ManeuverLabel:
    if not 0 <= index < N_MODES:
        raise ValueError(f"mode index out of range: {index}")
    return ManeuverLabel(Lateral(index // N_LONGITUDINAL), Longitudinal(index % N_LONGITUDINAL))


def all_modes() -> List[ManeuverLabel]:
    return [mode_from_index(i) for i in range(N_MODES)]


@dataclass(frozen=True)
class VehicleRecord:
    """One per-frame observation of one vehicle (SI units, 10 Hz frames)."""

    vehicle_id: int
    frame_id: int
    local_x: float
    local_y: float
    lane_id: int
    velocity: float
    acceleration: float = 0.0


@dataclass(frozen=True)
class GridSpec:
    lanes: int = 3
    cells: int = 13
    cell_length: float = 15 * FEET_TO_METERS

    def __post_init__(self):
        if self.lanes != 3 or self.cells < 1 or self.cells % 2 == 0:
            raise ValueError("grid must have 3 lane columns and an odd number of rows")
        if self.cell_length <= 0:
            raise ValueError("cell_length must be positive")

    @property
    def ego_row(self) -> int:
        return self.cells // 2

    @property
    def n_cells(self) -> int:
        return self.lanes * self.cells

    @property
    def coverage(self) -> float:
        """Longitudinal half-extent covered around the ego, in meters."""
        return (self.cells / 2) * self.cell_length

    def cell(self, column: int, row: int) -> int:
        return column * self.cells + row


@dataclass
class TrajectorySample:
    """One training/evaluation example centred on an ego vehicle.

    ego_history: (T, D) float32, neighbor_histories: (n_cells, T, D) float32,
    neighbor_mask: (n_cells, T) bool, future: (F, 2) float32.
    """

    ego_history: np.ndarray
    neighbor_histories: np.ndarray
    neighbor_mask: np.ndarray
    future: np.ndarray
    label: ManeuverLabel
    ego_id: int = -1
    anchor_frame: int = -1

    @property
    def history_len(self) -> int:
        return self.ego_history.shape[0]

    @property
    def future_len(self) -> int:
        return self.future.shape[0]

    def validate(self, grid: Optional[GridSpec] = None) -> None:
        """Raise ``ValueError`` if any field invariant is violated."""
        grid = grid or GridSpec()
        T, D = self.ego_history.shape
        if self.neighbor_histories.shape != (grid.n_cells, T, D):
            raise ValueError(f"neighbor_histories shape {self.neighbor_histories.shape}")
        if self.neighbor_mask.shape != (grid.n_cells, T) or self.neighbor_mask.dtype != bool:
            raise ValueError("neighbor_mask must be a (n_cells, T) bool array")
        if self.future.ndim != 2 or self.future.shape[1] != 2:
            raise ValueError(f"future shape {self.future.shape}")
        for name in ("ego_history", "neighbor_histories", "future"):
            arr = getattr(self, name)
            if arr.dtype != np.float32:
                raise ValueError(f"{name} must be float32")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite values")
        if np.any(self.neighbor_histories[~self.neighbor_mask] != 0):
            raise ValueError("masked-out cells must carry zero features")
        if not np.allclose(self.ego_history[-1, :2], 0.0):
            raise ValueError("ego history must end at the anchor origin")
        if not isinstance(self.label, ManeuverLabel):
            raise ValueError("label must be a ManeuverLabel")

    def equals(self, other: "TrajectorySample") -> bool:
        return (
            self.label == other.label
            and self.ego_id == other.ego_id
            and self.anchor_frame == other.anchor_frame
            and np.array_equal(self.ego_history, other.ego_history)
            and np.array_equal(self.neighbor_histories, other.neighbor_histories)
            and np.array_equal(self.neighbor_mask, other.neighbor_mask)
            and np.array_equal(self.future, other.future)
        )


@dataclass
class ManeuverDistribution:
    p_lateral: np.ndarray
    p_longitudinal: np.ndarray

    def validate(self, tol: float = 1e-6) -> None:
        for p in (self.p_lateral, self.p_longitudinal):
            if p.shape != (3,) or np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1) > tol:
                raise ValueError(f"not a probability 3-vector: {p}")

    def joint(self) -> np.ndarray:
        """The 9 joint probabilities in lateral-major mode order."""
        return np.outer(self.p_lateral, self.p_longitudinal).reshape(-1)


@dataclass
class GaussianTrajectory:
    """Per-step diagonal Gaussian over future positions, arrays of length F."""

    mu_x: np.ndarray
    mu_y: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray

    @classmethod
    def from_array(cls, params: np.ndarray) -> "GaussianTrajectory":
        params = np.asarray(params)
        return cls(params[:, 0], params[:, 1], params[:, 2], params[:, 3])

    def means(self) -> np.ndarray:
        return np.stack([self.mu_x, self.mu_y], axis=-1)

    def __len__(self):
        return len(self.mu_x)

    def validate(self) -> None:
        if np.any(self.sigma_x <= 0) or np.any(self.sigma_y <= 0):
            raise ValueError("standard deviations must be positive")


@dataclass
class PredictionOutput:
    modes: List[GaussianTrajectory]
    maneuvers: ManeuverDistribution

    def __post_init__(self):
        if len(self.modes) != N_MODES:
            raise ValueError(f"expected {N_MODES} modes, got {len(self.modes)}")

    def mode(self, lateral, longitudinal) -> GaussianTrajectory:
        return self.modes[mode_index(lateral, longitudinal)]


@dataclass
class DatasetSplit:
    train: List[TrajectorySample] = field(default_factory=list)
    validation: List[TrajectorySample] = field(default_factory=list)
    test: List[TrajectorySample] = field(default_factory=list)

    def parts(self) -> Iterator[tuple]:
        yield "train", self.train
        yield "validation", self.validation
        yield "test", self.test

    def vehicle_ids(self, part: str) -> set:
        return {s.ego_id for s in getattr(self, part)}

    def __len__(self):
        return len(self.train) + len(self.validation) + len(self.test)

    def equals(self, other: "DatasetSplit") -> bool:
        for (_, a), (_, b) in zip(self.parts(), other.parts()):
            if len(a) != len(b) or not all(x.equals(y) for x, y in zip(a, b)):
                return False
        return True
