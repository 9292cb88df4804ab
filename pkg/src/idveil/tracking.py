"""Bounding-box tracking with a constant-velocity Kalman filter.

Each track binds a latent code at birth and keeps it for life, so a person
keeps the same synthetic identity across the frames of a video. The state is
8-dimensional: box center, size and their velocities.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .detection import FusedDetection
from .geometry import Box, box_iou

STATE_DIM = 8
MEAS_DIM = 4

DEFAULT_IOU_GATE = 0.3
DEFAULT_MAX_MISSES = 5
DEFAULT_PROCESS_NOISE = 1.0
DEFAULT_OBSERVATION_NOISE = 1.0


class NumericalInstabilityError(RuntimeError):
    """Raised when the filter covariance stops being positive definite."""


def box_to_state(box: Box) -> np.ndarray:
    x0, y0, x1, y1 = box
    return np.array([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dtype=np.float64)


def state_to_box(state: np.ndarray) -> Box:
    cx, cy, w, h = state[:4]
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass(frozen=True)
class Track:
    track_id: int
    state: np.ndarray           # (cx, cy, w, h, vcx, vcy, vw, vh)
    covariance: np.ndarray      # 8x8
    latent: np.ndarray          # immutable over the track's life
    age: int = 1
    misses: int = 0

    @property
    def box(self) -> Box:
        return state_to_box(self.state)


def _transition(dt: float) -> np.ndarray:
    f = np.eye(STATE_DIM)
    f[:MEAS_DIM, MEAS_DIM:] = dt * np.eye(MEAS_DIM)
    return f


def predict(track: Track, dt: int = 1, process_noise: float = DEFAULT_PROCESS_NOISE) -> Track:
    """Advance the state under constant velocity; inflate the covariance."""
    if dt < 1:
        raise ValueError(f"dt must be >= 1, got {dt}")
    f = _transition(float(dt))
    state = f @ track.state
    q = process_noise * np.eye(STATE_DIM)
    cov = f @ track.covariance @ f.T + float(dt) * q
    return replace(track, state=state, covariance=cov)


def update(
    track: Track,
    detection: FusedDetection,
    observation_noise: float = DEFAULT_OBSERVATION_NOISE,
) -> Track:
    """Standard Kalman measurement update with the detection's box."""
    h = np.zeros((MEAS_DIM, STATE_DIM))
    h[:, :MEAS_DIM] = np.eye(MEAS_DIM)
    z = box_to_state(detection.bbox)
    r = observation_noise * np.eye(MEAS_DIM)
    s = h @ track.covariance @ h.T + r
    try:
        s_chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise NumericalInstabilityError("innovation covariance is not positive definite") from exc
    # K = P H^T S^-1 via the Cholesky factor
    k = np.linalg.solve(s_chol.T, np.linalg.solve(s_chol, h @ track.covariance)).T
    innovation = z - h @ track.state
    state = track.state + k @ innovation
    # Joseph form keeps the posterior covariance symmetric positive definite.
    i_kh = np.eye(STATE_DIM) - k @ h
    cov = i_kh @ track.covariance @ i_kh.T + k @ r @ k.T
    if state[2] <= 0 or state[3] <= 0:
        state = state.copy()
        state[2] = max(state[2], 1e-3)
        state[3] = max(state[3], 1e-3)
    return replace(track, state=state, covariance=cov, age=track.age + 1, misses=0)


@dataclass
class Association:
    matches: list[tuple[Track, FusedDetection]]
    unmatched_tracks: list[Track]
    unmatched_detections: list[FusedDetection]


def associate(
    tracks: list[Track],
    detections: list[FusedDetection],
    iou_gate: float = DEFAULT_IOU_GATE,
) -> Association:
    """Greedy IoU matching between predicted track boxes and detections."""
    if not 0.0 < iou_gate < 1.0:
        raise ValueError(f"iou_gate must be in (0, 1), got {iou_gate}")
    pairs = []
    for ti, track in enumerate(tracks):
        for di, det in enumerate(detections):
            try:
                overlap = box_iou(track.box, det.bbox)
            except Exception:
                continue
            if overlap > iou_gate:
                pairs.append((overlap, ti, di))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    used_t: set[int] = set()
    used_d: set[int] = set()
    matches = []
    for overlap, ti, di in pairs:
        if ti in used_t or di in used_d:
            continue
        used_t.add(ti)
        used_d.add(di)
        matches.append((tracks[ti], detections[di]))
    return Association(
        matches=matches,
        unmatched_tracks=[t for i, t in enumerate(tracks) if i not in used_t],
        unmatched_detections=[d for i, d in enumerate(detections) if i not in used_d],
    )


@dataclass
class TrackerConfig:
    iou_gate: float = DEFAULT_IOU_GATE
    max_misses: int = DEFAULT_MAX_MISSES
    process_noise: float = DEFAULT_PROCESS_NOISE
    observation_noise: float = DEFAULT_OBSERVATION_NOISE
    initial_position_var: float = 10.0
    initial_velocity_var: float = 100.0
    latent_dim: int = 512


class Tracker:
    """Single-stream streaming tracker; one instance per video.

    feed(frame_index, detections) returns (track_id, detection, latent)
    triples for the current frame. Latents are drawn once per track birth
    from a seeded stream, so identical inputs and seed reproduce identical
    track ids and latents. Track ids are never reused within a session.
    """

    def __init__(self, config: TrackerConfig | None = None, seed: int = 0):
        self.config = config or TrackerConfig()
        self._seed = seed
        self._next_id = 0
        self._births = 0
        self.tracks: list[Track] = []
        self._last_frame: int | None = None

    def _new_latent(self) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(self._seed, spawn_key=(self._births,)))
        self._births += 1
        return rng.standard_normal(self.config.latent_dim).astype(np.float32)

    def _birth(self, detection: FusedDetection) -> Track:
        cfg = self.config
        state = np.zeros(STATE_DIM)
        state[:MEAS_DIM] = box_to_state(detection.bbox)
        cov = np.diag(
            [cfg.initial_position_var] * MEAS_DIM + [cfg.initial_velocity_var] * MEAS_DIM
        ).astype(np.float64)
        track = Track(
            track_id=self._next_id,
            state=state,
            covariance=cov,
            latent=self._new_latent(),
        )
        self._next_id += 1
        return track

    def feed(
        self, frame_index: int, detections: list[FusedDetection]
    ) -> list[tuple[int, FusedDetection, np.ndarray]]:
        cfg = self.config
        if self._last_frame is None:
            dt = 1
        else:
            dt = max(1, frame_index - self._last_frame)
        self._last_frame = frame_index

        predicted = [predict(t, dt, cfg.process_noise) for t in self.tracks]
        assoc = associate(predicted, detections, cfg.iou_gate)

        next_tracks: list[Track] = []
        results: list[tuple[int, FusedDetection, np.ndarray]] = []
        for track, det in assoc.matches:
            updated = update(track, det, cfg.observation_noise)
            next_tracks.append(updated)
            results.append((updated.track_id, det, updated.latent))
        for track in assoc.unmatched_tracks:
            missed = replace(track, misses=track.misses + 1, age=track.age + 1)
            if missed.misses <= cfg.max_misses:
                next_tracks.append(missed)
        for det in assoc.unmatched_detections:
            born = self._birth(det)
            next_tracks.append(born)
            results.append((born.track_id, det, born.latent))

        next_tracks.sort(key=lambda t: t.track_id)
        results.sort(key=lambda r: r[0])
        self.tracks = next_tracks
        return results
