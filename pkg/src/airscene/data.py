"""Track ingestion, resampling, and scene windowing.

Coordinates live in a local East-North plane in kilometers with altitude in
kilometers, which keeps the geometry linear for the model.  CSV files may
instead carry lat/lon/altitude-ft; those are converted on ingest with an
equirectangular projection about a caller-supplied reference point.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
FT_TO_KM = 0.0003048

# Local-plane sanity bounds: half a continent across, airliner ceiling above.
MAX_PLANE_KM = 500.0
MAX_ALT_KM = 20.0

_TIME_EPS = 1e-6  # seconds of slack when testing span coverage


class TrackFormatError(ValueError):
    """A track file does not follow the documented CSV layout."""


@dataclass(frozen=True)
class TrackPoint:
    """One timestamped 3-D position sample (seconds, km East, km North, km up)."""

    t: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        vals = (self.t, self.x, self.y, self.z)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite track point {vals}")
        if abs(self.x) > MAX_PLANE_KM or abs(self.y) > MAX_PLANE_KM:
            raise ValueError(f"position ({self.x}, {self.y}) outside local plane bounds")
        if not 0.0 <= self.z <= MAX_ALT_KM:
            raise ValueError(f"altitude {self.z} km outside [0, {MAX_ALT_KM}]")


class AircraftTrack:
    """One aircraft's position series, strictly increasing in time.

    Backed by numpy arrays (``times`` shape (n,), ``xyz`` shape (n, 3)) so
    resampling and windowing stay vectorized; :meth:`points` exposes the
    record-level view.
    """

    __slots__ = ("track_id", "times", "xyz")

    def __init__(self, track_id: str, times, xyz):
        times = np.asarray(times, dtype=np.float64)
        xyz = np.asarray(xyz, dtype=np.float64)
        if times.ndim != 1 or xyz.shape != (times.size, 3):
            raise ValueError(
                f"track arrays disagree: times {times.shape}, xyz {xyz.shape}"
            )
        if times.size < 2:
            raise ValueError(f"track {track_id!r} needs at least 2 points")
        if not np.all(np.diff(times) > 0):
            raise ValueError(f"track {track_id!r} timestamps must strictly increase")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(xyz))):
            raise ValueError(f"track {track_id!r} contains non-finite samples")
        if np.any(np.abs(xyz[:, :2]) > MAX_PLANE_KM):
            raise ValueError(f"track {track_id!r} leaves the local plane bounds")
        if np.any(xyz[:, 2] < 0.0) or np.any(xyz[:, 2] > MAX_ALT_KM):
            raise ValueError(f"track {track_id!r} altitude outside [0, {MAX_ALT_KM}] km")
        self.track_id = track_id
        self.times = times
        self.xyz = xyz

    @classmethod
    def from_points(cls, track_id: str, points: Sequence[TrackPoint]) -> "AircraftTrack":
        pts = sorted(points, key=lambda p: p.t)
        return cls(
            track_id,
            [p.t for p in pts],
            [(p.x, p.y, p.z) for p in pts],
        )

    @property
    def points(self) -> list[TrackPoint]:
        return [
            TrackPoint(float(t), float(p[0]), float(p[1]), float(p[2]))
            for t, p in zip(self.times, self.xyz)
        ]

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def __len__(self) -> int:
        return int(self.times.size)

    def covers(self, t_from: float, t_to: float) -> bool:
        return (
            self.t_start <= t_from + _TIME_EPS and self.t_end >= t_to - _TIME_EPS
        )

    def sample_at(self, times) -> np.ndarray:
        """Piecewise-linear positions at ``times``; no extrapolation allowed."""
        times = np.asarray(times, dtype=np.float64)
        if times.size and not self.covers(float(times.min()), float(times.max())):
            raise ValueError(
                f"track {self.track_id!r} spans [{self.t_start}, {self.t_end}], "
                f"cannot sample [{times.min()}, {times.max()}]"
            )
        out = np.empty((times.size, 3))
        for axis in range(3):
            out[:, axis] = np.interp(times, self.times, self.xyz[:, axis])
        return out

    def __repr__(self) -> str:
        return (
            f"AircraftTrack({self.track_id!r}, {len(self)} pts, "
            f"t=[{self.t_start:.1f}, {self.t_end:.1f}])"
        )


@dataclass
class SceneWindow:
    """A model-ready scene: past/future tensors for N aircraft slots.

    ``valid[i]`` is False for padding slots, whose past and future rows are
    all zeros.  ``t0`` is the wall-clock "now" (last past sample), ``dt`` the
    step in seconds.
    """

    ids: list[str]
    past: np.ndarray        # (N, T, 3)
    future: np.ndarray      # (N, H, 3)
    valid: np.ndarray       # (N,) bool
    t0: float
    dt: float
    normalized: bool = False

    @property
    def n_slots(self) -> int:
        return len(self.ids)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @property
    def T(self) -> int:
        return self.past.shape[1]

    @property
    def H(self) -> int:
        return self.future.shape[1]

    def index_of(self, query_id: str) -> int | None:
        for i, (sid, ok) in enumerate(zip(self.ids, self.valid)):
            if ok and sid == query_id:
                return i
        return None

    def current_positions(self) -> np.ndarray:
        """Last past sample of every slot, shape (N, 3)."""
        return self.past[:, -1, :]


class SceneInvariantError(ValueError):
    """A scene violates its shape/mask/padding contract."""


def check_scene(scene: SceneWindow, T: int | None = None, H: int | None = None) -> None:
    """Validate a scene's structural invariants, raising on the first failure."""
    n = scene.n_slots
    if scene.past.ndim != 3 or scene.past.shape[0] != n or scene.past.shape[2] != 3:
        raise SceneInvariantError(f"past shape {scene.past.shape} != ({n}, T, 3)")
    if scene.future.ndim != 3 or scene.future.shape[0] != n or scene.future.shape[2] != 3:
        raise SceneInvariantError(f"future shape {scene.future.shape} != ({n}, H, 3)")
    if scene.valid.shape != (n,) or scene.valid.dtype != np.bool_:
        raise SceneInvariantError(f"valid must be ({n},) bool, got {scene.valid.shape}")
    if T is not None and scene.T != T:
        raise SceneInvariantError(f"scene has T={scene.T}, expected {T}")
    if H is not None and scene.H != H:
        raise SceneInvariantError(f"scene has H={scene.H}, expected {H}")
    if scene.dt <= 0:
        raise SceneInvariantError(f"dt must be positive, got {scene.dt}")
    if not (np.all(np.isfinite(scene.past)) and np.all(np.isfinite(scene.future))):
        raise SceneInvariantError("scene tensors contain non-finite values")
    pad = ~scene.valid
    if np.any(scene.past[pad] != 0.0) or np.any(scene.future[pad] != 0.0):
        raise SceneInvariantError("padding slots must be all zeros")


def permute_scene(scene: SceneWindow, perm: Sequence[int]) -> SceneWindow:
    """Reorder aircraft slots: slot ``i`` of the result is old slot ``perm[i]``."""
    perm = list(perm)
    if sorted(perm) != list(range(scene.n_slots)):
        raise ValueError(f"not a permutation of {scene.n_slots} slots: {perm}")
    return replace(
        scene,
        ids=[scene.ids[p] for p in perm],
        past=scene.past[perm].copy(),
        future=scene.future[perm].copy(),
        valid=scene.valid[perm].copy(),
    )


def pad_scene(scene: SceneWindow, n_slots: int) -> SceneWindow:
    """Extend a scene with zero-filled padding slots up to ``n_slots``."""
    n = scene.n_slots
    if n_slots < n:
        raise ValueError(f"cannot pad {n} slots down to {n_slots}")
    if n_slots == n:
        return scene
    extra = n_slots - n
    return replace(
        scene,
        ids=scene.ids + [f"__pad{i}" for i in range(extra)],
        past=np.concatenate([scene.past, np.zeros((extra, scene.T, 3))]),
        future=np.concatenate([scene.future, np.zeros((extra, scene.H, 3))]),
        valid=np.concatenate([scene.valid, np.zeros(extra, dtype=bool)]),
    )


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

_XY_COLUMNS = ("id", "t", "x_km", "y_km", "z_km")
_LL_COLUMNS = ("id", "t", "lat_deg", "lon_deg", "alt_ft")


class IngestResult(NamedTuple):
    tracks: list[AircraftTrack]
    rejected_rows: int
    dropped_tracks: int


def ingest_tracks(
    path,
    ref_lat: float | None = None,
    ref_lon: float | None = None,
) -> IngestResult:
    """Read a track CSV into per-aircraft time-sorted tracks.

    Accepts either ``id,t,x_km,y_km,z_km`` or ``id,t,lat_deg,lon_deg,alt_ft``
    (the latter requires a reference point for the equirectangular local
    plane).  Rows with unparsable or non-finite fields are rejected and
    counted; ids left with fewer than 2 usable points are dropped.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise TrackFormatError(f"{path}: empty file, expected a CSV header")
        header_set = set(header)
        if header_set >= set(_XY_COLUMNS):
            latlon = False
        elif header_set >= set(_LL_COLUMNS):
            if ref_lat is None or ref_lon is None:
                raise TrackFormatError(
                    f"{path}: lat/lon columns need a reference point (ref_lat/ref_lon)"
                )
            latlon = True
        else:
            raise TrackFormatError(
                f"{path}: header {header} is missing required columns; expected "
                f"{_XY_COLUMNS} or {_LL_COLUMNS}"
            )

        by_id: dict[str, list[tuple[float, float, float, float]]] = {}
        rejected = 0
        n_rows = 0
        for row in reader:
            n_rows += 1
            try:
                if latlon:
                    t = float(row["t"])
                    lat, lon = float(row["lat_deg"]), float(row["lon_deg"])
                    x = (
                        EARTH_RADIUS_KM
                        * math.cos(math.radians(ref_lat))
                        * math.radians(lon - ref_lon)
                    )
                    y = EARTH_RADIUS_KM * math.radians(lat - ref_lat)
                    z = float(row["alt_ft"]) * FT_TO_KM
                else:
                    t = float(row["t"])
                    x, y, z = float(row["x_km"]), float(row["y_km"]), float(row["z_km"])
            except (TypeError, ValueError):
                rejected += 1
                continue
            if not all(math.isfinite(v) for v in (t, x, y, z)):
                rejected += 1
                continue
            by_id.setdefault(row["id"], []).append((t, x, y, z))

    if n_rows == 0:
        raise TrackFormatError(f"{path}: no data rows")

    tracks: list[AircraftTrack] = []
    dropped = 0
    for track_id in sorted(by_id):
        rows = sorted(by_id[track_id], key=lambda r: r[0])
        # Collapse exact-duplicate timestamps (first sample wins).
        deduped = [rows[0]]
        for r in rows[1:]:
            if r[0] == deduped[-1][0]:
                rejected += 1
            else:
                deduped.append(r)
        if len(deduped) < 2:
            dropped += 1
            log.warning("track %r has fewer than 2 usable points, dropped", track_id)
            continue
        tracks.append(
            AircraftTrack(
                track_id,
                [r[0] for r in deduped],
                [(r[1], r[2], r[3]) for r in deduped],
            )
        )
    if rejected:
        log.warning("ingest %s: rejected %d rows", path, rejected)
    return IngestResult(tracks, rejected, dropped)


def write_tracks_csv(tracks: Iterable[AircraftTrack], path) -> None:
    """Write tracks in the ``id,t,x_km,y_km,z_km`` layout."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_XY_COLUMNS)
        for track in tracks:
            for t, p in zip(track.times, track.xyz):
                writer.writerow(
                    [track.track_id, repr(float(t)), repr(float(p[0])),
                     repr(float(p[1])), repr(float(p[2]))]
                )


# ---------------------------------------------------------------------------
# resampling and windowing
# ---------------------------------------------------------------------------

def resample(track: AircraftTrack, dt: float) -> AircraftTrack:
    """Resample onto a uniform grid anchored at the first sample.

    Linear interpolation between original samples, never extrapolating; the
    original end point is kept exactly when the span divides by ``dt``.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if track.duration < dt:
        raise ValueError(
            f"track {track.track_id!r} duration {track.duration:.3f}s < dt {dt}s"
        )
    n_steps = int(math.floor(track.duration / dt + _TIME_EPS))
    times = track.t_start + dt * np.arange(n_steps + 1)
    return AircraftTrack(track.track_id, times, track.sample_at(times))


def is_uniform(track: AircraftTrack, dt: float) -> bool:
    return bool(np.allclose(np.diff(track.times), dt, rtol=0, atol=_TIME_EPS))


def build_scenes(
    tracks: Sequence[AircraftTrack],
    dt: float,
    T: int,
    H: int,
    stride: int,
    n_max: int,
    runway_xy: tuple[float, float] = (0.0, 0.0),
) -> list[SceneWindow]:
    """Slide a (T past + H future) window over the track set.

    A window at ``t0`` includes every aircraft whose real time span covers
    ``[t0-(T-1)dt, t0+H*dt]``; windows with fewer than 2 such aircraft are
    dropped (a single aircraft has nothing to interact with).  When more than
    ``n_max`` qualify, the ``n_max`` closest to the runway point are kept.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1 step")
    for track in tracks:
        if not is_uniform(track, dt):
            raise ValueError(
                f"track {track.track_id!r} is not resampled at dt={dt}; run resample() first"
            )
    if not tracks:
        return []

    past_span = (T - 1) * dt
    t_first = min(tr.t_start for tr in tracks) + past_span
    t_last = max(tr.t_end for tr in tracks) - H * dt
    scenes: list[SceneWindow] = []
    truncated = 0
    t0 = t_first
    while t0 <= t_last + _TIME_EPS:
        covered = [tr for tr in tracks if tr.covers(t0 - past_span, t0 + H * dt)]
        if len(covered) >= 2:
            if len(covered) > n_max:
                truncated += 1
                runway = np.asarray(runway_xy)
                def dist(tr: AircraftTrack) -> float:
                    pos = tr.sample_at([t0])[0]
                    return float(np.hypot(pos[0] - runway[0], pos[1] - runway[1]))
                covered = sorted(covered, key=lambda tr: (dist(tr), tr.track_id))[:n_max]
            covered = sorted(covered, key=lambda tr: tr.track_id)
            past_times = t0 - dt * np.arange(T - 1, -1, -1)
            future_times = t0 + dt * np.arange(1, H + 1)
            past = np.stack([tr.sample_at(past_times) for tr in covered])
            future = np.stack([tr.sample_at(future_times) for tr in covered])
            scenes.append(
                SceneWindow(
                    ids=[tr.track_id for tr in covered],
                    past=past,
                    future=future,
                    valid=np.ones(len(covered), dtype=bool),
                    t0=float(t0),
                    dt=float(dt),
                )
            )
        t0 += stride * dt
    if truncated:
        log.warning(
            "build_scenes: %d windows exceeded n_max=%d and were truncated "
            "to the aircraft closest to the runway", truncated, n_max,
        )
    return scenes


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class DatasetStats:
    """Per-axis position mean/std, estimated on training scenes only."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    std: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(3)
        if np.any(self.std <= 0):
            raise ValueError(f"per-axis std must be positive, got {self.std}")

    @classmethod
    def from_scenes(cls, scenes: Sequence[SceneWindow]) -> "DatasetStats":
        if not scenes:
            raise ValueError("cannot compute stats from an empty scene list")
        chunks = []
        for s in scenes:
            if s.normalized:
                raise ValueError("stats must be computed on raw (denormalized) scenes")
            chunks.append(s.past[s.valid].reshape(-1, 3))
            chunks.append(s.future[s.valid].reshape(-1, 3))
        allpos = np.concatenate(chunks)
        std = allpos.std(axis=0)
        if np.any(std <= 0):
            raise ValueError(
                f"degenerate dataset: zero variance on axes {np.flatnonzero(std <= 0).tolist()}"
            )
        return cls(mean=allpos.mean(axis=0), std=std)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        return cls(mean=d["mean"], std=d["std"])


def _transform(scene: SceneWindow, stats: DatasetStats, forward: bool) -> SceneWindow:
    if forward:
        past = (scene.past - stats.mean) / stats.std
        future = (scene.future - stats.mean) / stats.std
    else:
        past = scene.past * stats.std + stats.mean
        future = scene.future * stats.std + stats.mean
    pad = ~scene.valid
    past[pad] = 0.0
    future[pad] = 0.0
    return replace(scene, past=past, future=future, normalized=forward)


def normalize(scene: SceneWindow, stats: DatasetStats) -> SceneWindow:
    """Standardize positions per axis; padding rows stay exactly zero."""
    if scene.normalized:
        raise ValueError("scene is already normalized")
    return _transform(scene, stats, forward=True)


def denormalize(scene: SceneWindow, stats: DatasetStats) -> SceneWindow:
    if not scene.normalized:
        raise ValueError("scene is not normalized")
    return _transform(scene, stats, forward=False)


def denormalize_positions(values: np.ndarray, stats: DatasetStats) -> np.ndarray:
    """Map normalized (..., 3) position tensors back to kilometers."""
    return values * stats.std + stats.mean


# ---------------------------------------------------------------------------
# scene / stats files
# ---------------------------------------------------------------------------

def save_scenes(scenes: Sequence[SceneWindow], path) -> None:
    """Write scenes as JSON (valid slots only; padding is a runtime concern)."""
    payload = []
    for s in scenes:
        keep = s.valid
        payload.append(
            {
                "ids": [i for i, ok in zip(s.ids, keep) if ok],
                "t0": s.t0,
                "dt": s.dt,
                "past": s.past[keep].tolist(),
                "future": s.future[keep].tolist(),
            }
        )
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_scenes(path) -> list[SceneWindow]:
    raw = json.loads(Path(path).read_text())
    scenes = []
    for entry in raw:
        n = len(entry["ids"])
        scene = SceneWindow(
            ids=list(entry["ids"]),
            past=np.asarray(entry["past"], dtype=np.float64),
            future=np.asarray(entry["future"], dtype=np.float64),
            valid=np.ones(n, dtype=bool),
            t0=float(entry["t0"]),
            dt=float(entry["dt"]),
        )
        check_scene(scene)
        scenes.append(scene)
    return scenes


def save_stats(stats: DatasetStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), sort_keys=True))


def load_stats(path) -> DatasetStats:
    return DatasetStats.from_dict(json.loads(Path(path).read_text()))
