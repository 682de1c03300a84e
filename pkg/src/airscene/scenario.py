"""Synthetic terminal-area arrival traffic.

Generates arrival flows into a single runway from three entry fixes (west,
south and east).  South and east flows merge early onto an extended approach
centerline; the west fix sits close to the field, so its nominal route is
stretched away from the corridor before joining far out.  With some
probability a west-fix aircraft instead receives a shortcut partway along the
stretch and cuts straight to the merge point, jumping the arrival queue --
the disruptive event the explanation workflow is meant to surface.

Aircraft react to each other at the merge: whoever would arrive less than
``min_gap_s`` behind the aircraft cleared ahead slows down to restore the
gap, so a queue-jumper visibly bends the futures of the aircraft it cut in
front of.

Everything is driven by a single seed through labelled substreams, so a given
config reproduces the same tracks byte for byte, and changing only
``direct_to_prob`` changes nothing but the shortcut decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import MAX_ALT_KM, AircraftTrack
from .seeding import derive_seed

GLIDE_SLOPE_KM_PER_KM = 0.05  # ~2.9 degree continuous descent
MIN_SAFE_ALT_KM = 0.05


class ScenarioError(ValueError):
    """The requested scenario cannot be scheduled."""


@dataclass
class ScenarioConfig:
    """Knobs for the synthetic arrival generator.

    Distances are kilometers in the local East-North plane, speeds km/s,
    times seconds.  ``n_episodes`` independent traffic bursts are placed
    ``episode_spacing_s`` apart so windows never straddle two bursts.
    """

    seed: int = 0
    n_episodes: int = 4
    n_aircraft_range: tuple[int, int] = (4, 6)
    entry_fix_west: tuple[float, float] = (-45.0, 18.0)
    entry_fix_south: tuple[float, float] = (-20.0, -50.0)
    entry_fix_east: tuple[float, float] = (45.0, 30.0)
    runway_xy: tuple[float, float] = (0.0, 0.0)
    approach_heading_deg: float = 150.0
    final_length_km: float = 15.0
    speed_range_kps: tuple[float, float] = (0.062, 0.085)
    direct_to_prob: float = 0.3
    noise_std_km: float = 0.05
    # Entry window holds the worst case of every aircraft arriving on one
    # flow at minimum gaps: (max_count - 1) * min_gap fits inside it.
    min_gap_s: float = 90.0
    entry_window_s: float = 480.0
    episode_spacing_s: float = 3600.0
    sample_dt_s: float = 5.0
    cruise_alt_range_km: tuple[float, float] = (4.0, 6.0)
    # Merge-queue give-way: an aircraft losing its slot slows down
    # react_delay_s after the conflicting claim (instruction, readback and
    # deceleration take about a minute), never below min_speed_frac of its
    # entry speed.
    react_delay_s: float = 60.0
    min_speed_frac: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.direct_to_prob <= 1.0:
            raise ValueError(f"direct_to_prob must be in [0, 1], got {self.direct_to_prob}")
        lo, hi = self.speed_range_kps
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad speed range {self.speed_range_kps}")
        lo, hi = self.n_aircraft_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad aircraft count range {self.n_aircraft_range}")
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")
        if self.noise_std_km < 0:
            raise ValueError("noise_std_km must be >= 0")
        if self.min_gap_s <= 0 or self.entry_window_s <= 0 or self.sample_dt_s <= 0:
            raise ValueError("time parameters must be positive")
        if self.react_delay_s < 0:
            raise ValueError("react_delay_s must be >= 0")
        if not 0.0 < self.min_speed_frac <= 1.0:
            raise ValueError(f"min_speed_frac must be in (0, 1], got {self.min_speed_frac}")


@dataclass
class AircraftEvent:
    """Per-aircraft bookkeeping the generator exposes for analysis."""

    track_id: str
    episode: int
    fix: str                    # "west" | "south" | "east"
    entry_t: float
    speed_kps: float
    direct_to: bool
    cut_t: float | None         # absolute seconds when the shortcut begins
    nominal_len_km: float       # length of the route without any shortcut
    flown_len_km: float
    merge_eta: float            # absolute seconds the aircraft reaches the merge point
    slow_t: float | None = None          # when a give-way speed reduction starts
    slow_speed_kps: float | None = None  # reduced speed flown after slow_t
    gave_way_to: str | None = None       # track that claimed the slot ahead


@dataclass
class ScenarioResult:
    tracks: list[AircraftTrack] = field(default_factory=list)
    events: list[AircraftEvent] = field(default_factory=list)

    def event_for(self, track_id: str) -> AircraftEvent:
        for ev in self.events:
            if ev.track_id == track_id:
                return ev
        raise KeyError(track_id)


def _unit_heading(heading_deg: float) -> np.ndarray:
    rad = math.radians(heading_deg)
    return np.array([math.sin(rad), math.cos(rad)])


def _polyline_length(points: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))


def _point_along(points: np.ndarray, s: float) -> np.ndarray:
    """Position at arc length ``s`` from the start of a polyline."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = min(max(s, 0.0), cum[-1])
    i = int(np.searchsorted(cum, s, side="right") - 1)
    i = min(i, len(seg) - 1)
    frac = 0.0 if seg[i] == 0 else (s - cum[i]) / seg[i]
    return points[i] + frac * (points[i + 1] - points[i])


def _routes(cfg: ScenarioConfig) -> dict[str, np.ndarray]:
    """Nominal waypoint polylines per entry fix, ending at the runway."""
    runway = np.asarray(cfg.runway_xy)
    u = _unit_heading(cfg.approach_heading_deg)

    def centerline(d: float) -> np.ndarray:
        return runway - d * u

    merge = centerline(cfg.final_length_km)
    west = np.asarray(cfg.entry_fix_west)
    south = np.asarray(cfg.entry_fix_south)
    east = np.asarray(cfg.entry_fix_east)
    # The west stretch climbs away from the corridor before joining far out.
    stretch_top = west + np.array([-15.0, 30.0])
    return {
        "east": np.stack([east, centerline(32.0), merge, runway]),
        "south": np.stack([south, centerline(40.0), merge, runway]),
        "west": np.stack([west, stretch_top, centerline(56.0), merge, runway]),
    }


def _schedule_entries(
    jitters: list[float], speeds: list[float], route_len: float, cfg: ScenarioConfig
) -> list[float]:
    """Entry times for one flow, keeping entry AND arrival gaps >= min_gap.

    With constant speeds the time gap at any arc position interpolates
    linearly between the entry gap and the arrival gap, so enforcing both
    endpoints keeps same-flow spacing above the minimum everywhere.
    """
    if (len(jitters) - 1) * cfg.min_gap_s > cfg.entry_window_s:
        raise ScenarioError(
            f"infeasible spacing: {len(jitters)} aircraft on one flow cannot keep "
            f"{cfg.min_gap_s}s gaps inside a {cfg.entry_window_s}s entry window"
        )
    order = sorted(range(len(jitters)), key=lambda i: jitters[i])
    entries = [0.0] * len(jitters)
    prev_entry: float | None = None
    prev_arrival: float | None = None
    for idx in order:
        e = jitters[idx]
        if prev_entry is not None:
            e = max(e, prev_entry + cfg.min_gap_s)
            e = max(e, prev_arrival + cfg.min_gap_s - route_len / speeds[idx])
        entries[idx] = e
        prev_entry = e
        prev_arrival = e + route_len / speeds[idx]
    return entries


def generate_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    """Generate arrival tracks plus per-aircraft event metadata."""
    routes = _routes(cfg)
    merge = routes["west"][-2]
    master = np.random.default_rng(derive_seed(cfg.seed, "scenario/master"))
    result = ScenarioResult()
    counter = 0

    for ep in range(cfg.n_episodes):
        t_base = ep * cfg.episode_spacing_s
        lo, hi = cfg.n_aircraft_range
        n_ac = int(master.integers(lo, hi + 1))
        fixes = [("west", "south", "east")[int(master.integers(0, 3))] for _ in range(n_ac)]

        # Per-aircraft independent streams: shortcut decisions and noise in
        # one aircraft never shift the draws of another.
        draws = []
        for i in range(n_ac):
            rng = np.random.default_rng(derive_seed(cfg.seed, f"ep{ep}/ac{i}"))
            draws.append(
                {
                    "rng": rng,
                    "jitter": float(rng.uniform(0.0, cfg.entry_window_s)),
                    "speed": float(rng.uniform(*cfg.speed_range_kps)),
                    "cruise": float(rng.uniform(*cfg.cruise_alt_range_km)),
                    "direct_u": float(rng.uniform(0.0, 1.0)),
                    "cut_frac": float(rng.uniform(0.2, 0.7)),
                }
            )

        entries = [0.0] * n_ac
        for fix in ("west", "south", "east"):
            members = [i for i in range(n_ac) if fixes[i] == fix]
            if not members:
                continue
            flow_entries = _schedule_entries(
                [draws[i]["jitter"] for i in members],
                [draws[i]["speed"] for i in members],
                _polyline_length(routes[fix]),
                cfg,
            )
            for i, e in zip(members, flow_entries):
                entries[i] = t_base + e

        plans = []
        for i in range(n_ac):
            fix = fixes[i]
            route = routes[fix]
            nominal_len = _polyline_length(route)
            d = draws[i]
            direct = fix == "west" and d["direct_u"] < cfg.direct_to_prob
            cut_t = None
            if direct:
                # Cut somewhere along the stretch (before the centerline join)
                # and fly straight to the merge point.
                pre_len = _polyline_length(route[:-2])  # fix -> ... -> join
                s_cut = d["cut_frac"] * pre_len
                route = _cut_route(routes[fix], s_cut, merge)
                cut_t = entries[i] + s_cut / d["speed"]
            flown_len = _polyline_length(route)
            # Arc length from route start to the merge point (second-to-last vertex).
            merge_s = flown_len - float(np.linalg.norm(route[-1] - route[-2]))
            plans.append(
                {
                    "track_id": f"AC{counter:03d}",
                    "fix": fix,
                    "route": route,
                    "nominal_len": nominal_len,
                    "flown_len": flown_len,
                    "merge_s": merge_s,
                    "entry": entries[i],
                    "speed": d["speed"],
                    "cruise": d["cruise"],
                    "rng": d["rng"],
                    "direct": direct,
                    "cut_t": cut_t,
                    "claim": cut_t if direct else entries[i],
                    "eta": entries[i] + merge_s / d["speed"],
                    "slow_t": None,
                    "slow_speed": None,
                    "leader": None,
                }
            )
            counter += 1

        _resolve_merge_queue(plans, cfg)

        for p in plans:
            track = _fly_route(
                p["track_id"], p["route"], p["entry"], p["speed"], p["cruise"],
                p["rng"], cfg, slow_t=p["slow_t"], slow_speed=p["slow_speed"],
            )
            result.tracks.append(track)
            result.events.append(
                AircraftEvent(
                    track_id=p["track_id"],
                    episode=ep,
                    fix=p["fix"],
                    entry_t=p["entry"],
                    speed_kps=p["speed"],
                    direct_to=p["direct"],
                    cut_t=p["cut_t"],
                    nominal_len_km=p["nominal_len"],
                    flown_len_km=p["flown_len"],
                    merge_eta=p["eta"],
                    slow_t=p["slow_t"],
                    slow_speed_kps=p["slow_speed"],
                    gave_way_to=p["leader"],
                )
            )
    return result


def _resolve_merge_queue(plans: list[dict], cfg: ScenarioConfig) -> None:
    """Slow down aircraft that would reach the merge too close behind another.

    Aircraft are cleared onto the final approach in order of unimpeded merge
    ETA.  A follower arriving less than ``min_gap_s`` behind the slot ahead
    reduces speed, starting ``react_delay_s`` after the conflicting claim
    became known (the shortcut moment for a direct-to aircraft, entry
    otherwise; cascades reuse the original trigger, as one controller
    instruction).  Like real speed instructions, reductions come in 10%
    notches of the planned speed: the follower takes the mildest notch that
    puts its merge time at least a full gap behind, overshooting the gap
    rather than flying an exact fractional speed.  Notches stop at
    ``min_speed_frac``, so a deep cascade can retain a residual conflict;
    recorded ETAs are always the flown ones.  Mutates ``slow_t`` /
    ``slow_speed`` / ``leader`` / ``eta`` in place and draws no randomness.
    """
    notches = []
    f = 0.9
    while f >= cfg.min_speed_frac - 1e-9:
        notches.append(f)
        f -= 0.1
    order = sorted(plans, key=lambda p: p["eta"])
    cleared: float | None = None
    leader: dict | None = None
    for p in order:
        p["known"] = p["claim"]
        if cleared is not None and p["eta"] < cleared + cfg.min_gap_s and notches:
            target = cleared + cfg.min_gap_s
            known = max(p["claim"], leader["known"])
            t_react = max(known + cfg.react_delay_s, p["entry"])
            merge_t = p["entry"] + p["merge_s"] / p["speed"]
            if t_react < merge_t:
                remaining = p["merge_s"] - p["speed"] * (t_react - p["entry"])
                v_exact = remaining / (target - t_react)
                v2 = None
                for f in notches:
                    if f * p["speed"] <= v_exact:
                        v2 = f * p["speed"]
                        break
                if v2 is None:
                    v2 = notches[-1] * p["speed"]  # floor notch, gap stays short
                if v2 < p["speed"]:
                    p["slow_t"] = t_react
                    p["slow_speed"] = v2
                    p["leader"] = leader["track_id"]
                    p["eta"] = t_react + remaining / v2
                    p["known"] = known
        cleared = p["eta"]
        leader = p


def _cut_route(route: np.ndarray, s_cut: float, merge: np.ndarray) -> np.ndarray:
    """Truncate a route at arc length ``s_cut`` and go direct to the merge."""
    seg = np.linalg.norm(np.diff(route, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    cut_pos = _point_along(route, s_cut)
    kept = [route[0]]
    for j in range(1, len(route)):
        if cum[j] < s_cut:
            kept.append(route[j])
    kept.append(cut_pos)
    kept.append(merge)
    kept.append(route[-1])
    return np.stack(kept)


def _fly_route(
    track_id: str,
    route: np.ndarray,
    entry_t: float,
    speed: float,
    cruise_alt: float,
    rng: np.random.Generator,
    cfg: ScenarioConfig,
    slow_t: float | None = None,
    slow_speed: float | None = None,
) -> AircraftTrack:
    """Sample a flight along a polyline with measurement noise.

    Ground speed is ``speed`` until ``slow_t`` and ``slow_speed`` after it
    (constant throughout when no slowdown is set).  Noise is drawn last so
    the trajectory plan never perturbs another aircraft's stream.
    """
    total = _polyline_length(route)
    if slow_t is None:
        flight_time = total / speed
    else:
        s_break = speed * (slow_t - entry_t)
        flight_time = (slow_t - entry_t) + (total - s_break) / slow_speed
    n_samples = int(math.floor(flight_time / cfg.sample_dt_s)) + 1
    times = entry_t + cfg.sample_dt_s * np.arange(n_samples)
    xyz = np.empty((n_samples, 3))
    for k in range(n_samples):
        t = float(times[k])
        if slow_t is None or t <= slow_t:
            s = speed * (t - entry_t)
        else:
            s = speed * (slow_t - entry_t) + slow_speed * (t - slow_t)
        pos = _point_along(route, s)
        remaining = total - s
        alt = min(cruise_alt, MIN_SAFE_ALT_KM + GLIDE_SLOPE_KM_PER_KM * remaining)
        xyz[k, :2] = pos
        xyz[k, 2] = alt
    if cfg.noise_std_km > 0:
        xyz[:, :2] += rng.normal(0.0, cfg.noise_std_km, size=(n_samples, 2))
        xyz[:, 2] += rng.normal(0.0, 0.25 * cfg.noise_std_km, size=n_samples)
    np.clip(xyz[:, 2], 0.0, MAX_ALT_KM, out=xyz[:, 2])
    return AircraftTrack(track_id, times, xyz)


def synth_terminal_scenario(cfg: ScenarioConfig) -> list[AircraftTrack]:
    """Generator surface used by the data pipeline: tracks only."""
    return generate_scenario(cfg).tracks
