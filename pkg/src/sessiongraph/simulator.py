"""Deterministic waypoint worlds, noisy multi-session keyframe streams and an
oracle matcher standing in for scan registration.

All randomness flows from ``World.seed``. The matcher draws from a generator
seeded by the ids of the two keyframes it compares, so its answers do not
depend on query order (threaded loop closure stays reproducible).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .geometry import Pose
from .graph import Vertex
from .pipeline import KeyframeEvent, Measurement, SessionStream


class InvalidRoute(ValueError):
    pass


class UnknownScenario(KeyError):
    pass


@dataclass
class World:
    waypoints: dict[str, Pose]
    links: set[frozenset[str]]
    visibility_radius: float = 8.0
    seed: int = 0

    def __post_init__(self) -> None:
        for link in self.links:
            missing = set(link) - self.waypoints.keys()
            if missing or len(link) != 2:
                raise ValueError(f"bad link {sorted(link)}")
        if self.waypoints and not self._connected():
            raise ValueError("waypoint graph is not connected")

    def _connected(self) -> bool:
        names = sorted(self.waypoints)
        seen, stack = {names[0]}, [names[0]]
        while stack:
            a = stack.pop()
            for link in self.links:
                if a in link:
                    (b,) = link - {a}
                    if b not in seen:
                        seen.add(b)
                        stack.append(b)
        return len(seen) == len(names)

    def check_route(self, route: list[str]) -> None:
        if len(route) < 2:
            raise InvalidRoute("a route needs at least two waypoints")
        for name in route:
            if name not in self.waypoints:
                raise InvalidRoute(f"unknown waypoint {name!r}")
        for a, b in zip(route, route[1:]):
            if frozenset((a, b)) not in self.links:
                raise InvalidRoute(f"no link between {a!r} and {b!r}")


@dataclass(frozen=True)
class NoiseModel:
    odom_sigma: tuple[float, ...] = (0.02, 0.02, 0.02, 0.002, 0.002, 0.002)
    match_sigma: tuple[float, ...] = (0.05, 0.05, 0.05, 0.005, 0.005, 0.005)
    match_dropout: float = 0.1
    outlier_rate: float = 0.0
    # Outlier rate for loop-closure queries only; None uses outlier_rate.
    lc_outlier_rate: float | None = None
    # False generates exact measurements while keeping the nominal information.
    sample_noise: bool = True

    def __post_init__(self) -> None:
        for name in ("odom_sigma", "match_sigma"):
            s = np.asarray(getattr(self, name), dtype=float)
            if s.shape != (6,) or not np.all(s > 0):
                raise ValueError(f"{name} must be six positive numbers")
        for name in ("match_dropout", "outlier_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.lc_outlier_rate is not None and not 0.0 <= self.lc_outlier_rate <= 1.0:
            raise ValueError("lc_outlier_rate must lie in [0, 1]")

    @property
    def odom_information(self) -> np.ndarray:
        return np.diag(1.0 / np.square(self.odom_sigma))

    @property
    def match_information(self) -> np.ndarray:
        return np.diag(1.0 / np.square(self.match_sigma))

    @classmethod
    def noiseless(cls) -> NoiseModel:
        return cls(match_dropout=0.0, sample_noise=False)


@dataclass(frozen=True)
class SessionPlan:
    route: list[str]
    spacing: float = 1.0
    label: str = ""


@dataclass(frozen=True)
class ScenarioScript:
    name: str
    sessions: list[SessionPlan] = field(default_factory=list)


def _rng(*key) -> np.random.Generator:
    digest = hashlib.sha256(repr(key).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _heading(a: np.ndarray, b: np.ndarray) -> Pose:
    d = b - a
    yaw = math.atan2(d[1], d[0])
    pitch = -math.atan2(d[2], math.hypot(d[0], d[1]))
    q = geo.quat_multiply(np.array([0.0, 0.0, math.sin(yaw / 2), math.cos(yaw / 2)]),
                          np.array([0.0, math.sin(pitch / 2), 0.0, math.cos(pitch / 2)]))
    return Pose(q, np.zeros(3))


def route_poses(world: World, route: list[str], spacing: float = 1.0) -> list[Pose]:
    """Keyframe poses at arc-length multiples of ``spacing``, facing along the route."""
    world.check_route(route)
    if spacing <= 0:
        raise InvalidRoute("spacing must be positive")
    pts = np.stack([world.waypoints[n].translation for n in route])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(seg <= 0):
        raise InvalidRoute("consecutive waypoints coincide")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    count = int(math.floor(cum[-1] / spacing + 1e-9)) + 1
    poses = []
    for k in range(count):
        s = k * spacing
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        u = (s - cum[i]) / seg[i]
        p = pts[i] + u * (pts[i + 1] - pts[i])
        rot = _heading(pts[i], pts[i + 1])
        poses.append(Pose(rot.quat, p))
    return poses


def generate_session(world: World, noise: NoiseModel, route: list[str], spacing: float = 1.0,
                     session: int = 0, label: str = "") -> SessionStream:
    truth = route_poses(world, route, spacing)
    rng = _rng(world.seed, "odometry", session, tuple(route), spacing)
    info = noise.odom_information
    sigma = np.asarray(noise.odom_sigma)
    events = []
    for k, T in enumerate(truth):
        ev = KeyframeEvent(session=session, index=k, timestamp=k * spacing, truth=T)
        if k:
            rel = geo.inverse(truth[k - 1]) @ T
            xi = rng.standard_normal(6) * sigma
            if noise.sample_noise:
                rel = rel @ geo.exp(xi)
            ev.odometry, ev.information = rel, info
        events.append(ev)
    return SessionStream(session, label, truth[0], events)


def _wild_transform(rng: np.random.Generator, radius: float) -> Pose:
    q = rng.standard_normal(4)
    return Pose(q / np.linalg.norm(q), rng.uniform(-radius, radius, 3))


def oracle_match(world: World, noise: NoiseModel, query: Pose, target: Pose,
                 rng: np.random.Generator, outlier_rate: float | None = None) -> Measurement | None:
    """Noisy ``query^-1 target`` if the true poses are within visibility.

    Every branch consumes the same draws, so inlier answers do not change
    when only the dropout or outlier rate changes.
    """
    if np.linalg.norm(target.translation - query.translation) > world.visibility_radius:
        return None
    u_drop, u_out = rng.random(2)
    xi = rng.standard_normal(6) * np.asarray(noise.match_sigma)
    wild = _wild_transform(rng, world.visibility_radius)
    if u_drop < noise.match_dropout:
        return None
    rate = noise.outlier_rate if outlier_rate is None else outlier_rate
    if u_out < rate:
        return wild, noise.match_information
    rel = geo.inverse(query) @ target
    if noise.sample_noise:
        rel = rel @ geo.exp(xi)
    return rel, noise.match_information


class OracleMatcher:
    """:class:`Matcher` backed by the ground truth stored on vertices."""

    def __init__(self, world: World, noise: NoiseModel) -> None:
        self.world = world
        self.noise = noise
        self.calls = 0

    def _match(self, tag: str, a: Vertex, b: Vertex, outlier_rate: float | None) -> Measurement | None:
        if a.truth is None or b.truth is None:
            return None
        self.calls += 1
        rng = _rng(self.world.seed, tag, tuple(a.id), tuple(b.id))
        return oracle_match(self.world, self.noise, a.truth, b.truth, rng, outlier_rate)

    def match_to_reference(self, query: Vertex, reference: Vertex) -> Measurement | None:
        return self._match("inter", query, reference, None)

    def match_pair(self, a: Vertex, b: Vertex) -> Measurement | None:
        return self._match("loop", a, b, self.noise.lc_outlier_rate)


# ------------------------------------------------------------------ scenarios


def _planar(points: dict[str, tuple[float, float]]) -> dict[str, Pose]:
    return {k: Pose.from_xyz_yaw(x, y, 0.0, 0.0) for k, (x, y) in points.items()}


def _links(*chains: list[str]) -> set[frozenset[str]]:
    out = set()
    for chain in chains:
        out.update(frozenset(p) for p in zip(chain, chain[1:]))
    return out


SCENARIOS = ("three_stage", "overlap_pair", "loop_enforcer", "full_overlap")


def build_scenario(name: str, seed: int = 0) -> tuple[World, ScenarioScript]:
    if name in ("three_stage", "full_overlap"):
        # 30 m courtyard loop; three_stage adds a western wing reached by a corridor.
        pts = {"C00": (0, 0), "M10": (10, 0), "C30": (30, 0), "C33": (30, 30), "C03": (0, 30),
               "W1": (-25, 30), "W0": (-25, 0)}
        links = _links(["C00", "M10", "C30", "C33", "C03", "C00"], ["C03", "W1", "W0", "C00"])
        world = World(_planar(pts), links, seed=seed)
        loop_a = ["C00", "M10", "C30", "C33", "C03", "C00", "M10"]
        if name == "full_overlap":
            sessions = [SessionPlan(loop_a, label="A"), SessionPlan(loop_a, label="B")]
        else:
            route_b = ["C00", "M10", "C30", "C33", "C03", "W1", "W0", "C00", "M10", "C30"]
            sessions = [SessionPlan(loop_a, label="A"), SessionPlan(route_b, label="B")]
    elif name == "overlap_pair":
        pts = {"P0": (0, 0), "P1": (60, 0), "P2": (60, 40), "Q": (60, -40)}
        world = World(_planar(pts), _links(["P2", "P1", "P0"], ["P1", "Q"]), seed=seed)
        sessions = [SessionPlan(["P0", "P1", "P2"], label="A"),
                    SessionPlan(["P0", "P1", "Q"], label="B")]
    elif name == "loop_enforcer":
        # A maps a U; B closes it through the unmapped western side.
        pts = {"L0": (0, 0), "M20": (20, 0), "L1": (40, 0), "L2": (40, 30), "L3": (0, 30)}
        world = World(_planar(pts), _links(["L0", "M20", "L1", "L2", "L3", "L0"]), seed=seed)
        sessions = [SessionPlan(["L0", "M20", "L1", "L2", "L3"], label="A"),
                    SessionPlan(["L1", "L2", "L3", "L0", "M20"], label="B")]
    else:
        raise UnknownScenario(name)
    return world, ScenarioScript(name, sessions)


def scenario_streams(world: World, script: ScenarioScript, noise: NoiseModel) -> list[SessionStream]:
    return [generate_session(world, noise, plan.route, plan.spacing, session=k, label=plan.label)
            for k, plan in enumerate(script.sessions)]


def lawnmower_world(lanes: int = 10, length: float = 90.0, gap: float = 10.0,
                    seed: int = 0) -> tuple[World, list[str]]:
    """Back-and-forth survey pattern; returns the world and the full route."""
    pts, route = {}, []
    for k in range(lanes):
        y = k * gap
        ends = [(0.0, y), (length, y)] if k % 2 == 0 else [(length, y), (0.0, y)]
        for j, (x, yy) in enumerate(ends):
            name = f"R{k}{'ab'[j]}"
            pts[name] = (x, yy)
            route.append(name)
    world = World(_planar(pts), _links(route), seed=seed)
    return world, route
