"""Synthetic single-frame intersection scenes for the cooperative
pipeline.

A scene places an ego vehicle on the west approach of a four-way
intersection and a roadside unit west of it with a wide field of view.
Ground-truth agents drive the approach arms at constant velocity. The
ego's view suffers line-of-sight occlusion (another vehicle between the
ego and a target hides it); the roadside unit is elevated, so it sees
every agent. At difficulty 1 and above the generator plants a crossing
vehicle in the middle of the intersection and a target behind it, which
guarantees at least one agent the ego cannot see but the roadside unit
can.

All generation is deterministic from (seed, difficulty). Everything is
stored in the world frame except the expert plan, which lives in the
ego frame.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .geometry import RigidTransform2D
from .metrics import Detection, planning_errors
from .model import LossTargets
from .occupancy import OccupancyGrid


@dataclass
class ScenarioConfig:
    """Bounds and geometry for scene generation."""

    n_agents_min: int = 2
    n_agents_max: int = 6
    horizon: int = 12
    plan_steps: int = 6
    step_dt: float = 0.5
    speed_min: float = 2.0
    speed_max: float = 8.0
    agent_extent: tuple = (4.0, 1.8)
    lane_offset: float = 1.75
    spawn_near: float = 4.0
    spawn_far: float = 10.0
    n_map_points: int = 3
    # Visibility rectangles (x_min, y_min, x_max, y_max) in each
    # viewer's own frame.
    ego_range: tuple = (-51.2, -51.2, 51.2, 51.2)
    infra_range: tuple = (0.0, -51.2, 102.4, 51.2)

    def __post_init__(self):
        if self.n_agents_min < 1 or self.n_agents_max < self.n_agents_min:
            raise ValueError("agent count bounds must satisfy 1 <= min <= max")
        if self.n_agents_max < self.n_agents_min + 2:
            raise ValueError("need two spare agent slots for the occluder pair")
        if self.plan_steps != 6:
            raise ValueError("plans are six steps at 0.5 s; the planning "
                             "metric horizon is fixed")
        if self.horizon < self.plan_steps:
            raise ValueError("future horizon must cover the plan")
        if self.step_dt <= 0 or self.speed_min <= 0 \
                or self.speed_max < self.speed_min:
            raise ValueError("bad kinematic bounds")


@dataclass
class Scenario:
    """One generated scene; all agent state is world-frame."""

    seed: int
    difficulty: int
    cfg: ScenarioConfig
    ego_pose: RigidTransform2D
    infra_pose: RigidTransform2D
    centers: np.ndarray          # (G, 2)
    headings: np.ndarray         # (G,)
    speeds: np.ndarray           # (G,)
    extents: np.ndarray          # (G, 2)
    futures: np.ndarray          # (G, T, 2)
    expert_plan: np.ndarray      # (plan_steps, 2), ego frame
    map_points: np.ndarray       # (P, 2)
    vis_ego: np.ndarray          # (G,) bool
    vis_infra: np.ndarray        # (G,) bool

    @property
    def n_agents(self):
        return self.centers.shape[0]

    def pose_of(self, agent):
        if agent == "ego":
            return self.ego_pose
        if agent == "infra":
            return self.infra_pose
        raise ValueError("agent must be 'ego' or 'infra'")

    def visible_mask(self, agent):
        self.pose_of(agent)
        return self.vis_ego if agent == "ego" else self.vis_infra

    def transform_infra_to_ego(self):
        return geometry.compose(geometry.invert(self.ego_pose),
                                self.infra_pose)

    def frame_heading(self, agent):
        pose = self.pose_of(agent)
        return math.atan2(pose.rotation[1, 0], pose.rotation[0, 0])

    def agents_in_frame(self, agent):
        """(centers, headings) of every GT agent in the viewer frame."""
        world_to = geometry.invert(self.pose_of(agent))
        centers = geometry.apply(world_to, self.centers)
        headings = self.headings - self.frame_heading(agent)
        return centers, headings

    def gt_occupancy(self, agent, grid_h, grid_w, cell_size, tau=0.1):
        """Binary grid of all GT boxes rasterized in the viewer frame."""
        grid = _empty_grid(grid_h, grid_w, cell_size, tau)
        centers, headings = self.agents_in_frame(agent)
        cells = grid.cell_centers()
        occ = np.zeros(cells.shape[0])
        for g in range(self.n_agents):
            inside = _points_in_box(cells, centers[g], self.extents[g],
                                    headings[g])
            occ[inside] = 1.0
        return grid.with_probs(occ.reshape(grid_h, grid_w))

    def gt_detections(self):
        """GT boxes in the ego frame, track ids = agent indices."""
        centers, headings = self.agents_in_frame("ego")
        return [Detection(centers[g], extent=tuple(self.extents[g]),
                          heading=float(headings[g]), track_id=g)
                for g in range(self.n_agents)]

    def futures_in_frame(self, agent, horizon=None):
        world_to = geometry.invert(self.pose_of(agent))
        t = self.futures.shape[1] if horizon is None else int(horizon)
        if t > self.futures.shape[1]:
            raise ValueError("requested horizon exceeds the generated one")
        flat = self.futures[:, :t].reshape(-1, 2)
        out = geometry.apply(world_to, flat)
        return out.reshape(self.n_agents, t, 2)

    def obstacles_per_step(self, steps):
        """Ego-frame obstacle boxes at future steps 1..steps."""
        if steps > self.futures.shape[1]:
            raise ValueError("requested steps exceed the generated horizon")
        fut = self.futures_in_frame("ego", steps)
        _, headings = self.agents_in_frame("ego")
        out = []
        for s in range(steps):
            boxes = []
            for g in range(self.n_agents):
                l, w = self.extents[g]
                boxes.append((fut[g, s, 0], fut[g, s, 1], l, w,
                              headings[g]))
            out.append(boxes)
        return out

    def loss_targets(self, grid_h, grid_w, cell_size, horizon,
                     gate=2.0):
        """Ego-frame training targets for joint_loss."""
        centers, _ = self.agents_in_frame("ego")
        world_to = geometry.invert(self.ego_pose)
        return LossTargets(
            centers=centers,
            map_points=geometry.apply(world_to, self.map_points),
            occ=self.gt_occupancy("ego", grid_h, grid_w,
                                  cell_size).binarize().astype(float),
            futures=self.futures_in_frame("ego", horizon),
            expert_plan=self.expert_plan,
            gate=gate)

    def raw_features(self, agent, grid_h, grid_w, cell_size, raw_dim):
        """Sensor-like per-cell features in the viewer frame.

        Channels: box-occupancy indicator, scaled offset to the nearest
        visible agent (x then y), its scaled speed, and the cell's own
        scaled coordinates (x then y). The positional channels are zero
        mean over the grid, so cells stay distinguishable to downstream
        attention even in empty regions. Only agents visible to the
        viewer contribute, which is where occlusion enters the
        pipeline. Deterministic, no noise.
        """
        if raw_dim < 1:
            raise ValueError("raw_dim must be positive")
        grid = _empty_grid(grid_h, grid_w, cell_size)
        cells = grid.cell_centers()
        n_cells = cells.shape[0]
        centers, headings = self.agents_in_frame(agent)
        vis = self.visible_mask(agent)
        half = 0.5 * cell_size * max(grid_h, grid_w)
        feats = np.zeros((n_cells, 6))
        feats[:, 4] = cells[:, 0] / half
        feats[:, 5] = cells[:, 1] / half
        if vis.any():
            vc = centers[vis]
            occ = np.zeros(n_cells, dtype=bool)
            for g in np.flatnonzero(vis):
                occ |= _points_in_box(cells, centers[g], self.extents[g],
                                      headings[g])
            feats[:, 0] = occ.astype(float)
            diff = vc[None, :, :] - cells[:, None, :]
            dist = np.linalg.norm(diff, axis=2)
            nearest = np.argmin(dist, axis=1)
            rows = np.arange(n_cells)
            feats[:, 1] = np.clip(diff[rows, nearest, 0], -half, half) / half
            feats[:, 2] = np.clip(diff[rows, nearest, 1], -half, half) / half
            feats[:, 3] = self.speeds[vis][nearest] / self.cfg.speed_max
        if raw_dim <= 6:
            return np.ascontiguousarray(feats[:, :raw_dim])
        out = np.zeros((n_cells, raw_dim))
        out[:, :6] = feats
        return out


def _empty_grid(grid_h, grid_w, cell_size, tau=0.1):
    origin = np.array([-0.5 * grid_w * cell_size,
                       -0.5 * grid_h * cell_size])
    return OccupancyGrid(np.zeros((grid_h, grid_w)), cell_size, origin,
                         tau)


def _points_in_box(pts, center, extent, heading):
    """Boolean mask of pts inside an oriented box."""
    d = pts - np.asarray(center, dtype=np.float64)
    c, s = np.cos(heading), np.sin(heading)
    local_x = c * d[:, 0] + s * d[:, 1]
    local_y = -s * d[:, 0] + c * d[:, 1]
    l, w = extent
    return (np.abs(local_x) <= 0.5 * l) & (np.abs(local_y) <= 0.5 * w)


def _segment_blocked(p0, p1, center, extent, heading, samples=64):
    """True when the open segment p0->p1 passes through the box."""
    ts = np.linspace(0.02, 0.98, samples)
    pts = p0[None, :] + ts[:, None] * (p1 - p0)[None, :]
    return bool(_points_in_box(pts, center, extent, heading).any())


def _in_range(pts, rect):
    x0, y0, x1, y1 = rect
    return (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & \
        (pts[:, 1] >= y0) & (pts[:, 1] <= y1)


# Approach arms: direction of travel toward the intersection. The west
# arm is reserved for the ego vehicle.
_ARMS = {
    "east": np.array([-1.0, 0.0]),
    "north": np.array([0.0, -1.0]),
    "south": np.array([0.0, 1.0]),
}


def gen_scenario(seed, difficulty=1, cfg=None):
    """Deterministic scene from (seed, difficulty).

    Difficulty 0 disables occlusion entirely, so every agent is visible
    to the ego. Difficulty >= 1 adds a crossing vehicle at the
    intersection center plus a target behind it on the ego's lane; the
    target is hidden from the ego by construction.
    """
    if difficulty < 0:
        raise ValueError("difficulty must be nonnegative")
    cfg = cfg if cfg is not None else ScenarioConfig()
    rng = np.random.default_rng([int(seed), int(difficulty), 0x5CE17])

    lane = cfg.lane_offset
    ego_pose = RigidTransform2D.from_pose(-8.0, -lane, 0.0)
    infra_pose = RigidTransform2D.from_pose(-20.0, 2.0, 0.1)

    centers, headings, speeds, extents = [], [], [], []

    def add_agent(x, y, heading, speed, extent):
        centers.append([x, y])
        headings.append(heading)
        speeds.append(speed)
        extents.append(list(extent))

    reserve = 2 if difficulty >= 1 else 0
    n_random = int(rng.integers(cfg.n_agents_min,
                                cfg.n_agents_max - reserve + 1))
    arm_names = sorted(_ARMS)
    for _ in range(n_random):
        u = _ARMS[arm_names[int(rng.integers(len(arm_names)))]]
        dist = float(rng.uniform(cfg.spawn_near, cfg.spawn_far))
        perp = np.array([u[1], -u[0]])         # right-hand side of travel
        pos = -u * dist + perp * lane
        add_agent(pos[0], pos[1], math.atan2(u[1], u[0]),
                  float(rng.uniform(cfg.speed_min, cfg.speed_max)),
                  cfg.agent_extent)

    occluded_idx = None
    if difficulty >= 1:
        # Crossing vehicle in the middle of the intersection, then the
        # hidden target on the ego lane behind it.
        add_agent(0.0, -lane, math.pi / 2.0, 4.0, cfg.agent_extent)
        target_speed = float(rng.uniform(cfg.speed_min, cfg.speed_max))
        add_agent(6.0, -lane, 0.0, target_speed, cfg.agent_extent)
        occluded_idx = len(centers) - 1

    centers = np.asarray(centers, dtype=np.float64)
    headings = np.asarray(headings, dtype=np.float64)
    speeds = np.asarray(speeds, dtype=np.float64)
    extents = np.asarray(extents, dtype=np.float64)
    n = centers.shape[0]

    steps = (np.arange(cfg.horizon) + 1.0)[None, :] * cfg.step_dt
    vel = speeds[:, None] * np.stack([np.cos(headings),
                                      np.sin(headings)], axis=1)
    futures = centers[:, None, :] + steps[:, :, None] * vel[:, None, :]

    map_points = np.array([[-8.0 + 6.0 * i, -lane]
                           for i in range(cfg.n_map_points)])

    # Visibility: range test in each viewer frame, then line-of-sight
    # occlusion for the ego only (the roadside unit is elevated).
    ego_centers = geometry.apply(geometry.invert(ego_pose), centers)
    infra_centers = geometry.apply(geometry.invert(infra_pose), centers)
    vis_ego = _in_range(ego_centers, cfg.ego_range)
    vis_infra = _in_range(infra_centers, cfg.infra_range)
    if difficulty >= 1:
        eye = ego_pose.translation
        for g in range(n):
            if not vis_ego[g]:
                continue
            for b in range(n):
                if b == g:
                    continue
                if _segment_blocked(eye, centers[g], centers[b],
                                    extents[b], headings[b]):
                    vis_ego[g] = False
                    break
    # Every agent must be observable by at least one party; the
    # elevated unit picks up any straggler.
    vis_infra = vis_infra | ~vis_ego

    # Expert plan: straight through the intersection at a speed that
    # provably avoids every GT future (slow down until clear).
    ego_speed = float(rng.uniform(cfg.speed_min, cfg.speed_max))
    if occluded_idx is not None:
        ego_speed = min(ego_speed, speeds[occluded_idx] + 1.0)
    scn = Scenario(seed=int(seed), difficulty=int(difficulty), cfg=cfg,
                   ego_pose=ego_pose, infra_pose=infra_pose,
                   centers=centers, headings=headings, speeds=speeds,
                   extents=extents, futures=futures,
                   expert_plan=np.zeros((cfg.plan_steps, 2)),
                   map_points=map_points, vis_ego=vis_ego,
                   vis_infra=vis_infra)
    k = np.arange(1, cfg.plan_steps + 1)[:, None] * cfg.step_dt
    for _ in range(24):
        plan = np.hstack([k * ego_speed, np.zeros_like(k)])
        obstacles = scn.obstacles_per_step(cfg.plan_steps)
        _, col = planning_errors(plan, plan, obstacles)
        if col[3] == 0.0:
            break
        ego_speed *= 0.8
    scn.expert_plan = np.hstack([k * ego_speed, np.zeros_like(k)])
    return scn
