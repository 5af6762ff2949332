"""
Collective-perception scenarios.

Every frame, each connected vehicle casts its assigned sensor, its points are moved into the ego sensor frame
and cropped to the evaluation range, then voxelized and sent over the wire. The ego merges what it receives
from the other vehicles and runs the fusion network on its own grid plus the merged one. Communication is
lossless and has no range limit.
"""

from __future__ import annotations

import csv
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import rapidjson
from logbook import Logger
from pydantic import ValidationError

from .base import DEFAULT_SEED, PolicyKind, SensorName
from .errors import ConfigurationError, IncompatibleGridError, S2SError, SceneParseError, with_context
from .eval3d import EvalRange
from .grid import FULL_SCALE_GRID, GridConfig, PointCloud, SparseVoxelGrid, merge_grids, voxelize_with_stats
from .lidar_sim import Scene, build_scene, cast_rays, get_preset, parse_json, sensor_pose, transform_points
from .lidar_sim import validation_field
from .network import BevFeatureMap, ModelWeights, forward
from .records import CAVRow, FrameSummary, PolicySpec, ScenarioReportRecord, ScenarioSpec, SweepRecord
from .wire import decode, encode


logger = Logger(__name__)

STAGES = ('sense', 'merge', 'forward')
RANDOM_DOMAIN = 'random'


@dataclass(frozen=True)
class SensorPolicy:
    kind: PolicyKind
    sensor: SensorName | None = None
    assignments: Mapping[str, SensorName] = field(default_factory=dict)
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        try:
            object.__setattr__(self, 'kind', PolicyKind(self.kind))
            if self.sensor is not None:
                object.__setattr__(self, 'sensor', SensorName(self.sensor))
            object.__setattr__(self, 'assignments', {k: SensorName(v) for k, v in self.assignments.items()})
        except ValueError as e:
            raise ConfigurationError(f'Invalid sensor policy: {e}') from None
        if self.kind == PolicyKind.UNIFORM and self.sensor is None:
            raise ConfigurationError('A uniform policy needs a sensor')

    @classmethod
    def uniform(cls, sensor: SensorName | str) -> SensorPolicy:
        return cls(PolicyKind.UNIFORM, sensor=SensorName(sensor))

    @classmethod
    def fixed(cls, assignments: Mapping[str, SensorName | str]) -> SensorPolicy:
        return cls(PolicyKind.FIXED, assignments=dict(assignments))

    @classmethod
    def random(cls, seed: int = DEFAULT_SEED) -> SensorPolicy:
        return cls(PolicyKind.RANDOM, seed=seed)

    @classmethod
    def from_spec(cls, spec: PolicySpec) -> SensorPolicy:
        return cls(spec.kind, spec.sensor, spec.assignments, spec.seed)


def assign_sensors(cav_ids: Sequence[str], policy: SensorPolicy) -> dict[str, SensorName]:
    """
    Map every CAV to one sensor preset.

    Random draws follow the sorted CAV ids, so the result does not depend on the order of ``cav_ids``.
    """
    ids = sorted(set(cav_ids))
    if policy.kind == PolicyKind.UNIFORM:
        assert policy.sensor is not None
        return {cav: policy.sensor for cav in ids}
    if policy.kind == PolicyKind.FIXED:
        missing = [cav for cav in ids if cav not in policy.assignments]
        if missing:
            raise ConfigurationError(f'Fixed policy has no sensor for {missing}')
        return {cav: policy.assignments[cav] for cav in ids}
    names = tuple(SensorName)
    draws = np.random.default_rng(policy.seed).integers(0, len(names), size=len(ids))
    return {cav: names[d] for cav, d in zip(ids, draws)}


def domain_overlap(a: SparseVoxelGrid, b: SparseVoxelGrid) -> float:
    """Jaccard index of the occupied cells of two grids, 1.0 when both are empty."""
    if a.config != b.config:
        raise IncompatibleGridError(f'Cannot compare grids with {a.config} and {b.config}')
    union = np.union1d(a.keys, b.keys)
    if not len(union):
        return 1.0
    return len(np.intersect1d(a.keys, b.keys, assume_unique=True)) / len(union)


@dataclass(frozen=True)
class Scenario:
    scene: Scene
    ego: str
    policy: SensorPolicy
    grid: GridConfig = FULL_SCALE_GRID
    eval_range: EvalRange = field(default_factory=EvalRange)
    frames: int = 1
    seed: int = DEFAULT_SEED
    noise_sigma: float = 0.0
    # Overrides the policy for the ego only
    ego_sensor: SensorName | None = None

    def __post_init__(self):
        self.scene.actor(self.ego)
        if self.frames < 1:
            raise ConfigurationError(f'A scenario needs at least one frame, got {self.frames}')
        if self.noise_sigma < 0:
            raise ConfigurationError('Range noise must be non-negative')

    def assignment(self) -> dict[str, SensorName]:
        assignment = assign_sensors(self.scene.actor_ids, self.policy)
        if self.ego_sensor is not None:
            assignment[self.ego] = SensorName(self.ego_sensor)
        for actor in self.scene.actors:
            if assignment[actor.id] not in actor.sensors:
                raise ConfigurationError(f'{actor.id} does not carry a {assignment[actor.id].value} sensor')
        return assignment

    @property
    def senders(self) -> tuple[str, ...]:
        return tuple(sorted(a for a in self.scene.actor_ids if a != self.ego))


@dataclass(frozen=True)
class CAVOutput:
    cav: str
    sensor: SensorName
    # Cropped returns, in the ego sensor frame
    cloud: PointCloud
    grid: SparseVoxelGrid
    message: bytes
    dropped: int


@dataclass(frozen=True)
class FrameOutput:
    index: int
    cavs: dict[str, CAVOutput]
    ego_grid: SparseVoxelGrid
    collective_grid: SparseVoxelGrid
    bev: BevFeatureMap

    @property
    def fused_voxels(self) -> int:
        return len(merge_grids([self.ego_grid, self.collective_grid]))


@dataclass
class ScenarioReport:
    record: ScenarioReportRecord
    frames: list[FrameOutput]
    timing: dict[str, float]

    @property
    def bev_maps(self) -> list[BevFeatureMap]:
        return [f.bev for f in self.frames]


def _sense(scenario: Scenario, cav: str, sensor: SensorName, ego_sensor: SensorName, frame: int) -> CAVOutput:
    scene = scenario.scene
    actor = scene.actor(cav)
    model = get_preset(sensor)
    ego_pose = sensor_pose(scene.actor(scenario.ego), get_preset(ego_sensor))
    cloud = cast_rays(
        model,
        actor.box.ground_pose,
        scene,
        seed=scenario.seed + frame,
        noise_sigma=scenario.noise_sigma,
        exclude=(actor.box.id,),
    )
    points = transform_points(cloud.points, sensor_pose(actor, model), ego_pose)
    cropped = PointCloud(points[scenario.eval_range.contains(points)])
    grid, dropped = voxelize_with_stats(cropped, scenario.grid)
    message = encode(grid)
    if cav != scenario.ego:
        # What the ego receives is what went over the wire
        grid = decode(message)
    return CAVOutput(cav, sensor, cropped, grid, message, dropped)


def _sense_in_context(scenario: Scenario, cav: str, assignment: Mapping[str, SensorName], frame: int) -> CAVOutput:
    try:
        return _sense(scenario, cav, assignment[cav], assignment[scenario.ego], frame)
    except S2SError as e:
        raise with_context(e, f'frame {frame}, cav {cav}') from None


def run_frame(scenario: Scenario, weights: ModelWeights, frame: int, pool: ThreadPoolExecutor | None = None,
              timing: dict[str, float] | None = None) -> FrameOutput:
    assignment = scenario.assignment()
    timing = {} if timing is None else timing
    start = time.perf_counter()
    # Sorted so results never depend on which worker finishes first
    ids = sorted(assignment)
    if pool is None:
        outputs = [_sense_in_context(scenario, cav, assignment, frame) for cav in ids]
    else:
        futures = [pool.submit(_sense_in_context, scenario, cav, assignment, frame) for cav in ids]
        outputs = [f.result() for f in futures]
    cavs = {o.cav: o for o in outputs}
    sensed = time.perf_counter()
    ego_grid = cavs[scenario.ego].grid
    received = [cavs[cav].grid for cav in scenario.senders]
    try:
        collective = merge_grids(received) if received else SparseVoxelGrid(scenario.grid)
        merged = time.perf_counter()
        bev = forward(ego_grid, collective, weights)
    except S2SError as e:
        raise with_context(e, f'frame {frame}, cav {scenario.ego}') from None
    done = time.perf_counter()
    for stage, seconds in zip(STAGES, (sensed - start, merged - sensed, done - merged)):
        timing[stage] = timing.get(stage, 0.0) + seconds
    logger.debug('Frame {}: ego {} voxels, collective {} voxels', frame, len(ego_grid), len(collective))
    return FrameOutput(frame, cavs, ego_grid, collective, bev)


def _pair_key(a: str, b: str) -> str:
    return f'{a}|{b}'


def run_scenario(scenario: Scenario, weights: ModelWeights, threads: int = 1) -> ScenarioReport:
    if threads < 1:
        raise ConfigurationError(f'Thread count must be at least 1, got {threads}')
    assignment = scenario.assignment()
    logger.info('Running {} frames with {} CAVs, ego {}', scenario.frames, len(assignment), scenario.ego)
    timing: dict[str, float] = {}
    if threads == 1:
        frames = [run_frame(scenario, weights, k, timing=timing) for k in range(scenario.frames)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frames = [run_frame(scenario, weights, k, pool, timing) for k in range(scenario.frames)]

    rows = []
    summaries = []
    overlap_sums: dict[str, float] = defaultdict(float)
    for out in frames:
        for cav, o in sorted(out.cavs.items()):
            rows.append(CAVRow(frame=out.index, cav=cav, sensor=o.sensor, points=len(o.cloud), voxels=len(o.grid),
                               wire_bytes=len(o.message), dropped=o.dropped))
        for a, b in combinations(sorted(out.cavs), 2):
            overlap_sums[_pair_key(a, b)] += domain_overlap(out.cavs[a].grid, out.cavs[b].grid)
        summaries.append(FrameSummary(frame=out.index, ego_voxels=len(out.ego_grid),
                                      collective_voxels=len(out.collective_grid), fused_voxels=out.fused_voxels,
                                      bev_shape=out.bev.shape))
    overlaps = {key: total / len(frames) for key, total in overlap_sums.items()}
    record = ScenarioReportRecord(ego=scenario.ego, assignment=assignment, cavs=rows, frames=summaries,
                                  overlaps=overlaps)
    return ScenarioReport(record, frames, timing)


def ego_overlap(report: ScenarioReport) -> float | None:
    """Mean overlap between the ego grid and every sender grid, over all frames."""
    ego = report.record.ego
    values = [v for key, v in report.record.overlaps.items() if ego in key.split('|')]
    return float(np.mean(values)) if values else None


def sweep_sender_domains(scenario: Scenario, weights: ModelWeights, threads: int = 1) -> SweepRecord:
    """
    Keep the ego sensor and move all senders through each sensor domain, then through a random assignment.
    """
    ego_sensor = SensorName(scenario.ego_sensor or scenario.assignment()[scenario.ego])
    policies = {name.value: SensorPolicy.uniform(name) for name in SensorName}
    policies[RANDOM_DOMAIN] = SensorPolicy.random(scenario.seed)
    domains = {}
    overlaps = {}
    for domain, policy in policies.items():
        logger.info('Sender domain {}', domain)
        report = run_scenario(replace(scenario, policy=policy, ego_sensor=ego_sensor), weights, threads)
        domains[domain] = report.record
        overlap = ego_overlap(report)
        if overlap is not None:
            overlaps[domain] = overlap
    return SweepRecord(ego=scenario.ego, ego_sensor=ego_sensor, domains=domains, ego_overlap=overlaps)


# Scenario files


def scenario_from_spec(spec: ScenarioSpec, base_dir: Path | None = None) -> Scenario:
    if isinstance(spec.scene, str):
        scene_path = Path(spec.scene)
        if base_dir is not None and not scene_path.is_absolute():
            scene_path = base_dir / scene_path
        scene = build_scene(scene_path)
    else:
        scene = build_scene(spec.scene.model_dump())
    grid = GridConfig.from_extent(spec.grid.origin, spec.grid.voxel_size, spec.grid.extent)
    eval_range = EvalRange(spec.eval_range.x, spec.eval_range.y, spec.eval_range.z)
    return Scenario(
        scene=scene,
        ego=spec.ego,
        policy=SensorPolicy.from_spec(spec.policy),
        grid=grid,
        eval_range=eval_range,
        frames=spec.frames,
        seed=spec.seed,
        noise_sigma=spec.noise_sigma,
        ego_sensor=spec.ego_sensor,
    )


def load_scenario(path: Path) -> Scenario:
    """Read a scenario file; a scene given as a path is resolved against the scenario's folder."""
    path = Path(path)
    data = parse_json(path.read_text(), str(path))
    try:
        spec = ScenarioSpec.model_validate(data)
    except ValidationError as e:
        raise SceneParseError(f'Invalid scenario: {e.errors()[0]["msg"]}', field=validation_field(e)) from None
    return scenario_from_spec(spec, path.parent)


def report_json(record: ScenarioReportRecord | SweepRecord) -> str:
    return rapidjson.dumps(record.model_dump(mode='json', exclude_none=True), indent=2)


def write_report(report: ScenarioReport, path: Path, with_timing: bool = False):
    record = report.record
    if with_timing:
        record = record.model_copy(update={'timing': dict(report.timing)})
    Path(path).write_text(report_json(record) + '\n')


def write_cav_csv(record: ScenarioReportRecord, path: Path):
    fields = list(CAVRow.model_fields)
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator='\n')
        writer.writeheader()
        for row in record.cavs:
            writer.writerow(row.model_dump(mode='json'))
