"""
Models of every JSON and JSON-lines document read or written by this package.

Scene file::

    {
      "ground_z": 0.0,
      "boxes": [{"id": "car_0", "center": [x, y, z], "size": [l, w, h], "yaw": 0.0, "label": "Car"}],
      "actors": [{"id": "cav_0", "box": "car_0", "sensors": ["HDL64", "VLP32", "CUBE"]}]
    }

Scenario file: ``scene`` (inline scene or path relative to the scenario file), ``ego``, ``policy``,
optional ``ego_sensor``, ``grid``, ``eval_range``, ``frames``, ``seed``, ``noise_sigma``.

Detection / ground-truth dumps: one frame per line, ``{"frame_id": ..., "boxes": [box, ...]}``
where a box has ``center``, ``size``, ``yaw``, ``label`` and, for detections, ``confidence``.
"""

from typing import Annotated

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, field_validator, model_validator

from .base import DEFAULT_SEED, ObjectClass, PolicyKind, SensorName


Triple = tuple[float, float, float]
PositiveTriple = tuple[PositiveFloat, PositiveFloat, PositiveFloat]
Interval = tuple[float, float]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra='forbid')


class BoxSpec(StrictModel):
    id: str
    center: Triple
    size: PositiveTriple
    yaw: float = 0.0
    label: ObjectClass = ObjectClass.CAR


class ActorSpec(StrictModel):
    id: str
    # Id of the box carrying the sensors
    box: str
    sensors: tuple[SensorName, ...] = tuple(SensorName)

    @field_validator('sensors')
    @classmethod
    def not_empty(cls, value: tuple[SensorName, ...]):
        if not value:
            raise ValueError('an actor needs at least one sensor')
        return value


class SceneSpec(StrictModel):
    ground_z: float = 0.0
    boxes: list[BoxSpec] = Field(default_factory=list)
    actors: list[ActorSpec] = Field(default_factory=list)


class GridSpec(StrictModel):
    origin: Triple = (-140.0, -40.0, -4.0)
    voxel_size: PositiveTriple = (0.05, 0.05, 0.10)
    extent: PositiveTriple = (280.0, 80.0, 4.0)


class RangeSpec(StrictModel):
    x: Interval = (-140.0, 140.0)
    y: Interval = (-40.0, 40.0)
    z: Interval = (-4.0, 1.0)


class PolicySpec(StrictModel):
    kind: PolicyKind
    # uniform: the one sensor every CAV gets
    sensor: SensorName | None = None
    # fixed: sensor of each CAV
    assignments: dict[str, SensorName] = Field(default_factory=dict)
    # random: draws are reproducible from this seed
    seed: int = DEFAULT_SEED

    @model_validator(mode='after')
    def check_kind(self):
        if self.kind == PolicyKind.UNIFORM and self.sensor is None:
            raise ValueError('uniform policy needs a sensor')
        if self.kind == PolicyKind.FIXED and not self.assignments:
            raise ValueError('fixed policy needs assignments')
        return self


class ScenarioSpec(StrictModel):
    scene: SceneSpec | str
    ego: str
    policy: PolicySpec
    ego_sensor: SensorName | None = None
    grid: GridSpec = Field(default_factory=GridSpec)
    eval_range: RangeSpec = Field(default_factory=RangeSpec)
    frames: Annotated[int, Field(ge=1)] = 1
    seed: int = DEFAULT_SEED
    noise_sigma: Annotated[float, Field(ge=0)] = 0.0


class BoxRecord(StrictModel):
    center: Triple
    size: PositiveTriple
    yaw: float = 0.0
    label: ObjectClass
    confidence: Annotated[float, Field(ge=0, le=1)] | None = None


class FrameRecord(StrictModel):
    frame_id: str | int
    boxes: list[BoxRecord] = Field(default_factory=list)


class CAVRow(BaseModel):
    frame: int
    cav: str
    sensor: SensorName
    points: int
    voxels: int
    wire_bytes: int
    dropped: int


class FrameSummary(BaseModel):
    frame: int
    ego_voxels: int
    collective_voxels: int
    fused_voxels: int
    bev_shape: tuple[int, ...]


class ScenarioReportRecord(BaseModel):
    ego: str
    assignment: dict[str, SensorName]
    cavs: list[CAVRow]
    frames: list[FrameSummary]
    overlaps: dict[str, float]
    # Wall-clock seconds per stage, only written on request
    timing: dict[str, float] | None = None


class ClassAPRecord(BaseModel):
    label: ObjectClass
    iou_threshold: float
    ap: float | None
    defined: bool
    n_gt: int
    n_det: int


class SweepRecord(BaseModel):
    ego: str
    ego_sensor: SensorName
    # Keyed by sender domain: a sensor name, or "random"
    domains: dict[str, ScenarioReportRecord]
    # Mean Jaccard overlap between the ego grid and each sender grid, per domain
    ego_overlap: dict[str, float]
