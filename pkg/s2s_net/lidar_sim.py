"""
Synthetic LiDAR sensors ray-cast against a flat ground and a set of yawed boxes.

The three presets mirror the sensor suite of each connected vehicle: two rotating sensors with different
layer counts and vertical fields of view, and one forward-looking solid-state sensor. Layers are spaced
uniformly over the vertical field of view, which is enough to reproduce the resolution and coverage gap
between the sensor types.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import rapidjson
from logbook import Logger
from pydantic import ValidationError

from .base import ObjectClass, SensorKind, SensorName
from .errors import ConfigurationError, SceneParseError
from .grid import PointCloud
from .records import SceneSpec


logger = Logger(__name__)

# Rays leaving a surface must travel at least this far before they can hit anything
MIN_HIT_DISTANCE = 1e-6
REGEX_JSON_OFFSET = re.compile(r'offset (\d+)')


@dataclass(frozen=True)
class Pose:
    """Rigid transform in the ground plane: translation plus rotation about z (radians)."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def compose(self, inner: Pose) -> Pose:
        """Pose of a frame given relative to this one, expressed in this pose's parent frame."""
        x, y, z = self.apply(np.array([[inner.x, inner.y, inner.z]]))[0]
        return Pose(float(x), float(y), float(z), self.yaw + inner.yaw)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points from this frame into the parent frame."""
        return points @ self.rotation.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """Map points from the parent frame into this frame."""
        return (points - self.translation) @ self.rotation

    def rotate(self, directions: np.ndarray) -> np.ndarray:
        return directions @ self.rotation.T


def transform_points(points: np.ndarray, source: Pose, target: Pose) -> np.ndarray:
    """Re-express points given in frame ``source`` in frame ``target``; both poses are in a shared world frame."""
    return target.apply_inverse(source.apply(points))


@dataclass(frozen=True)
class SensorModel:
    name: str
    kind: SensorKind
    n_layers: int
    azimuth_fov: float
    elevation_fov: tuple[float, float]
    azimuth_step: float
    max_range: float
    mount: Pose = field(default_factory=Pose)

    def __post_init__(self):
        low, high = self.elevation_fov
        if self.n_layers < 1:
            raise ConfigurationError(f'{self.name}: needs at least one layer')
        if not 0 < self.azimuth_fov <= 360 or high <= low:
            raise ConfigurationError(f'{self.name}: field of view must have positive width')
        if self.azimuth_step <= 0 or self.max_range <= 0:
            raise ConfigurationError(f'{self.name}: azimuth step and max range must be positive')

    @property
    def elevation_width(self) -> float:
        return self.elevation_fov[1] - self.elevation_fov[0]

    @property
    def n_azimuths(self) -> int:
        # Guard against 360 / 0.2 landing a hair above an integer
        return math.ceil(self.azimuth_fov / self.azimuth_step - 1e-9)

    @property
    def ray_count(self) -> int:
        return self.n_layers * self.n_azimuths

    def elevation_angles(self) -> np.ndarray:
        low, high = self.elevation_fov
        if self.n_layers == 1:
            return np.array([(low + high) / 2])
        return np.linspace(low, high, self.n_layers)

    def azimuth_angles(self) -> np.ndarray:
        start = 0.0 if self.kind == SensorKind.ROTATING else -self.azimuth_fov / 2
        return start + self.azimuth_step * np.arange(self.n_azimuths)

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, layer-major."""
        el, az = np.meshgrid(np.radians(self.elevation_angles()), np.radians(self.azimuth_angles()), indexing='ij')
        el, az = el.reshape(-1), az.reshape(-1)
        return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)


# Elevation ranges are the publicly documented values of each product line, not measured on the real units
PRESETS: dict[SensorName, SensorModel] = {
    SensorName.HDL64: SensorModel(
        name=SensorName.HDL64.value,
        kind=SensorKind.ROTATING,
        n_layers=64,
        azimuth_fov=360.0,
        elevation_fov=(-24.9, 2.0),
        azimuth_step=0.2,
        max_range=120.0,
        mount=Pose(0.0, 0.0, 1.9),
    ),
    SensorName.VLP32: SensorModel(
        name=SensorName.VLP32.value,
        kind=SensorKind.ROTATING,
        n_layers=32,
        azimuth_fov=360.0,
        elevation_fov=(-25.0, 15.0),
        azimuth_step=0.2,
        max_range=200.0,
        mount=Pose(0.0, 0.0, 1.9),
    ),
    SensorName.CUBE: SensorModel(
        name=SensorName.CUBE.value,
        kind=SensorKind.SOLID_STATE,
        n_layers=52,
        azimuth_fov=70.0,
        elevation_fov=(-15.0, 15.0),
        azimuth_step=0.4,
        max_range=75.0,
        mount=Pose(0.0, 0.0, 1.9),
    ),
}


def sensor_presets() -> tuple[SensorModel, SensorModel, SensorModel]:
    return (PRESETS[SensorName.HDL64], PRESETS[SensorName.VLP32], PRESETS[SensorName.CUBE])


def get_preset(name: SensorName | str) -> SensorModel:
    try:
        return PRESETS[SensorName(name)]
    except ValueError:
        choices = [n.value for n in SensorName]
        raise ConfigurationError(f'Unknown sensor preset {name!r}, choose from {choices}') from None


@dataclass(frozen=True)
class SceneBox:
    id: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    label: ObjectClass = ObjectClass.CAR

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ConfigurationError(f'Box {self.id} must have positive size, got {self.size}')

    @property
    def ground_pose(self) -> Pose:
        """Vehicle frame: on the ground under the box center, x along the box length."""
        x, y, z = self.center
        return Pose(x, y, z - self.size[2] / 2, self.yaw)


@dataclass(frozen=True)
class Actor:
    id: str
    box: SceneBox
    sensors: tuple[SensorName, ...] = tuple(SensorName)


@dataclass(frozen=True)
class Scene:
    boxes: tuple[SceneBox, ...] = ()
    actors: tuple[Actor, ...] = ()
    ground_z: float = 0.0

    def actor(self, actor_id: str) -> Actor:
        try:
            return next(a for a in self.actors if a.id == actor_id)
        except StopIteration:
            raise ConfigurationError(f'Scene has no actor {actor_id!r}') from None

    @property
    def actor_ids(self) -> tuple[str, ...]:
        return tuple(a.id for a in self.actors)


def _box_hits(box: SceneBox, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Entry distance of every ray into the box, inf where the ray misses."""
    pose = Pose(*box.center, box.yaw)
    o = pose.apply_inverse(origin[None, :])[0]
    d = directions @ pose.rotation
    half = np.array(box.size) / 2
    with np.errstate(divide='ignore', invalid='ignore'):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    # Rays parallel to a slab hit it everywhere or nowhere
    parallel = d == 0
    inside_slab = np.abs(o) <= half
    t_low = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    t_high = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    near = t_low.max(axis=1)
    far = t_high.min(axis=1)
    hit = (near <= far) & (near > MIN_HIT_DISTANCE)
    return np.where(hit, near, np.inf)


def cast_rays(
    model: SensorModel,
    pose: Pose,
    scene: Scene,
    seed: int = 0,
    noise_sigma: float = 0.0,
    exclude: Iterable[str] = (),
) -> PointCloud:
    """
    Cast one ray per (layer, azimuth step) from a sensor mounted on a vehicle at ``pose``.

    Returns the nearest hit of each ray within range, in the sensor frame. Boxes named in ``exclude``
    (usually the vehicle carrying the sensor) are transparent.
    """
    sensor = pose.compose(model.mount)
    local_dirs = model.ray_directions()
    dirs = sensor.rotate(local_dirs)
    origin = sensor.translation
    distance = np.full(len(dirs), np.inf)
    down = dirs[:, 2] < 0
    if origin[2] > scene.ground_z:
        distance[down] = (scene.ground_z - origin[2]) / dirs[down, 2]
    skip = set(exclude)
    for box in scene.boxes:
        if box.id not in skip:
            distance = np.minimum(distance, _box_hits(box, origin, dirs))
    hit = distance <= model.max_range
    ranges = distance[hit]
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        ranges = np.clip(ranges + rng.normal(0.0, noise_sigma, len(ranges)), 0.0, model.max_range)
    points = local_dirs[hit] * ranges[:, None]
    logger.debug('{}: {} of {} rays returned', model.name, len(points), len(dirs))
    return PointCloud(points)


def sensor_pose(actor: Actor, model: SensorModel) -> Pose:
    """World pose of a sensor mounted on ``actor``."""
    return actor.box.ground_pose.compose(model.mount)


def scene_from_spec(spec: SceneSpec) -> Scene:
    boxes = tuple(SceneBox(b.id, b.center, b.size, b.yaw, b.label) for b in spec.boxes)
    by_id = {b.id: b for b in boxes}
    if len(by_id) != len(boxes):
        raise SceneParseError('Duplicate box id', field='boxes')
    actors = []
    for i, a in enumerate(spec.actors):
        if a.box not in by_id:
            raise SceneParseError(f'Actor {a.id!r} refers to unknown box {a.box!r}', field=f'actors.{i}.box')
        actors.append(Actor(a.id, by_id[a.box], tuple(a.sensors)))
    if len({a.id for a in actors}) != len(actors):
        raise SceneParseError('Duplicate actor id', field='actors')
    return Scene(boxes, tuple(actors), spec.ground_z)


def _line_of(text: str, offset: int) -> int:
    return text.count('\n', 0, offset) + 1


def parse_json(text: str, what: str) -> object:
    try:
        return rapidjson.loads(text)
    except rapidjson.JSONDecodeError as e:
        m = REGEX_JSON_OFFSET.search(str(e))
        line = _line_of(text, int(m.group(1))) if m else None
        raise SceneParseError(f'Invalid JSON in {what}: {e}', line=line) from None


def validation_field(e: ValidationError) -> str:
    first = e.errors()[0]
    return '.'.join(str(p) for p in first['loc'])


def build_scene(source: Path | str | Mapping[str, Any]) -> Scene:
    """Build a scene from a JSON file or an already parsed mapping."""
    if isinstance(source, Mapping):
        data = source
    else:
        data = parse_json(Path(source).read_text(), str(source))
    try:
        spec = SceneSpec.model_validate(data)
    except ValidationError as e:
        raise SceneParseError(f'Invalid scene: {e.errors()[0]["msg"]}', field=validation_field(e)) from None
    scene = scene_from_spec(spec)
    logger.debug('Built scene with {} boxes and {} actors', len(scene.boxes), len(scene.actors))
    return scene


def returns_elevations(cloud: PointCloud) -> np.ndarray:
    """Elevation angle of every return in degrees, measured in the sensor frame."""
    p = cloud.points
    return np.degrees(np.arctan2(p[:, 2], np.hypot(p[:, 0], p[:, 1])))


def returns_azimuths(cloud: PointCloud) -> np.ndarray:
    p = cloud.points
    return np.degrees(np.arctan2(p[:, 1], p[:, 0]))
