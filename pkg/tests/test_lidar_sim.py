import math
from pathlib import Path

import numpy as np
import pytest
from devtools import debug

from s2s_net import EXAMPLE_SCENE_PATH
from s2s_net.base import ObjectClass, SensorKind, SensorName
from s2s_net.errors import ConfigurationError, SceneParseError
from s2s_net.lidar_sim import (
    Pose,
    Scene,
    SceneBox,
    SensorModel,
    build_scene,
    cast_rays,
    get_preset,
    returns_azimuths,
    returns_elevations,
    sensor_pose,
    sensor_presets,
    transform_points,
)


FIXTURES = Path(__file__).parent / 'fixtures'

# Four 10 m high walls around the sensor, so that upward layers return too
WALLS = Scene(
    boxes=(
        SceneBox('north', (30.0, 0.0, 5.0), (1.0, 62.0, 10.0)),
        SceneBox('south', (-30.0, 0.0, 5.0), (1.0, 62.0, 10.0)),
        SceneBox('east', (0.0, 30.0, 5.0), (62.0, 1.0, 10.0)),
        SceneBox('west', (0.0, -30.0, 5.0), (62.0, 1.0, 10.0)),
    )
)
ONE_BOX = Scene(boxes=(SceneBox('car', (8.0, 2.0, 0.75), (4.5, 1.9, 1.5), yaw=0.4),))


def surface_distance(world: np.ndarray, scene: Scene) -> np.ndarray:
    best = np.abs(world[:, 2] - scene.ground_z)
    for box in scene.boxes:
        local = Pose(*box.center, box.yaw).apply_inverse(world)
        half = np.array(box.size) / 2
        inside = np.all(np.abs(local) <= half + 1e-6, axis=1)
        to_face = np.min(half - np.abs(local), axis=1)
        best = np.where(inside, np.minimum(best, np.abs(to_face)), best)
    return best


def sensor_pose_of(vehicle: Pose, model: SensorModel) -> Pose:
    return vehicle.compose(model.mount)


def test_presets():
    hdl64, vlp32, cube = sensor_presets()
    debug(cube)
    assert (hdl64.n_layers, hdl64.azimuth_fov, hdl64.elevation_fov) == (64, 360.0, (-24.9, 2.0))
    assert (vlp32.n_layers, vlp32.azimuth_fov, vlp32.elevation_fov) == (32, 360.0, (-25.0, 15.0))
    assert cube.kind == SensorKind.SOLID_STATE
    assert (cube.n_layers, cube.azimuth_fov, cube.elevation_width) == (52, 70.0, 30.0)
    assert hdl64.kind == vlp32.kind == SensorKind.ROTATING


def test_get_preset():
    assert get_preset('VLP32') is get_preset(SensorName.VLP32)
    with pytest.raises(ConfigurationError):
        get_preset('HDL128')


def test_sensor_model_validation():
    with pytest.raises(ConfigurationError):
        SensorModel('none', SensorKind.ROTATING, 0, 360.0, (-10.0, 10.0), 0.2, 100.0)
    with pytest.raises(ConfigurationError):
        SensorModel('flat', SensorKind.ROTATING, 4, 360.0, (10.0, 10.0), 0.2, 100.0)
    with pytest.raises(ConfigurationError):
        SensorModel('blind', SensorKind.ROTATING, 4, 360.0, (-10.0, 10.0), 0.2, 0.0)


def test_ray_count():
    hdl64, vlp32, cube = sensor_presets()
    assert hdl64.ray_count == 64 * 1800
    assert vlp32.ray_count == 32 * 1800
    assert cube.ray_count == 52 * math.ceil(70 / 0.4)
    assert len(cube.ray_directions()) == cube.ray_count


def test_slanted_ground_range():
    model = SensorModel('down', SensorKind.ROTATING, 1, 360.0, (-46.0, -44.0), 1.0, 100.0, mount=Pose(0, 0, 2.0))
    cloud = cast_rays(model, Pose(), Scene())
    assert len(cloud) == 360
    ranges = np.linalg.norm(cloud.points, axis=1)
    np.testing.assert_allclose(ranges, 2 / math.sin(math.radians(45)), atol=1e-6)


def test_horizontal_rays_in_empty_scene():
    model = SensorModel('flat', SensorKind.ROTATING, 1, 360.0, (-1.0, 1.0), 1.0, 100.0)
    assert len(cast_rays(model, Pose(), Scene())) == 0


def test_hdl64_sees_every_layer():
    hdl64 = get_preset(SensorName.HDL64)
    cloud = cast_rays(hdl64, Pose(), WALLS)
    assert len(cloud) <= hdl64.ray_count
    elevations = np.sort(returns_elevations(cloud))
    # Layers are 0.43 degrees apart
    n_layers = 1 + int((np.diff(elevations) > 0.1).sum())
    assert n_layers == 64


def test_cube_field_of_view():
    cube = get_preset(SensorName.CUBE)
    cloud = cast_rays(cube, Pose(), WALLS)
    assert len(cloud)
    assert np.all(np.abs(returns_azimuths(cloud)) <= 35 + 1e-9)
    assert np.all(np.abs(returns_elevations(cloud)) <= 15 + 1e-9)


def test_cube_faces_vehicle_heading():
    cube = get_preset(SensorName.CUBE)
    pose = Pose(0.0, 0.0, 0.0, math.pi / 2)
    cloud = cast_rays(cube, pose, WALLS)
    world = sensor_pose_of(pose, cube).apply(cloud.points)
    # Looking along +y, the first thing hit is the east wall or the ground in front of it
    assert np.all(world[:, 1] > 0)


@pytest.mark.parametrize('name', list(SensorName))
def test_returns_lie_on_surfaces(name):
    model = get_preset(name)
    pose = Pose(0.0, 0.0, 0.0, 0.1)
    cloud = cast_rays(model, pose, ONE_BOX)
    world = sensor_pose_of(pose, model).apply(cloud.points)
    assert np.all(surface_distance(world, ONE_BOX) <= 1e-4)
    assert np.all(np.linalg.norm(cloud.points, axis=1) <= model.max_range)


def test_box_occludes_ground():
    model = get_preset(SensorName.HDL64)
    cloud = cast_rays(model, Pose(), ONE_BOX)
    world = Pose(0, 0, 1.9).apply(cloud.points)
    on_box = world[:, 2] > 1e-3
    assert on_box.sum() > 100


def test_exclude_own_box():
    model = get_preset(SensorName.VLP32)
    inside = Scene(boxes=(SceneBox('own', (0.0, 0.0, 0.75), (4.5, 1.9, 1.5)),))
    cloud = cast_rays(model, Pose(), inside, exclude=('own',))
    assert len(cloud) == len(cast_rays(model, Pose(), Scene()))


def test_noise_is_seeded():
    model = get_preset(SensorName.VLP32)
    a = cast_rays(model, Pose(), ONE_BOX, seed=3, noise_sigma=0.02)
    b = cast_rays(model, Pose(), ONE_BOX, seed=3, noise_sigma=0.02)
    c = cast_rays(model, Pose(), ONE_BOX, seed=4, noise_sigma=0.02)
    assert a == b
    assert a != c
    assert cast_rays(model, Pose(), ONE_BOX) == cast_rays(model, Pose(), ONE_BOX)


def test_noisy_ranges_stay_in_sensor_range():
    model = get_preset(SensorName.VLP32)
    cloud = cast_rays(model, Pose(), ONE_BOX, seed=1, noise_sigma=30.0)
    ranges = np.linalg.norm(cloud.points, axis=1)
    debug(ranges.min(), ranges.max())
    assert ranges.min() >= 0.0
    assert ranges.max() <= model.max_range + 1e-9
    assert (ranges == 0.0).any()


def test_pose_transforms():
    a = Pose(1.0, 2.0, 0.5, 0.7)
    b = Pose(-3.0, 4.0, 1.0, -1.2)
    points = np.array([[1.0, 0.0, 0.0], [0.5, -2.0, 3.0]])
    np.testing.assert_allclose(a.apply_inverse(a.apply(points)), points, atol=1e-12)
    there = transform_points(points, a, b)
    np.testing.assert_allclose(transform_points(there, b, a), points, atol=1e-12)
    np.testing.assert_allclose(b.apply(there), a.apply(points), atol=1e-12)
    inner = Pose(0.5, 0.0, 1.9, 0.1)
    np.testing.assert_allclose(a.compose(inner).apply(points), a.apply(inner.apply(points)), atol=1e-12)


def test_golden_scene():
    scene = build_scene(FIXTURES / 'scene.json')
    assert len(scene.boxes) == 10
    assert scene.actor_ids == ('cav_0', 'cav_1', 'cav_2')
    assert scene.actor('cav_1').box.center == (12.0, 3.5, 0.75)
    assert scene.actor('cav_1').sensors == (SensorName.VLP32, SensorName.CUBE)
    assert scene.actor('cav_0').sensors == tuple(SensorName)
    assert [b.label for b in scene.boxes].count(ObjectClass.VAN) == 2
    assert scene.boxes[8] == SceneBox('car_6', (45.0, 0.0, 0.75), (4.5, 1.9, 1.5), 0.3, ObjectClass.CAR)
    ego = scene.actor('cav_0')
    assert sensor_pose(ego, get_preset(SensorName.HDL64)) == Pose(0.0, 0.0, 1.9, 0.0)


def test_example_scene():
    scene = build_scene(EXAMPLE_SCENE_PATH)
    assert len(scene.actors) == 3
    assert len(scene.boxes) == 7


def test_ground_only_scene():
    scene = build_scene({'boxes': []})
    assert scene.boxes == ()
    assert scene.ground_z == 0.0


def test_scene_errors(tmp_path):
    path = tmp_path / 'scene.json'
    path.write_text('{\n  "boxes": [\n  ,\n]}')
    with pytest.raises(SceneParseError) as e:
        build_scene(path)
    assert e.value.line == 3
    with pytest.raises(SceneParseError) as e:
        build_scene({'boxes': [{'id': 'a', 'center': [0, 0, 0], 'size': [1, -1, 1]}]})
    assert e.value.field.startswith('boxes.0.size')
    with pytest.raises(SceneParseError) as e:
        build_scene({'actors': [{'id': 'cav', 'box': 'nowhere'}]})
    assert e.value.field == 'actors.0.box'
    with pytest.raises(SceneParseError):
        build_scene({'boxes': [{'id': 'a', 'center': [0, 0, 0], 'size': [1, 1, 1], 'label': 'Tram'}]})
