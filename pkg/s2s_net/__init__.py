from pathlib import Path

from .base import ObjectClass, SensorName
from .grid import DESK_GRID, FULL_SCALE_GRID, GridConfig, PointCloud, SparseVoxelGrid


__version__ = '0.1.0'
EXAMPLE_SCENE_PATH = Path(__file__).parent / 'data' / 'example_scene.json'
EXAMPLE_SCENARIO_PATH = Path(__file__).parent / 'data' / 'example_scenario.json'
