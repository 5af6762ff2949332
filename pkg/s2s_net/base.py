from enum import Enum


class SensorName(str, Enum):
    HDL64 = 'HDL64'
    VLP32 = 'VLP32'
    CUBE = 'CUBE'


class SensorKind(str, Enum):
    ROTATING = 'rotating'
    SOLID_STATE = 'solid_state'


class ObjectClass(str, Enum):
    CAR = 'Car'
    VAN = 'Van'
    PEDESTRIAN = 'Pedestrian'
    CYCLIST = 'Cyclist'
    MOTORBIKE = 'Motorbike'


class ConvMode(str, Enum):
    SUBMANIFOLD = 'submanifold'
    STRIDED = 'strided'


class PolicyKind(str, Enum):
    FIXED = 'fixed'
    UNIFORM = 'uniform'
    RANDOM = 'random'


# Vehicles are matched at the stricter threshold, vulnerable road users at 0.5
IOU_THRESHOLDS: dict[ObjectClass, float] = {
    ObjectClass.CAR: 0.7,
    ObjectClass.VAN: 0.7,
    ObjectClass.PEDESTRIAN: 0.5,
    ObjectClass.CYCLIST: 0.5,
    ObjectClass.MOTORBIKE: 0.5,
}

N_RECALL_POINTS = 40
DEFAULT_SEED = 42
DEFAULT_CHANNELS = (16, 32, 64, 64)
DEFAULT_STRIDES = (1, 2, 2, 2)
CENTER_FEATURE_WIDTH = 3
# Largest coordinate value a wire message can carry
MAX_WIRE_DIM = 0xFFFF
