#!/usr/bin/env python

import os
import sys
import time
from dataclasses import replace
from enum import Enum
from pathlib import Path

import click
import logbook
import numpy as np
import rapidjson
from logbook import Logger
from logbook.more import ColorizedStderrHandler

from .base import DEFAULT_CHANNELS, DEFAULT_SEED, DEFAULT_STRIDES, ConvMode, SensorName
from .errors import S2SError
from .eval3d import EvalRange, evaluate_files
from .grid import DESK_GRID, GridConfig, PointCloud, SparseVoxelGrid, load_cloud, merge_grids
from .grid import center_features, save_cloud, voxelize_with_stats
from .harness import load_scenario, report_json, run_scenario, sweep_sender_domains, write_cav_csv, write_report
from .network import ModelWeights, init_weights, load_weights, save_bev, save_weights, scatter
from .network import forward as fuse
from .sparse_nn import ConvParams, conv
from .wire import bandwidth_report, decode, encode


logger = Logger(__name__)

LOG_LEVEL_ENV = 'S2S_LOG_LEVEL'


class LogLevel(str, Enum):
    WARNING = 'WARNING'
    INFO = 'INFO'
    DEBUG = 'DEBUG'


def echo(msg: str):
    click.secho(msg, file=sys.stderr, fg='green')


class EnumChoice(click.Choice):
    def __init__(self, enum_class):
        super().__init__(tuple(e.value for e in enum_class))
        self.enum_class = enum_class

    def convert(self, value, param, ctx):
        value = super().convert(value, param, ctx)
        return next(e for e in self.enum_class if e.value == value)


class NumberTuple(click.ParamType):
    """Comma-separated numbers without spaces, like ``-140,-40,-4``."""

    name = 'numbers'

    def __init__(self, size: int, cast=float):
        self.size = size
        self.cast = cast

    def convert(self, value, param, ctx):
        if isinstance(value, tuple):
            return value
        try:
            numbers = tuple(self.cast(v) for v in value.split(','))
        except ValueError:
            self.fail(f'{value!r} is not a comma-separated list of numbers', param, ctx)
        if self.size and len(numbers) != self.size:
            self.fail(f'expected {self.size} comma-separated values, got {len(numbers)}', param, ctx)
        return numbers


class MyColorizedStderrHandler(ColorizedStderrHandler):
    default_format_string = '{record.level_name}: {record.message}'

    def get_color(self, record):
        color = super().get_color(record)
        if logbook.DEBUG < record.level <= logbook.INFO:
            return 'darkteal'
        return color


def configure_logging(verbose: int):
    levels = (logbook.WARNING, logbook.INFO, logbook.DEBUG)
    if not verbose and os.environ.get(LOG_LEVEL_ENV):
        try:
            level = logbook.lookup_level(LogLevel(os.environ[LOG_LEVEL_ENV].upper()).value)
        except ValueError:
            raise click.UsageError(f'{LOG_LEVEL_ENV} must be one of {[e.value for e in LogLevel]}') from None
    else:
        level = levels[min(verbose, len(levels) - 1)]
    colored_handler = MyColorizedStderrHandler(level=level)
    colored_handler.push_application()


def error_line(error: Exception, exit_code: int = 1) -> str:
    return rapidjson.dumps({'error': type(error).__name__, 'message': str(error), 'exit_code': exit_code})


class S2SGroup(click.Group):
    """
    Report every failure as one JSON line on stderr.

    Package and file errors exit with status 1. Usage errors keep Click's usage text and status 2.
    """

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent, **extra)
        except click.UsageError as e:
            click.echo(error_line(e, e.exit_code), err=True)
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            click.echo(error_line(e, e.exit_code), err=True)
            raise
        except (S2SError, OSError) as e:
            click.echo(error_line(e), err=True)
            ctx.exit(1)


def grid_config(desk: bool, origin: tuple, voxel: tuple, extent: tuple) -> GridConfig:
    if desk:
        return DESK_GRID
    return GridConfig.from_extent(origin, voxel, extent)


def grid_options(func):
    options = (
        click.option('--desk', is_flag=True, help='Use the 64x64x8 test grid instead of the grid options.'),
        click.option('--origin', type=NumberTuple(3), default='-140,-40,-4',
                     show_default=True, help='Grid origin x,y,z in meters.'),
        click.option('--voxel', type=NumberTuple(3), default='0.05,0.05,0.1',
                     show_default=True, help='Voxel size x,y,z in meters.'),
        click.option('--extent', type=NumberTuple(3), default='280,80,4',
                     show_default=True, help='Grid extent x,y,z in meters.'),
    )
    for option in reversed(options):
        func = option(func)
    return func


def get_weights(weights_path: str | None, seed: int) -> ModelWeights:
    if weights_path:
        logger.info('Loading weights from {}', weights_path)
        return load_weights(Path(weights_path))
    logger.info('Initializing weights with seed {}', seed)
    return init_weights(seed)


@click.group(cls=S2SGroup)
@click.option('-v', '--verbose', count=True, default=False,
              help=f'Show more log to debug (verbose mode). Without it, {LOG_LEVEL_ENV} sets the level.')
def main(verbose: int):
    configure_logging(verbose)


@main.command()
@click.option('-i', '--in', 'input_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Point cloud, ".xyz" text or raw binary.')
@click.option('-o', '--out', 'output', required=True, type=click.Path(dir_okay=False, writable=True))
@grid_options
def voxelize(input_path: str, output: str, desk: bool, origin: tuple, voxel: tuple, extent: tuple):
    """Voxelize a point cloud into a wire message."""
    config = grid_config(desk, origin, voxel, extent)
    cloud = load_cloud(Path(input_path))
    grid, dropped = voxelize_with_stats(cloud, config)
    message = encode(grid)
    Path(output).write_bytes(message)
    if dropped:
        logger.warning('{} points fell outside the grid', dropped)
    report = bandwidth_report(cloud, grid)
    echo(f'Wrote {len(grid)} voxels of a {"x".join(map(str, config.dims))} grid to {output} '
         f'({report.wire_bytes} bytes, {report.reduction:.1%} smaller than the points)')


@main.command()
@click.argument('message_path', type=click.Path(exists=True, dir_okay=False))
def inspect(message_path: str):
    """Print the statistics of a wire message as JSON."""
    data = Path(message_path).read_bytes()
    grid = decode(data)
    stats = {
        'origin': grid.config.origin,
        'voxel_size': grid.config.voxel_size,
        'dims': grid.config.dims,
        'count': len(grid),
        'bytes': len(data),
    }
    if len(grid):
        stats['coord_min'] = tuple(int(v) for v in grid.coords.min(axis=0))
        stats['coord_max'] = tuple(int(v) for v in grid.coords.max(axis=0))
    click.echo(rapidjson.dumps(stats))


@main.command()
@click.option('-s', '--scenario', 'scenario_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('-o', '--out', 'output', required=True, type=click.Path(file_okay=False, writable=True),
              help='Output folder.')
@click.option('--weights', 'weights_path', type=click.Path(exists=True, dir_okay=False),
              help='Weight file. Without it, weights are drawn from --seed.')
@click.option('--seed', default=DEFAULT_SEED, show_default=True, help='Seed of the generated weights.')
@click.option('--ego-sensor', type=EnumChoice(SensorName), help='Sensor of the ego, whatever the policy says.')
@click.option('--desk', is_flag=True, help='Replace the scenario grid with the 64x64x8 test grid.')
@click.option('--sweep', is_flag=True, help='Run every sender domain plus a random assignment, keep the ego sensor.')
@click.option('--threads', default=1, show_default=True, type=click.IntRange(min=1))
@click.option('--timing', is_flag=True, help='Add wall-clock timing to the report.')
@click.option('--dump-clouds', is_flag=True, help='Also write every cropped point cloud and wire message.')
def simulate(scenario_path: str, output: str, weights_path: str | None, seed: int, ego_sensor: SensorName | None,
             desk: bool, sweep: bool, threads: int, timing: bool, dump_clouds: bool):
    """Run a collective-perception scenario."""
    scenario = load_scenario(Path(scenario_path))
    if ego_sensor:
        scenario = replace(scenario, ego_sensor=ego_sensor)
    if desk:
        scenario = replace(scenario, grid=DESK_GRID)
    weights = get_weights(weights_path, seed)
    folder = Path(output)
    folder.mkdir(parents=True, exist_ok=True)
    if sweep:
        record = sweep_sender_domains(scenario, weights, threads)
        (folder / 'sweep.json').write_text(report_json(record) + '\n')
        echo(f'Wrote sender domain sweep to {folder / "sweep.json"}')
        return
    report = run_scenario(scenario, weights, threads)
    write_report(report, folder / 'report.json', with_timing=timing)
    write_cav_csv(report.record, folder / 'cavs.csv')
    for frame in report.frames:
        save_bev(frame.bev, folder / f'bev_{frame.index}.bin')
        if not dump_clouds:
            continue
        for cav, out in frame.cavs.items():
            save_cloud(out.cloud, folder / f'{cav}_{frame.index}.xyz')
            (folder / f'{cav}_{frame.index}.s2s').write_bytes(out.message)
    echo(f'Wrote report of {len(report.frames)} frames to {folder}')


@main.command()
@click.option('-e', '--ego', 'ego_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Wire message of the ego grid.')
@click.option('-c', '--collective', 'collective_paths', multiple=True, type=click.Path(exists=True, dir_okay=False),
              help='Wire message received from another vehicle, can be repeated.')
@click.option('--weights', 'weights_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--seed', default=DEFAULT_SEED, show_default=True, help='Seed of the generated weights.')
@click.option('-o', '--out', 'output', required=True, type=click.Path(dir_okay=False, writable=True))
def forward(ego_path: str, collective_paths: tuple[str, ...], weights_path: str | None, seed: int, output: str):
    """Fuse wire messages through the network and dump the BEV feature map."""
    ego = decode(Path(ego_path).read_bytes())
    received = [decode(Path(p).read_bytes()) for p in collective_paths]
    collective = merge_grids(received) if received else SparseVoxelGrid(ego.config)
    bev = fuse(ego, collective, get_weights(weights_path, seed))
    save_bev(bev, Path(output))
    echo(f'Wrote BEV map of shape {bev.shape} to {output}')


@main.command('init-weights')
@click.option('-o', '--out', 'output', required=True, type=click.Path(dir_okay=False, writable=True))
@click.option('--seed', default=DEFAULT_SEED, show_default=True)
@click.option('--channels', type=NumberTuple(0, int), default=','.join(map(str, DEFAULT_CHANNELS)), show_default=True)
@click.option('--strides', type=NumberTuple(0, int), default=','.join(map(str, DEFAULT_STRIDES)), show_default=True)
def init_weights_command(output: str, seed: int, channels: tuple[int, ...], strides: tuple[int, ...]):
    """Write randomly initialized weights."""
    save_weights(init_weights(seed, channels, strides), Path(output))
    echo(f'Wrote weights with channel plan {channels} to {output}')


@main.command()
@click.option('-d', '--dets', 'dets_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('-g', '--gts', 'gts_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--range', 'eval_range', type=NumberTuple(6), default='-140,140,-40,40,-4,1', show_default=True,
              help='xmin,xmax,ymin,ymax,zmin,zmax in meters.')
@click.option('-o', '--out', 'output', type=click.Path(dir_okay=False, writable=True),
              help='Also write the table to this file.')
def evaluate(dets_path: str, gts_path: str, eval_range: tuple, output: str | None):
    """Per-class average precision of detections against ground truth, as JSON."""
    x0, x1, y0, y1, z0, z1 = eval_range
    rows = evaluate_files(Path(dets_path), Path(gts_path), EvalRange((x0, x1), (y0, y1), (z0, z1)))
    table = rapidjson.dumps([r.model_dump(mode='json') for r in rows], indent=2)
    click.echo(table)
    if output:
        Path(output).write_text(table + '\n')


def _timed(func, repeat: int) -> float:
    best = float('inf')
    for _i in range(repeat):
        start = time.perf_counter()
        func()
        best = min(best, time.perf_counter() - start)
    return best


@main.command()
@click.option('--sizes', type=NumberTuple(0, int), default='1000,10000', show_default=True,
              help='Point counts of the synthetic clouds.')
@click.option('--seed', default=DEFAULT_SEED, show_default=True)
@click.option('--repeat', default=3, show_default=True, type=click.IntRange(min=1))
def bench(sizes: tuple[int, ...], seed: int, repeat: int):
    """Time voxelization, scatter and convolution on the test grid, best of --repeat runs."""
    rng = np.random.default_rng(seed)
    low = DESK_GRID.origin_array
    high = low + DESK_GRID.size
    kernel = rng.standard_normal((3, 3, 3, 3, 16)).astype(np.float32)
    params = {mode: ConvParams(kernel, (2, 2, 2) if mode == ConvMode.STRIDED else (1, 1, 1), mode) for mode in ConvMode}
    results = []
    for n in sizes:
        a = PointCloud(rng.uniform(low, high, (n, 3)))
        b = PointCloud(rng.uniform(low, high, (n, 3)))
        grid_a = voxelize_with_stats(a, DESK_GRID).grid
        ta = center_features(grid_a)
        tb = center_features(voxelize_with_stats(b, DESK_GRID).grid)
        results.append({
            'points': n,
            'voxels': len(grid_a),
            'voxelize': _timed(lambda: voxelize_with_stats(a, DESK_GRID), repeat),
            'scatter': _timed(lambda: scatter(ta, tb), repeat),
            'submanifold_conv': _timed(lambda: conv(ta, params[ConvMode.SUBMANIFOLD]), repeat),
            'strided_conv': _timed(lambda: conv(ta, params[ConvMode.STRIDED]), repeat),
        })
    click.echo(rapidjson.dumps(results, indent=2))


if __name__ == '__main__':
    main()
