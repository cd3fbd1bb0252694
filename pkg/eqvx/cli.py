'''
Command line entry point.

Exit codes: 0 success, 2 input or format error, 3 config error,
4 verification failure.
'''
import functools
import logging
import os
import sys
from typing import Callable, Optional

import click

from eqvx import __version__
from eqvx.augment import augment_directory
from eqvx.config import PipelineConfig, load_config
from eqvx.exceptions import (ConfigError, EqvxError, FormatError, InvalidArgumentError,
                             RefusalError, StageError, VerificationError)
from eqvx.pipeline import REPORT_NAME, build_model, check_equivariance, run_pipeline, save_model
from eqvx.scene import write_mini_scene

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_VERIFY = 4


def _exit_code(error: BaseException) -> int:
    cause = error.__cause__ if isinstance(error, StageError) and error.__cause__ else error
    if isinstance(cause, (ConfigError, RefusalError)):
        return EXIT_CONFIG
    if isinstance(cause, VerificationError):
        return EXIT_VERIFY
    if isinstance(cause, (FormatError, InvalidArgumentError, OSError)):
        return EXIT_INPUT
    return 1


def _handle_errors(fn: Callable) -> Callable:
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (EqvxError, OSError) as e:
            click.echo(f'error: {e}', err=True)
            sys.exit(_exit_code(e))
    return wrapper


def _load(ctx: click.Context) -> PipelineConfig:
    options = ctx.obj
    config = load_config(options['config'])
    overrides = {}
    if options['seed'] is not None:
        overrides['run.seed'] = options['seed']
        overrides['aug.seed'] = options['seed']
    if options['threads'] is not None:
        overrides['run.threads'] = options['threads']
    if options['precision'] is not None:
        overrides['run.precision'] = options['precision']
    return config.override(**overrides).validate() if overrides else config


@click.group()
@click.version_option(__version__)
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='Flat key = value config file.')
@click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=None, help='Seed for weights and augmentation.')
@click.option('--threads', type=click.IntRange(1), default=None, help='Worker threads.')
@click.option('--precision', type=click.Choice(['verify', 'fast']), default=None,
              help='verify computes in 64-bit, fast in 32-bit.')
@click.option('-v', '--verbose', count=True, help='Repeat for more log output.')
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], seed: Optional[int], threads: Optional[int],
        precision: Optional[str], verbose: int):
    'Transformation-equivariant feature extraction for LiDAR scans.'
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(level=level, format='%(asctime)s %(name)s %(levelname)s %(message)s', force=True)
    ctx.obj = {'config': config_path, 'seed': seed, 'threads': threads, 'precision': precision}


def _io_options(fn: Callable) -> Callable:
    fn = click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True,
                      help='Output directory.')(fn)
    fn = click.option('--boxes', 'boxes_path', type=click.Path(dir_okay=False), required=True,
                      help='Box file, one "x y z l w h yaw [score]" per line.')(fn)
    fn = click.option('--scan', 'scan_path', type=click.Path(dir_okay=False), required=True,
                      help='Velodyne .bin scan.')(fn)
    return fn


def _stage_command(name: str, stage: str, summary: str):
    @cli.command(name=name, help=summary)
    @_io_options
    @click.pass_context
    @_handle_errors
    def command(ctx: click.Context, scan_path: str, boxes_path: str, out_dir: str):
        config = _load(ctx)
        manifest = run_pipeline(config, scan_path, boxes_path, out_dir,
                                stop_after=stage)
        click.echo('\n'.join(manifest.to_lines()))
    return command


voxelize = _stage_command('voxelize', 'voxelize', 'Voxelize every transformed copy of the scan.')
backbone = _stage_command('backbone', 'backbone', 'Run the shared sparse backbone on every channel.')
tebev = _stage_command('tebev', 'tebev', 'Write the aligned and max-pooled BEV map.')
tivoxel = _stage_command('tivoxel', 'tivoxel', 'Write the pooled per-proposal features.')
run = _stage_command('run', 'tivoxel', 'Run the full pipeline.')


@cli.command()
@click.option('--scan', 'scan_path', type=click.Path(dir_okay=False), required=True)
@click.option('--boxes', 'boxes_path', type=click.Path(dir_okay=False), required=True)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None,
              help='Directory for report.txt; printed only when omitted.')
@click.pass_context
@_handle_errors
def check(ctx: click.Context, scan_path: str, boxes_path: str, out_dir: Optional[str]):
    'Measure channel-permutation, BEV and instance-feature equivariance residuals.'
    config = _load(ctx)
    report = check_equivariance(config, scan_path, boxes_path)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        report.write(os.path.join(out_dir, REPORT_NAME))
    click.echo('\n'.join(report.to_lines()))
    if not report.passed:
        raise VerificationError('equivariance report did not pass')


@cli.command()
@click.option('--scan', 'scan_path', type=click.Path(dir_okay=False), required=True)
@click.option('--boxes', 'boxes_path', type=click.Path(dir_okay=False), required=True)
@click.option('--bank', 'bank_dir', type=click.Path(file_okay=False), required=True,
              help='Directory of <name>.txt / <name>.bin object pairs.')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True)
@click.pass_context
@_handle_errors
def augment(ctx: click.Context, scan_path: str, boxes_path: str, bank_dir: str, out_dir: str):
    'Insert distance-shifted, resampled bank objects into a scan.'
    config = _load(ctx)
    for path in augment_directory(scan_path, boxes_path, bank_dir, out_dir, config.aug, config.lidar):
        click.echo(path)


@cli.command(name='export-weights')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True)
@click.option('--point-features', type=click.IntRange(1), default=1, show_default=True,
              help='Feature channels per point the backbone expects.')
@click.pass_context
@_handle_errors
def export_weights(ctx: click.Context, out_dir: str, point_features: int):
    'Write the configured backbone and TiVoxel weights as EQVX files.'
    config = _load(ctx)
    for path in save_model(build_model(config, point_features), out_dir):
        click.echo(path)


@cli.command(name='make-scene')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True)
@click.option('--points', 'num_points', type=click.IntRange(10), default=20000, show_default=True)
@click.pass_context
@_handle_errors
def make_scene(ctx: click.Context, out_dir: str, num_points: int):
    'Write the synthetic mini scene, its boxes and an object bank.'
    seed = ctx.obj['seed'] if ctx.obj['seed'] is not None else 0
    for path in write_mini_scene(out_dir, seed, num_points):
        click.echo(path)


if __name__ == '__main__':
    cli()
