#! /usr/bin/env python

import argparse
import os
import sys
import logging
import logging.config

import torch
from cellmaps_utils import logutils
from cellmaps_utils import constants

import vibration_dino
from vibration_dino import config as configlib
from vibration_dino import signals
from vibration_dino.dino import ABLATIONS, apply_ablation
from vibration_dino.exceptions import ConfigurationError
from vibration_dino.runner import CONFIG_FILE
from vibration_dino.runner import SynthRunner, IngestRunner, PreprocessRunner
from vibration_dino.runner import TrainRunner, EvalRunner, DiagnoseRunner
from vibration_dino.runner import AttentionRunner, SweepRunner

logger = logging.getLogger(__name__)

SYNTH_MODE = 'synth'
INGEST_MODE = 'ingest'
PREPROCESS_MODE = 'preprocess'
TRAIN_MODE = 'train'
EVAL_MODE = 'eval'
DIAGNOSE_MODE = 'diagnose'
ATTENTION_MODE = 'attention'
SWEEP_MODE = 'sweep'


def _common_arguments():
    """
    Parser holding the flags every command accepts
    """
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('outdir', help='Output directory')
    parser.add_argument('--config', default=None,
                        help='Path to flat key = value configuration file. '
                             'For eval and attention, defaults to the ' + CONFIG_FILE +
                             ' next to the checkpoint when present')
    parser.add_argument('--seed', type=int, default=None,
                        help='Seed all randomness is derived from')
    parser.add_argument('--threads', type=int, default=None,
                        help='Worker threads for preprocessing and torch '
                             '(default: available parallelism)')
    parser.add_argument('--force', action='store_true',
                        help='Write into an existing non empty output directory')
    parser.add_argument('--ablation', choices=ABLATIONS, default=None,
                        help='Centering/sharpening design to use. Setting this '
                             'also permits teacher_temp >= student_temp')
    overrides = parser.add_argument_group('configuration overrides',
                                          'Override single configuration '
                                          'keys, taking precedence over --config')
    for key in configlib.config_keys():
        if key in configlib.TOP_LEVEL_KEYS:
            continue
        overrides.add_argument('--' + key, dest='override_' + key, default=None,
                               metavar='VALUE')
    parser.add_argument('--logconf', default=None,
                        help='Path to python logging configuration file in '
                             'this format: https://docs.python.org/3/library/'
                             'logging.config.html#logging-config-fileformat '
                             'Setting this overrides -v parameter which uses '
                             ' default logger. (default None)')
    parser.add_argument('--skip_logging', action='store_true',
                        help='If set, output.log, error.log '
                             'files will not be created')
    parser.add_argument('--verbose', '-v', action='count', default=1,
                        help='Increases verbosity of logger to standard '
                             'error for log messages in this module. Messages are '
                             'output at these python logging levels '
                             '-v = WARNING, -vv = INFO, '
                             '-vvv = DEBUG, -vvvv = NOTSET (default ERROR '
                             'logging)')
    return parser


def _parse_arguments(desc, args):
    """
    Parses command line arguments

    :param desc: description to display on command line
    :type desc: str
    :param args: command line arguments usually :py:func:`sys.argv[1:]`
    :type args: list
    :return: arguments parsed by :py:mod:`argparse`
    :rtype: :py:class:`argparse.Namespace`
    """
    parser = argparse.ArgumentParser(description=desc,
                                     formatter_class=constants.ArgParseFormatter)
    parser.add_argument('--version', action='version',
                        version=('%(prog)s ' +
                                 vibration_dino.__version__))
    subparsers = parser.add_subparsers(dest='command',
                                       help='Command to run')
    subparsers.required = True
    common = _common_arguments()

    synth = subparsers.add_parser(SYNTH_MODE, parents=[common],
                                  formatter_class=constants.ArgParseFormatter,
                                  help='Generate synthetic fault signals and '
                                       'a manifest')
    synth.add_argument('--n_per_class', type=int, default=200,
                       help='Signals per class')
    synth.add_argument('--classes', type=int, default=signals.DEFAULT_N_CLASSES,
                       help='Number of fault classes (1-' + str(signals.MAX_CLASSES) + ')')

    ingest = subparsers.add_parser(INGEST_MODE, parents=[common],
                                   formatter_class=constants.ArgParseFormatter,
                                   help='Segment recorded signals listed in a '
                                        'path,class CSV and write a manifest')
    ingest.add_argument('--inputs', required=True,
                        help='CSV file with path and class columns')
    ingest.add_argument('--binary', action='store_true',
                        help='Write windows in the binary signal format')

    preprocess = subparsers.add_parser(PREPROCESS_MODE, parents=[common],
                                       formatter_class=constants.ArgParseFormatter,
                                       help='Convert signals to time-frequency maps')
    preprocess.add_argument('--manifest', required=True,
                            help='Signal manifest (path,class,split)')

    train = subparsers.add_parser(TRAIN_MODE, parents=[common],
                                  formatter_class=constants.ArgParseFormatter,
                                  help='Self-distillation training')
    train.add_argument('--manifest', required=True,
                       help='Map manifest written by ' + PREPROCESS_MODE)
    train.add_argument('--resume', action='store_true',
                       help='Continue from the latest checkpoint in outdir')

    evaluate = subparsers.add_parser(EVAL_MODE, parents=[common],
                                     formatter_class=constants.ArgParseFormatter,
                                     help='Nearest neighbor evaluation with the '
                                          'labeled split as bank')
    evaluate.add_argument('--manifest', required=True,
                          help='Map manifest written by ' + PREPROCESS_MODE)
    evaluate.add_argument('--checkpoint', required=True,
                          help='Checkpoint written by ' + TRAIN_MODE)
    evaluate.add_argument('--neighbors', default=None,
                          help='Comma separated n_neighbors values to sweep, '
                               'for example 1,3,5,7')
    evaluate.add_argument('--baseline_untrained', action='store_true',
                          help='Also evaluate a randomly initialized encoder')
    evaluate.add_argument('--exclude_self', action='store_true',
                          help='Use the labeled rows as both bank and queries, '
                               'leaving each query out of its own vote')

    diagnose = subparsers.add_parser(DIAGNOSE_MODE, parents=[common],
                                     formatter_class=constants.ArgParseFormatter,
                                     help='Mode collapse verdict for a metrics log')
    diagnose.add_argument('--metrics', default=None,
                          help='metrics.jsonl written by ' + TRAIN_MODE)
    diagnose.add_argument('--manifest', default=None,
                          help='Map manifest, needed with --run_ablations')
    diagnose.add_argument('--run_ablations', action='store_true',
                          help='Train all four centering/sharpening designs '
                               'and tabulate them')

    attention = subparsers.add_parser(ATTENTION_MODE, parents=[common],
                                      formatter_class=constants.ArgParseFormatter,
                                      help='Export attention maps for one map')
    attention.add_argument('--checkpoint', required=True,
                           help='Checkpoint written by ' + TRAIN_MODE)
    attention.add_argument('--tfm', required=True,
                           help='Time-frequency map file')
    attention.add_argument('--keep_mass', type=float, default=0.9,
                           help='Attention mass kept by the thresholded map')

    sweep = subparsers.add_parser(SWEEP_MODE, parents=[common],
                                  formatter_class=constants.ArgParseFormatter,
                                  help='Train and evaluate over a grid of '
                                       'configuration values')
    sweep.add_argument('--manifest', required=True,
                       help='Map manifest written by ' + PREPROCESS_MODE)
    sweep.add_argument('--grid', action='append', default=[],
                       help='key=v1,v2,... grid axis, may be repeated')

    return parser.parse_args(args)


def _parse_grid(entries):
    """
    Converts ``key=v1,v2`` entries to a dict of key to value lists
    """
    grid = {}
    keys = configlib.config_keys()
    for entry in entries:
        if '=' not in entry:
            raise ConfigurationError('Grid entry must be key=v1,v2: ' + entry)
        key, values = entry.split('=', 1)
        key = key.strip()
        if key not in keys:
            raise ConfigurationError('Unknown configuration key in grid: ' + key)
        grid[key] = [v.strip() for v in values.split(',') if v.strip() != '']
    return grid


def _config_path(theargs):
    if theargs.config is not None:
        return theargs.config
    checkpoint = getattr(theargs, 'checkpoint', None)
    if checkpoint is not None:
        # checkpoints live in <train outdir>/checkpoints/ or directly in it
        for cand in (os.path.dirname(os.path.abspath(checkpoint)),
                     os.path.dirname(os.path.dirname(os.path.abspath(checkpoint)))):
            if os.path.isfile(os.path.join(cand, CONFIG_FILE)):
                return os.path.join(cand, CONFIG_FILE)
    return None


def load_run_config(theargs):
    """
    Effective configuration: file, then command line overrides, then
    the ablation design

    :raises ConfigurationError: if the result fails validation
    :rtype: :py:class:`~vibration_dino.config.RunConfig`
    """
    overrides = {}
    for key in configlib.config_keys():
        value = getattr(theargs, 'override_' + key, None)
        if value is not None:
            overrides[key] = value
    if theargs.seed is not None:
        overrides['seed'] = theargs.seed
    if theargs.threads is not None:
        overrides['threads'] = theargs.threads
    config = configlib.load_config(_config_path(theargs), overrides=overrides)
    if theargs.ablation is not None:
        config = apply_ablation(config, theargs.ablation)
    return config.validate(ablation=theargs.ablation is not None)


def _build_runner(theargs, config):
    kwargs = {'outdir': theargs.outdir,
              'config': config,
              'skip_logging': theargs.skip_logging,
              'force': theargs.force,
              'input_data_dict': theargs.__dict__}
    if theargs.command == SYNTH_MODE:
        return SynthRunner(n_per_class=theargs.n_per_class, n_classes=theargs.classes, **kwargs)
    if theargs.command == INGEST_MODE:
        return IngestRunner(inputs=theargs.inputs, binary=theargs.binary, **kwargs)
    if theargs.command == PREPROCESS_MODE:
        return PreprocessRunner(manifest=theargs.manifest, **kwargs)
    if theargs.command == TRAIN_MODE:
        return TrainRunner(manifest=theargs.manifest, resume=theargs.resume, **kwargs)
    if theargs.command == EVAL_MODE:
        neighbors = None
        if theargs.neighbors is not None:
            neighbors = [int(v) for v in theargs.neighbors.split(',') if v.strip() != '']
        return EvalRunner(manifest=theargs.manifest, checkpoint=theargs.checkpoint,
                          neighbors=neighbors, baseline_untrained=theargs.baseline_untrained,
                          exclude_self=theargs.exclude_self, **kwargs)
    if theargs.command == DIAGNOSE_MODE:
        return DiagnoseRunner(metrics=theargs.metrics, manifest=theargs.manifest,
                              run_ablations=theargs.run_ablations, **kwargs)
    if theargs.command == ATTENTION_MODE:
        return AttentionRunner(checkpoint=theargs.checkpoint, tfm=theargs.tfm,
                               keep_mass=theargs.keep_mass, **kwargs)
    return SweepRunner(manifest=theargs.manifest, grid=_parse_grid(theargs.grid), **kwargs)


def main(args):
    """
    Main entry point for program

    :param args: arguments passed to command line usually :py:func:`sys.argv[1:]`
    :type args: list

    :return: return value of the ``run()`` method of the command's runner
             in :py:mod:`vibration_dino.runner` or ``2`` if an exception
             is raised
    :rtype: int
    """
    desc = """
Version {version}

Limited-label bearing fault diagnosis by self-distillation.

Vibration signals are converted to wavelet time-frequency maps, a
Vision Transformer is trained on them without labels against an
exponential moving average teacher, and faults are diagnosed with a
nearest neighbor classifier whose bank holds only the few labeled
samples.

Typical sequence: synth (or ingest), preprocess, train, eval. Use
diagnose to check a run for mode collapse and attention to export
the encoder's attention maps.

    """.format(version=vibration_dino.__version__)
    theargs = _parse_arguments(desc, args[1:])
    theargs.program = args[0]
    theargs.version = vibration_dino.__version__

    try:
        logutils.setup_cmd_logging(theargs)
        config = load_run_config(theargs)
        if config.threads is not None:
            torch.set_num_threads(config.threads)
        return _build_runner(theargs, config).run()
    except Exception as e:
        logger.exception('Caught exception: ' + str(e))
        return 2
    finally:
        logging.shutdown()


if __name__ == '__main__':  # pragma: no cover
    sys.exit(main(sys.argv))
