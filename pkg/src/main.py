import argparse
import logging
import sys

from errors import CheckpointError, ConfigError, InvalidInputError, NumericError
from evaluator import METHODS
from experiment import (SWEEP_AXES, ExperimentConfig, cmd_attribute, cmd_attribution_accuracy, cmd_eval,
                        cmd_export_embeddings, cmd_sweep, cmd_train, parse_labeled)
from utils import ConfigManager, setup_logging

logger = logging.getLogger('provenancer')

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def build_parser():
    parser = argparse.ArgumentParser(
        prog='provenancer',
        description='Few-shot origin attribution of generated images with learned prompts.',
    )
    subparsers = parser.add_subparsers(dest='command', required=True)

    def add_common(sub):
        sub.add_argument('config', help='Experiment configuration (YAML)')
        sub.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                         help='Override a configuration value, e.g. --set train.epochs=50 (repeatable)')

    def add_methods(sub):
        sub.add_argument('--methods', nargs='+', choices=METHODS, default=None,
                         help='Methods reported side by side (overrides eval.methods)')

    add_common(subparsers.add_parser('train', help='Train one classifier per repetition seed'))
    evaluate = subparsers.add_parser('eval', help='Evaluate trained classifiers on every test dataset')
    add_common(evaluate)
    add_methods(evaluate)

    sweep = subparsers.add_parser('sweep', help='Train and evaluate over the values of one axis')
    add_common(sweep)
    add_methods(sweep)
    sweep.add_argument('--axis', required=True, choices=SWEEP_AXES)

    attribute = subparsers.add_parser('attribute', help='Attribute images with an ensemble manifest')
    attribute.add_argument('manifest', help='Ensemble manifest (YAML)')
    attribute.add_argument('images', nargs='*', help='Image files or directories')
    attribute.add_argument('--config', default=None, help='Experiment configuration (YAML)')
    attribute.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE')
    attribute.add_argument('--labeled', action='append', default=[], metavar='NAME=DIR',
                           help="Directory of images from a known source (an ensemble class or 'others'); "
                                "reports the attribution accuracy (repeatable)")
    attribute.add_argument('--direct', action='store_true',
                           help='Also train and score a direct multi-class classifier on the manifest datasets')

    export = subparsers.add_parser('export-embeddings', help='Dump image embeddings for external projection')
    add_common(export)
    export.add_argument('datasets', nargs='+', help='Dataset directories')
    return parser


class ProvenancerApp:
    def __init__(self, argv=None):
        """
        Parse the command line. argparse exits with status 2 on usage errors.
        """
        self.args = build_parser().parse_args(argv)

    def load_config(self):
        overrides = list(self.args.overrides)
        if getattr(self.args, 'methods', None):
            overrides.append(f"eval.methods=[{', '.join(self.args.methods)}]")
        ConfigManager.initialize(self.args.config, overrides)
        setup_logging(ConfigManager.get_config_value('misc', 'log_level'))
        return ExperimentConfig.from_config(ConfigManager.get_config())

    def attribute(self, cfg):
        args = self.args
        if args.direct and not args.labeled:
            raise ConfigError('--direct', "needs labeled images (--labeled NAME=DIR)")
        if not args.images and not args.labeled:
            raise ConfigError('images', "give image paths or --labeled directories")
        labeled = parse_labeled(args.labeled)
        if args.images:
            records, failures = cmd_attribute(cfg, args.manifest, args.images)
            if records and failures == len(records):
                logger.error('No image could be attributed')
                return EXIT_RUNTIME
        if labeled:
            cmd_attribution_accuracy(cfg, args.manifest, labeled, direct=args.direct)
        return EXIT_OK

    def dispatch(self, cfg):
        command = self.args.command
        if command == 'train':
            cmd_train(cfg)
        elif command == 'eval':
            cmd_eval(cfg)
        elif command == 'sweep':
            cmd_sweep(cfg, self.args.axis)
        elif command == 'attribute':
            return self.attribute(cfg)
        elif command == 'export-embeddings':
            cmd_export_embeddings(cfg, self.args.datasets)
        return EXIT_OK

    def run(self):
        """
        Run the selected command and return the exit code.
        """
        try:
            cfg = self.load_config()
        except ConfigError as e:
            logger.error(f'Configuration error: {e}')
            return EXIT_USAGE
        try:
            return self.dispatch(cfg)
        except ConfigError as e:
            logger.error(f'Configuration error: {e}')
            return EXIT_USAGE
        except (InvalidInputError, NumericError, CheckpointError, RuntimeError, OSError) as e:
            logger.error(f'{type(e).__name__}: {e}')
            return EXIT_RUNTIME


def main(argv=None):
    return ProvenancerApp(argv).run()


if __name__ == '__main__':
    sys.exit(main())
