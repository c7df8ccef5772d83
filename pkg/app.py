#!/usr/bin/env python3

import os
import json
import sys


def get_config():
    """Load runtime settings based on environment."""
    env = os.getenv('ENV', 'dev')
    config_path = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config', f'config.{env}.json')

    try:
        with open(config_path, 'r') as f:
            return json.load(f)
    except FileNotFoundError:
        return {
            'env_name': env,
            'max_threads': 1,
            'log_level': os.getenv('LOG_LEVEL', 'INFO'),
            'output_dir': 'output'
        }


def main(argv=None):
    config = get_config()
    os.environ.setdefault('LOG_LEVEL', config.get('log_level', 'INFO'))

    from leverage_cycle_sim.cli.commands import run_command
    from leverage_cycle_sim.common.logger import configure_root_handler

    configure_root_handler(os.environ['LOG_LEVEL'])
    return run_command(sys.argv[1:] if argv is None else argv, runtime=config)


if __name__ == '__main__':
    sys.exit(main())
