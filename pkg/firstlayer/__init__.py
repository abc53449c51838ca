import logging
import sys

import click

from .commands import analyze, gen_toy, run, transform, verify
from .commands_bench import bench

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def create_cli():
    @click.group(context_settings={"help_option_names": ["-h", "--help"]})
    @click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG logging on stderr.")
    def cli(verbose):
        """First-layer precompute engine for RoPE transformers."""
        level = logging.WARNING - 10 * min(verbose, 2)
        logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)
        logging.getLogger("firstlayer").setLevel(level)

    for command in (analyze, gen_toy, transform, verify, run, bench):
        cli.add_command(command)
    return cli
