import logging

import click

from config import config
from lpnet.exceptions import LPNetError

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


class PipelineGroup(click.Group):
    """Maps failures onto the stable exit codes: 1 usage, 2 data, 3 numerical."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as err:
            err.exit_code = 1
            raise
        except LPNetError as err:
            logger.debug('command failed', exc_info=True)
            click.echo(f"Error: {err}", err=True)
            ctx.exit(err.exit_code)


def create_cli(config_name='default'):
    settings = config[config_name]
    logging.basicConfig(level=settings.LOG_LEVEL, format=LOG_FORMAT)

    @click.group(cls=PipelineGroup)
    @click.pass_context
    def cli(ctx):
        """Low-precision CNN pipeline: build, profile, allocate, fine-tune, report, export."""
        ctx.obj = settings

    # Register command groups
    from lpnet.commands.network import giga1net, desk, init
    from lpnet.commands.profiling import profile, allocate, report
    from lpnet.commands.training import train, finetune_command
    from lpnet.commands.export import export

    for command in (giga1net, desk, init, profile, allocate, train, finetune_command, report, export):
        cli.add_command(command)

    return cli
