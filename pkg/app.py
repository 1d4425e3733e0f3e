# app.py
import os

import click

# Load configuration via config.py (supports development/desk/testing)
from config import CONFIG_CLASSES, DevelopmentConfig, Settings
from extensions import executor, log_setup


class Experiment:
    """Resolved settings shared by the commands of one invocation."""

    def __init__(self, import_name):
        self.import_name = import_name
        self.config = Settings()

    def configure(self, config_path=None, overrides=None):
        """Layer a config file and then command-line overrides onto the settings."""
        extras = {}
        if config_path:
            extras = self.config.from_ini(config_path, extra_sections=('command',))
        self.config.override(overrides or {})
        init_extensions(self)
        return extras


def init_extensions(app):
    log_setup.init_app(app)
    executor.init_app(app)


def create_app(test_config=None, env=None):
    """Application factory function"""
    app = Experiment(__name__)

    # Choose config based on SURV_ENV
    env = (env or os.environ.get('SURV_ENV', 'development')).lower()
    app.config.from_object(CONFIG_CLASSES.get(env, DevelopmentConfig))

    # Override with explicit test config if provided (used by tests)
    if test_config:
        app.config.override(test_config)

    init_extensions(app)
    return app


@click.group()
@click.option('--env', type=click.Choice(sorted(CONFIG_CLASSES)),
              help='Configuration class; defaults to $SURV_ENV or development.')
@click.pass_context
def cli(ctx, env):
    """Missing-aware multimodal survival experiments over CSV cohorts."""
    if ctx.obj is None:
        ctx.obj = create_app(env=env)


def register_commands(group):
    from commands.evaluate import eval_cmd
    from commands.stratify import stratify_cmd
    from commands.sweep import sweep_cmd
    from commands.synth import synth_cmd
    from commands.train import train_cmd

    for command in (synth_cmd, train_cmd, eval_cmd, sweep_cmd, stratify_cmd):
        group.add_command(command)


register_commands(cli)

if __name__ == '__main__':
    cli()
