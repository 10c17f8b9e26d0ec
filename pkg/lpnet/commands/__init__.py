import logging
from typing import Optional

import click
from rich.console import Console
from rich.table import Table

from lpnet.services.inference import requantize
from lpnet.services.modelio import load_model
from lpnet.services.netdesc import load_descriptor

logger = logging.getLogger(__name__)

SCHEMES = click.Choice(['det', 'stoch', 'DETERMINISTIC', 'STOCHASTIC'], case_sensitive=False)
existing_file = click.Path(exists=True, dir_okay=False)
output_file = click.Path(dir_okay=False, writable=True)


def console() -> Console:
    return Console(highlight=False)


def write_text(path, text: str) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)
    logger.info('wrote %s', path)


def resolve_seed(seed: Optional[int], cfg) -> int:
    return cfg.SEED if seed is None else seed


def load_net_and_model(net_path: Optional[str], model_path: str, seed: Optional[int]):
    """Model from its container, rebound to `net_path` when one is given."""
    model = load_model(model_path)
    if net_path is None:
        return model.net, model
    net = load_descriptor(net_path)
    return net, requantize(model, net, seed)


def key_value_table(title: str, rows) -> Table:
    table = Table(title=title, show_header=True, header_style='bold magenta')
    table.add_column('metric')
    table.add_column('value', justify='right')
    for key, value in rows:
        table.add_row(str(key), f"{value:.4f}" if isinstance(value, float) else str(value))
    return table


def frame_table(title: str, df) -> Table:
    table = Table(title=title, show_header=True, header_style='bold magenta')
    for column in df.columns:
        table.add_column(str(column))
    for row in df.itertuples(index=False):
        table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
    return table

