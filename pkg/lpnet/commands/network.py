import os

import click

from lpnet.commands import console, existing_file, frame_table, key_value_table, output_file, resolve_seed
from lpnet.models.quant import FixedPointFormat, QuantSpec, RoundingScheme
from lpnet.services.datasets import make_oriented_patterns, save_dataset
from lpnet.services.modelio import save_model
from lpnet.services.netdesc import (build_desk_net, build_giga1net, count_ops, count_params, giga1net_table,
                                    load_descriptor, save_descriptor)
from lpnet.services.training import build_model
from lpnet.utils.validators import validate_run_config


def _uniform_quant(bits: int, scheme: str) -> QuantSpec:
    # weights keep 2 integer bits, activations half the word
    return QuantSpec(weight_fmt=FixedPointFormat(2, bits - 2), act_fmt=FixedPointFormat(bits // 2, bits - bits // 2),
                     scheme=RoundingScheme.parse(scheme))


@click.command('giga1net')
@click.option('--out', type=output_file, help='Where to write the descriptor.')
@click.option('--bits', type=int, default=None, help='Uniform bit budget of every layer.')
@click.option('--scheme', type=click.Choice(['det', 'stoch'], case_sensitive=False), default='det')
@click.option('--seed', type=int, default=None)
@validate_run_config
@click.pass_obj
def giga1net(cfg, out, bits, scheme, seed):
    """Build Giga1Net and print its layer table with op/parameter counts."""
    net = build_giga1net(_uniform_quant(bits or cfg.DEFAULT_BITS, scheme))
    if out:
        save_descriptor(net, out)
    out_console = console()
    out_console.print(frame_table('Giga1Net', giga1net_table(net)))
    out_console.print(key_value_table('Cost per frame', [('ops', count_ops(net)), ('params', count_params(net))]))


@click.command('desk')
@click.option('--out-dir', type=click.Path(file_okay=False), required=True)
@click.option('--train-samples', type=int, default=2000, show_default=True)
@click.option('--test-samples', type=int, default=400, show_default=True)
@click.option('--bits', type=int, default=None)
@click.option('--scheme', type=click.Choice(['det', 'stoch'], case_sensitive=False), default='det')
@click.option('--seed', type=int, default=None)
@validate_run_config
@click.pass_obj
def desk(cfg, out_dir, train_samples, test_samples, bits, scheme, seed):
    """Write the desk-scale network descriptor with train/test oriented-pattern sets."""
    seed = resolve_seed(seed, cfg)
    os.makedirs(out_dir, exist_ok=True)
    save_descriptor(build_desk_net(_uniform_quant(bits or cfg.DEFAULT_BITS, scheme)), os.path.join(out_dir, 'desk.net'))
    save_dataset(make_oriented_patterns(train_samples, seed), os.path.join(out_dir, 'train.npz'))
    save_dataset(make_oriented_patterns(test_samples, seed + 1), os.path.join(out_dir, 'test.npz'))
    click.echo(f"wrote desk.net, train.npz ({train_samples}) and test.npz ({test_samples}) to {out_dir}")


@click.command('init')
@click.option('--net', 'net_path', type=existing_file, required=True)
@click.option('--out', type=output_file, required=True)
@click.option('--seed', type=int, default=None)
@validate_run_config
@click.pass_obj
def init(cfg, net_path, out, seed):
    """Create a Glorot-initialized model container for a descriptor."""
    net = load_descriptor(net_path)
    save_model(build_model(net, resolve_seed(seed, cfg)), out)
    click.echo(f"initialized {len(net.weighted_layers())} weighted layers -> {out}")
