import click

from lpnet.commands import SCHEMES, console, existing_file, frame_table, output_file, resolve_seed, write_text
from lpnet.models.reports import BitAllocationSchema, read_report
from lpnet.models.run_config import TrainConfig
from lpnet.services.datasets import load_dataset
from lpnet.services.modelio import load_model, save_model
from lpnet.services.netdesc import apply_allocation, load_descriptor, with_scheme
from lpnet.services.training import build_model, finetune, train_float
from lpnet.utils.validators import validate_run_config


def _common_options(f):
    for option in reversed([
        click.option('--data', 'data_path', type=existing_file, required=True),
        click.option('--validation', 'validation_path', type=existing_file, default=None),
        click.option('--seed', type=int, default=None),
        click.option('--lr', type=float, default=0.05, show_default=True),
        click.option('--epochs', type=int, default=10, show_default=True),
        click.option('--batch-size', type=int, default=None),
        click.option('--momentum', type=float, default=0.0, show_default=True),
        click.option('--out', type=output_file, required=True),
        click.option('--history', 'history_path', type=output_file, default=None,
                     help='CSV file receiving one row per epoch.'),
    ]):
        f = option(f)
    return f


def _finish(model, history, out, history_path):
    save_model(model, out)
    if history_path:
        write_text(history_path, history.to_csv())
    if len(history):
        console().print(frame_table('History', history.to_frame()[['epoch', 'loss', 'accuracy', 'mean_sparsity']]))
    click.echo(f"saved {out}" + (' (stopped on plateau)' if history.stopped_early else ''))


@click.command('train')
@click.option('--model', 'model_path', type=existing_file, required=True)
@_common_options
@validate_run_config
@click.pass_obj
def train(cfg, model_path, data_path, validation_path, seed, lr, epochs, batch_size, momentum, out, history_path):
    """Train the full-precision baseline (all quantizers off)."""
    model = load_model(model_path)
    config = TrainConfig(learning_rate=lr, epochs=epochs, batch_size=batch_size or cfg.BATCH_SIZE,
                         momentum=momentum, seed=resolve_seed(seed, cfg))
    validation = load_dataset(validation_path) if validation_path else None
    trained, history = train_float(model.net, model, load_dataset(data_path), config, validation)
    _finish(trained, history, out, history_path)


@click.command('finetune')
@click.option('--model', 'model_path', type=existing_file, default=None)
@click.option('--net', 'net_path', type=existing_file, default=None)
@click.option('--allocation', 'allocation_path', type=existing_file, default=None)
@click.option('--init', 'init_mode', type=click.Choice(['pretrained', 'random']), default='pretrained',
              show_default=True)
@click.option('--scheme', type=SCHEMES, default=None)
@click.option('--lr-divisor', type=float, default=None)
@_common_options
@validate_run_config
@click.pass_obj
def finetune_command(cfg, model_path, net_path, allocation_path, init_mode, scheme, lr_divisor, data_path,
                     validation_path, seed, lr, epochs, batch_size, momentum, out, history_path):
    """Fine-tune (or train from scratch) with quantized forward passes."""
    if init_mode == 'pretrained' and model_path is None:
        raise click.UsageError('--init pretrained needs --model')
    if net_path is None and model_path is None:
        raise click.UsageError('give --net or --model')
    model = load_model(model_path) if model_path else None
    net = load_descriptor(net_path) if net_path else model.net
    if allocation_path:
        net = apply_allocation(net, read_report(allocation_path, BitAllocationSchema()))
    if scheme:
        net = with_scheme(net, scheme)
    seed = resolve_seed(seed, cfg)
    if init_mode == 'random':
        model = build_model(net, seed)
    config = TrainConfig(learning_rate=lr, lr_divisor=lr_divisor or cfg.LR_DIVISOR, epochs=epochs,
                         batch_size=batch_size or cfg.BATCH_SIZE, momentum=momentum, seed=seed)
    validation = load_dataset(validation_path) if validation_path else None
    tuned, history = finetune(net, model, load_dataset(data_path), config, validation)
    _finish(tuned, history, out, history_path)
