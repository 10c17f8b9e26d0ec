import os

import click

from lpnet.commands import existing_file, key_value_table, console, load_net_and_model, output_file
from lpnet.models.reports import BitAllocationSchema, read_report
from lpnet.services.modelio import export_accelerator, read_accelerator, verify_export


@click.command('export')
@click.option('--model', 'model_path', type=existing_file, required=True)
@click.option('--net', 'net_path', type=existing_file, default=None)
@click.option('--allocation', 'allocation_path', type=existing_file, default=None)
@click.option('--seed', type=int, default=None)
@click.option('--out', type=output_file, required=True)
def export(model_path, net_path, allocation_path, seed, out):
    """Write the int16 accelerator export and verify it decodes to the model."""
    _, model = load_net_and_model(net_path, model_path, seed)
    allocation = read_report(allocation_path, BitAllocationSchema()) if allocation_path else None
    export_accelerator(model, allocation, out)
    verify_export(model, read_accelerator(out))
    console().print(key_value_table('Export', [('layers', len(model.net.weighted_layers())),
                                               ('bytes', os.path.getsize(out)), ('verified', 'yes')]))
