import os

import click

from lpnet.commands import (console, existing_file, frame_table, key_value_table, load_net_and_model, output_file,
                            resolve_seed, write_text)
from lpnet.models.reports import (BitAllocationSchema, OneShotReportSchema, RangeStatsSchema, SPARSITY_MODES,
                                  SparsityReportSchema, dumps_report, read_report)
from lpnet.services.datasets import load_dataset
from lpnet.services.profiler import allocate_bits, measure_ranges, one_shot_study, sparsity_report
from lpnet.utils.validators import validate_run_config


@click.command('profile')
@click.option('--model', 'model_path', type=existing_file, required=True)
@click.option('--data', 'data_path', type=existing_file, required=True)
@click.option('--net', 'net_path', type=existing_file, default=None)
@click.option('--samples', type=int, default=None, help='Profiling sample count (config default).')
@click.option('--seed', type=int, default=None)
@click.option('--out', type=output_file, required=True)
@validate_run_config
@click.pass_obj
def profile(cfg, model_path, data_path, net_path, samples, seed, out):
    """Measure per-layer weight and activation ranges over sampled inputs."""
    seed = resolve_seed(seed, cfg)
    net, model = load_net_and_model(net_path, model_path, seed)
    data = load_dataset(data_path).sample(samples or cfg.PROFILE_SAMPLES, seed)
    stats = measure_ranges(net, model, data.x)
    write_text(out, dumps_report(stats, RangeStatsSchema()))
    console().print(key_value_table('Ranges (max |v|)', [(f"{name} weights / activations",
                                                          f"{s.weights.max_abs:g} / {s.activations.max_abs:g}")
                                                         for name, s in stats.layers.items()]))


@click.command('allocate')
@click.option('--stats', 'stats_path', type=existing_file, required=True)
@click.option('--bits', type=int, default=None, help='Total bits per format (config default 16).')
@click.option('--threshold', type=float, default=None, help='Tolerated overflow fraction (config default 0.01).')
@click.option('--out', type=output_file, required=True)
@validate_run_config
@click.pass_obj
def allocate(cfg, stats_path, bits, threshold, out):
    """Split a fixed bit budget into integer/fraction bits per layer."""
    stats = read_report(stats_path, RangeStatsSchema())
    allocation = allocate_bits(stats, bits or cfg.DEFAULT_BITS,
                               cfg.DEFAULT_THRESHOLD if threshold is None else threshold)
    write_text(out, dumps_report(allocation, BitAllocationSchema()))
    console().print(key_value_table('Allocation', [(name, f"w {a.weight_fmt}  a {a.act_fmt}")
                                                   for name, a in allocation.layers.items()]))


@click.command('report')
@click.option('--model', 'model_path', type=existing_file, required=True)
@click.option('--data', 'data_path', type=existing_file, required=True)
@click.option('--net', 'net_path', type=existing_file, default=None)
@click.option('--allocation', 'allocation_path', type=existing_file, default=None)
@click.option('--mode', type=click.Choice(SPARSITY_MODES), default='fine-tuned', show_default=True)
@click.option('--samples', type=int, default=None)
@click.option('--seed', type=int, default=None)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), required=True)
@validate_run_config
@click.pass_obj
def report(cfg, model_path, data_path, net_path, allocation_path, mode, samples, seed, out_dir):
    """Write sparsity.json and one_shot.json for a model."""
    seed = resolve_seed(seed, cfg)
    net, model = load_net_and_model(net_path, model_path, seed)
    data = load_dataset(data_path)
    if samples:
        data = data.sample(samples, seed)
    allocation = read_report(allocation_path, BitAllocationSchema()) if allocation_path else None
    sparsity = sparsity_report(net, model, data.x, mode, seed=seed)
    study = one_shot_study(net, model, data, allocation, total_bits=cfg.DEFAULT_BITS,
                           loss_threshold=cfg.DEFAULT_THRESHOLD, seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    write_text(os.path.join(out_dir, 'sparsity.json'), dumps_report(sparsity, SparsityReportSchema()))
    write_text(os.path.join(out_dir, 'one_shot.json'), dumps_report(study, OneShotReportSchema()))
    out_console = console()
    out_console.print(frame_table(f"Sparsity ({mode}, mean {sparsity.mean:.4f})", sparsity.to_frame()))
    out_console.print(frame_table('One-shot quantization', study.to_frame()))
