import functools
import json
import logging
import math

import click
import numpy as np

from .engine import analyzer, checkpoint_io
from .engine.metering import BASELINE, PRECOMPUTED, Meter, MeterReport, render_meter_reports
from .engine.model import FFN_KINDS, LAYOUTS, NORM_KINDS, POS_ENCODINGS, ModelConfig, init_toy_weights, toy_config
from .engine.numerics import ACTIVATIONS
from .engine.precompute import DEFAULT_TOLERANCE, TransformedModel, greedy_generate, transform_model, verify_equivalence
from .errors import (
    EXIT_VERIFICATION_FAILED,
    ConfigError,
    FirstLayerError,
    exit_code_for,
)

logger = logging.getLogger(__name__)

FORMATS = ("text", "csv", "json")


def convert_numpy_to_json_serializable(obj):
    """Recursively converts NumPy types to JSON-serializable Python types"""
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        return None if math.isnan(val) or math.isinf(val) else val
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {key: convert_numpy_to_json_serializable(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [convert_numpy_to_json_serializable(item) for item in obj]
    return obj


def handle_errors(command):
    """Maps engine and I/O errors to the documented exit codes."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (FirstLayerError, OSError) as exc:
            logger.debug("%s failed", command.__name__, exc_info=True)
            click.echo(f"error: {exc}", err=True)
            raise SystemExit(exit_code_for(exc))

    return wrapper


def parse_int_list(ctx, param, value):
    if value is None:
        return None
    try:
        items = [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")
    if not items:
        raise click.BadParameter("empty list")
    return items


def load_kind(path, kind):
    """Loads a checkpoint and insists on baseline or precomputed weights."""
    model = checkpoint_io.load(path)
    precomputed = isinstance(model, TransformedModel)
    if kind == BASELINE and precomputed:
        raise ConfigError(f"{path} is already precomputed; a baseline checkpoint is needed")
    if kind == PRECOMPUTED and not precomputed:
        raise ConfigError(f"{path} is a baseline checkpoint; run transform first")
    return model


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

@click.command("analyze")
@click.option("--preset", "presets", multiple=True,
              type=click.Choice([p.name for p in analyzer.preset_configs()]),
              help="Preset model (repeatable). Default: all presets.")
@click.option("--config", "config_paths", multiple=True, type=click.Path(dir_okay=False),
              help="ModelConfig JSON file (repeatable).")
@click.option("--batches", default="1,16,256,1024", callback=parse_int_list, show_default=True)
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="text", show_default=True)
@click.option("--paper-check", "published_check", is_flag=True, help="Compare against the published numbers; exit 1 on mismatch.")
@click.option("--plot", "plot_path", type=click.Path(dir_okay=False),
              help="Also save a reduction-factor plot (PNG).")
@handle_errors
def analyze(presets, config_paths, batches, fmt, published_check, plot_path):
    """Memory-read and memory-size cost of first-layer precompute."""
    if any(b < 1 for b in batches):
        raise ConfigError("batch sizes must be >= 1")
    configs = [analyzer.get_preset(name) for name in presets]
    configs += [ModelConfig.load_json(path) for path in config_paths]
    # no preset and no config: every preset
    if not configs:
        configs = analyzer.preset_configs()

    reports = [analyzer.report(config, batches) for config in configs]
    click.echo(analyzer.RENDERERS[fmt](reports))
    if plot_path:
        analyzer.plot_reduction_factors(reports, plot_path)

    if published_check:
        mismatches = []
        for config, cost in zip(configs, reports):
            mismatches += analyzer.check_published(config, cost)
        if mismatches:
            for line in mismatches:
                click.echo(f"MISMATCH {line}", err=True)
            raise SystemExit(EXIT_VERIFICATION_FAILED)
        click.echo(f"published values match for {len(configs)} config(s)", err=True)


# ---------------------------------------------------------------------------
# gen-toy
# ---------------------------------------------------------------------------

@click.command("gen-toy")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              help="Start from a ModelConfig JSON instead of the toy defaults.")
@click.option("--dim", type=int)
@click.option("--n-layers", type=int)
@click.option("--n-heads", type=int)
@click.option("--n-kv-heads", type=int)
@click.option("--hidden-dim", type=int)
@click.option("--vocab-size", type=int)
@click.option("--n-experts", type=int)
@click.option("--experts-top-k", type=int)
@click.option("--max-seq-len", type=int)
@click.option("--layout", type=click.Choice(LAYOUTS))
@click.option("--pos-encoding", type=click.Choice(POS_ENCODINGS))
@click.option("--norm-kind", type=click.Choice(NORM_KINDS))
@click.option("--ffn-kind", type=click.Choice(FFN_KINDS))
@click.option("--activation", type=click.Choice(sorted(ACTIVATIONS)))
@click.option("--rope-base", type=float)
@click.option("--bias/--no-bias", default=None)
@click.option("--name")
@click.option("--config-out", type=click.Path(dir_okay=False), help="Also write the config as JSON.")
@handle_errors
def gen_toy(out_path, seed, config_path, config_out, **dims):
    """Writes a seeded random toy checkpoint."""
    overrides = {key: value for key, value in dims.items() if value is not None}
    if config_path:
        config = ModelConfig.load_json(config_path).replace(**overrides)
    else:
        config = toy_config(**overrides)
    if config.precomputed:
        raise ConfigError("gen-toy writes baseline checkpoints; drop 'precomputed' from the config")
    weights = init_toy_weights(config, seed)
    size = checkpoint_io.save(weights, out_path)
    if config_out:
        config.save_json(config_out)
    click.echo(f"wrote {out_path}: {config.name}, {config.layout}, {config.pos_encoding}, "
               f"{weights.n_scalars:,} scalars, {size:,} bytes (seed {seed})")


# ---------------------------------------------------------------------------
# transform
# ---------------------------------------------------------------------------

@click.command("transform")
@click.option("--in", "in_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@handle_errors
def transform(in_path, out_path):
    """Replaces the input embedding and first-layer Q/K/V(/FFN) with a table."""
    weights = load_kind(in_path, BASELINE)
    transformed = transform_model(weights.config, weights)
    size = checkpoint_io.save(transformed, out_path)
    click.echo(f"eliminated weights (cost model): {transformed.eliminated_convention:,}")
    click.echo(f"eliminated scalars (actual):     {transformed.eliminated_actual:,}")
    click.echo(f"table size (vocab x 2(d+e)):     {transformed.table_size:,}")
    click.echo(f"wrote {out_path} ({size:,} bytes)")


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

@click.command("verify")
@click.option("--baseline", "baseline_path", required=True, type=click.Path(dir_okay=False))
@click.option("--transformed", "transformed_path", required=True, type=click.Path(dir_okay=False))
@click.option("--prompts", default=100, show_default=True, type=click.IntRange(min=1))
@click.option("--len", "seq_len", default=32, show_default=True, type=click.IntRange(min=1))
@click.option("--tol", default=DEFAULT_TOLERANCE, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--format", "fmt", type=click.Choice(("text", "json")), default="text", show_default=True)
@handle_errors
def verify(baseline_path, transformed_path, prompts, seq_len, tol, seed, fmt):
    """Checks that both checkpoints produce the same logits."""
    weights = load_kind(baseline_path, BASELINE)
    transformed = load_kind(transformed_path, PRECOMPUTED)
    result = verify_equivalence(weights.config, weights, transformed,
                                n_prompts=prompts, seq_len=seq_len, seed=seed, tol=tol)
    if fmt == "json":
        click.echo(json.dumps(convert_numpy_to_json_serializable(result.to_dict()), indent=2))
    else:
        click.echo(f"prompts: {result.n_prompts}, comparisons: {result.n_comparisons}")
        click.echo(f"max abs diff: {result.max_abs_diff:.3e}")
        click.echo(f"max rel diff: {result.max_rel_diff:.3e} (tol {result.tolerance:g})")
        click.echo("PASS" if result.passed else "FAIL")
    if not result.passed:
        raise SystemExit(EXIT_VERIFICATION_FAILED)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

@click.command("run")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(dir_okay=False))
@click.option("--tokens", required=True, callback=parse_int_list, help='Prompt ids, e.g. "3,17,5".')
@click.option("--steps", default=8, show_default=True, type=click.IntRange(min=0))
@click.option("--meter", is_flag=True, help="Print metered reads for each decode step.")
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="text", show_default=True)
@handle_errors
def run(ckpt_path, tokens, steps, meter, fmt):
    """Greedy decode with whichever path the checkpoint holds."""
    model = checkpoint_io.load(ckpt_path)
    config = model.config
    meter_factory = (lambda: Meter.for_config(config)) if meter else None
    generated, meters = greedy_generate(model, tokens, steps, meter_factory)
    click.echo("generated: " + ",".join(str(t) for t in generated))
    if meter and meters:
        variant = PRECOMPUTED if isinstance(model, TransformedModel) else BASELINE
        reports = [
            MeterReport.from_meter(variant, f"{config.name}#{i + 1}", 1, 1, m)
            for i, m in enumerate(meters)
        ]
        click.echo(render_meter_reports(reports, fmt))
