"""
Analytical cost model for first-layer precompute

Counts scalar parameter reads and parameter memory with and without the
precompute table. Works on a ModelConfig alone; no weights are needed.

Read model (B = batch size):
    without precompute:  B·d embedding values per batch
                         + one read of every eliminated weight per batch
    with precompute:     B·2(d+e) table values per batch

    eliminated = d·d (Q) + 2·d·e (K, V) [+ 2·d·hidden·n_experts (FFN), parallel only]

For serial layouts the first layer's P, norm2 and FFN are read by both
variants and are left out of both counts.

Memory model:
    embedding memory grows by (d + 2e)·vocab   (2(d+e) per row instead of d)
    net change = (d + 2e)·vocab − eliminated
    relative change against the total weight count

Rounding: nearest integer, ties away from zero (11,264.25 -> 11,264 and
2.8 -> 3). Exact fractions are kept next to every rounded value.
"""

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

from ..errors import ConfigError, IneligibleArchitecture
from . import reference_values
from .model import ABSOLUTE, PARALLEL, ModelConfig, count_weights, kv_dim

try:
    import matplotlib
    matplotlib.use('Agg')  # Use non-interactive backend
    import matplotlib.pyplot as plt
    MATPLOTLIB_AVAILABLE = True
except ImportError:
    MATPLOTLIB_AVAILABLE = False

logger = logging.getLogger(__name__)

DEFAULT_BATCHES = reference_values.PUBLISHED_BATCHES


def round_nearest(value):
    """Nearest integer of a Fraction, halves rounded away from zero."""
    value = Fraction(value)
    magnitude = math.floor(abs(value) + Fraction(1, 2))
    return magnitude if value >= 0 else -magnitude


def _require_precomputable(config):
    if config.pos_encoding == ABSOLUTE:
        raise IneligibleArchitecture(IneligibleArchitecture.EXPLANATION)


def eliminated_weights(config):
    """Weights removed by the precompute, counted with the two-matrix FFN convention."""
    d, e = config.dim, kv_dim(config)
    n = d * d + 2 * d * e
    if config.layout == PARALLEL:
        n += 2 * d * config.hidden_dim * config.n_experts
    return n


def eliminated_matrix_weights(config):
    """
    Matrix scalars the engine actually drops from layer 0: like
    eliminated_weights but with the SwiGLU gate and the MoE router included.
    Equal to eliminated_weights for dense two-matrix FFNs.
    """
    d, e = config.dim, kv_dim(config)
    n = d * d + 2 * d * e
    if config.layout == PARALLEL:
        n_mats = 3 if config.ffn_kind == "swiglu" else 2
        n += n_mats * d * config.hidden_dim * config.n_experts
        if config.is_moe:
            n += d * config.n_experts
    return n


@dataclass(frozen=True)
class ReadCounts:
    without: int
    with_: int


def reads(config, batch):
    if batch < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch}")
    _require_precomputable(config)
    d, e = config.dim, kv_dim(config)
    return ReadCounts(without=batch * d + eliminated_weights(config), with_=batch * 2 * (d + e))


@dataclass(frozen=True)
class ReductionFactor:
    exact: Fraction
    rounded: int


def reduction_factor(config, batch):
    r = reads(config, batch)
    exact = Fraction(r.without, r.with_)
    return ReductionFactor(exact, round_nearest(exact))


@dataclass(frozen=True)
class MemoryDelta:
    embed_increase: int
    decrease: int
    abs_delta: int
    rel_delta_pct: int
    rel_delta_exact: Fraction


def memory_delta(config):
    _require_precomputable(config)
    d, e = config.dim, kv_dim(config)
    embed_increase = (d + 2 * e) * config.vocab_size
    eliminated = eliminated_weights(config)
    abs_delta = embed_increase - eliminated
    rel = Fraction(abs_delta * 100, count_weights(config).total)
    return MemoryDelta(embed_increase, -eliminated, abs_delta, round_nearest(rel), rel)


def max_savings_pct(config):
    """Ceiling on the saving from optimizing one of n_layers layers, in percent."""
    return round_nearest(Fraction(100, config.n_layers))


def preset_configs():
    """The four model configurations of the comparison tables."""
    pythia = ModelConfig(
        name="pythia-6.9b", dim=4096, n_layers=32, n_heads=32, n_kv_heads=32,
        hidden_dim=16384, n_experts=1, vocab_size=50400, layout="parallel",
        norm_kind="layernorm", ffn_kind="mlp2", activation="gelu", max_seq_len=2048)
    mistral = ModelConfig(
        name="mistral-7b", dim=4096, n_layers=32, n_heads=32, n_kv_heads=8,
        hidden_dim=14336, n_experts=1, vocab_size=32000, layout="serial",
        norm_kind="rmsnorm", ffn_kind="swiglu", max_seq_len=32768)
    mixtral = mistral.replace(name="mixtral-8x7b", n_experts=8, experts_top_k=2)
    mixtral_parallel = mixtral.replace(name="mixtral-8x7b-parallel", layout="parallel")
    return [pythia, mistral, mixtral, mixtral_parallel]


def get_preset(name):
    for preset in preset_configs():
        if preset.name == name:
            return preset
    known = ", ".join(p.name for p in preset_configs())
    raise ConfigError(f"unknown preset {name!r} (known: {known})")


@dataclass(frozen=True)
class BatchCost:
    batch: int
    reads_without: int
    reads_with: int
    factor: ReductionFactor

    def to_dict(self):
        return {
            "batch": self.batch,
            "reads_without": self.reads_without,
            "reads_with": self.reads_with,
            "factor_exact_num": self.factor.exact.numerator,
            "factor_exact_den": self.factor.exact.denominator,
            "factor_rounded": self.factor.rounded,
        }


@dataclass(frozen=True)
class CostReport:
    config_name: str
    e: int
    n_layers: int
    eliminated_weights: int
    total_weights: int
    batches: list = field(default_factory=list)
    embed_mem_increase: int = 0
    mem_decrease: int = 0
    mem_delta_abs: int = 0
    mem_delta_rel_pct: int = 0
    max_savings_pct: int = 0

    def batch(self, b):
        for entry in self.batches:
            if entry.batch == b:
                return entry
        raise KeyError(b)

    def to_dict(self):
        return {
            "config_name": self.config_name,
            "e": self.e,
            "n_layers": self.n_layers,
            "eliminated_weights": self.eliminated_weights,
            "total_weights": self.total_weights,
            "batches": [b.to_dict() for b in self.batches],
            "embed_mem_increase": self.embed_mem_increase,
            "mem_decrease": self.mem_decrease,
            "mem_delta_abs": self.mem_delta_abs,
            "mem_delta_rel_pct": self.mem_delta_rel_pct,
            "max_savings_pct": self.max_savings_pct,
        }


def report(config, batch_sizes=DEFAULT_BATCHES):
    _require_precomputable(config)
    batches = []
    for b in batch_sizes:
        r = reads(config, b)
        batches.append(BatchCost(b, r.without, r.with_, reduction_factor(config, b)))
    mem = memory_delta(config)
    return CostReport(
        config_name=config.name,
        e=kv_dim(config),
        n_layers=config.n_layers,
        eliminated_weights=eliminated_weights(config),
        total_weights=count_weights(config).total,
        batches=batches,
        embed_mem_increase=mem.embed_increase,
        mem_decrease=mem.decrease,
        mem_delta_abs=mem.abs_delta,
        mem_delta_rel_pct=mem.rel_delta_pct,
        max_savings_pct=max_savings_pct(config),
    )


def check_published(config, cost_report):
    """
    Compares a report (and the config's weight counts) with the published
    numbers. Returns a list of mismatch messages; empty means everything
    matched. Configs without published numbers produce one message.
    """
    name = config.name
    mismatches = []
    weights_expected = reference_values.WEIGHT_COUNTS.get(name)
    costs_expected = reference_values.COSTS.get(name)
    if weights_expected is None and costs_expected is None:
        return [f"{name}: no published values to compare against"]

    def expect(label, got, want):
        if got != want:
            mismatches.append(f"{name}: {label} = {got:,} (expected {want:,})")

    if weights_expected is not None:
        counted = count_weights(config).to_dict()
        for key, want in weights_expected.items():
            expect(key, counted[key], want)
    if costs_expected is not None:
        expect("e", cost_report.e, costs_expected["e"])
        expect("eliminated_weights", cost_report.eliminated_weights, costs_expected["eliminated_weights"])
        for entry in cost_report.batches:
            b = entry.batch
            if b in costs_expected["reads_without"]:
                expect(f"reads_without[B={b}]", entry.reads_without, costs_expected["reads_without"][b])
            if b in costs_expected["reads_with"]:
                expect(f"reads_with[B={b}]", entry.reads_with, costs_expected["reads_with"][b])
            if b in costs_expected["reduction_factor"]:
                expect(f"reduction_factor[B={b}]", entry.factor.rounded,
                       costs_expected["reduction_factor"][b])
        expect("embed_mem_increase", cost_report.embed_mem_increase, costs_expected["embed_mem_increase"])
        expect("mem_delta_abs", cost_report.mem_delta_abs, costs_expected["mem_delta_abs"])
        expect("mem_delta_rel_pct", cost_report.mem_delta_rel_pct, costs_expected["mem_delta_rel_pct"])
    want_savings = reference_values.MAX_SAVINGS_PCT.get(config.n_layers)
    if want_savings is not None:
        expect("max_savings_pct", cost_report.max_savings_pct, want_savings)
    return mismatches


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_table(headers, rows):
    """Plain aligned text table; first column left-aligned, the rest right-aligned."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]

    def line(row):
        parts = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        return " | ".join(parts).rstrip()

    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(cells[0]), sep] + [line(r) for r in cells[1:]])


def _signed(n):
    return f"{n:+,}"


def render_text(reports):
    """Side-by-side text table, one column per report."""
    if isinstance(reports, CostReport):
        reports = [reports]
    headers = [""] + [r.config_name for r in reports]
    rows = [
        ["e (output dim. of K, V)"] + [f"{r.e:,}" for r in reports],
        ["Total weights"] + [f"{r.total_weights:,}" for r in reports],
        ["Number of weights that can be eliminated"] + [f"{r.eliminated_weights:,}" for r in reports],
    ]
    batch_sizes = [b.batch for b in reports[0].batches]
    for b in batch_sizes:
        rows.append([f"Reads w/o precompute for batch {b:,}"] + [f"{r.batch(b).reads_without:,}" for r in reports])
        rows.append([f"Reads with precompute for batch {b:,}"] + [f"{r.batch(b).reads_with:,}" for r in reports])
    for b in batch_sizes:
        rows.append([f"Reduction factor for batch size {b:,}"] + [f"{r.batch(b).factor.rounded:,}x" for r in reports])
    rows += [
        ["Increase embedding memory by (2e + d) * vocab_size"] + [f"{r.embed_mem_increase:,}" for r in reports],
        ["Memory decrease due to elimination of weights"] + [_signed(r.mem_decrease) for r in reports],
        ["Total absolute memory increase (or decrease)"] + [_signed(r.mem_delta_abs) for r in reports],
        ["Total relative memory increase (or decrease)"] + [f"{r.mem_delta_rel_pct:+d}%" for r in reports],
        ["Max savings from optimizing one layer"] + [f"{r.max_savings_pct}%" for r in reports],
    ]
    return render_table(headers, rows)


CSV_COLUMNS = ("config", "batch", "reads_without", "reads_with",
               "factor_exact_num", "factor_exact_den", "factor_rounded")


def render_csv(reports):
    if isinstance(reports, CostReport):
        reports = [reports]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        for entry in r.batches:
            d = entry.to_dict()
            writer.writerow([r.config_name] + [d[c] for c in CSV_COLUMNS[1:]])
    return buf.getvalue()


def render_json(reports):
    if isinstance(reports, CostReport):
        reports = [reports]
    return json.dumps([r.to_dict() for r in reports], indent=2)


RENDERERS = {"text": render_text, "csv": render_csv, "json": render_json}


def plot_reduction_factors(reports, path):
    """Reduction factor against batch size, log-log, one line per config."""
    if not MATPLOTLIB_AVAILABLE:
        logger.warning("matplotlib not available, skipping plot %s", path)
        return None
    fig, ax = plt.subplots(figsize=(8, 5))
    for r in reports:
        xs = [b.batch for b in r.batches]
        ys = [float(b.factor.exact) for b in r.batches]
        ax.plot(xs, ys, marker="o", label=r.config_name)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("batch size")
    ax.set_ylabel("read reduction factor")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info("saved reduction-factor plot to %s", path)
    return path


def render_rows(headers, rows, fmt="text"):
    """Generic renderer for flat records (meter and bench tables)."""
    if fmt == "text":
        return render_table(headers, [[f"{c:,}" if isinstance(c, int) else c for c in row] for row in rows])
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(headers)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "json":
        return json.dumps([dict(zip(headers, row)) for row in rows], indent=2)
    raise ConfigError(f"unknown output format {fmt!r}")
