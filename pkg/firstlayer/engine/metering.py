"""
Instrumented execution: scalar-read and FLOP counters for the engine

The analyzer predicts memory reads from formulas; this module counts them on
the running engine so the two can be compared exactly.

Accounting rules (the same modelling assumptions as the read model):
- baseline: d embedding values per token, plus every matrix of the
  eliminated layer-0 region (Q, K, V and, for parallel layouts, the FFN up
  and down matrices of every expert) counted once per batch step, because a
  batch shares one weight fetch
- precomputed: 2(d+e) table values per token
- layer-0 FLOPs: 2 per multiply-accumulate of each layer-0 matmul and
  attention dot product
- KV-cache traffic is not counted

The cost-model counters follow the read model literally: a routed FFN is
charged as the whole expert bank, dense, and router and SwiGLU gate matrices
are left out. The actual counters record what the engine really fetched and
multiplied: routed experts only, router and gate included.

The counters live in a Meter passed explicitly to the forward functions;
unmetered runs pass None and pay nothing. A Meter belongs to one run.
"""

import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError
from .analyzer import render_rows
from .model import KVCache, ModelWeights
from .precompute import TransformedModel, decode, eliminated_tensor_shapes, prefill

logger = logging.getLogger(__name__)

BASELINE = "baseline"
PRECOMPUTED = "precomputed"
VARIANTS = (BASELINE, PRECOMPUTED)


def accounted_region(config):
    """Names of the layer-0 matrices whose reads the precompute eliminates."""
    return frozenset(
        name for name in eliminated_tensor_shapes(config)
        if not name.endswith(".bias") and ".norm1." not in name
    )


def cost_model_region(config):
    """The eliminated matrices the read model charges: no router, no gate."""
    return frozenset(
        name for name in accounted_region(config)
        if not name.endswith((".router", ".gate"))
    )


def expert_bank(config):
    return frozenset(name for name in cost_model_region(config) if ".expert" in name)


class Meter:
    """
    Exact counters for one metered run.

    `region` matrices are charged to the cost model once per batch step;
    those also in `bank` are charged through bank_read, for every row, whether
    or not routing picked them. `actual` matrices are counted when fetched.
    """

    def __init__(self, region=(), actual=(), bank=()):
        self.region = frozenset(region)
        self.actual = frozenset(actual) | self.region
        self.bank = frozenset(bank) & self.region
        self.embedding = 0
        self.table = 0
        self.region_weights = 0
        self.actual_weights = 0
        self.flops_layer0 = 0
        self.actual_flops_layer0 = 0
        self.wall_time_ns = {}
        self._charged = set()
        self._fetched = set()

    @classmethod
    def for_config(cls, config):
        return cls(cost_model_region(config), accounted_region(config), expert_bank(config))

    def begin_batch(self):
        """Starts a batch step; region weights are counted once per step."""
        self._charged.clear()
        self._fetched.clear()

    def _charge(self, name, tensor):
        if name not in self._charged:
            self._charged.add(name)
            self.region_weights += int(tensor.size)

    def weight_read(self, name, tensor):
        if name in self.actual and name not in self._fetched:
            self._fetched.add(name)
            self.actual_weights += int(tensor.size)
        if name in self.region and name not in self.bank:
            self._charge(name, tensor)

    def bank_read(self, name, tensor, rows):
        """Expert matrix of the eliminated FFN, evaluated densely by the cost model."""
        if name in self.bank:
            self._charge(name, tensor)
            self.flops_layer0 += 2 * int(rows) * int(tensor.size)

    def embedding_reads(self, n):
        self.embedding += int(n)

    def table_reads(self, n):
        self.table += int(n)

    def add_flops(self, layer, n, name=None):
        if layer != 0:
            return
        self.actual_flops_layer0 += int(n)
        # router and gate of the eliminated region are outside the cost model
        if name is None or name not in self.actual or (name in self.region and name not in self.bank):
            self.flops_layer0 += int(n)

    @contextmanager
    def phase(self, name):
        start = time.perf_counter_ns()
        try:
            yield
        finally:
            self.wall_time_ns[name] = self.wall_time_ns.get(name, 0) + time.perf_counter_ns() - start

    @property
    def total_reads(self):
        return self.embedding + self.table + self.region_weights


@dataclass(frozen=True)
class MeterReport:
    variant: str
    config_name: str
    batch: int
    steps: int
    embedding_or_table_reads: int
    region_weight_reads: int
    reads_per_step: int
    flops_layer0: int
    actual_region_weight_reads: int = 0
    flops_layer0_actual: int = 0
    wall_time_ns: dict = field(default_factory=dict)

    @classmethod
    def from_meter(cls, variant, config_name, batch, steps, meter):
        """Per-step reads from a meter that ran `steps` batch steps."""
        return cls(
            variant=variant,
            config_name=config_name,
            batch=batch,
            steps=steps,
            embedding_or_table_reads=(meter.embedding + meter.table) // steps,
            region_weight_reads=meter.region_weights // steps,
            reads_per_step=meter.total_reads // steps,
            flops_layer0=meter.flops_layer0,
            actual_region_weight_reads=meter.actual_weights // steps,
            flops_layer0_actual=meter.actual_flops_layer0,
            wall_time_ns=dict(meter.wall_time_ns),
        )

    @property
    def flops_layer0_per_token(self):
        return self.flops_layer0 / (self.batch * self.steps)

    @property
    def flops_layer0_actual_per_token(self):
        return self.flops_layer0_actual / (self.batch * self.steps)

    def to_dict(self):
        d = asdict(self)
        d["flops_layer0_per_token"] = self.flops_layer0_per_token
        d["flops_layer0_actual_per_token"] = self.flops_layer0_actual_per_token
        return d


def _check_variant(variant, model):
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    expected = TransformedModel if variant == PRECOMPUTED else ModelWeights
    if not isinstance(model, expected):
        raise ConfigError(f"{variant} run needs a {expected.__name__}")


def seeded_prompts(vocab_size, batch, seq_len, seed):
    rng = np.random.default_rng(seed)
    return rng.integers(0, vocab_size, size=(batch, seq_len))


def _decode_steps(model, prompts, meter=None):
    """Advances every sequence one token per step; returns ns per step."""
    batch, steps = prompts.shape
    caches = [KVCache(model.config) for _ in range(batch)]
    timings = []
    for step in range(steps):
        if meter is not None:
            meter.begin_batch()
        start = time.perf_counter_ns()
        for b in range(batch):
            decode(model, int(prompts[b, step]), caches[b], meter)
        timings.append(time.perf_counter_ns() - start)
    return timings


def metered_forward(variant, model, batch, seq_len, seed=0):
    """
    Runs `seq_len` batch steps of B seeded sequences through decode and
    returns per-step read counts and total layer-0 FLOPs.
    """
    _check_variant(variant, model)
    if batch < 1 or seq_len < 1:
        raise ConfigError("batch and seq_len must be >= 1")
    config = model.config
    if seq_len > config.max_seq_len:
        raise ConfigError(f"seq_len {seq_len} exceeds max_seq_len {config.max_seq_len}")
    prompts = seeded_prompts(config.vocab_size, batch, seq_len, seed)
    meter = Meter.for_config(config)

    with meter.phase("prefill"):
        for b in range(batch):
            prefill(model, prompts[b].tolist())
    with meter.phase("decode"):
        _decode_steps(model, prompts, meter)

    logger.debug("%s %s: B=%d steps=%d reads=%d flops0=%d", variant, config.name,
                 batch, seq_len, meter.total_reads, meter.flops_layer0)
    return MeterReport.from_meter(variant, config.name, batch, seq_len, meter)


@dataclass(frozen=True)
class BenchRow:
    variant: str
    batch: int
    steps: int
    median_ns_per_step: float
    reads_per_step: int
    flops_layer0_per_token: float


def bench(baseline, transformed, batch=1, steps=16, repeats=5, seed=0):
    """
    Median wall time per decode step for both variants, next to the metered
    reads. Desk-scale timings are noisy; nothing here passes or fails.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    rows = []
    for variant, model in ((BASELINE, baseline), (PRECOMPUTED, transformed)):
        _check_variant(variant, model)
        prompts = seeded_prompts(model.config.vocab_size, batch, steps, seed)
        timings = []
        for _ in range(repeats):
            timings.extend(_decode_steps(model, prompts))
        metered = metered_forward(variant, model, batch, steps, seed)
        rows.append(BenchRow(variant, batch, steps, float(np.median(timings)),
                             metered.reads_per_step, metered.flops_layer0_per_token))
        logger.debug("bench %s: median %.0f ns/step", variant, rows[-1].median_ns_per_step)
    return rows


METER_HEADERS = ("variant", "config", "batch", "steps", "embedding_or_table_reads",
                 "region_weight_reads", "reads_per_step", "flops_layer0",
                 "actual_region_weight_reads", "flops_layer0_actual")
BENCH_HEADERS = ("variant", "batch", "steps", "median_us_per_step", "reads_per_step",
                 "flops_layer0_per_token")


def render_meter_reports(reports, fmt="text"):
    rows = [[r.variant, r.config_name, r.batch, r.steps, r.embedding_or_table_reads,
             r.region_weight_reads, r.reads_per_step, r.flops_layer0,
             r.actual_region_weight_reads, r.flops_layer0_actual] for r in reports]
    return render_rows(METER_HEADERS, rows, fmt)


def render_bench(rows, fmt="text"):
    table = [[r.variant, r.batch, r.steps, round(r.median_ns_per_step / 1000.0, 1),
              r.reads_per_step, round(r.flops_layer0_per_token, 1)] for r in rows]
    return render_rows(BENCH_HEADERS, table, fmt)
