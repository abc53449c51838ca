"""
Published reference numbers for the four preset models.

Single source for the test suite and for the published-value check of `analyze`.
Reduction factors are keyed by batch size; percentages are rounded to the
nearest integer. The serial Mixtral has only weight-count values.
"""

WEIGHT_COUNTS = {
    "pythia-6.9b": {
        "qp_per_layer": 33_554_432,
        "kv_per_layer": 33_554_432,
        "ffn_per_layer": 134_217_728,
        "embed_total": 412_876_800,
        "total": 6_855_327_744,
    },
    "mistral-7b": {
        "qp_per_layer": 33_554_432,
        "kv_per_layer": 8_388_608,
        "ffn_per_layer": 117_440_512,
        "embed_total": 262_144_000,
        "total": 5_362_417_664,
    },
    "mixtral-8x7b": {
        "qp_per_layer": 33_554_432,
        "kv_per_layer": 8_388_608,
        "ffn_per_layer": 939_524_096,
        "embed_total": 262_144_000,
        "total": 31_669_092_352,
    },
}
WEIGHT_COUNTS["mixtral-8x7b-parallel"] = WEIGHT_COUNTS["mixtral-8x7b"]

# rounded totals as quoted in the comparison table (billions)
TOTAL_BILLIONS = {"pythia-6.9b": 6.9, "mistral-7b": 5.4, "mixtral-8x7b": 31.7}

COSTS = {
    "pythia-6.9b": {
        "e": 4096,
        "eliminated_weights": 184_549_376,
        "reads_without": {1: 184_553_472},
        "reads_with": {1: 16_384},
        "reduction_factor": {1: 11_264, 16: 704, 256: 44, 1024: 11},
        "embed_mem_increase": 619_315_200,
        "mem_delta_abs": 434_765_824,
        "mem_delta_rel_pct": 6,
    },
    "mistral-7b": {
        "e": 1024,
        "eliminated_weights": 25_165_824,
        "reads_without": {1: 25_169_920},
        "reads_with": {1: 10_240},
        "reduction_factor": {1: 2_458, 16: 154, 256: 10, 1024: 3},
        "embed_mem_increase": 196_608_000,
        "mem_delta_abs": 171_442_176,
        "mem_delta_rel_pct": 3,
    },
    "mixtral-8x7b-parallel": {
        "e": 1024,
        "eliminated_weights": 964_689_920,
        "reads_without": {1: 964_694_016},
        "reads_with": {1: 10_240},
        "reduction_factor": {1: 94_208, 16: 5_888, 256: 368, 1024: 92},
        "embed_mem_increase": 196_608_000,
        "mem_delta_abs": -768_081_920,
        "mem_delta_rel_pct": -2,
    },
}

# upper bound on savings when only one of n layers is optimized
MAX_SAVINGS_PCT = {4: 25, 32: 3}

PUBLISHED_BATCHES = (1, 16, 256, 1024)
