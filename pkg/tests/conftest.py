import numpy as np
import pytest

# Acceptance checks (tests/test_acceptance.py) summarized as one line each at
# the end of the run: test function -> (check number, what it demonstrates).
ACCEPTANCE_CHECKS = {
    "test_conv_flop_total_near_published_budget":
        (1, "TinyYOLOv3-416 conv FLOPs within 2% of 5.5 GFLOPs"),
    "test_fusion_flop_savings_match_batchnorm_cost":
        (2, "fusion saves 23.8 MFLOPs +/- 0.5%, reduction rounds to 0.4%"),
    "test_fusion_preserves_outputs_across_random_models":
        (3, "100 random models x 10 inputs: fused deviation <= 1e-4"),
    "test_zero_filter_pruning_is_bit_exact":
        (4, "removing all-zero filters leaves outputs bit-identical"),
    "test_prune_routine_matches_exhaustive_search":
        (5, "threshold sweep equals exhaustive grid search"),
    "test_right_shift_equals_floor_division_exhaustively":
        (6, "rshift(x,p) == floor(x/2^p) over the int16 range, p in 0..8"),
    "test_quantization_roundtrip_error_bound":
        (7, "1e6 values in [-1,1]: roundtrip error <= 1/512, no saturation"),
    "test_integer_engine_mse_stays_small":
        (8, "random fused 3-layer nets: per-layer int-vs-float MSE < 1e-3"),
    "test_parameter_totals_match_independent_summation":
        (9, "conv weights 8,845,488 total / 4,718,592 in conv_7"),
    "test_integer_engine_is_deterministic_across_threads":
        (10, "integer engine byte-identical across runs and worker counts"),
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread_default(monkeypatch):
    # Keep evaluator parallelism at one worker unless a test opts out;
    # thread-count variation is exercised explicitly in the determinism tests.
    monkeypatch.setenv("CNNADAPT_THREADS", "1")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            name = report.location[2].split("[")[0]
            if name in ACCEPTANCE_CHECKS:
                # setup/teardown errors count as failures for the check
                current = outcomes.get(name, "passed")
                outcomes[name] = status if status != "passed" else current
    if not outcomes:
        return
    terminalreporter.write_sep("-", "acceptance summary")
    for name, (num, what) in sorted(ACCEPTANCE_CHECKS.items(),
                                    key=lambda kv: kv[1][0]):
        if name not in outcomes:
            continue
        verdict = "PASS" if outcomes[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"[check {num:>2}] {verdict} - {what}")
