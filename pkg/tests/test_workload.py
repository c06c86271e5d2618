import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epsim import (
    ConfigurationError,
    ModelConfig,
    Topology,
    TraceParseError,
    WorkloadSpec,
    export_trace,
    generate,
    ingest_trace,
)


@pytest.fixture
def topo():
    return Topology(num_nodes=1, gpus_per_node=8, ep_degree=8, pp_degree=1)


def make_model(top_k, num_experts=32):
    return ModelConfig(num_experts=num_experts, top_k=top_k, dyn=1, tau=0)


def test_uniform_counts_near_mean(topo):
    spec = WorkloadSpec(tokens_per_microbatch=20000, top_k=2, skew="uniform", seed=1)
    model = make_model(2)
    (batch,) = generate(spec, model, topo, 1)
    totals = batch.expert_totals
    n = 20000 * 2
    p = 2 / 32  # marginal inclusion probability of each expert
    sigma = np.sqrt(20000 * p * (1 - p))
    assert np.all(np.abs(totals - 20000 * p) < 4 * sigma)


def test_hot_set_degenerate_concentration(topo):
    spec = WorkloadSpec(
        tokens_per_microbatch=500, top_k=1, skew="hot_set", hot_count=1, hot_mass=1.0, seed=3
    )
    model = make_model(1)
    (batch,) = generate(spec, model, topo, 1)
    totals = batch.expert_totals
    assert totals.max() == 500
    assert np.count_nonzero(totals) == 1


def test_zipf_deterministic(topo):
    spec = WorkloadSpec(tokens_per_microbatch=1000, top_k=2, skew="zipf", zipf_s=1.2, seed=11)
    model = make_model(2)
    a = generate(spec, model, topo, 3)
    b = generate(spec, model, topo, 3)
    assert a == b


def test_top_k_exceeds_experts(topo):
    spec = WorkloadSpec(tokens_per_microbatch=10, top_k=33)
    with pytest.raises(ConfigurationError):
        generate(spec, make_model(33), topo, 1)


def test_top_k_equals_experts_gives_full_fanout(topo):
    spec = WorkloadSpec(tokens_per_microbatch=64, top_k=4, skew="zipf", zipf_s=2.0, seed=2)
    model = make_model(4, num_experts=4)
    (batch,) = generate(spec, model, topo, 1)
    # sampling without replacement: every token hits every expert once
    assert np.all(batch.expert_totals == 64)


@given(st.integers(0, 10_000), st.sampled_from(["uniform", "zipf", "dirichlet", "hot_set"]))
@settings(max_examples=25, deadline=None)
def test_token_conservation(seed, skew):
    topo = Topology(num_nodes=1, gpus_per_node=4, ep_degree=4, pp_degree=1)
    spec = WorkloadSpec(
        tokens_per_microbatch=256, top_k=3, skew=skew, hot_count=2, hot_mass=0.7,
        drift=0.5, seed=seed,
    )
    model = make_model(3, num_experts=16)
    batches = generate(spec, model, topo, 3)
    for b in batches:
        assert b.total_tokens == 256 * 3
        # no token routed twice to one expert, so totals stay below token count
        assert b.expert_totals.max() <= 256


def test_drift_redraws_popularity(topo):
    base = dict(tokens_per_microbatch=4000, top_k=1, skew="hot_set", hot_count=1, hot_mass=1.0)
    still = generate(WorkloadSpec(drift=0.0, seed=5, **base), make_model(1), topo, 20)
    moved = generate(WorkloadSpec(drift=1.0, seed=5, **base), make_model(1), topo, 20)
    hot = lambda bs: {int(b.expert_totals.argmax()) for b in bs}
    assert len(hot(still)) == 1
    assert len(hot(moved)) > 1


class TestTrace:
    def test_round_trip(self, tmp_path, topo):
        spec = WorkloadSpec(tokens_per_microbatch=200, top_k=2, skew="dirichlet",
                            dirichlet_alpha=0.3, seed=8)
        batches = generate(spec, make_model(2), topo, 4)
        path = tmp_path / "t.trace"
        export_trace(batches, path)
        again = ingest_trace(path)
        assert len(again) == 4
        for orig, back in zip(batches, again):
            assert np.array_equal(
                orig.counts[: back.counts.shape[0], : back.counts.shape[1]], back.counts
            )
            assert orig.expert_totals.sum() == back.expert_totals.sum()

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.trace"
        path.write_text("")
        assert ingest_trace(path) == []

    def test_hand_written(self, tmp_path):
        path = tmp_path / "hand.trace"
        path.write_text(
            "iter,layer,expert_id,source_device,token_count\n"
            "0,0,0,0,5\n"
            "0,0,1,0,7\n"
        )
        (batch,) = ingest_trace(path)
        assert batch.expert_totals.tolist() == [5, 7]

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.trace"
        path.write_text(
            "iter,layer,expert_id,source_device,token_count\n"
            "0,0,0,0,5\n"
            "0,0,nope,0,5\n"
        )
        with pytest.raises(TraceParseError, match="line 3"):
            ingest_trace(path)

    def test_negative_count_rejected(self, tmp_path):
        path = tmp_path / "neg.trace"
        path.write_text(
            "iter,layer,expert_id,source_device,token_count\n"
            "0,0,0,0,-2\n"
        )
        with pytest.raises(TraceParseError):
            ingest_trace(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "nohdr.trace"
        path.write_text("0,0,0,0,5\n")
        with pytest.raises(TraceParseError, match="line 1"):
            ingest_trace(path)
