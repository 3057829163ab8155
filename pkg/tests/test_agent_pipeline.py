import json

import numpy as np
import pytest

from palette.agent_pipeline import (
    CountryQuery,
    Draft,
    FusedLocalMeta,
    OpinionItem,
    PipelineConfig,
    draft,
    evaluate_country,
    final_decision,
    fuse_meta,
    load_opinion_items,
    prompting_baseline,
    run_item,
    self_regulate,
)
from palette.backends import LocalReference, ScriptedMock
from palette.common import CONTINENTS
from palette.errors import BackendFailure, EmptyDataset, UnparseableDistribution
from palette.gate_router import init_gate
from palette.metrics import alignment_score, normalize_distribution
from palette.reference_model import forward, init_model
from palette.tensor_store import Checkpoint

from helpers import tiny_config, tiny_model

NZL_QUESTION = (
    "Most people consider both freedom and equality to be important, but if you had "
    "to choose between them, which one would you consider more important?"
)
NZL_OPTIONS = ["Freedom", "Equality", "Don't know", "No answer"]
NZL_GOLD_FULL = [0.6709999999999999, 0.242, 0.061, 0.0, 0.026000000000000002]
NZL_PRED = [0.6049056212210604, 0.3230594648058141, 0.060349139731253465, 0.0116857742428727]
NZL_STANCES = {"Africa": "B", "America": "A", "Asia": "B", "Europe": "C", "Oceania": "A"}


def nzl_item():
    return OpinionItem(
        question=NZL_QUESTION,
        options=list(NZL_OPTIONS),
        gold=normalize_distribution(NZL_GOLD_FULL[:4]),
        country="NZL",
        qid="nzl-0",
    )


def nzl_agents():
    return {
        c: ScriptedMock(default=f"[{c}] leans toward option {NZL_STANCES[c]}.", label=c)
        for c in CONTINENTS
    }


def nzl_meta():
    return ScriptedMock(
        script=[
            "For NZL the regional drafts lean toward personal liberty; keep dissent visible.",
            json.dumps(NZL_PRED),
        ],
        label="meta",
    )


def test_draft_mock_passthrough_fixed_order():
    agents = {c: ScriptedMock(default=f"resp-{c}", label=c) for c in CONTINENTS}
    d = draft(agents, CountryQuery("NZL", "q?"))
    assert tuple(label for label, _ in d.entries) == CONTINENTS
    assert [text for _, text in d.entries] == [f"resp-{c}" for c in CONTINENTS]
    for agent in agents.values():
        assert len(agent.calls) == 1


def test_draft_atomic_failure_names_continent():
    agents = {c: ScriptedMock(default=f"resp-{c}", label=c) for c in CONTINENTS}
    agents["Asia"] = ScriptedMock(label="Asia")  # no reply configured
    with pytest.raises(BackendFailure) as exc:
        draft(agents, CountryQuery("NZL", "q?"))
    assert exc.value.label == "Asia"


def test_draft_requires_all_agents():
    agents = {c: ScriptedMock(default="r", label=c) for c in CONTINENTS[:4]}
    with pytest.raises(BackendFailure):
        draft(agents, CountryQuery("NZL", "q?"))


def test_draft_invariant_exactly_five_in_order():
    with pytest.raises(ValueError):
        Draft(entries=(("Asia", "x"),))
    with pytest.raises(ValueError):
        Draft(entries=tuple((c, "x") for c in reversed(CONTINENTS)))


def test_self_regulate_echo_preserves_tags():
    agents = {c: ScriptedMock(default=f"resp-{c}", label=c) for c in CONTINENTS}
    d = draft(agents, CountryQuery("NZL", "q?"))
    meta = ScriptedMock(echo=True)
    regulated = self_regulate(meta, d, CountryQuery("NZL", "q?"))
    for c in CONTINENTS:
        assert f"[{c}]" in regulated
        assert f"resp-{c}" in regulated
    assert len(meta.calls) == 1


def test_final_decision_parses_table_distribution():
    meta = ScriptedMock(default=json.dumps(NZL_PRED))
    answer, p_gen = final_decision(meta, "context", nzl_item(), "NZL")
    assert answer == "A"
    expected = normalize_distribution(NZL_PRED)
    assert np.allclose(p_gen, expected, atol=1e-12)
    assert abs(sum(p_gen) - 1.0) < 1e-9


def test_final_decision_reprompts_then_fails():
    meta = ScriptedMock(default="no numbers here")
    with pytest.raises(UnparseableDistribution):
        final_decision(meta, "ctx", nzl_item(), "NZL")
    assert len(meta.calls) == 3


def test_final_decision_recovers_on_reprompt():
    meta = ScriptedMock(script=["garbage", json.dumps([0.7, 0.1, 0.1, 0.1])])
    answer, p_gen = final_decision(meta, "ctx", nzl_item(), "NZL")
    assert answer == "A"
    assert len(meta.calls) == 2


def test_final_decision_local_backend_softmax_oracle():
    params = tiny_model()
    backend = LocalReference(params)
    item = OpinionItem(
        question="pick", options=["alpha", "beta"], gold=[0.5, 0.5], country="X", qid="q0"
    )
    answer, p_gen = final_decision(backend, "", item, "X")
    scores = LocalReference(params).score_options(backend.calls[0], item.options)
    z = np.asarray(scores)
    expected = np.exp(z - z.max())
    expected = expected / expected.sum()
    assert np.allclose(p_gen, expected, atol=1e-12)
    assert answer in ("A", "B")
    assert abs(sum(p_gen) - 1.0) < 1e-12


def test_evaluate_country_nzl_case_closed_form():
    item = nzl_item()
    config = PipelineConfig(agents=nzl_agents(), meta=nzl_meta())
    report = evaluate_country(config, [item], "NZL")
    expected = alignment_score(normalize_distribution(NZL_PRED), item.gold)
    assert report.per_question[0]["s_align"] == pytest.approx(expected, abs=1e-6)
    assert report.per_question[0]["answer"] == "A"
    assert report.mean_s_align == pytest.approx(expected, abs=1e-12)


def test_evaluate_country_is_byte_deterministic():
    runs = []
    for _ in range(2):
        config = PipelineConfig(agents=nzl_agents(), meta=nzl_meta())
        runs.append(evaluate_country(config, [nzl_item()], "NZL").to_json())
    assert runs[0] == runs[1]


def test_evaluate_country_perfect_oracle():
    items = []
    golds = [[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.1, 0.8]]
    for i, gold in enumerate(golds):
        items.append(
            OpinionItem(
                question=f"q{i}", options=["a", "b", "c"], gold=gold, country="X", qid=f"q{i}"
            )
        )
    meta = ScriptedMock(script=[json.dumps(g) for g in golds])
    agents = {c: ScriptedMock(default="r", label=c) for c in CONTINENTS}
    config = PipelineConfig(agents=agents, meta=meta, no_draft=True)
    report = evaluate_country(config, items, "X")
    assert report.mean_s_align == pytest.approx(1.0, abs=1e-12)
    assert report.pearson_r == pytest.approx(1.0, abs=1e-12)


def test_evaluate_country_mean_is_mean_of_scores():
    golds = [[0.9, 0.1], [0.4, 0.6]]
    preds = [[0.5, 0.5], [0.3, 0.7]]
    items = [
        OpinionItem(question=f"q{i}", options=["a", "b"], gold=g, country="X", qid=f"q{i}")
        for i, g in enumerate(golds)
    ]
    meta = ScriptedMock(script=[json.dumps(p) for p in preds])
    config = PipelineConfig(agents={}, meta=meta, no_draft=True)
    report = evaluate_country(config, items, "X")
    per_q = [q["s_align"] for q in report.per_question]
    assert report.mean_s_align == pytest.approx(sum(per_q) / len(per_q), abs=1e-9)


def test_evaluate_country_empty_items():
    config = PipelineConfig(agents={}, meta=ScriptedMock(default="x"))
    with pytest.raises(EmptyDataset):
        evaluate_country(config, [], "X")


def test_evaluate_country_wrong_country_guard():
    config = PipelineConfig(agents={}, meta=ScriptedMock(default="x"))
    with pytest.raises(ValueError):
        evaluate_country(config, [nzl_item()], "AUS")


def test_ablation_call_patterns():
    item = nzl_item()

    # full pipeline: 1 call per agent, 2 meta calls (regulate + final)
    agents = nzl_agents()
    meta = nzl_meta()
    run_item(PipelineConfig(agents=agents, meta=meta), item, "NZL")
    assert all(len(a.calls) == 1 for a in agents.values())
    assert len(meta.calls) == 2

    # no_draft: no agent calls, single meta call
    agents = nzl_agents()
    meta = ScriptedMock(default=json.dumps(NZL_PRED))
    run_item(PipelineConfig(agents=agents, meta=meta, no_draft=True), item, "NZL")
    assert all(len(a.calls) == 0 for a in agents.values())
    assert len(meta.calls) == 1

    # no_regulate: agents called, single meta call seeing the raw tagged draft
    agents = nzl_agents()
    meta = ScriptedMock(default=json.dumps(NZL_PRED))
    run_item(PipelineConfig(agents=agents, meta=meta, no_regulate=True), item, "NZL")
    assert all(len(a.calls) == 1 for a in agents.values())
    assert len(meta.calls) == 1
    assert "[Africa] perspective:" in meta.calls[0]


def test_no_draft_no_regulate_equals_prompting_baseline():
    item = nzl_item()
    meta_pipeline = ScriptedMock(default=json.dumps(NZL_PRED))
    config = PipelineConfig(agents=nzl_agents(), meta=meta_pipeline, no_draft=True, no_regulate=True)
    out_pipeline = run_item(config, item, "NZL")

    meta_baseline = ScriptedMock(default=json.dumps(NZL_PRED))
    out_baseline = prompting_baseline(meta_baseline, item, "NZL")

    assert meta_pipeline.calls == meta_baseline.calls  # transcript equality
    assert out_pipeline == out_baseline


def test_load_opinion_items_truncates_and_renormalizes(tmp_path):
    path = tmp_path / "qa.jsonl"
    rows = [
        {
            "question": NZL_QUESTION,
            "options": NZL_OPTIONS,
            "selections": {"NZL": NZL_GOLD_FULL},
            "country": "NZL",
        },
        {
            "question": "other country row",
            "options": ["a", "b"],
            "selections": {"AUS": [0.5, 0.5]},
            "country": "AUS",
        },
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows))
    items = load_opinion_items(path, "NZL")
    assert len(items) == 1
    expected = normalize_distribution(NZL_GOLD_FULL[:4])
    assert np.allclose(items[0].gold, expected, atol=1e-12)
    assert len(items[0].options) == 4


# --- fusion ------------------------------------------------------------------

@pytest.fixture(scope="module")
def fusion_setup():
    cfg = tiny_config(d_model=32, n_heads=4, seed=5)
    base = init_model(cfg)
    experts = {
        c: init_model(tiny_config(d_model=32, n_heads=4, seed=100 + i))
        for i, c in enumerate(CONTINENTS)
    }
    gate = init_gate(base)
    return base, experts, gate


def test_fuse_meta_one_hot_forward_equivalence(fusion_setup):
    base, experts, _ = fusion_setup
    fused, weights = fuse_meta(base, experts, None, "NZL", gate_override=(0, 0, 0, 1, 0))
    assert weights.argmax_label() == "Europe"
    composed = Checkpoint(
        [experts["Europe"][n] if ".ffn." in n else base[n] for n in base.names],
        base.metadata,
    )
    rng = np.random.default_rng(0)
    for _ in range(10):
        tokens = [256] + list(rng.integers(0, 256, 12))
        _, l1 = forward(fused, tokens)
        _, l2 = forward(composed, tokens)
        assert np.max(np.abs(l1 - l2)) < 1e-5
    for name in base.names:
        if ".ffn." not in name:
            assert fused[name] == base[name]


def test_fuse_meta_uniform_gate_identical_experts(fusion_setup):
    base, experts, _ = fusion_setup
    same = {c: experts["Asia"] for c in CONTINENTS}
    fused, _ = fuse_meta(base, same, None, "NZL", gate_override=(0.2,) * 5)
    for name in base.names:
        if ".ffn." in name:
            assert np.allclose(fused[name].data, experts["Asia"][name].data, atol=1e-7)


def test_fuse_meta_routes_through_gate(fusion_setup):
    base, experts, gate = fusion_setup
    fused, weights = fuse_meta(base, experts, gate, "NZL", "a question")
    assert abs(sum(weights) - 1.0) < 1e-9
    assert fused.metadata["gate"] == ",".join(f"{w:.9g}" for w in weights)


def test_fused_local_meta_per_country_caches(fusion_setup):
    base, experts, gate = fusion_setup
    provider = FusedLocalMeta(base, experts, gate, mode="per-country")
    b1 = provider.backend_for("NZL", "first query")
    b2 = provider.backend_for("NZL", "second query")
    b3 = provider.backend_for("AUS", "third query")
    assert b1 is b2
    assert b1 is not b3
    assert len(provider.fusions) == 2


def test_fused_local_meta_per_request_refuses(fusion_setup):
    base, experts, gate = fusion_setup
    provider = FusedLocalMeta(base, experts, gate, mode="per-request")
    b1 = provider.backend_for("NZL", "first query")
    b2 = provider.backend_for("NZL", "second query")
    assert b1 is not b2
    assert len(provider.fusions) == 2


def test_fused_local_meta_no_fuse_uses_base(fusion_setup):
    base, experts, gate = fusion_setup
    provider = FusedLocalMeta(base, experts, gate, no_fuse=True)
    backend = provider.backend_for("NZL", "q")
    assert backend.params == base
    assert provider.fusions == []
    assert provider.backend_for("AUS", "q2") is backend


def test_local_pipeline_end_to_end(fusion_setup):
    base, experts, gate = fusion_setup
    agents = {c: LocalReference(experts[c], max_new_tokens=4, label=c) for c in CONTINENTS}
    meta = FusedLocalMeta(base, experts, gate, max_new_tokens=4)
    item = OpinionItem(
        question="pick", options=["alpha", "beta"], gold=[0.6, 0.4], country="X", qid="q0"
    )
    config = PipelineConfig(agents=agents, meta=meta)
    r1 = evaluate_country(config, [item], "X").to_json()
    agents2 = {c: LocalReference(experts[c], max_new_tokens=4, label=c) for c in CONTINENTS}
    meta2 = FusedLocalMeta(base, experts, gate, max_new_tokens=4)
    r2 = evaluate_country(
        PipelineConfig(agents=agents2, meta=meta2), [item], "X"
    ).to_json()
    assert r1 == r2
