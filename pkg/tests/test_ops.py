import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import basic, baseline, chain, loopback
from wfevolve import graph as g
from wfevolve.errors import IncompletePayload, InvalidTemplate, NeedDefaultBranch, ValidationRejected
from wfevolve.graph import EdgeKind, validate_graph
from wfevolve.ops import (
    REQUIRED_PAYLOAD,
    FrameworkTemplate,
    OpKind,
    Origin,
    TemplateId,
    WorkflowOperation,
    add_conditional,
    add_loop,
    add_parallel,
    apply_operation,
    expand_framework,
    parse_operation,
)


def describer_chain():
    return g.add_node(
        chain("describer", "diagnoser"),
        basic("reanalyzer", "Look again at {{image_ref}} given {{describer}}."),
        after="describer",
    )


# apply_operation -----------------------------------------------------------


def test_modify_prompts_changes_only_that_field():
    gr = baseline()
    op = WorkflowOperation(
        OpKind.MODIFY_PROMPTS,
        {"node_id": "diagnoser", "human_prompt": "Look closely at {{image_ref}}; rank from {{label_vocabulary}}"},
    )
    out = apply_operation(gr, op)
    before, after = gr.nodes[0].to_dict(), out.nodes[0].to_dict()
    changed = {k for k in before if before[k] != after[k]}
    assert changed == {"human_prompt"}
    assert out.version == gr.version + 1


def test_add_loop_duplicate_back_edge_rejected_atomically():
    gr = g.add_edge(chain("A", "B", "C"), loopback("C", "A"))
    snapshot = gr.to_json()
    op = WorkflowOperation(
        OpKind.ADD_LOOP, {"body_entry": "A", "body_exit": "C", "exit_condition": "stable", "max_iterations": 2}
    )
    with pytest.raises(ValidationRejected) as info:
        apply_operation(gr, op)
    assert "DUPLICATE_EDGE" in info.value.rule_ids
    assert gr.to_json() == snapshot


def test_add_node_missing_name_is_incomplete():
    env = {
        "op_kind": "AddNode",
        "origin": "Suggestion",
        "payload": {
            "node_id": "x", "kind": "Basic", "description": "d",
            "system_prompt": "s", "human_prompt": "h", "after": "diagnoser",
        },
    }
    with pytest.raises(IncompletePayload):
        parse_operation(env)
    with pytest.raises(IncompletePayload):
        apply_operation(baseline(), WorkflowOperation(OpKind.ADD_NODE, env["payload"], Origin.SUGGESTION))


def test_envelope_roundtrip():
    op = WorkflowOperation(OpKind.REMOVE_NODE, {"node_id": "B"}, Origin.SUGGESTION)
    assert parse_operation(json.loads(json.dumps(op.to_dict()))) == op
    with pytest.raises(IncompletePayload):
        parse_operation({"op_kind": "Teleport", "payload": {}})
    with pytest.raises(IncompletePayload):
        parse_operation({"op_kind": "RemoveNode", "payload": {"node_id": "B"}, "extra": 1})


def test_precondition_errors_become_rejections():
    op = WorkflowOperation(OpKind.REMOVE_NODE, {"node_id": "diagnoser"})
    with pytest.raises(ValidationRejected) as info:
        apply_operation(baseline(), op)
    assert info.value.rule_ids == ["PROTECTED_NODE"]


# add_conditional -------------------------------------------------------------


def test_add_conditional_two_branches():
    gr = describer_chain()
    # reanalyzer currently sits between describer and diagnoser; route around it conditionally
    out = add_conditional(
        gr,
        "describer",
        [{"branch_label": "image_unclear", "target": "reanalyzer"}, {"branch_label": "default", "target": "diagnoser"}],
        "Is the image description too vague to diagnose?",
    )
    cond = [e for e in out.edges if e.kind is EdgeKind.CONDITIONAL]
    assert len(cond) == 2
    assert {e.branch_label for e in cond} == {"image_unclear", "default"}
    assert validate_graph(out).ok


def test_add_conditional_single_branch():
    with pytest.raises(NeedDefaultBranch):
        add_conditional(chain("A", "B"), "A", [{"branch_label": "default", "target": "B"}], "c")


def test_add_conditional_self_target_rejected():
    with pytest.raises(ValidationRejected) as info:
        add_conditional(
            chain("A", "B"),
            "A",
            [{"branch_label": "again", "target": "A"}, {"branch_label": "default", "target": "B"}],
            "retry?",
        )
    assert "CYCLE_WITHOUT_EXIT" in info.value.rule_ids


# add_loop ---------------------------------------------------------------------


def test_loop_around_single_node():
    gr = chain("describe", "refine_description", "diagnose")
    out = add_loop(gr, "refine_description", "refine_description", "description is stable", 3)
    loops = [e for e in out.edges if e.kind is EdgeKind.LOOP_BACK]
    assert len(loops) == 1 and loops[0].max_iterations == 3


def test_loop_zero_iterations_rejected():
    with pytest.raises(ValidationRejected) as info:
        add_loop(chain("A", "B"), "A", "B", "stable", 0)
    assert "INVALID_MAX_ITERATIONS" in info.value.rule_ids


def test_loop_without_exit_rejected():
    with pytest.raises(ValidationRejected) as info:
        add_loop(chain("A", "B"), "A", "B", "", 2)
    assert "LOOP_WITHOUT_EXIT" in info.value.rule_ids


def test_loop_spanning_conditional_block():
    gr = add_conditional(
        chain("A", "B", "C", "D"),
        "A",
        [{"branch_label": "skip", "target": "C"}, {"branch_label": "default", "target": "B"}],
        "skip?",
    )
    out = add_loop(gr, "A", "C", "settled", 2)
    assert validate_graph(out).ok
    # a second loop that shares the cycle A->B->C is fine; one that stacks on the same source is not
    with pytest.raises(ValidationRejected):
        add_loop(out, "B", "C", "settled", 2)


# add_parallel -----------------------------------------------------------------


def test_add_parallel_two_arms():
    gr = chain("intake", "diagnoser")
    arms = [basic("symptom_describer"), basic("differential_lister")]
    out = add_parallel(gr, "intake", arms, basic("integrator", "Integrate the findings."))
    assert len(out.nodes) - len(gr.nodes) == 3
    assert len(out.edges) - len(gr.edges) == 4
    assert "{{parallel_inputs}}" in out.node("integrator").human_prompt
    assert out.edge("integrator", "diagnoser") is not None


def test_add_parallel_one_arm():
    with pytest.raises(IncompletePayload):
        add_parallel(chain("A", "B"), "A", [basic("x")], basic("f"))


def test_parallel_three_arms_counts_block():
    gr = chain("A", "B")
    out = add_parallel(gr, "A", [basic("x"), basic("y"), basic("z")], basic("f", "Fuse."))
    assert g.graph_stats(out)["parallel_block_count"] == g.graph_stats(gr)["parallel_block_count"] + 1


# expand_framework ---------------------------------------------------------------


ROLES = ["dermatologist", "pathologist", "internist", "radiologist", "oncologist"]


def test_round_table_three_by_two():
    gr = baseline()
    out = expand_framework(gr, "diagnoser", FrameworkTemplate(TemplateId.ROUND_TABLE, {"expert_roles": ROLES[:3], "rounds": 2}))
    assert len(out.nodes) - len(gr.nodes) == 7
    fan_out = [e for e in out.edges if e.kind is EdgeKind.FAN_OUT]
    assert len(fan_out) == 3
    seq = [e.target for e in out.edges if e.kind is EdgeKind.SEQUENTIAL]
    assert seq == ["diagnoser_rt_r2_pathologist", "diagnoser_rt_r2_internist", "diagnoser_rt_aggregate"]
    assert out.output_node == "diagnoser_rt_aggregate"


@settings(max_examples=40, deadline=None)
@given(e=st.integers(2, 5), r=st.integers(1, 4))
def test_round_table_node_count_property(e, r):
    gr = baseline()
    out = expand_framework(gr, "diagnoser", FrameworkTemplate(TemplateId.ROUND_TABLE, {"expert_roles": ROLES[:e], "rounds": r}))
    assert len(out.nodes) - len(gr.nodes) == e * r + 1
    assert validate_graph(out).ok


def test_round_table_refinement_order_follows_roles():
    roles = ["b_role", "a_role", "c_role"]
    out = expand_framework(baseline(), "diagnoser", FrameworkTemplate(TemplateId.ROUND_TABLE, {"expert_roles": roles, "rounds": 3}))
    refine = [n.node_id for n in out.nodes if "_r2_" in n.node_id or "_r3_" in n.node_id]
    assert refine == [f"diagnoser_rt_r{r}_{x}" for r in (2, 3) for x in roles]


def test_chain_of_thought_changes_prompts_only():
    gr = baseline()
    out = expand_framework(gr, "diagnoser", FrameworkTemplate(TemplateId.CHAIN_OF_THOUGHT))
    a, b = gr.to_dict(), out.to_dict()
    assert a["edges"] == b["edges"] and len(a["nodes"]) == len(b["nodes"])
    diff = {k for k in a["nodes"][0] if a["nodes"][0][k] != b["nodes"][0][k]}
    assert diff == {"system_prompt", "human_prompt"}


def test_reflexion_single_loopback():
    out = expand_framework(baseline(), "diagnoser", FrameworkTemplate(TemplateId.REFLEXION, {"max_reflections": 2}))
    loops = [e for e in out.edges if e.kind is EdgeKind.LOOP_BACK]
    assert len(loops) == 1
    assert loops[0].max_iterations == 2
    assert loops[0].condition == "critic approves"


def test_cmd_two_groups_and_merge():
    out = expand_framework(baseline(), "diagnoser", FrameworkTemplate(TemplateId.CMD, {"expert_roles": ROLES[:2], "rounds": 1}))
    assert validate_graph(out).ok
    assert len(out.nodes) - 1 == 2 * (2 * 1 + 2) + 1
    assert out.output_node == "diagnoser_cmd_merge"


def test_invalid_template_params():
    with pytest.raises(InvalidTemplate):
        expand_framework(baseline(), "diagnoser", FrameworkTemplate(TemplateId.ROUND_TABLE, {"expert_roles": ["solo"]}))
    with pytest.raises(InvalidTemplate):
        expand_framework(baseline(), "diagnoser", FrameworkTemplate(TemplateId.REFLEXION, {"max_reflections": 0}))


def test_nested_reflexion_around_round_table():
    rt = expand_framework(baseline(), "diagnoser", FrameworkTemplate(TemplateId.ROUND_TABLE, {"expert_roles": ROLES[:2], "rounds": 1}))
    out = expand_framework(rt, "diagnoser_rt_aggregate", FrameworkTemplate(TemplateId.REFLEXION, {"max_reflections": 2}))
    assert validate_graph(out).ok


def test_schema_document_matches_required_payload():
    from pathlib import Path

    doc = json.loads((Path(__file__).parents[1] / "docs" / "operation.schema.json").read_text())
    assert doc["properties"]["op_kind"]["enum"] == [k.value for k in OpKind]
    by_kind = {d["properties"]["op_kind"]["const"]: d for d in doc["allOf"][0]["oneOf"]}
    for kind, keys in REQUIRED_PAYLOAD.items():
        assert by_kind[kind.value]["properties"]["payload"]["required"] == list(keys)


def test_every_operation_output_validates():
    gr = baseline()
    ops = [
        WorkflowOperation(OpKind.ADD_NODE, basic("describer").to_dict() | {"before": "diagnoser"}),
        WorkflowOperation(OpKind.ADD_LOOP, {"body_entry": "describer", "body_exit": "describer", "exit_condition": "clear"}),
        WorkflowOperation(OpKind.EXPAND_FRAMEWORK, {"anchor": "diagnoser", "template_id": "Reflexion", "parameters": {"max_reflections": 2}}),
    ]
    for op in ops:
        gr = apply_operation(gr, op)
        assert validate_graph(gr).ok
    assert gr.version == 3
    assert gr.edge("describer", "describer").max_iterations == 3
