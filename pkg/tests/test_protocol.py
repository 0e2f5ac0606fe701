import hashlib
import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from geoagent.prompts import PINNED_SHA256, AssetError, load_asset
from geoagent.protocol import (
    SEARCH_TOOL,
    WARN_EXTRA_TOOL_CALLS,
    WARN_TOOL_CALL_WITH_ANSWER,
    ZOOM_TOOL,
    FinalAnswer,
    Malformed,
    Observation,
    ToolInvocation,
    Trajectory,
    TrajectoryError,
    deserialize_trajectory,
    parse_model_output,
    read_trajectories,
    render_system_prompt,
    render_tool_call,
    serialize_trajectory,
)
from factories import MALFORMED_CORPUS, SEARCH_EXAMPLE, ZOOM_EXAMPLE, random_trajectory


class TestSystemPrompt:
    def test_checksum_pinned(self):
        text = render_system_prompt()
        assert hashlib.sha256(text.encode("utf-8")).hexdigest() == PINNED_SHA256["system_prompt"]

    def test_mentions_both_tools(self):
        text = render_system_prompt()
        assert "image_zoom_in_tool" in text
        assert "search_web" in text

    def test_keeps_trailing_spaces_of_example_block(self):
        assert "**Example**:  \n<tool_call>  \n" in render_system_prompt()

    def test_examples_inside_prompt_parse(self):
        text = render_system_prompt()
        start = text.index("**Example**")
        block = text[start:text.index("When you call a tool")]
        first = parse_model_output(block)
        assert first.invocation == ToolInvocation(ZOOM_TOOL, bbox=(10, 20, 100, 200))
        assert WARN_EXTRA_TOOL_CALLS in first.warnings

    def test_every_asset_loads(self):
        for name in PINNED_SHA256:
            assert load_asset(name)

    def test_unknown_asset(self):
        with pytest.raises(AssetError):
            load_asset("nope")


class TestParse:
    def test_zoom_example(self):
        msg = parse_model_output("<think>look at the sign</think>\n" + ZOOM_EXAMPLE)
        assert msg.think == "look at the sign"
        assert msg.payload == ToolInvocation(ZOOM_TOOL, bbox=(10, 20, 100, 200))

    def test_search_example(self):
        msg = parse_model_output(SEARCH_EXAMPLE)
        assert msg.think is None
        assert msg.payload == ToolInvocation(SEARCH_TOOL, query="The palace museum")

    def test_truncated_json(self):
        msg = parse_model_output('<think>x</think><tool_call>{"name": "search_web", "arguments": {"query": "Pal')
        assert msg.payload.reason == "incomplete json tool-call"
        assert msg.payload.tool_call_attempted
        assert msg.payload.tool_name == "search_web"

    @pytest.mark.parametrize("raw,reason", MALFORMED_CORPUS)
    def test_malformed_corpus(self, raw, reason):
        msg = parse_model_output(raw)
        assert isinstance(msg.payload, Malformed)
        assert msg.payload.reason == reason
        assert msg.payload.raw == raw

    def test_answer(self):
        msg = parse_model_output("<think>Signs are in German.</think>\n<answer>Hamburg, Germany</answer>")
        assert msg.payload == FinalAnswer("Hamburg, Germany")
        assert msg.think == "Signs are in German."

    def test_answer_keeps_full_inner_text(self):
        inner = "Likely Porto.\nFinal: Porto, Portugal"
        assert parse_model_output(f"<answer>{inner}</answer>").answer == inner

    def test_answer_beats_tool_call(self):
        msg = parse_model_output(SEARCH_EXAMPLE + "<answer>Beijing, China</answer>")
        assert msg.answer == "Beijing, China"
        assert WARN_TOOL_CALL_WITH_ANSWER in msg.warnings

    def test_first_of_several_tool_calls(self):
        msg = parse_model_output(SEARCH_EXAMPLE + "\n" + ZOOM_EXAMPLE)
        assert msg.invocation.name == SEARCH_TOOL
        assert msg.warnings == (WARN_EXTRA_TOOL_CALLS,)

    def test_tags_inside_think_are_not_actions(self):
        raw = "<think>I could emit <answer>Paris</answer> now but</think>" + SEARCH_EXAMPLE
        assert parse_model_output(raw).invocation.query == "The palace museum"

    def test_think_preserved_verbatim(self):
        think = "\n  line one\n\tline two  \n"
        assert parse_model_output(f"<think>{think}</think>{SEARCH_EXAMPLE}").think == think

    def test_whitespace_between_tags(self):
        a = parse_model_output("<think>t</think>" + SEARCH_EXAMPLE)
        b = parse_model_output("<think>t</think>\n\n   \n" + SEARCH_EXAMPLE.replace("\n", "\n   ") + "\n  ")
        assert a.payload == b.payload

    def test_integral_float_bbox_accepted(self):
        msg = parse_model_output('<tool_call>{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [1.0, 2, 30, 40]}}</tool_call>')
        assert msg.invocation.bbox == (1, 2, 30, 40)

    def test_inverted_bbox_is_not_a_parse_error(self):
        # the zoom tool reports it when executed
        msg = parse_model_output('<tool_call>{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [100, 20, 10, 200]}}</tool_call>')
        assert msg.invocation.bbox == (100, 20, 10, 200)

    def test_double_encoded_arguments(self):
        body = json.dumps({"name": "search_web", "arguments": json.dumps({"query": "tram"})})
        assert parse_model_output(f"<tool_call>{body}</tool_call>").invocation.query == "tram"

    @given(st.text())
    def test_total(self, raw):
        msg = parse_model_output(raw)
        kinds = [msg.invocation is not None, msg.answer is not None, msg.malformed is not None]
        assert sum(kinds) == 1

    @given(st.text(alphabet="<>/{}[]\":, abcdefghijklmnopqrstuvwxyz_0123456789"))
    def test_total_on_tag_soup(self, raw):
        for wrapped in (raw, f"<tool_call>{raw}</tool_call>", f"<think>{raw}", f"<answer>{raw}"):
            msg = parse_model_output(wrapped)
            assert sum([msg.invocation is not None, msg.answer is not None, msg.malformed is not None]) == 1

    def test_render_roundtrip(self):
        inv = ToolInvocation(SEARCH_TOOL, query='Café "Ü" 東京')
        assert parse_model_output(render_tool_call(inv, "why")).invocation == inv


class TestToolInvocation:
    def test_shape_rules(self):
        with pytest.raises(ValueError):
            ToolInvocation(ZOOM_TOOL, query="x")
        with pytest.raises(ValueError):
            ToolInvocation(SEARCH_TOOL, bbox=(1, 2, 3, 4))
        with pytest.raises(ValueError):
            ToolInvocation(SEARCH_TOOL, query="  ")
        with pytest.raises(ValueError):
            ToolInvocation("other", query="x")


class TestTrajectoryRecords:
    def test_empty_trajectory_roundtrip(self):
        t = Trajectory("s0", termination="protocol_error")
        assert deserialize_trajectory(serialize_trajectory(t)) == t

    def test_three_turn_roundtrip(self):
        t = Trajectory("s1", question="Where?", image_path="a.jpg")
        zoom = ToolInvocation(ZOOM_TOOL, bbox=(10, 20, 100, 200))
        search = ToolInvocation(SEARCH_TOOL, query="The palace museum")
        from geoagent.protocol import Turn
        t.turns.append(Turn(render_tool_call(zoom, "a"), "a", action=zoom,
                            observation=Observation("image", image_path="images/ab.png", width=90, height=180)))
        t.turns.append(Turn(render_tool_call(search, "b"), "b", action=search,
                            observation=Observation("text", text="[1] x")))
        t.turns.append(Turn("<answer>Beijing</answer>", None, answer="Beijing"))
        t.record_call(ZOOM_TOOL, False)
        t.record_call(SEARCH_TOOL, False)
        t.final_answer, t.termination = "Beijing", "answered"
        line = serialize_trajectory(t)
        assert "\n" not in line
        assert deserialize_trajectory(line) == t

    def test_failure_counts_preserved(self):
        t = Trajectory("s2", termination="turn_cap")
        t.record_call(ZOOM_TOOL, True)
        t.record_call(ZOOM_TOOL, False)
        back = deserialize_trajectory(serialize_trajectory(t))
        assert back.tool_call_stats == {ZOOM_TOOL: {"total": 2, "failed": 1}}

    def test_random_roundtrips(self):
        rng = random.Random(7)
        for _ in range(100):
            t = random_trajectory(rng)
            assert deserialize_trajectory(serialize_trajectory(t)) == t

    def test_invariants(self):
        with pytest.raises(TrajectoryError):
            Trajectory("x", termination="answered")
        with pytest.raises(TrajectoryError):
            Trajectory("x", termination="turn_cap", final_answer="Paris")
        with pytest.raises(TrajectoryError):
            Trajectory("x", termination="turn_cap", tool_call_stats={ZOOM_TOOL: {"total": 1, "failed": 2}})

    def test_image_observation_needs_reference(self):
        with pytest.raises(TrajectoryError):
            Observation("image")

    def test_read_skips_header(self):
        t = Trajectory("s0", termination="protocol_error")
        lines = ['{"header": {"seed": 1}}', serialize_trajectory(t), ""]
        assert list(read_trajectories(lines)) == [t]

    def test_bad_record(self):
        with pytest.raises(TrajectoryError):
            deserialize_trajectory('{"sample_id": "x"}')
