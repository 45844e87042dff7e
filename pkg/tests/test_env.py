from __future__ import annotations

import numpy as np
import pytest

from segloop.env import (
    HIGHLIGHT,
    EnvConfig,
    Task,
    Terminal,
    palette_grid,
    render_overlay,
    reset,
    run_episode,
    step,
    step_raw,
    trajectory_log_lines,
)
from segloop.errors import ConfigError, EpisodeClosedError
from segloop.geom import BitMask, iou, union_bbox
from segloop.policies import OraclePolicy, ToolOnlyPolicy, answer_block, tool_block
from segloop.protocol import serialize_observation
from segloop.toyseg import Scene, generate_scene, interior_points, map_point_to_view


def rect_task(target: int = 1) -> Task:
    labels = np.zeros((32, 32), dtype=np.int32)
    labels[2:10, 2:12] = 1
    labels[16:28, 18:30] = 2
    return Task(Scene(32, 32, labels), target, question="which box", task_id="rect")


def seg(x, y):
    return tool_block("segment_points", "points", [[x, y, 1]])


class TestReset:
    def test_initial_observation(self):
        state, obs = reset(rect_task())
        assert obs.budget_remaining == 8
        assert obs.history_pool == ()
        assert obs.turn_index == 0
        assert obs.view == state.task.scene.full_view()

    def test_deterministic(self):
        _, a = reset(rect_task())
        _, b = reset(rect_task())
        assert serialize_observation(a) == serialize_observation(b)

    def test_bad_target(self):
        with pytest.raises(ConfigError):
            rect_task(target=3)

    @pytest.mark.parametrize("kwargs", [{"max_turns": -1}, {"pool_cap": -2}, {"thumb_size": 0}])
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            EnvConfig(**kwargs)


class TestStep:
    def test_segment_grows_pool_and_spends_budget(self):
        state, _ = reset(rect_task())
        obs, events = step_raw(state, seg(5, 5))
        assert len(obs.history_pool) == 1
        assert obs.budget_remaining == 7
        assert [e.kind for e in events] == ["segment"]
        assert state.candidates[0].mask == state.task.gt_mask
        assert events[0].points == ((5, 5),)

    def test_unparsable_turn_spends_budget(self):
        state, _ = reset(rect_task())
        obs, events = step_raw(state, "garbage")
        assert obs.budget_remaining == 7
        assert events[0].kind == "format" and events[0].detail == "unparsable"

    def test_invalid_call_does_not_block_others(self):
        state, _ = reset(rect_task())
        raw = tool_block("rotate", "angle", 45) + seg(5, 5)
        obs, events = step_raw(state, raw)
        assert [e.kind for e in events] == ["invalid", "segment"]
        assert obs.view.rotation == 0

    def test_calls_apply_in_order(self):
        state, _ = reset(rect_task())
        raw = tool_block("rotate", "angle", 90) + seg(5, 5)
        step_raw(state, raw)
        # after rotating, view (5, 5) is scene (26, 5): background
        assert state.candidates[0].mask.is_empty()
        assert state.candidates[0].prompt == {"points": [[26, 5, 1]]}

    def test_budget_exhaustion(self):
        state, _ = reset(rect_task())
        for _ in range(8):
            obs, _ = step_raw(state, seg(5, 5))
        assert obs.budget_remaining == 0
        result, events = step_raw(state, seg(5, 5))
        assert isinstance(result, Terminal)
        assert [e.kind for e in events] == ["budget_exhausted", "terminated"]
        assert result.prediction.union.is_empty()
        assert state.turns == 9
        with pytest.raises(EpisodeClosedError):
            step_raw(state, seg(5, 5))

    def test_forced_turn_accepts_answer(self):
        state, _ = reset(rect_task(), EnvConfig(max_turns=0))
        result, events = step_raw(state, answer_block([{"points": [[5, 5, 1]]}]))
        assert isinstance(result, Terminal)
        assert state.final_iou() == 1.0

    def test_answer_in_scene_coordinates_after_zoom(self):
        state, _ = reset(rect_task(target=2))
        step_raw(state, tool_block("zoom_in", "crop", [16, 16, 32, 32]))
        step_raw(state, tool_block("rotate", "angle", 180))
        result, _ = step_raw(state, answer_block([{"points": [[20, 20, 1]]}]))
        assert state.final_iou() == 1.0

    def test_two_item_answer(self):
        task = rect_task()
        state, _ = reset(task)
        result, _ = step_raw(state, answer_block([{"points": [[5, 5, 1]]}, {"points": [[20, 20, 1]]}]))
        pred = result.prediction
        m1, m2 = task.scene.region_mask(1), task.scene.region_mask(2)
        assert pred.union == BitMask(m1.bits | m2.bits)
        assert pred.union_box == union_bbox([m1, m2])

    def test_answer_item_error_gives_empty_item(self):
        state, _ = reset(rect_task())
        _, events = step_raw(state, answer_block([{"points": [[99, 5, 1]]}, {"points": [[5, 5, 1]]}]))
        assert [e.kind for e in events] == ["item_error", "answer"]
        assert state.final_iou() == 1.0

    @pytest.mark.parametrize("cap", [0, 1, 4])
    def test_pool_cap_fifo(self, cap):
        state, _ = reset(rect_task(), EnvConfig(pool_cap=cap))
        for i in range(7):
            obs, _ = step_raw(state, seg(5 + i % 3, 5))
            assert len(obs.history_pool) <= cap
        expected = list(range(7 - cap, 7)) if cap else []
        assert [k for k, _ in obs.history_pool] == expected

    def test_digest_chain(self):
        a, _ = reset(rect_task())
        b, _ = reset(rect_task())
        step_raw(a, seg(5, 5))
        step_raw(b, seg(6, 5))
        assert a.digest != b.digest
        assert a.steps[0].prior_digest == b.steps[0].prior_digest

    def test_unparsed_turn_needs_verdict(self):
        state, _ = reset(rect_task())
        with pytest.raises(ValueError):
            step(state, None)


class TestEpisodes:
    def test_oracle(self):
        task = Task(generate_scene(3, 64, 64, 4), 2, task_id="t")
        state = run_episode(task, OraclePolicy(task))
        assert state.turns == 2
        assert state.final_iou() == 1.0

    def test_tool_only(self):
        task = Task(generate_scene(3, 64, 64, 4), 2, task_id="t")
        state = run_episode(task, ToolOnlyPolicy(), EnvConfig(max_turns=5))
        assert state.turns == 6
        assert state.final.union.is_empty()

    def test_logs_are_reproducible(self):
        task = Task(generate_scene(3, 64, 64, 4), 2, task_id="t", scene_path="s.json")
        a = trajectory_log_lines(run_episode(task, OraclePolicy(task)))
        b = trajectory_log_lines(run_episode(task, OraclePolicy(task)))
        assert a == b
        assert '"final"' in a[-1]

    def test_map_point_round_trip_used_by_policies(self):
        task = rect_task(target=2)
        state, _ = reset(task)
        step_raw(state, tool_block("rotate", "angle", 270))
        x, y = interior_points(task.scene, 2, 1)[0]
        vx, vy = map_point_to_view(state.view, x, y)
        step_raw(state, seg(vx, vy))
        assert state.candidates[-1].mask == task.gt_mask
        assert state.candidates[-1].prompt == {"points": [[x, y, 1]]}


class TestOverlay:
    scene = Scene(8, 6, np.pad(np.ones((4, 6), dtype=np.int32), 1))

    def nn_oracle(self, src: np.ndarray, mask: np.ndarray, tw: int, th: int) -> np.ndarray:
        h, w = src.shape
        out = np.zeros((th, tw), dtype=np.uint8)
        for i in range(th):
            for j in range(tw):
                si, sj = (i * h) // th, (j * w) // tw
                out[i, j] = HIGHLIGHT if mask[si, sj] else src[si, sj]
        return out

    def test_identity_size_is_lossless(self):
        mask = BitMask(np.zeros((6, 8), dtype=bool))
        out = render_overlay(self.scene, mask, (8, 6))
        assert np.array_equal(out, palette_grid(self.scene))

    def test_solid_downscale(self):
        mask = BitMask(np.ones((6, 8), dtype=bool))
        out = render_overlay(self.scene, mask, (4, 3))
        assert (out == HIGHLIGHT).all()

    @pytest.mark.parametrize("size", [(4, 3), (3, 5), (16, 12), (7, 7)])
    def test_checkerboard_matches_index_mapping(self, size):
        yy, xx = np.mgrid[0:6, 0:8]
        mask = (yy + xx) % 2 == 0
        out = render_overlay(self.scene, BitMask(mask), size)
        assert np.array_equal(out, self.nn_oracle(palette_grid(self.scene), mask, *size))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            render_overlay(self.scene, BitMask.empty(3, 3), 4)

    def test_iou_unaffected_by_rendering(self):
        task = rect_task()
        state, _ = reset(task)
        step_raw(state, seg(5, 5))
        assert iou(state.candidates[0].mask, task.gt_mask) == 1.0
