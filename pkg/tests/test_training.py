from pathlib import Path

import numpy as np
import pytest

from slimkit.core.tensor import make_rng
from slimkit.model.params import Params, init_params
from slimkit.training.adam import AdamState, adam_step
from slimkit.training.copying import CopyingSample, gen_copying, masked_accuracy, masked_bits_per_char
from slimkit.training.runs import bench, evaluate_copying, gradcheck, relative_discrepancy, train_copying
from slimkit.utils.config import ChunkSchedule, RunConfig, load_config, parse_schedule
from slimkit.utils.errors import ConfigError, DimensionError

from .helpers import tiny

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


class TestAdam:
    def test_zero_gradient_keeps_parameters(self, tiny_params):
        state = AdamState.zeros(tiny_params.n_param, lr=0.1)
        out = adam_step(state, tiny_params, np.zeros(tiny_params.n_param))
        np.testing.assert_array_equal(out.flatten(), tiny_params.flatten())
        assert state.t == 1

    def test_first_step_is_signed_lr(self, tiny_params):
        grad = make_rng(3).uniform(0.5, 2.0, size=tiny_params.n_param)
        grad[::2] *= -1
        state = AdamState.zeros(tiny_params.n_param, lr=0.01)
        out = adam_step(state, tiny_params, grad)
        np.testing.assert_allclose(out.flatten() - tiny_params.flatten(), -0.01 * np.sign(grad), atol=1e-9)

    def test_identical_runs_stay_identical(self, tiny_params):
        grads = make_rng(4).normal(size=(3, tiny_params.n_param))
        a, b = AdamState.zeros(tiny_params.n_param), AdamState.zeros(tiny_params.n_param)
        pa = pb = tiny_params
        for g in grads:
            pa = adam_step(a, pa, g)
            pb = adam_step(b, pb, g.copy())
        np.testing.assert_array_equal(pa.flatten(), pb.flatten())
        np.testing.assert_array_equal(a.v, b.v)

    def test_shape_mismatch(self, tiny_params):
        state = AdamState.zeros(tiny_params.n_param)
        with pytest.raises(DimensionError):
            adam_step(state, tiny_params, np.zeros(3))


class TestCopying:
    def test_structure(self, rng):
        sample = gen_copying(16, 5, rng)
        assert sample.half == 8
        np.testing.assert_array_equal(sample.tokens[:8], sample.tokens[8:])
        assert sample.tokens[0] == 0 and sample.tokens[8] == 0
        assert np.all(sample.tokens[1:8] > 0)
        assert np.all(sample.tokens < 5)

    def test_mask_covers_second_half(self, rng):
        sample = gen_copying(12, 3, rng)
        assert sample.mask.sum() == 6
        np.testing.assert_array_equal(sample.mask[6:], 1.0)
        np.testing.assert_array_equal(sample.mask[:6], 0.0)

    @pytest.mark.parametrize("length, vocab", [(7, 5), (2, 5), (8, 1)])
    def test_invalid(self, rng, length, vocab):
        with pytest.raises(ConfigError):
            gen_copying(length, vocab, rng)

    def test_perfect_prediction(self, rng):
        sample = gen_copying(10, 4, rng)
        logits = np.full((10, 4), -30.0)
        logits[np.arange(9), sample.tokens[1:]] = 30.0
        assert masked_accuracy(logits, sample) == 1.0
        assert masked_bits_per_char(logits, sample) < 1e-12

    def test_uniform_prediction(self):
        sample = CopyingSample(np.array([0, 1, 2, 0, 1, 2]), np.array([0, 0, 0, 1.0, 1.0, 1.0]))
        assert abs(masked_bits_per_char(np.zeros((6, 4)), sample) - 2.0) < 1e-12


def _copy_config(steps=4, **model):
    return RunConfig(
        model=tiny(**model),
        name="copy",
        steps=steps,
        lr_schedule=((0, 1e-2), (2, 1e-3)),
        eval_interval=2,
        eval_samples=2,
        batch_size=2,
    )


class TestTrain:
    def test_records_and_schedule(self):
        cfg = _copy_config()
        start = init_params(cfg.model, 0)
        seen = []
        params, records = train_copying(cfg, parse_schedule("finetune:4", 8), 4, seed=0, on_eval=seen.append)
        assert [r.step for r in records] == [2, 4]
        assert [r.C for r in records] == [8, 4]
        assert [r.lr for r in records] == [1e-2, 1e-3]
        assert seen == records
        assert not np.array_equal(params.flatten(), start.flatten())
        for rec in records:
            assert 0.0 <= rec.accuracy <= 1.0
            assert rec.bits_per_char > 0

    def test_deterministic(self):
        cfg = _copy_config(steps=2)
        a, ra = train_copying(cfg, ChunkSchedule(3), 2, seed=5)
        b, rb = train_copying(cfg, ChunkSchedule(3), 2, seed=5)
        np.testing.assert_array_equal(a.flatten(), b.flatten())
        assert ra == rb

    def test_resume_needs_matching_model(self):
        cfg = _copy_config()
        other = init_params(tiny(vocab=7), 0)
        with pytest.raises(ConfigError):
            train_copying(cfg, ChunkSchedule(8), 2, seed=0, params=other)

    def test_evaluate(self):
        cfg = _copy_config()
        result = evaluate_copying(init_params(cfg.model, 0), 3, make_rng(0))
        assert 0.0 <= result.accuracy <= 1.0
        assert result.bits_per_char > 0


class TestRuns:
    def test_gradcheck_rows(self):
        cfg = _copy_config()
        rows = gradcheck(cfg, [1, 4, 8], seed=1)
        assert [r.record.C for r in rows] == [1, 4, 8]
        for row in rows:
            assert row.record.rel_grad_discrepancy < 1e-10
            assert row.record.wall_time_seconds == 0.0
            assert row.flops["rewind"] == 8 * cfg.model.layers * cfg.model.d1

    def test_bench_baseline_and_parallel(self):
        cfg = _copy_config()
        rows = bench(cfg, [2, 8], repeats=2, seed=1, parallel=True, baseline=True)
        assert [r.record.config_name for r in rows] == ["copy", "copy", "copy:full"]
        assert rows[0].record.peak_activation_bytes <= rows[1].record.peak_activation_bytes
        assert rows[0].record.total_flops == rows[1].record.total_flops

    def test_bench_repeats(self):
        with pytest.raises(ConfigError):
            bench(_copy_config(), [2], repeats=0)

    def test_relative_discrepancy(self):
        assert relative_discrepancy(np.array([1.0, 1.0]), np.array([1.0, 1.0])) == 0.0
        assert relative_discrepancy(np.array([3.0, 4.0]), np.zeros(2)) == 5.0


@pytest.mark.slow
def test_copying_task_is_learned_by_every_schedule():
    cfg = load_config(CONFIGS / "copying.json")
    means = {}
    for chunk in ("full", "16", "finetune:16"):
        schedule = parse_schedule(chunk, cfg.model.seq_len)
        scores = []
        for seed in (0, 1, 2):
            params, _ = train_copying(cfg, schedule, cfg.steps, seed=seed)
            scores.append(evaluate_copying(params, 32, make_rng(123)).accuracy)
        means[chunk] = float(np.mean(scores))
    assert all(mean > 0.95 for mean in means.values()), means
    assert max(means.values()) - min(means.values()) <= 0.01, means
