import numpy as np
import pytest

from rmcaction.evaluate import average_precision, bench_fps, evaluate
from rmcaction.network import NetworkConfig, build_network
from rmcaction.synthclips import ClipConfig, render_clip
from rmcaction.tensor import Tensor
from rmcaction.train import (DivergenceError, LogPoint, TrainConfig, read_curves,
                             total_loss, train, write_curves)

from oracles import average_precision_threshold_sweep

TINY_CLIP = ClipConfig(size=64, clip_len=8, act_num=3, distractors=0,
                       amplitude=8.0, sprite_min=12, sprite_max=18, jitter=2.0)
TINY_NET = NetworkConfig(input_size=64, clip_len=8, width_multiplier=0.125,
                         act_num=3, crop_size=4, anchor_preset="micro")


def tiny_records(n=3):
    return [render_clip(50 + i, TINY_CLIP, pattern=i % 3, clip_id=i) for i in range(n)]


class TestTotalLoss:
    def test_sum_of_parts(self):
        parts = {"rpn_cls": Tensor(np.float32(0.2)),
                 "rpn_reg": Tensor(np.float32(0.3)),
                 "act_cls": Tensor(np.float32(0.5))}
        assert total_loss(parts).item() == pytest.approx(1.0)

    def test_improved_adds_refinement_part(self):
        parts = {"rpn_cls": Tensor(np.float32(0.2)),
                 "rpn_reg": Tensor(np.float32(0.3)),
                 "act_cls": Tensor(np.float32(0.5)),
                 "roi_reg": Tensor(np.float32(0.4))}
        assert total_loss(parts).item() == pytest.approx(1.4)

    def test_all_zero(self):
        parts = {k: Tensor(np.float32(0.0)) for k in ("rpn_cls", "rpn_reg", "act_cls")}
        assert total_loss(parts).item() == 0.0

    def test_exact_fixed_order_sum(self):
        rng = np.random.default_rng(0)
        vals = {k: np.float32(rng.uniform(0, 1)) for k in
                ("rpn_cls", "rpn_reg", "act_cls", "roi_reg")}
        parts = {k: Tensor(v) for k, v in vals.items()}
        expected = ((vals["rpn_cls"] + vals["rpn_reg"]) + vals["act_cls"]) + vals["roi_reg"]
        assert total_loss(parts).item() == expected


class TestTrainLoop:
    def test_zero_lr_keeps_initial_parameters(self):
        model = build_network(TINY_NET, seed=0)
        before = [p.data.copy() for p in model.parameters()]
        cfg = TrainConfig(lr=0.0, iterations=3, batch_clips=2, seed=0, log_every=1)
        train(model, tiny_records(), cfg)
        for b, p in zip(before, model.parameters()):
            assert np.array_equal(b, p.data)

    def test_same_seed_gives_bit_identical_checkpoints(self, tmp_path):
        from rmcaction.checkpoint import save_checkpoint

        paths = []
        for run in range(2):
            model = build_network(TINY_NET, seed=3)
            cfg = TrainConfig(iterations=4, batch_clips=2, seed=11, log_every=2)
            train(model, tiny_records(), cfg)
            path = tmp_path / f"run{run}.rmcw"
            save_checkpoint(model, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_divergence_aborts_with_iteration_and_part(self):
        model = build_network(TINY_NET, seed=0)
        cfg = TrainConfig(lr=1e6, iterations=50, batch_clips=2, seed=0, log_every=10)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError) as err:
                train(model, tiny_records(), cfg)
        assert err.value.iteration >= 1
        assert err.value.part in ("rpn_cls", "rpn_reg", "act_cls", "roi_reg")

    def test_zero_weights_freeze_private_heads(self):
        # loss terms with zero weight contribute no gradients, so the
        # parameters they alone train stay frozen even with weight decay
        model = build_network(
            NetworkConfig(input_size=64, clip_len=8, width_multiplier=0.125,
                          act_num=3, crop_size=4, anchor_preset="micro",
                          improved=True), seed=0)
        reg_before = model.rpn.reg.weight.data.copy()
        refine_before = model.refine.fc1.weight.data.copy()
        cls_before = model.rpn.cls.weight.data.copy()
        cfg = TrainConfig(lambda1=0.0, lambda2=0.0, improved=True, iterations=3,
                          batch_clips=2, seed=0, log_every=1, weight_decay=1e-2)
        train(model, tiny_records(), cfg)
        assert np.array_equal(reg_before, model.rpn.reg.weight.data)
        assert np.array_equal(refine_before, model.refine.fc1.weight.data)
        assert not np.array_equal(cls_before, model.rpn.cls.weight.data)

    def test_curves_file_roundtrip(self, tmp_path):
        curves = [LogPoint(5, {"rpn_cls": 0.5, "rpn_reg": 0.25, "act_cls": 1.0}, 0.8),
                  LogPoint(10, {"rpn_cls": 0.4, "rpn_reg": 0.2, "act_cls": 0.9,
                                "roi_reg": 0.1}, 0.6)]
        path = tmp_path / "curves.txt"
        write_curves(path, curves)
        lines = path.read_text().splitlines()
        assert lines[1].split()[4] == "-"      # roi_reg missing on first point
        back = read_curves(path)
        assert back[0].iteration == 5
        assert back[1].parts["roi_reg"] == pytest.approx(0.1)
        assert back[1].err_rate == pytest.approx(0.6)

    def test_empty_dataset_rejected(self):
        model = build_network(TINY_NET, seed=0)
        with pytest.raises(ValueError, match="empty"):
            train(model, [], TrainConfig(iterations=1))


class TestAveragePrecision:
    def test_perfect_predictions(self):
        scores = np.array([0.9, 0.8, 0.7])
        assert average_precision(scores, np.array([True] * 3), 3) == pytest.approx(1.0)

    def test_all_misses(self):
        scores = np.array([0.9, 0.8])
        assert average_precision(scores, np.array([False, False]), 2) == 0.0

    def test_matches_threshold_sweep_oracle_on_1000_cases(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = rng.integers(3, 50)
            scores = rng.uniform(0, 1, n)
            tps = rng.uniform(0, 1, n) < 0.5
            ap = average_precision(scores, tps, n)
            ref = average_precision_threshold_sweep(scores.tolist(), tps.tolist(), n)
            assert ap == ref

    def test_rank_invariance_under_increasing_transforms(self):
        rng = np.random.default_rng(8)
        scores = rng.uniform(0, 1, 40)
        tps = rng.uniform(0, 1, 40) < 0.4
        base = average_precision(scores, tps, 40)
        assert average_precision(scores * 7 + 2, tps, 40) == base
        assert average_precision(np.exp(scores), tps, 40) == base
        assert average_precision(np.tanh(scores), tps, 40) == base


@pytest.fixture(scope="module")
def trained():
    model = build_network(TINY_NET, seed=1)
    cfg = TrainConfig(iterations=6, batch_clips=2, seed=1, log_every=3)
    records = tiny_records(4)
    train(model, records, cfg)
    return model, records


class TestEvaluate:
    def test_report_fields_in_range(self, trained):
        model, records = trained
        rep = evaluate(model, records)
        assert 0.0 <= rep.ap <= 1.0
        assert 0.0 <= rep.accuracy <= 1.0
        assert 0.0 <= rep.mean_iou <= 1.0
        assert rep.n_clips == 4 and rep.n_frames == 32

    def test_evaluate_is_side_effect_free(self, trained):
        model, records = trained
        r1 = evaluate(model, records)
        r2 = evaluate(model, records)
        assert r1.ap == r2.ap
        assert r1.accuracy == r2.accuracy
        assert r1.mean_iou == r2.mean_iou

    def test_report_text_keys(self, trained):
        model, records = trained
        text = evaluate(model, records).to_text()
        for key in ("ap=", "accuracy=", "mean_iou=", "clips_per_sec=",
                    "frames_per_sec="):
            assert key in text


class TestBench:
    def test_single_repetition_is_the_measured_value(self):
        model = build_network(TINY_NET, seed=0)
        out = bench_fps(model, (1, 3, 8, 64, 64), repetitions=1, warmup=1)
        assert out["frames_per_sec"] > 0
        assert out["repetitions"] == 1.0

    def test_doubling_clip_length_sane(self):
        model8 = build_network(TINY_NET, seed=0)
        model16 = build_network(
            NetworkConfig(input_size=64, clip_len=16, width_multiplier=0.125,
                          act_num=3, crop_size=4, anchor_preset="micro"), seed=0)
        f8 = bench_fps(model8, (1, 3, 8, 64, 64), repetitions=3, warmup=1)
        f16 = bench_fps(model16, (1, 3, 16, 64, 64), repetitions=3, warmup=1)
        assert f16["frames_per_sec"] > f8["frames_per_sec"] / 2.5
