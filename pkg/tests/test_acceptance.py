"""Acceptance suite: one test (and one printed verdict line) per criterion.

The training-based criteria share session fixtures so the expensive runs
happen once: a 60-clip dataset, a base model, a refinement-enabled
model, and a localization-ablated model, all on the same seed and data.
"""

import itertools
import os
import time

import numpy as np
import pytest

from rmcaction import functional as F
from rmcaction.backbones import BackboneConfig, build_backbone, flop_count
from rmcaction.boxes import decode_boxes, encode_boxes, iou_many
from rmcaction.checkpoint import (CheckpointMagicError, CheckpointMismatchError,
                                  CheckpointTruncatedError, CheckpointVersionError,
                                  load_checkpoint, read_checkpoint, save_checkpoint)
from rmcaction.evaluate import average_precision, bench_fps, evaluate
from rmcaction.gradcheck import format_results, run_suite
from rmcaction.network import NetworkConfig, build_network
from rmcaction.rpn import assign_anchors, generate_anchors, select_top_proposals
from rmcaction.synthclips import (ClipConfig, ClipMagicError, ClipTruncatedError,
                                  ClipVersionError, make_dataset, load_records,
                                  read_clip, render_clip, write_clip)
from rmcaction.tensor import Tensor, no_grad
from rmcaction.train import TrainConfig, train

from oracles import (assign_counts, average_precision_threshold_sweep, conv2d_loops,
                     conv3d_loops, iou_scalar, maxpool3d_scan, select_best_scan)


def verdict(criterion: str, passed: bool, detail: str) -> None:
    print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")


# ----------------------------------------------------------------------
# shared training fixtures (criteria 5-7)

TASK_SEED = 11
TASK_TRAIN = TrainConfig(iterations=1000, batch_clips=5, weight_decay=1e-3,
                         lr=0.01, lr_decay_iter=500, lr_decay_factor=0.1,
                         seed=TASK_SEED, log_every=200)


@pytest.fixture(scope="session")
def task_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("task60")
    manifest = make_dataset(TASK_SEED, 40, 20, ClipConfig(), out)
    return (load_records(manifest, "train"), load_records(manifest, "test"))


def _train_task_model(records, improved=False, fullframe=False):
    cfg = NetworkConfig(improved=improved, fullframe_crop=fullframe)
    model = build_network(cfg, seed=TASK_SEED)
    tc = TrainConfig(**{**TASK_TRAIN.__dict__, "improved": improved})
    train(model, records, tc)
    return model


@pytest.fixture(scope="session")
def base_model(task_dataset):
    return _train_task_model(task_dataset[0])


@pytest.fixture(scope="session")
def improved_model(task_dataset):
    return _train_task_model(task_dataset[0], improved=True)


@pytest.fixture(scope="session")
def ablated_model(task_dataset):
    return _train_task_model(task_dataset[0], fullframe=True)


# ----------------------------------------------------------------------


class TestCriterion1GradientSuite:
    def test_gradients_at_both_precisions_within_budget(self):
        t0 = time.perf_counter()
        res32 = run_suite(32)
        res64 = run_suite(64)
        elapsed = time.perf_counter() - t0
        bad = [r.name for r in res32 + res64 if not r.passed]
        ok = not bad and elapsed < 300
        verdict("criterion 1 (gradient suite)",
                ok, f"failures={bad or 'none'}, wall={elapsed:.1f}s < 300s")
        assert not bad, format_results(res32 + res64)
        assert elapsed < 300


class TestCriterion2OracleSuite:
    def test_conv_and_pool_grids(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for s, p, k in itertools.product([1, 2], [0, 1], [1, 3]):
            x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
            w = rng.standard_normal((4, 3, k, k)).astype(np.float32)
            out = F.conv2d(Tensor(x), Tensor(w), None, (s, s), (p, p))
            worst = max(worst, np.abs(out.data - conv2d_loops(x, w, None, (s, s), (p, p))).max())
            x3 = rng.standard_normal((1, 2, 4, 5, 5)).astype(np.float32)
            w3 = rng.standard_normal((3, 2, k, k, k)).astype(np.float32)
            out3 = F.conv3d(Tensor(x3), Tensor(w3), None, (s,) * 3, (p,) * 3)
            worst = max(worst, np.abs(out3.data - conv3d_loops(x3, w3, None, (s,) * 3, (p,) * 3)).max())
            if p < k:
                xp = rng.standard_normal((1, 2, 5, 6, 6)).astype(np.float32)
                pooled = F.maxpool3d(Tensor(xp), (k,) * 3, (s,) * 3, (p,) * 3)
                worst = max(worst, np.abs(pooled.data - maxpool3d_scan(xp, (k,) * 3, (s,) * 3, (p,) * 3)).max())
        verdict("criterion 2a (conv/pool loop oracles)", worst < 1e-5,
                f"max abs err {worst:.2e} < 1e-5")
        assert worst < 1e-5

    def test_box_and_detection_bruteforce_1000_cases(self):
        rng = np.random.default_rng(1)
        # IoU: exact match on 1000 random pairs
        for _ in range(1000):
            a = np.sort(rng.uniform(0, 100, 2)); ay = np.sort(rng.uniform(0, 100, 2))
            b = np.sort(rng.uniform(0, 100, 2)); by = np.sort(rng.uniform(0, 100, 2))
            box_a = np.array([a[0], ay[0], a[1] + 0.3, ay[1] + 0.3])
            box_b = np.array([b[0], by[0], b[1] + 0.3, by[1] + 0.3])
            assert iou_many(box_a[None], box_b)[0] == iou_scalar(box_a, box_b)

        # anchor assignment counts, exact, 1000 random frames
        anchors = generate_anchors(5, 5, 16, [16, 32], [0.5, 1.0, 2.0])
        for _ in range(1000):
            x1, y1 = rng.uniform(0, 50, 2)
            gt = np.array([x1, y1, x1 + rng.uniform(6, 40), y1 + rng.uniform(6, 40)])
            asg = assign_anchors(anchors, gt, 0.7, 0.3, 10_000, (80, 80),
                                 np.random.default_rng(0))
            n_pos, n_neg = assign_counts(anchors.boxes, gt, 0.7, 0.3, 80, 80)
            assert (asg.n_reg, asg.n_cls) == (n_pos, n_pos + n_neg)

        # AP vs quadratic threshold sweep, exact, 1000 cases
        for _ in range(1000):
            n = int(rng.integers(3, 50))
            scores = rng.uniform(0, 1, n)
            tps = rng.uniform(0, 1, n) < 0.5
            assert average_precision(scores, tps, n) == \
                average_precision_threshold_sweep(scores.tolist(), tps.tolist(), n)

        # top-proposal selection vs exhaustive scan, 1000 cases
        sel_anchors = generate_anchors(3, 4, 16, [16, 32], [0.5, 1.0])
        k = len(sel_anchors)
        for _ in range(1000):
            obj = rng.standard_normal((1, 4, 3, 4, 2)).astype(np.float32)
            deltas = (rng.standard_normal((1, 4, 3, 4, 4)) * 0.2).astype(np.float32)
            boxes, scores = select_top_proposals(obj, deltas, sel_anchors, (64, 48))
            obj_rows = np.moveaxis(obj, 1, 3).reshape(k, 2).astype(np.float64)
            delta_rows = np.moveaxis(deltas, 1, 3).reshape(k, 4).astype(np.float64)
            _, ref_box, ref_score = select_best_scan(obj_rows, delta_rows,
                                                     sel_anchors.boxes, 64, 48)
            assert scores[0] == ref_score
            assert np.allclose(boxes[0], ref_box, atol=1e-9)
        verdict("criterion 2b (IoU/assignment/AP/selection brute force)", True,
                "exact agreement on 1000 random cases each")


class TestCriterion3ShapeContract:
    def test_full_scale_shapes(self):
        cfg = NetworkConfig(input_size=224, clip_len=16, width_multiplier=1.0,
                            depth=50, act_num=10, crop_size=7)
        model = build_network(cfg, seed=0).eval()
        clips = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 16, 224, 224))
                       .astype(np.float32))
        from rmcaction.action import crop_pool
        with no_grad():
            tap = model.forward_tap(clips)
            boxes = np.tile([30.0, 30.0, 190.0, 190.0], (16, 1))
            crops = crop_pool(tap, boxes, cfg.crop_size, 16.0, 16)
            volume = model.action.stage(crops)
        tap_ok = tap.shape == (16, 512, 14, 14)
        crop_ok = crops.shape == (1, 512, 16, 7, 7)
        time_ok = volume.shape[2] == 2

        r3d = build_backbone(BackboneConfig("r3d", 50, 1.0, 224, 16, 10), seed=0).eval()
        with no_grad():
            taps = r3d.forward(Tensor(np.zeros((1, 3, 16, 224, 224), np.float32)))
        sched = [taps.stage_shapes[s][2] for s in ("conv2_x", "conv3_x", "conv4_x", "conv5_x")]
        sched_ok = sched == [16, 8, 4, 2]
        r3d_conv5_ok = taps.stage_shapes["conv5_x"] == (1, 2048, 2, 7, 7)
        ok = tap_ok and crop_ok and time_ok and sched_ok and r3d_conv5_ok
        verdict("criterion 3 (shape contract)", ok,
                f"tap={tuple(tap.shape)}, crop={tuple(crops.shape)}, "
                f"head time={volume.shape[2]}, r3d temporal={sched}")
        assert ok


class TestCriterion4BoxAlgebra:
    def test_roundtrip_and_loss_values(self):
        rng = np.random.default_rng(2)
        n = 10_000
        def sample(nn):
            x1 = rng.uniform(0, 80, nn)
            y1 = rng.uniform(0, 80, nn)
            return np.stack([x1, y1, x1 + rng.uniform(0.5, 40, nn),
                             y1 + rng.uniform(0.5, 40, nn)], axis=1)
        gt, ref = sample(n), sample(n)
        err = np.abs(decode_boxes(encode_boxes(gt, ref), ref) - gt).max()

        from rmcaction.rpn import loss_rpn_reg
        from rmcaction.action import loss_roi_reg
        anchors = generate_anchors(4, 4, 16, [16], [1.0])
        asg = assign_anchors(anchors, np.array([1.0, 1.0, 5.0, 5.0]), 0.7, 0.3,
                             256, (64, 64), np.random.default_rng(0))
        deltas = np.zeros((len(anchors), 4), dtype=np.float32)
        deltas[asg.pos_indices[0]] = asg.targets[0] + 0.5
        reg_val = loss_rpn_reg(Tensor(deltas), [asg], len(anchors), 3.0).item()

        proposals = np.array([[10.0, 10.0, 50.0, 60.0]])
        pred = np.full((1, 4), 1.0, dtype=np.float32)
        roi_val = loss_roi_reg(Tensor(pred), proposals, proposals.copy(), 1.0).item()

        ok = err < 1e-4 and abs(reg_val - 1.5) < 1e-5 and abs(roi_val - 2.0) < 1e-5
        verdict("criterion 4 (box algebra)", ok,
                f"roundtrip err {err:.2e} < 1e-4, reg loss {reg_val:.6f} = 1.5, "
                f"refine loss {roi_val:.6f} = 2.0")
        assert ok


class TestCriterion5Overfit:
    def test_four_clip_overfit(self):
        cfg = ClipConfig()   # desk scale: 112 px, 8 frames
        records = [render_clip(300 + i, cfg, pattern=i, clip_id=i) for i in range(4)]
        model = build_network(NetworkConfig(), seed=0)
        tc = TrainConfig(iterations=400, batch_clips=4, seed=0, log_every=100)
        t0 = time.perf_counter()
        train(model, records, tc)
        elapsed = time.perf_counter() - t0
        rep = evaluate(model, records)
        ok = rep.accuracy == 1.0 and rep.mean_iou > 0.5 and elapsed < 600
        verdict("criterion 5 (overfit)",
                ok, f"acc={rep.accuracy:.2f} (need 1.0), mean IoU={rep.mean_iou:.3f} "
                    f"(need >0.5), {tc.iterations} iters in {elapsed:.0f}s < 600s")
        assert rep.accuracy == 1.0
        assert rep.mean_iou > 0.5
        assert elapsed < 600


class TestCriterion6Task:
    def test_synthetic_task(self, task_dataset, base_model, ablated_model):
        _, test_records = task_dataset
        rep = evaluate(base_model, test_records)
        rep_ablated = evaluate(ablated_model, test_records)
        acc_ok = rep.accuracy >= 0.70
        ap_ok = rep.ap >= 0.40
        ablation_ok = rep_ablated.accuracy < rep.accuracy
        verdict("criterion 6 (task test)",
                acc_ok and ap_ok and ablation_ok,
                f"test acc={rep.accuracy:.3f} (need >=0.70), AP={rep.ap:.3f} "
                f"(need >=0.40), ablated acc={rep_ablated.accuracy:.3f} < full")
        assert acc_ok and ap_ok and ablation_ok


class TestCriterion7Improvement:
    def test_refinement_tightens_boxes(self, task_dataset, base_model, improved_model):
        _, test_records = task_dataset
        rep_base = evaluate(base_model, test_records)
        rep_improved = evaluate(improved_model, test_records)
        iou_ok = rep_improved.mean_iou > rep_base.mean_iou

        shape = (1, 3, 8, 112, 112)
        fps_base = bench_fps(base_model, shape, repetitions=5)["frames_per_sec"]
        fps_improved = bench_fps(improved_model, shape, repetitions=5)["frames_per_sec"]
        saturation_ok = fps_improved >= fps_base / 2.0
        ordering_ok = fps_improved <= fps_base * 1.1
        verdict("criterion 7 (refinement)",
                iou_ok and saturation_ok and ordering_ok,
                f"mean IoU {rep_base.mean_iou:.3f} -> {rep_improved.mean_iou:.3f} "
                f"(must increase); fps {fps_base:.1f} -> {fps_improved:.1f} "
                f"(within 2x, not faster than base by >10%)")
        assert iou_ok
        assert saturation_ok
        assert ordering_ok


class TestCriterion8Efficiency:
    def test_analytic_and_measured_ordering(self):
        full_rmc = flop_count(BackboneConfig("rmc", 50, 1.0, 224, 16, 10))
        full_r3d = flop_count(BackboneConfig("r3d", 50, 1.0, 224, 16, 10))
        analytic_ok = full_rmc < full_r3d

        desk_rmc = build_backbone(BackboneConfig("rmc", 50, 0.125, 112, 8, 6), 0).eval()
        desk_r3d = build_backbone(BackboneConfig("r3d", 50, 0.125, 112, 8, 6), 0).eval()
        clip = Tensor(np.random.default_rng(3).uniform(0, 1, (1, 3, 8, 112, 112))
                      .astype(np.float32))

        def median_time(model):
            times = []
            with no_grad():
                model.forward(clip)          # warm-up
                for _ in range(20):
                    t0 = time.perf_counter()
                    model.forward(clip)
                    times.append(time.perf_counter() - t0)
            times.sort()
            return 0.5 * (times[9] + times[10])

        t_rmc = median_time(desk_rmc)
        t_r3d = median_time(desk_r3d)
        measured_ok = t_rmc < t_r3d
        verdict("criterion 8 (efficiency ordering)",
                analytic_ok and measured_ok,
                f"MACs {full_rmc / 1e9:.2f}G < {full_r3d / 1e9:.2f}G; "
                f"median forward {t_rmc * 1e3:.0f}ms < {t_r3d * 1e3:.0f}ms over 20 runs")
        assert analytic_ok
        assert measured_ok


class TestCriterion9Formats:
    def test_roundtrips_and_error_classes(self, tmp_path):
        record = render_clip(5, ClipConfig(), pattern=2, clip_id=9, split="test")
        clip_path = tmp_path / "clip.rmc1"
        write_clip(record, clip_path)
        back = read_clip(clip_path)
        clip_ok = (np.array_equal(back.frames, record.frames)
                   and np.array_equal(back.boxes, record.boxes))
        write_clip(back, tmp_path / "clip2.rmc1")
        clip_ok &= clip_path.read_bytes() == (tmp_path / "clip2.rmc1").read_bytes()

        blob = bytearray(clip_path.read_bytes())
        for mutation, exc in ((b"ZZZZ", ClipMagicError),
                              ((9).to_bytes(4, "little"), ClipVersionError)):
            mutated = bytearray(blob)
            if exc is ClipMagicError:
                mutated[:4] = mutation
            else:
                mutated[4:8] = mutation
            (tmp_path / "bad.rmc1").write_bytes(bytes(mutated))
            with pytest.raises(exc):
                read_clip(tmp_path / "bad.rmc1")
        (tmp_path / "short.rmc1").write_bytes(bytes(blob[:100]))
        with pytest.raises(ClipTruncatedError):
            read_clip(tmp_path / "short.rmc1")

        model = build_network(NetworkConfig(input_size=64, clip_len=8,
                                            width_multiplier=0.125, act_num=3,
                                            crop_size=4, anchor_preset="micro"), seed=4)
        ckpt = tmp_path / "m.rmcw"
        save_checkpoint(model, ckpt)
        clone = build_network(NetworkConfig(input_size=64, clip_len=8,
                                            width_multiplier=0.125, act_num=3,
                                            crop_size=4, anchor_preset="micro"), seed=5)
        load_checkpoint(clone, ckpt)
        ckpt2 = tmp_path / "m2.rmcw"
        save_checkpoint(clone, ckpt2)
        ckpt_ok = ckpt.read_bytes() == ckpt2.read_bytes()

        wrong = build_network(NetworkConfig(input_size=64, clip_len=8,
                                            width_multiplier=0.125, act_num=5,
                                            crop_size=4, anchor_preset="micro"), seed=5)
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(wrong, ckpt)
        cblob = bytearray(ckpt.read_bytes())
        cblob[:4] = b"NOPE"
        (tmp_path / "bad.rmcw").write_bytes(bytes(cblob))
        with pytest.raises(CheckpointMagicError):
            read_checkpoint(tmp_path / "bad.rmcw")
        cblob = bytearray(ckpt.read_bytes())
        cblob[4:8] = (3).to_bytes(4, "little")
        (tmp_path / "badv.rmcw").write_bytes(bytes(cblob))
        with pytest.raises(CheckpointVersionError):
            read_checkpoint(tmp_path / "badv.rmcw")
        (tmp_path / "shortm.rmcw").write_bytes(ckpt.read_bytes()[:-16])
        with pytest.raises(CheckpointTruncatedError):
            read_checkpoint(tmp_path / "shortm.rmcw")

        ok = clip_ok and ckpt_ok
        verdict("criterion 9 (format round-trips)", ok,
                "clip and checkpoint files byte-stable; magic/version/truncation "
                "raise their designated error classes")
        assert ok
