import math

import numpy as np
import pytest
import torch

from promptseg.dataio import Sample
from promptseg.model import ModelConfig, ToyPromptableModel, inject_lora
from promptseg.synthetic import make_blob_dataset
from promptseg.training import (
    PlainSgd,
    ScheduleFreeAdamW,
    TrainConfig,
    TrainingDivergedError,
    evaluate_single_prompt,
    image_loss,
    make_optimizer,
    segmentation_loss,
    split_indices,
    train,
    train_step,
)


def tiny_model(seed=0, size=64):
    return inject_lora(ToyPromptableModel(ModelConfig(input_size=size, seed=seed)))


def tiny_dataset(n=6, size=64, seed=0):
    return make_blob_dataset(n, seed=seed, size=size, min_instances=2, max_instances=3)


def fast_cfg(**overrides):
    defaults = dict(
        epochs=1,
        batch_size=2,
        grad_accumulation_steps=1,
        learning_rate=1e-3,
        points_per_image=2,
        boxes_per_image=2,
        max_corrections=1,
        seed=0,
        optimizer="schedulefree_adamw",
        augment_enabled=False,
        val_fraction=0.2,
        val_instance_cap=10,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestSegmentationLoss:
    def test_saturated_perfect_prediction(self):
        gt = np.zeros((8, 8), dtype=bool)
        gt[2:5, 2:5] = True
        logits = torch.where(torch.from_numpy(gt), 40.0, -40.0)
        assert segmentation_loss(logits, gt).item() < 1e-6

    def test_zero_logits_half_foreground(self):
        n = 64
        gt = np.zeros((n, n), dtype=bool)
        gt[: n // 2] = True
        logits = torch.zeros((n, n))
        loss = segmentation_loss(logits, gt).item()
        total = n * n
        dice = 1 - (2 * 0.5 * (total / 2) + 1.0) / (0.5 * total + total / 2 + 1.0)
        expected = math.log(2) + dice
        assert loss == pytest.approx(expected, abs=1e-6)

    def test_empty_gt_confident_negative(self):
        gt = np.zeros((8, 8), dtype=bool)
        logits = torch.full((8, 8), -40.0)
        assert segmentation_loss(logits, gt).item() < 1e-6

    def test_nonfinite_rejected(self):
        gt = np.zeros((4, 4), dtype=bool)
        logits = torch.full((4, 4), float("nan"))
        with pytest.raises(FloatingPointError):
            segmentation_loss(logits, gt)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            segmentation_loss(torch.zeros(4, 4), np.zeros((5, 5), dtype=bool))

    def test_non_negative_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            gt = rng.random((16, 16)) < 0.5
            logits = torch.from_numpy(rng.normal(size=(16, 16))).float()
            assert segmentation_loss(logits, gt).item() >= 0.0


class TestScheduleFreeAdamW:
    def test_converges_on_quadratic(self):
        # warmup weighting discounts the cold-start iterates in the average
        target = torch.tensor([3.0, -2.0])
        p = torch.nn.Parameter(torch.zeros(2))
        opt = ScheduleFreeAdamW([p], lr=0.1, warmup_steps=50)
        for _ in range(600):
            opt.zero_grad()
            loss = ((p - target) ** 2).sum()
            loss.backward()
            opt.step()
        opt.eval_mode()
        assert torch.allclose(p.detach(), target, atol=0.05)

    def test_mode_switch_round_trip(self):
        p = torch.nn.Parameter(torch.ones(3))
        opt = ScheduleFreeAdamW([p], lr=0.05)
        for _ in range(5):
            opt.zero_grad()
            (p**2).sum().backward()
            opt.step()
        train_weights = p.detach().clone()
        opt.eval_mode()
        eval_weights = p.detach().clone()
        opt.train_mode()
        assert torch.allclose(p.detach(), train_weights, atol=1e-7)
        assert not torch.allclose(eval_weights, train_weights)

    def test_step_in_eval_mode_rejected(self):
        p = torch.nn.Parameter(torch.ones(1))
        opt = ScheduleFreeAdamW([p], lr=0.1)
        opt.eval_mode()
        with pytest.raises(RuntimeError):
            opt.step()

    def test_state_dict_round_trip_preserves_mode(self):
        p = torch.nn.Parameter(torch.ones(2))
        opt = ScheduleFreeAdamW([p], lr=0.1)
        opt.zero_grad()
        (p**2).sum().backward()
        opt.step()
        sd = opt.state_dict()
        opt2 = ScheduleFreeAdamW([p], lr=0.1)
        opt2.load_state_dict(sd)
        assert opt2.param_groups[0]["k"] == 1

    def test_make_optimizer_unknown(self):
        with pytest.raises(ValueError):
            make_optimizer("lion", [torch.nn.Parameter(torch.ones(1))], fast_cfg())


class TestAccumulationEquivalence:
    def test_sgd_accumulated_equals_concatenated(self):
        # k micro-batches with grad accumulation == one step on the
        # concatenated batch with mean-of-image-means loss (plain SGD)
        torch.manual_seed(0)
        ds = tiny_dataset(n=4, seed=3)
        k = 2

        def run(accumulate: bool):
            model = tiny_model(seed=5).double()
            cfg = fast_cfg(
                optimizer="sgd",
                learning_rate=0.5,
                grad_accumulation_steps=k if accumulate else 1,
                batch_size=1 if accumulate else k,
                max_corrections=0,
                weight_decay=0.0,
            )
            params = [p for p in model.parameters() if p.requires_grad]
            opt = make_optimizer("sgd", params, cfg)
            rng = np.random.default_rng(11)
            if accumulate:
                for i in range(k):
                    train_step(model, [ds[i]], cfg, opt, rng, i)
            else:
                train_step(model, [ds[0], ds[1]], cfg, opt, rng, 0)
            return {n: p.detach().clone() for n, p in model.named_parameters()}

        accumulated = run(True)
        concatenated = run(False)
        for name in accumulated:
            diff = (accumulated[name] - concatenated[name]).abs().max().item()
            assert diff < 1e-6, (name, diff)


class TestTrainStep:
    def test_quota_caps_at_instance_count(self):
        model = tiny_model(seed=1)
        calls = {"decode": 0}
        original = model.decode_mask

        def counting_decode(embedding, prompts):
            calls["decode"] += 1
            return original(embedding, prompts)

        model.decode_mask = counting_decode
        sample = tiny_dataset(n=1, seed=4)[0]
        n_instances = len(sample.masks)
        cfg = fast_cfg(points_per_image=10, boxes_per_image=10, max_corrections=0)
        loss = image_loss(model, sample, cfg, np.random.default_rng(0))
        assert loss is not None
        # with zero corrections each simulation decodes exactly once
        assert calls["decode"] == 2 * n_instances

    def test_zero_instance_image_skipped_with_warning(self, caplog):
        model = tiny_model(seed=2)
        empty = Sample(image=np.zeros((64, 64, 3), dtype=np.float32), masks=[], image_id="none")
        cfg = fast_cfg()
        opt = make_optimizer("sgd", [p for p in model.parameters() if p.requires_grad], cfg)
        with caplog.at_level("WARNING"):
            out = train_step(model, [empty], cfg, opt, np.random.default_rng(0), 0)
        assert out is None
        assert any("skipping" in r.message for r in caplog.records)

    def test_optimizer_steps_every_kth_call(self):
        model = tiny_model(seed=3)
        ds = tiny_dataset(n=8, seed=5)
        cfg = fast_cfg(grad_accumulation_steps=4, batch_size=1, epochs=1, val_fraction=0.0)
        result = train(model, ds, cfg)
        steps = [h for h in result.history if h["type"] == "step"]
        assert steps, "no steps ran"
        for h in steps:
            assert h["optim_step"] == h["micro_step"] // 4

    def test_finite_gradients_for_all_n(self):
        model = tiny_model(seed=4)
        sample = tiny_dataset(n=1, seed=6)[0]
        from promptseg.interaction import SimulationConfig, simulate_interaction
        from promptseg.masks import sample_point_in_mask

        for n in range(6):
            model.zero_grad()
            rng = np.random.default_rng(n)
            gt = sample.masks[0]
            sim_cfg = SimulationConfig(max_corrections=5)
            _, logits = simulate_interaction(
                model, sample.image, gt, n, sim_cfg, rng,
                initial=sample_point_in_mask(gt, rng),
            )
            segmentation_loss(logits, gt).backward()
            for p in model.parameters():
                if p.requires_grad and p.grad is not None:
                    assert torch.isfinite(p.grad).all()


class TestTrain:
    def test_zero_epochs_noop(self):
        model = tiny_model(seed=5)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        result = train(model, tiny_dataset(), fast_cfg(epochs=0))
        assert result.history == []
        for n, p in model.named_parameters():
            assert torch.equal(before[n], p.detach())

    def test_fixed_seed_identical_loss_sequence(self):
        ds = tiny_dataset(n=6, seed=7)
        losses = []
        for _ in range(2):
            model = tiny_model(seed=6)
            result = train(model, ds, fast_cfg(epochs=1))
            losses.append([h["loss"] for h in result.history if h["type"] == "step"])
        assert losses[0] == losses[1]

    def test_only_trainable_parameters_change(self):
        model = tiny_model(seed=7)
        frozen_before = {
            n: p.detach().clone()
            for n, p in model.named_parameters()
            if not p.requires_grad
        }
        train(model, tiny_dataset(n=4, seed=8), fast_cfg(epochs=1, val_fraction=0.0))
        for n, p in model.named_parameters():
            if n in frozen_before:
                assert torch.equal(frozen_before[n], p.detach()), n

    def test_metrics_and_checkpoints_written(self, tmp_path):
        model = tiny_model(seed=8)
        result = train(model, tiny_dataset(n=5, seed=9), fast_cfg(epochs=1), out_dir=tmp_path)
        assert (tmp_path / "metrics.jsonl").exists()
        assert (tmp_path / "last.ckpt").exists()
        assert (tmp_path / "best.ckpt").exists()
        epochs = [h for h in result.history if h["type"] == "epoch"]
        assert len(epochs) == 1
        assert 0.0 <= epochs[0]["val_iou_box"] <= 1.0

    def test_resume_matches_uninterrupted(self):
        ds = tiny_dataset(n=6, seed=10)
        cfg = fast_cfg(epochs=2, batch_size=1, grad_accumulation_steps=1, val_fraction=0.0)

        model_a = tiny_model(seed=9)
        full = train(model_a, ds, cfg)
        losses_full = [h["loss"] for h in full.history if h["type"] == "step"]

        model_b = tiny_model(seed=9)
        part1 = train(model_b, ds, cfg, stop_after_optim_steps=4)
        part2 = train(model_b, ds, cfg, resume_state=part1.state)
        losses_split = [h["loss"] for h in part1.history + part2.history if h["type"] == "step"]
        assert losses_split == losses_full

    def test_divergence_aborts_with_dump(self, tmp_path):
        model = tiny_model(seed=10)
        # poison a trainable parameter so the decoder emits non-finite logits
        with torch.no_grad():
            model.decoder.hyper_out.weight.fill_(float("inf"))
        with pytest.raises((TrainingDivergedError, FloatingPointError)):
            train(model, tiny_dataset(n=4, seed=11), fast_cfg(epochs=1), out_dir=tmp_path)

    def test_loss_decreases_moving_average(self):
        ds = make_blob_dataset(24, seed=12, size=64, min_instances=2, max_instances=4)
        model = tiny_model(seed=11)
        cfg = fast_cfg(
            epochs=2, batch_size=1, learning_rate=3e-3,
            points_per_image=3, boxes_per_image=3, val_fraction=0.0,
        )
        result = train(model, ds, cfg)
        losses = [h["loss"] for h in result.history if h["type"] == "step"]
        assert len(losses) >= 40
        first = np.mean(losses[:5])
        last = np.mean(losses[-5:])
        assert last < first


class TestSplitsAndEval:
    def test_split_indices_deterministic_and_disjoint(self):
        t1, v1 = split_indices(50, 0.1, seed=3)
        t2, v2 = split_indices(50, 0.1, seed=3)
        assert (t1, v1) == (t2, v2)
        assert len(v1) == 5
        assert set(t1).isdisjoint(v1)
        assert sorted(t1 + v1) == list(range(50))

    def test_evaluate_single_prompt_oracle(self):
        from promptseg.oracles import PerImageOracleModel

        ds = tiny_dataset(n=3, seed=13)
        model = PerImageOracleModel(ds, input_size=64)
        rng = np.random.default_rng(0)
        assert evaluate_single_prompt(model, ds, "box", rng) == 1.0
        assert evaluate_single_prompt(model, ds, "point", rng) == 1.0
