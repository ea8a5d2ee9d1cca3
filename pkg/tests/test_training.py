"""Losses, configuration grammar and the training loop contracts."""

import dataclasses
import math

import pytest
import torch
import torch.nn.functional as F

from weakseg.datakit import make_synthetic_dataset
from weakseg.errors import DataError
from weakseg.training import (IGNORE_INDEX, LossBreakdown, TrainConfig,
                              TrainState, affinity_label, affinity_loss,
                              apply_settings, format_config, load_config,
                              parse_config_text, segmentation_loss, total_loss,
                              train, train_step)


def toy_config(**overrides):
    base = dict(mode="weak", batch_size=2, max_iters=4, crop_size=32,
                separable=True, decoder_width=16, decoder_depth=1,
                decoder_heads=2, tau=0.5, scales=(1.0,),
                checkpoint_interval=2, num_blocks=8, token_dim=32,
                patch_size=8, backbone_heads=4, text_dim=16, n0=4)
    base.update(overrides)
    cfg = dataclasses.replace(TrainConfig(), **base)
    cfg.validate()
    return cfg


@pytest.fixture(scope="module")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "toy"
    return make_synthetic_dataset(root, seed=5, count=6, grid=(4, 4),
                                  num_classes=2, cell=8, val_count=2, min_rect=2)


class TestLosses:
    def test_affinity_label_matches_double_loop(self):
        gen = torch.Generator().manual_seed(0)
        pseudo = torch.randint(0, 3, (3, 3), generator=gen)
        got = affinity_label(pseudo)
        flat = pseudo.reshape(-1)
        for i in range(9):
            for j in range(9):
                assert float(got[i, j]) == (1.0 if int(flat[i]) == int(flat[j]) else 0.0)

    def test_segmentation_loss_matches_manual(self):
        gen = torch.Generator().manual_seed(1)
        logits = torch.randn(1, 3, 2, 2, generator=gen)
        target = torch.tensor([[[0, 2], [1, 0]]])
        got = float(segmentation_loss(logits, target))
        log_probs = F.log_softmax(logits, dim=1)
        manual = -sum(float(log_probs[0, int(target[0, i, j]), i, j])
                      for i in range(2) for j in range(2)) / 4
        assert abs(got - manual) < 1e-6

    def test_segmentation_loss_skips_ignore_index(self):
        gen = torch.Generator().manual_seed(2)
        logits = torch.randn(1, 3, 1, 2, generator=gen)
        target = torch.tensor([[[1, IGNORE_INDEX]]])
        got = float(segmentation_loss(logits, target))
        log_probs = F.log_softmax(logits, dim=1)
        assert abs(got + float(log_probs[0, 1, 0, 0])) < 1e-6

    def test_affinity_loss_matches_manual_bce(self):
        gen = torch.Generator().manual_seed(3)
        predicted = torch.rand(4, 4, generator=gen) * 0.8 + 0.1
        target = (torch.rand(4, 4, generator=gen) > 0.5).float()
        got = float(affinity_loss(predicted, target))
        manual = 0.0
        for i in range(4):
            for j in range(4):
                p = float(predicted[i, j])
                t = float(target[i, j])
                manual += -(t * math.log(p) + (1 - t) * math.log(1 - p))
        assert abs(got - manual / 16) < 1e-5

    def test_affinity_loss_survives_saturated_inputs(self):
        predicted = torch.tensor([[0.0, 1.0]])
        target = torch.tensor([[1.0, 0.0]])
        assert math.isfinite(float(affinity_loss(predicted, target)))

    def test_affinity_loss_shape_mismatch(self):
        with pytest.raises(ValueError):
            affinity_loss(torch.rand(2, 2), torch.rand(3, 3))

    def test_total_is_exact_weighted_sum(self):
        out = total_loss(0.75, 0.3, 0.1)
        assert isinstance(out, LossBreakdown)
        assert out.total == 0.75 + 0.1 * 0.3
        assert out.seg_loss == 0.75 and out.aff_loss == 0.3


class TestConfigGrammar:
    def test_defaults_round_trip(self):
        text = format_config(TrainConfig())
        raw = parse_config_text(text)
        rebuilt = apply_settings(TrainConfig(), raw)
        assert rebuilt == TrainConfig()

    def test_lambda_alias(self):
        cfg = apply_settings(TrainConfig(), {"lambda": "0.25"})
        assert cfg.lambda_aff == 0.25
        assert "lambda = " in format_config(cfg)
        assert "lambda_aff" not in format_config(cfg)

    def test_comments_and_blank_lines(self):
        raw = parse_config_text("# heading\n\nbatch_size = 7  # trailing\n")
        assert raw == {"batch_size": "7"}

    def test_unknown_key_rejected(self):
        with pytest.raises(DataError):
            apply_settings(TrainConfig(), {"not_a_key": "1"})

    def test_bad_value_rejected(self):
        with pytest.raises(DataError):
            apply_settings(TrainConfig(), {"batch_size": "many"})

    def test_malformed_line_rejected(self):
        with pytest.raises(DataError):
            parse_config_text("batch_size 7")

    def test_scale_tuples(self):
        cfg = apply_settings(TrainConfig(), {"scales": "0.5,1.0,1.5"})
        assert cfg.scales == (0.5, 1.0, 1.5)

    def test_bool_parsing(self):
        assert apply_settings(TrainConfig(), {"separable": "true"}).separable
        assert not apply_settings(TrainConfig(), {"separable": "false"}).separable
        with pytest.raises(DataError):
            apply_settings(TrainConfig(), {"separable": "maybe"})

    def test_validation_catches_bad_values(self):
        with pytest.raises(ValueError):
            load_config(None, {"tau": "0"})
        with pytest.raises(ValueError):
            load_config(None, {"mode": "other"})
        with pytest.raises(ValueError):
            load_config(None, {"scales": ""})


class TestTrainStep:
    def test_only_decoder_parameters_are_optimized(self, toy_dataset):
        state = TrainState(toy_config(), toy_dataset)
        registered = {id(p) for group in state.optimizer.param_groups
                      for p in group["params"]}
        decoder_params = {id(p) for p in state.decoder.parameters()}
        backbone_params = {id(p) for p in state.backbone.parameters()}
        assert registered == decoder_params
        assert not (registered & backbone_params)

    def test_backbone_never_receives_gradients(self, toy_dataset):
        state = TrainState(toy_config(), toy_dataset)
        train_step(state, state.sample_batch())
        assert all(p.grad is None for p in state.backbone.parameters())

    def test_decoder_parameters_change(self, toy_dataset):
        state = TrainState(toy_config(), toy_dataset)
        before = [p.detach().clone() for p in state.decoder.parameters()]
        losses = train_step(state, state.sample_batch())
        assert losses.finite()
        changed = any(not torch.equal(b, p.detach())
                      for b, p in zip(before, state.decoder.parameters()))
        assert changed

    def test_weak_mode_records_affinity_weight(self, toy_dataset):
        state = TrainState(toy_config(), toy_dataset)
        losses = train_step(state, state.sample_batch())
        assert losses.weight == state.config.lambda_aff
        assert losses.total == losses.seg_loss + losses.weight * losses.aff_loss

    def test_full_mode_has_zero_affinity_loss(self, toy_dataset):
        state = TrainState(toy_config(mode="full"), toy_dataset)
        losses = train_step(state, state.sample_batch())
        assert losses.aff_loss == 0.0
        assert losses.total == losses.seg_loss

    def test_step_determinism_across_states(self, toy_dataset):
        a = TrainState(toy_config(), toy_dataset)
        b = TrainState(toy_config(), toy_dataset)
        la = train_step(a, a.sample_batch())
        lb = train_step(b, b.sample_batch())
        assert la == lb


class TestTrainLoop:
    def test_run_artifacts(self, toy_dataset, tmp_path):
        out = tmp_path / "run"
        final = train(toy_config(), toy_dataset, out)
        assert final.is_file()
        assert (out / "config.txt").is_file()
        log_lines = (out / "run_log.tsv").read_text().splitlines()
        assert log_lines[0].startswith("#")
        assert len(log_lines) == 1 + 4
        step, seg, aff, tot = log_lines[1].split("\t")
        assert step == "1"
        assert abs(float(tot) - (float(seg) + 0.1 * float(aff))) < 1e-12
        assert (out / "checkpoint_000002.nta").is_file()
        assert (out / "checkpoint_000004.nta").is_file()

    def test_runs_are_reproducible(self, toy_dataset, tmp_path):
        a = train(toy_config(), toy_dataset, tmp_path / "a")
        b = train(toy_config(), toy_dataset, tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a" / "run_log.tsv").read_text() == \
               (tmp_path / "b" / "run_log.tsv").read_text()

    def test_seed_changes_run(self, toy_dataset, tmp_path):
        a = train(toy_config(), toy_dataset, tmp_path / "a")
        b = train(toy_config(seed=1), toy_dataset, tmp_path / "b")
        assert a.read_bytes() != b.read_bytes()

    def test_crop_larger_than_image_rejected(self, toy_dataset):
        state = TrainState(toy_config(crop_size=4096), toy_dataset)
        with pytest.raises(DataError):
            state.sample_batch()
