import json
import logging
import math

import pytest
import torch

import losses
import trainer
from datapipe import DatasetError, DatasetSpec, load_dataset
from netdef import COMPONENT_GROUPS, build_model
from trainer import (
    LOG_NAME,
    Checkpoint,
    Phase,
    TrainConfig,
    TrainingError,
    TrainingLog,
    build_optimizer,
    build_schedule,
    check_prerequisites,
    evaluate_split,
    find_checkpoint_dir,
    find_model_dir,
    freeze,
    load_checkpoint,
    load_model,
    phase_dir_name,
    plateau_policy,
    run_schedule,
    save_checkpoint,
    set_trainable,
    train_phase,
    validate,
)

AFTER_PHASE_II = Checkpoint(phase=Phase.II, phases_done=("I", "II"), completed=True)


class SimulatedCrash(Exception):
    pass


@pytest.fixture
def stereo_data(make_stereo_folder, temp_dir):
    """Two 64×64 pairs, no validation split, no augmentation."""
    root = make_stereo_folder(temp_dir / "data", count=2, size=(64, 64), shift=0.5)
    return load_dataset(DatasetSpec(root=root, patch_size=(64, 64), eval_crop=(64, 64), augment_fraction=0.0, val_count=0))


def small_config(phase=Phase.I, **overrides):
    settings = dict(phase=phase, batch_size=2, lr=1e-4, max_epochs=1, seed=0)
    settings.update(overrides)
    return TrainConfig(**settings)


def snapshot(module):
    return {name: t.detach().clone() for name, t in module.state_dict().items()}


def same_weights(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


class TestPhase:
    """Test suite for phase names"""

    def test_parse(self):
        """Test roman and numeric phase names"""
        assert Phase.parse("I") is Phase.I
        assert Phase.parse("ii") is Phase.II
        assert Phase.parse(3) is Phase.III

    def test_unknown(self):
        """Test that an unknown phase is rejected"""
        with pytest.raises(ValueError):
            Phase.parse("IV")


class TestTrainConfig:
    """Test suite for TrainConfig"""

    def test_defaults(self):
        """Test the default hyperparameters"""
        cfg = TrainConfig()
        assert (cfg.lr, cfg.betas, cfg.batch_size) == (1e-4, (0.9, 0.999), 16)
        assert (cfg.lr_patience, cfg.stop_patience) == (10, 20)
        assert cfg.gamma == 0.07

    def test_invalid_values(self):
        """Test that invalid settings are refused"""
        with pytest.raises(ValueError):
            TrainConfig(lr=0)
        with pytest.raises(ValueError):
            TrainConfig(betas=(0.9, 1.0))
        with pytest.raises(ValueError):
            TrainConfig(gamma=-1.0)


class TestPlateauPolicy:
    """Test suite for learning-rate halving and early stopping"""

    def test_flat_history(self):
        """Test that a flat metric halves the rate after 10 epochs and stops after 20"""
        history = [1.0] * 26
        lrs = []
        for epoch in range(len(history) + 1):
            decision = plateau_policy(history[:epoch], 1e-4, lr_patience=10, stop_patience=20)
            if decision.stop:
                break
            lrs.append(decision.lr)
        assert lrs[:11] == [1e-4] * 11
        assert lrs[11:] == [5e-5] * 10
        assert len(lrs) == 21

    def test_improvement_resets_counters(self):
        """Test that a new best value resets both counts"""
        history = [1.0] * 9 + [0.5] + [0.5] * 9
        decision = plateau_policy(history, 1e-4, lr_patience=10, stop_patience=20)
        assert decision.lr == 1e-4
        assert not decision.stop
        assert decision.best == 0.5
        assert decision.epochs_since_best == 9

    def test_tiny_improvements_do_not_count(self):
        """Test that changes below the minimum delta are not improvements"""
        history = [1.0 - 1e-8 * i for i in range(12)]
        assert plateau_policy(history, 1e-4, 10, 20).lr == 5e-5

    def test_repeated_halving(self):
        """Test that the rate keeps halving on a long plateau"""
        decision = plateau_policy([1.0] * 31, 1e-4, lr_patience=10, stop_patience=100)
        assert decision.lr == pytest.approx(1.25e-5)


class TestFreezing:
    """Test suite for trainable sets"""

    def test_freeze_stops_updates(self, tiny_model):
        """Test that frozen components are untouched by an optimizer step"""
        freeze(tiny_model, ["dbp"])
        before = snapshot(tiny_model.encoder)
        optimizer = build_optimizer(tiny_model, small_config())
        x = torch.rand(1, 3, 64, 64) * 2 - 1
        loss = sum(b.blended.abs().mean() + b.v.mean() for b in tiny_model(x, x))
        loss.backward()
        optimizer.step()
        assert same_weights(before, snapshot(tiny_model.encoder))
        assert all(p.grad is None for p in tiny_model.encoder.parameters())
        with_state = {id(p) for p in optimizer.state}
        assert not any(id(p) in with_state for p in tiny_model.encoder.parameters())

    def test_phase_trainable_sets(self, tiny_model):
        """Test which components each phase trains"""
        assert set_trainable(tiny_model, small_config(Phase.I)) == COMPONENT_GROUPS["dbp"]
        assert set(set_trainable(tiny_model, small_config(Phase.III))) == {"refiner_l", "refiner_r", "cbm_l", "cbm_r"}
        assert not any(p.requires_grad for p in tiny_model.decoder_lr.parameters())
        assert len(set_trainable(tiny_model, small_config(Phase.III, end_to_end=True))) == 7

    def test_everything_frozen(self, tiny_model):
        """Test that an optimizer over nothing is an error"""
        freeze(tiny_model, ["all"])
        with pytest.raises(TrainingError, match="No trainable parameters"):
            build_optimizer(tiny_model, small_config())


class TestPrerequisites:
    """Test suite for phase ordering"""

    def test_phase_ii_needs_phase_i(self):
        """Test that phase II without phase I is refused"""
        with pytest.raises(TrainingError, match="Phase II"):
            check_prerequisites(small_config(Phase.II), None)

    def test_phase_iii_needs_dbp_training(self):
        """Test that phase III without a trained DBP is refused unless end to end"""
        with pytest.raises(TrainingError, match="Phase III"):
            check_prerequisites(small_config(Phase.III), Checkpoint(phase=Phase.I))
        assert check_prerequisites(small_config(Phase.III, end_to_end=True), None) == ()
        assert check_prerequisites(small_config(Phase.III), AFTER_PHASE_II) == ("I", "II")

    def test_train_phase_checks_order(self, tiny_model, stereo_data):
        """Test that train_phase raises before touching the model"""
        with pytest.raises(TrainingError):
            train_phase(tiny_model, stereo_data, small_config(Phase.II))

    def test_batch_larger_than_dataset(self, tiny_model, stereo_data):
        """Test that a batch the training split cannot fill is refused"""
        with pytest.raises(TrainingError, match="cannot fill"):
            train_phase(tiny_model, stereo_data, small_config(batch_size=4))


class TestTrainPhase:
    """Test suite for single-phase training"""

    def test_phase_iii_freezes_dbp(self, tiny_model, stereo_data):
        """Test that 5 epochs of phase III leave every DBP tensor bit-identical"""
        dbp_before = {name: snapshot(getattr(tiny_model, name)) for name in COMPONENT_GROUPS["dbp"]}
        refiner_before = snapshot(tiny_model.refiner_l)
        cbm_before = snapshot(tiny_model.cbm_r)
        checkpoint = train_phase(tiny_model, stereo_data, small_config(Phase.III, max_epochs=5),
                                 previous=AFTER_PHASE_II)
        assert checkpoint.epoch == 5
        for name, before in dbp_before.items():
            assert same_weights(before, snapshot(getattr(tiny_model, name))), name
        assert not same_weights(refiner_before, snapshot(tiny_model.refiner_l))
        assert not same_weights(cbm_before, snapshot(tiny_model.cbm_r))

    def test_phase_i_updates_dbp_only(self, tiny_model, stereo_data):
        """Test that phase I changes the DBP and leaves the refiners alone"""
        encoder_before = snapshot(tiny_model.encoder)
        refiner_before = snapshot(tiny_model.refiner_r)
        train_phase(tiny_model, stereo_data, small_config(max_epochs=2, lr=1e-3))
        assert not same_weights(encoder_before, snapshot(tiny_model.encoder))
        assert same_weights(refiner_before, snapshot(tiny_model.refiner_r))

    def test_log_records(self, tiny_model, stereo_data, temp_dir):
        """Test one log record per epoch with the documented fields"""
        log = TrainingLog(temp_dir / LOG_NAME)
        train_phase(tiny_model, stereo_data, small_config(max_epochs=2), log=log)
        lines = (temp_dir / LOG_NAME).read_text(encoding="utf-8").splitlines()
        assert len(lines) == 2 == len(log.records)
        record = json.loads(lines[0])
        assert set(record) == {"phase", "epoch", "step", "lr", "train_loss", "val_metric", "improved", "terms"}
        assert record["phase"] == "I"
        assert set(record["terms"]) == {"dbp", "dbp_gradient"}
        assert record["improved"] is True

    def test_max_steps(self, tiny_model, stereo_data):
        """Test that max_steps ends the phase"""
        checkpoint = train_phase(tiny_model, stereo_data, small_config(max_epochs=None, max_steps=3))
        assert checkpoint.step == 3
        assert checkpoint.completed
        assert checkpoint.phases_done == ("I",)

    def test_non_finite_loss(self, tiny_model, stereo_data, monkeypatch):
        """Test that a NaN loss aborts with a diagnostic"""
        def broken(*args, **kwargs):
            return {"dbp": torch.tensor(float("nan"), requires_grad=True)}

        monkeypatch.setattr(losses, "phase1_terms", broken)
        with pytest.raises(TrainingError, match="Non-finite loss in phase I, epoch 1, step 1"):
            train_phase(tiny_model, stereo_data, small_config())

    def test_same_seed_same_weights(self, stereo_data):
        """Test that two deterministic runs with the same seed are bit-identical"""
        runs = []
        for _ in range(2):
            model = build_model(seed=0)
            train_phase(model, stereo_data, small_config(max_epochs=2, deterministic=True))
            runs.append(snapshot(model))
        assert same_weights(*runs)

    def test_validation_metric(self, make_stereo_folder, temp_dir, tiny_model):
        """Test that the validation split drives the metric when present"""
        root = make_stereo_folder(temp_dir / "val", count=3)
        data = load_dataset(DatasetSpec(root=root, patch_size=(64, 64), eval_crop=(64, 64), augment_fraction=0.0, val_count=1))
        metric = validate(tiny_model, data, small_config(batch_size=1))
        assert math.isfinite(metric) and metric > 0

    def test_evaluation_crop_is_applied(self, make_stereo_folder, temp_dir, tiny_model, monkeypatch):
        """Test that validation batches are center-cropped to eval_crop, not the patch size"""
        root = make_stereo_folder(temp_dir / "wide", count=3, size=(128, 192))
        seen = []
        phase_terms = trainer.phase_terms

        def recording_terms(model, batch, cfg):
            seen.append(tuple(batch.left.shape[-2:]))
            return phase_terms(model, batch, cfg)

        monkeypatch.setattr(trainer, "phase_terms", recording_terms)
        metrics = {}
        for crop in [(64, 128), (128, 128)]:
            data = load_dataset(DatasetSpec(root=root, patch_size=(64, 64), eval_crop=crop,
                                            augment_fraction=0.0, val_count=1))
            seen.clear()
            metrics[crop] = validate(tiny_model, data, small_config(batch_size=1))
            assert seen == [crop]
        assert metrics[(64, 128)] != metrics[(128, 128)]

    def test_test_split_evaluation(self, make_stereo_folder, temp_dir, tiny_model):
        """Test that the test split is evaluated at the evaluation crop"""
        root = make_stereo_folder(temp_dir / "test", count=3, size=(64, 128))
        data = load_dataset(DatasetSpec(root=root, split="test", patch_size=(64, 64), eval_crop=(64, 128)))
        metric = evaluate_split(tiny_model, data, small_config(batch_size=2), "test")
        assert math.isfinite(metric) and metric > 0
        with pytest.raises(TrainingError, match="val"):
            evaluate_split(tiny_model, data, small_config(), "val")

    def test_evaluation_crop_larger_than_image(self, make_stereo_folder, temp_dir, tiny_model):
        """Test that an evaluation crop larger than the images is an error"""
        root = make_stereo_folder(temp_dir / "small", count=2)
        data = load_dataset(DatasetSpec(root=root, split="test", patch_size=(64, 64), eval_crop=(64, 128)))
        with pytest.raises(DatasetError, match="smaller than crop"):
            evaluate_split(tiny_model, data, small_config(), "test")

    @pytest.mark.slow
    def test_overfit_two_pairs(self, tiny_model, stereo_data):
        """Test that 200 phase I steps on two pairs halve the loss"""
        log = TrainingLog()
        cfg = small_config(lr=2e-3, max_epochs=None, max_steps=200, lr_patience=1000, stop_patience=1000)
        train_phase(tiny_model, stereo_data, cfg, log=log)
        assert log.records[-1]["step"] == 200
        assert log.records[-1]["train_loss"] < 0.5 * log.records[0]["train_loss"]


class TestCheckpoints:
    """Test suite for checkpoint files, skipping and resuming"""

    def test_round_trip(self, tiny_model, temp_dir):
        """Test that weights and metadata survive a save and load"""
        checkpoint = Checkpoint(phase=Phase.II, phases_done=("I",), epoch=3, step=12,
                                best_metric=0.25, history=[0.5, 0.25, 0.3], lr=5e-5)
        save_checkpoint(temp_dir, tiny_model, checkpoint)
        model = build_model(seed=1)
        restored = load_checkpoint(temp_dir, model)
        assert restored.phase is Phase.II
        assert (restored.epoch, restored.step, restored.best_metric) == (3, 12, 0.25)
        assert restored.history == [0.5, 0.25, 0.3]
        assert same_weights(snapshot(model), snapshot(tiny_model))

    def test_infinite_best_metric(self, tiny_model, temp_dir):
        """Test that an unset best metric is stored as null"""
        save_checkpoint(temp_dir, tiny_model, Checkpoint(phase=Phase.I))
        assert json.loads((temp_dir / "meta.json").read_text())["best_metric"] is None
        assert math.isinf(load_checkpoint(temp_dir).best_metric)

    def test_missing_checkpoint(self, temp_dir):
        """Test that loading from an empty directory is an error"""
        with pytest.raises(TrainingError, match="meta.json"):
            load_checkpoint(temp_dir)

    def test_find_dirs(self, tiny_model, temp_dir):
        """Test resolution of schedule outputs to the latest completed phase"""
        save_checkpoint(temp_dir / "phase_I", tiny_model, Checkpoint(phase=Phase.I, completed=True))
        save_checkpoint(temp_dir / "phase_II", tiny_model, Checkpoint(phase=Phase.II, completed=False))
        assert find_checkpoint_dir(temp_dir) == temp_dir / "phase_I"
        assert find_model_dir(temp_dir) == temp_dir / "phase_I" / "model"
        assert find_model_dir(temp_dir / "phase_I" / "model") == temp_dir / "phase_I" / "model"
        assert find_checkpoint_dir(temp_dir / "nothing") is None
        loaded = load_model(temp_dir)
        assert same_weights(snapshot(loaded), snapshot(tiny_model))

    def test_completed_phase_is_skipped(self, tiny_model, stereo_data, temp_dir, caplog):
        """Test that a finished phase on disk is loaded instead of retrained"""
        first = train_phase(tiny_model, stereo_data, small_config(), checkpoint_dir=temp_dir / "ckpt")
        trained = snapshot(tiny_model)
        model = build_model(seed=3)
        with caplog.at_level(logging.INFO, logger="trainer"):
            again = train_phase(model, stereo_data, small_config(), checkpoint_dir=temp_dir / "ckpt")
        assert "already complete" in caplog.text
        assert again.epoch == first.epoch
        assert same_weights(trained, snapshot(model))

    def test_resume_matches_uninterrupted_run(self, stereo_data, temp_dir, monkeypatch):
        """Test that resuming after a crash reproduces the uninterrupted weights exactly"""
        cfg = small_config(max_epochs=3, lr=1e-3, deterministic=True)

        reference = build_model(seed=0)
        train_phase(reference, stereo_data, cfg, checkpoint_dir=temp_dir / "reference")

        real_save = trainer.save_checkpoint
        calls = []

        def crash_after_first_save(*args, **kwargs):
            result = real_save(*args, **kwargs)
            calls.append(result)
            if len(calls) == 1:
                raise SimulatedCrash("after first save")
            return result

        monkeypatch.setattr(trainer, "save_checkpoint", crash_after_first_save)
        with pytest.raises(SimulatedCrash):
            train_phase(build_model(seed=0), stereo_data, cfg, checkpoint_dir=temp_dir / "resumed")
        assert load_checkpoint(temp_dir / "resumed").epoch == 1

        resumed = build_model(seed=7)
        checkpoint = train_phase(resumed, stereo_data, cfg, checkpoint_dir=temp_dir / "resumed")
        assert checkpoint.epoch == 3
        assert same_weights(snapshot(reference), snapshot(resumed))

    def test_wrong_phase_in_directory(self, tiny_model, stereo_data, temp_dir):
        """Test that a checkpoint directory for another phase is refused"""
        save_checkpoint(temp_dir, tiny_model, Checkpoint(phase=Phase.II))
        with pytest.raises(TrainingError, match="holds phase II"):
            train_phase(tiny_model, stereo_data, small_config(), checkpoint_dir=temp_dir)


class TestSchedule:
    """Test suite for schedule variants"""

    def test_variants(self):
        """Test the per-phase configs of each variant"""
        base = small_config()
        full = build_schedule("I-II-III", base)
        assert [c.phase for c in full] == [Phase.I, Phase.II, Phase.III]
        assert not any(c.end_to_end for c in full)

        skip = build_schedule("I-III", base)
        assert skip[1] is None and skip[2].phase is Phase.III

        end_to_end = build_schedule("III", base)
        assert end_to_end[0] is None and end_to_end[2].end_to_end

        no_conf = build_schedule("no-confidence", base)
        assert no_conf[2].loss_weights.lambda8 == 0.0
        assert no_conf[0].loss_weights.lambda8 == 0.035

    def test_unknown_variant(self):
        """Test that an unknown schedule is refused"""
        with pytest.raises(TrainingError, match="Unknown schedule"):
            build_schedule("II-I", small_config())

    def test_empty_schedule(self, tiny_model, stereo_data, temp_dir):
        """Test that a schedule without phases is an error"""
        with pytest.raises(TrainingError):
            run_schedule(tiny_model, stereo_data, None, None, None, temp_dir)

    @pytest.mark.integration
    def test_full_schedule(self, tiny_model, stereo_data, temp_dir):
        """Test that I → II → III runs with one directory per phase and a shared log"""
        configs = build_schedule("I-II-III", small_config())
        final = run_schedule(tiny_model, stereo_data, *configs, temp_dir / "run")
        assert final.phases_done == ("I", "II", "III")
        for phase in Phase:
            assert load_checkpoint(temp_dir / "run" / phase_dir_name(phase)).completed
        records = [json.loads(l) for l in (temp_dir / "run" / LOG_NAME).read_text().splitlines()]
        assert [r["phase"] for r in records] == ["I", "II", "III"]
        assert set(records[2]["terms"]) == {"ref", "ref_gradient", "final", "final_gradient", "confidence"}
        schedule = json.loads((temp_dir / "run" / "schedule.json").read_text())
        assert schedule["final"] == "phase_III"

    @pytest.mark.integration
    @pytest.mark.parametrize("variant, phases", [
        ("I", ("I",)),
        ("I-II", ("I", "II")),
        ("I-III", ("I", "III")),
        ("III", ("III",)),
        ("no-confidence", ("I", "II", "III")),
    ])
    def test_variant_runs(self, variant, phases, stereo_data, temp_dir):
        """Test that each variant trains exactly its phases, each into its own checkpoint directory"""
        run = temp_dir / variant
        final = run_schedule(build_model(0), stereo_data, *build_schedule(variant, small_config()), run)
        assert final.phases_done == phases
        for phase in Phase:
            phase_dir = run / phase_dir_name(phase)
            assert phase_dir.exists() == (phase.value in phases)
            if phase.value in phases:
                assert (phase_dir / "meta.json").exists()
                assert load_checkpoint(phase_dir).completed
                assert find_model_dir(phase_dir) is not None

        records = [json.loads(l) for l in (run / LOG_NAME).read_text().splitlines()]
        assert tuple(r["phase"] for r in records) == phases
        schedule = json.loads((run / "schedule.json").read_text())
        assert schedule["final"] == phase_dir_name(Phase.parse(phases[-1]))
        assert [c["phase"] for c in schedule["configs"]] == list(phases)
        if variant == "III":
            assert schedule["configs"][0]["end_to_end"]
        if variant == "no-confidence":
            assert records[-1]["terms"]["confidence"] == 0.0
            assert schedule["configs"][-1]["loss_weights"]["lambda8"] == 0.0

    @pytest.mark.integration
    @pytest.mark.slow
    def test_full_schedule_is_repeatable(self, stereo_data, temp_dir):
        """Test that two deterministic runs of I-II-III give identical weights and logs"""
        runs = []
        for name in ("first", "second"):
            model = build_model(0)
            configs = build_schedule("I-II-III", small_config(deterministic=True))
            run_schedule(model, stereo_data, *configs, temp_dir / name)
            log = [json.loads(l) for l in (temp_dir / name / LOG_NAME).read_text().splitlines()]
            runs.append((snapshot(model), log))
        (first_weights, first_log), (second_weights, second_log) = runs
        assert same_weights(first_weights, second_weights)
        assert [r["train_loss"] for r in first_log] == [r["train_loss"] for r in second_log]
        assert [r["terms"] for r in first_log] == [r["terms"] for r in second_log]
