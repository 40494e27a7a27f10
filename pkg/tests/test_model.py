import math

import numpy as np
import pytest
import torch

from src.data_transformation.dataset import DatasetSplit
from src.data_transformation.preprocess import WindowSpec, fit_normalization, normalize_frames
from src.data_transformation.synthetic import SynthesisSpec, synthesize_dataset
from src.model.config import EOS, SOS, VOCAB_SIZE, ModelConfig, TrainConfig
from src.model.ensemble import (
    EnsembleModel,
    ModelFormatError,
    load_ensemble,
    load_member,
    save_ensemble,
    save_member,
)
from src.model.seq2seq import Seq2SeqModel, grad_check
from src.model.training import (
    EarlyStopping,
    build_examples,
    build_optimizer,
    member_seed,
    score_windows,
    train_ensemble,
    train_epoch,
    train_member,
)
from tests.helpers import N_SMALL_CHANNELS, tiny_member


def small_model(cell="gru", hidden_dim=4, seed=3, attention=False):
    config = ModelConfig(
        input_dim=N_SMALL_CHANNELS, hidden_dim=hidden_dim, embed_dim=3, cell=cell, attention=attention
    )
    return Seq2SeqModel(config, seed=seed)


def random_window(n_frames=12, seed=0):
    return np.random.default_rng(seed).normal(size=(n_frames, N_SMALL_CHANNELS))


def zero_output_projection(model):
    with torch.no_grad():
        model.output_projection.weight.zero_()
        model.output_projection.bias.zero_()


class TestEncode:
    def test_zero_parameters_give_zero_context(self):
        model = small_model()
        with torch.no_grad():
            for param in model.parameters():
                param.zero_()
        state = model.encode(random_window())
        assert torch.count_nonzero(state.hidden) == 0

    def test_deterministic(self):
        model = small_model()
        window = random_window(seed=1)
        first = model.encode(window).hidden
        second = model.encode(window).hidden
        assert torch.equal(first, second)

    def test_matches_scalar_recurrence(self):
        model = small_model(cell="rnn", seed=9)
        window = random_window(n_frames=7, seed=2)
        weights = {k: v.detach().numpy() for k, v in model.state_dict().items()}

        def run(frames, suffix):
            h = np.zeros(4)
            for x in frames:
                h = np.tanh(
                    weights[f"encoder.weight_ih_l0{suffix}"] @ x
                    + weights[f"encoder.bias_ih_l0{suffix}"]
                    + weights[f"encoder.weight_hh_l0{suffix}"] @ h
                    + weights[f"encoder.bias_hh_l0{suffix}"]
                )
            return h

        forward, backward = run(window, ""), run(window[::-1], "_reverse")
        expected = np.tanh(
            weights["context_projection.weight"] @ np.concatenate([forward, backward])
            + weights["context_projection.bias"]
        )
        np.testing.assert_allclose(model.encode(window).hidden[0].detach().numpy(), expected, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            small_model().encode(np.zeros((5, 3)))


class TestDecodeStep:
    def test_zero_logits_are_uniform(self):
        model = small_model()
        zero_output_projection(model)
        probs, _ = model.decode_step(model.encode(random_window()), SOS)
        np.testing.assert_allclose(probs.detach().numpy(), np.full((1, VOCAB_SIZE), 1 / 7), atol=1e-15)

    def test_probabilities_sum_to_one(self):
        model = small_model(seed=5, attention=True)
        state = model.encode(random_window(seed=4))
        for token in (SOS, 0, 3, EOS):
            probs, state = model.decode_step(state, token)
            assert abs(float(probs.sum()) - 1.0) < 1e-9
            assert bool((probs > 0).all()) and bool((probs < 1).all())

    def test_saturated_logit_against_softmax(self):
        model = small_model()
        zero_output_projection(model)
        with torch.no_grad():
            model.output_projection.bias[2] = 20.0
        probs, _ = model.decode_step(model.encode(random_window()), SOS)
        logits = np.zeros(VOCAB_SIZE)
        logits[2] = 20.0
        expected = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(probs[0].detach().numpy(), expected, rtol=1e-12)
        assert float(probs[0, 2]) > 0.999

    def test_invalid_token(self):
        model = small_model()
        with pytest.raises(ValueError, match="invalid token id"):
            model.decode_step(model.encode(random_window()), VOCAB_SIZE)


class TestSequenceLoss:
    def test_uniform_outputs_give_log_seven(self):
        model = small_model()
        zero_output_projection(model)
        loss = model.sequence_loss(random_window(), [[0, 2]])
        assert float(loss) == pytest.approx(math.log(7), abs=1e-12)

    def test_matches_unrolled_steps(self):
        model = small_model(seed=21)
        window = random_window(seed=6)
        state = model.encode(window)
        picked = []
        for fed, expected in ((SOS, 1), (1, 3), (3, EOS)):
            probs, state = model.decode_step(state, fed)
            picked.append(math.log(float(probs[0, expected])))
        unrolled = -sum(picked) / 3
        assert float(model.sequence_loss(window, [[1, 3]])) == pytest.approx(unrolled, abs=1e-12)

    def test_batch_mean_of_per_window_losses(self):
        model = small_model(seed=2)
        windows = np.stack([random_window(seed=1), random_window(seed=2)])
        targets = [[0], [4, 2, 1]]
        batched = float(model.sequence_loss(windows, targets))
        single = [float(model.sequence_loss(w, [t])) for w, t in zip(windows, targets)]
        assert batched == pytest.approx(sum(single) / 2, abs=1e-12)
        assert batched >= 0

    def test_empty_target(self):
        with pytest.raises(ValueError):
            small_model().sequence_loss(random_window(), [[]])


class TestGradCheck:
    def test_finite_differences_agree(self):
        model = small_model(seed=13)
        result = grad_check(model, random_window(n_frames=10, seed=3), [[0, 2]])
        assert result.n_checked == 200
        assert result.max_relative_error < 1e-4

    def test_deterministic(self):
        window = random_window(n_frames=10, seed=3)
        first = grad_check(small_model(seed=13), window, [[1]], n_params=50)
        second = grad_check(small_model(seed=13), window, [[1]], n_params=50)
        assert first == second

    def test_attention_and_plain_rnn(self):
        window = random_window(n_frames=8, seed=5)
        for model in (small_model(attention=True, seed=4), small_model(cell="rnn", seed=4)):
            assert grad_check(model, window, [[3, 4]], n_params=100).max_relative_error < 1e-4


    def test_batch_of_three_windows(self):
        windows = np.stack([random_window(n_frames=10, seed=s) for s in (21, 22, 23)])
        result = grad_check(small_model(seed=17), windows, [[0, 2], [4], [1, 3, 3]])
        assert result.n_checked == 200
        assert result.gradient_norm > 0
        assert result.max_relative_error < 1e-4

    def test_saturated_logits_have_zero_loss_and_gradient(self):
        model = small_model(cell="rnn")
        with torch.no_grad():
            for param in model.parameters():
                param.zero_()
            # SOS drives hidden unit 0 which votes for class 2, class 2 drives unit 1 which votes for EOS
            model.embedding.weight[SOS, 0] = 1.0
            model.embedding.weight[2, 1] = 1.0
            model.decoder.weight_ih[0, 0] = 1.0
            model.decoder.weight_ih[1, 1] = 1.0
            model.output_projection.weight[2, 0] = 60.0
            model.output_projection.weight[EOS, 1] = 60.0
        window = random_window(seed=8)
        assert float(model.sequence_loss(window, [[2]])) < 1e-12
        assert model.greedy_decode(window) == [[2]]
        result = grad_check(model, window, [[2]])
        assert result.gradient_norm < 1e-12
        assert result.max_relative_error < 1e-4


class TestOptimizer:
    def test_first_adam_step(self):
        module = torch.nn.Module()
        module.weights = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
        config = TrainConfig(learning_rate=0.1)
        optimizer = build_optimizer(module, config)
        loss = (module.weights**2).sum()
        loss.backward()
        optimizer.step()

        grad = np.array([2.0, -4.0])
        m = (1 - 0.9) * grad
        v = (1 - 0.999) * grad**2
        m_hat, v_hat = m / (1 - 0.9), v / (1 - 0.999)
        expected = np.array([1.0, -2.0]) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(module.weights.detach().numpy(), expected, atol=1e-12)

    def test_early_stopping(self):
        stopper = EarlyStopping(patience=1)
        assert stopper.update(0.5)
        assert not stopper.should_stop
        assert not stopper.update(0.5)
        assert stopper.should_stop

    def test_early_stopping_ignores_missing_values(self):
        stopper = EarlyStopping(patience=2)
        assert not stopper.update(None)
        assert stopper.update(0.4)
        assert stopper.epochs_since_best == 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(early_stop_patience=0)
        with pytest.raises(ValueError):
            ModelConfig(cell="lstm")

    def test_member_seeds_differ(self):
        assert member_seed(0, 0) != member_seed(0, 1)
        assert member_seed(7, 2) == member_seed(7, 2)


class TestEnsembleFiles:
    def test_save_load_member(self, tmp_path):
        member = tiny_member(seed=4, fold=2, attention=True)
        path = str(tmp_path / "model.2.bin")
        save_member(member, path)
        loaded = load_member(path)
        assert loaded.fold == 2
        assert loaded.config == member.config
        for key, value in member.model.state_dict().items():
            assert torch.equal(loaded.model.state_dict()[key], value)
        np.testing.assert_array_equal(loaded.stats.std, member.stats.std)

    def test_save_load_ensemble_in_fold_order(self, tmp_path):
        ensemble = EnsembleModel([tiny_member(seed=s, fold=f) for s, f in ((1, 1), (2, 0))])
        save_ensemble(ensemble, str(tmp_path))
        loaded = load_ensemble(str(tmp_path))
        assert [m.fold for m in loaded.members] == [0, 1]

    def test_bad_magic_and_version(self, tmp_path):
        path = tmp_path / "model.0.bin"
        path.write_bytes(b"not a model file at all")
        with pytest.raises(ModelFormatError):
            load_member(str(path))

        save_member(tiny_member(), str(path))
        blob = bytearray(path.read_bytes())
        position = blob.find(b'"version":1')
        blob[position + len('"version":')] = ord("9")
        path.write_bytes(bytes(blob))
        with pytest.raises(ModelFormatError, match="version"):
            load_member(str(path))

    def test_empty_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_ensemble(str(tmp_path))

    def test_members_must_share_config(self):
        with pytest.raises(ValueError):
            EnsembleModel([tiny_member(hidden_dim=4), tiny_member(hidden_dim=5)])


def tiny_configs(max_epochs=2):
    model_config = ModelConfig(input_dim=N_SMALL_CHANNELS, hidden_dim=4, embed_dim=3)
    train_config = TrainConfig(max_epochs=max_epochs, batch_size=64, early_stop_patience=5, seed=1)
    return model_config, train_config


class TestTraining:
    def test_train_member_runs_and_is_deterministic(self, small_dataset):
        split = DatasetSplit(train_subjects={"S01", "S02", "S03"}, val_subjects={"S04"})
        model_config, train_config = tiny_configs()
        member, log = train_member(
            split, small_dataset.recordings, model_config, train_config, progress=False
        )
        again, _ = train_member(
            split, small_dataset.recordings, model_config, train_config, progress=False
        )
        assert 1 <= len(log.epochs) <= 2
        assert all(math.isfinite(e.loss) for e in log.epochs)
        assert log.best_epoch >= 1
        assert member.stats.source_split == "fold-0"
        for key, value in member.model.state_dict().items():
            assert torch.equal(again.model.state_dict()[key], value)

    def test_empty_validation_fold(self, small_dataset):
        split = DatasetSplit(train_subjects={"S01"}, val_subjects={"S99"})
        model_config, train_config = tiny_configs()
        with pytest.raises(ValueError):
            train_member(split, small_dataset.recordings, model_config, train_config, progress=False)

    @pytest.mark.slow
    def test_concurrent_schedule_matches_sequential(self, small_dataset):
        model_config, train_config = tiny_configs(max_epochs=1)
        kwargs = dict(n_folds=2, seed=4, progress=False)
        sequential, _, splits = train_ensemble(
            small_dataset.recordings, small_dataset.subject_ids, model_config, train_config, workers=1, **kwargs
        )
        concurrent, _, _ = train_ensemble(
            small_dataset.recordings, small_dataset.subject_ids, model_config, train_config, workers=2, **kwargs
        )
        assert [len(s.val_subjects) for s in splits] == [2, 2]
        for a, b in zip(sequential.members, concurrent.members):
            for key, value in a.model.state_dict().items():
                assert torch.equal(b.model.state_dict()[key], value)

    @pytest.mark.slow
    def test_hidden_64_overfits_100_windows(self, small_manifest):
        spec = SynthesisSpec(n_subjects=5, trials_per_subject=1, duration_s=80.0)
        recordings = synthesize_dataset(spec, small_manifest, seed=31).recordings
        stats = fit_normalization([r.recording for r in recordings])
        frames_list = [normalize_frames(r.recording.frames, stats) for r in recordings]
        window_spec = WindowSpec()
        examples = build_examples(recordings, window_spec, "test", 5, 16)[:100]
        assert len(examples) == 100

        model = Seq2SeqModel(ModelConfig(input_dim=N_SMALL_CHANNELS, hidden_dim=64, embed_dim=16), seed=2)
        optimizer = build_optimizer(model, TrainConfig(learning_rate=3e-3))
        rng = np.random.default_rng(5)
        aer = None
        for epoch in range(1, 201):
            loss = train_epoch(model, optimizer, frames_list, examples, window_spec, 10, rng, epoch=epoch)
            assert math.isfinite(loss)
            if epoch % 5 == 0:
                aer = score_windows(model, frames_list, examples, window_spec).aer
                if aer < 0.05:
                    break
        assert aer < 0.05
