"""Builders shared by the test modules."""

import numpy as np

from src.data_transformation.dataset import (
    ChannelDescriptor,
    ChannelManifest,
    IMURecording,
    LabeledRecording,
    PrimitiveClass,
    PrimitiveSegment,
    QuantityKind,
)
from src.data_transformation.preprocess import NormalizationStats
from src.model.config import EOS, VOCAB_SIZE, ModelConfig
from src.model.ensemble import EnsembleMember
from src.model.seq2seq import Seq2SeqModel


N_SMALL_CHANNELS = 8


def make_small_manifest() -> ChannelManifest:
    channels = [
        ChannelDescriptor(f"pelvis_q{c}", "pelvis", QuantityKind.QUATERNION, "", c)
        for c in "wxyz"
    ]
    channels += [
        ChannelDescriptor(f"hand_acc_{a}", "hand", QuantityKind.ACCELERATION, "m/s^2", a)
        for a in "xyz"
    ]
    channels.append(ChannelDescriptor("elbow_flexion", "elbow", QuantityKind.JOINT_ANGLE, "deg"))
    return ChannelManifest(channels=tuple(channels))


def make_labeled(runs, subject_id="S01", activity="shelf", trial=1, channels=N_SMALL_CHANNELS, seed=0):
    """LabeledRecording tiled by (class, length) runs, random frames."""
    segments, cursor = [], 0
    for primitive, length in runs:
        segments.append(PrimitiveSegment(PrimitiveClass(primitive), cursor, cursor + length))
        cursor += length
    frames = np.random.default_rng(seed).normal(size=(cursor, channels))
    recording = IMURecording(subject_id=subject_id, activity=activity, trial=trial, frames=frames)
    return LabeledRecording(recording=recording, segments=segments)


class ScriptedMember:
    """Ensemble member emitting fixed distributions, one per decoding step."""

    def __init__(self, distributions):
        self.distributions = [np.asarray(d, dtype=np.float64) for d in distributions]
        self.fed_back = []

    def begin(self, frames):
        return 0

    def step(self, state, prev_token):
        self.fed_back.append(prev_token)
        index = min(state, len(self.distributions) - 1)
        return self.distributions[index], state + 1


class ScriptedEnsemble:
    def __init__(self, members, max_tokens=16, input_dim=N_SMALL_CHANNELS):
        self.members = members
        self.max_tokens = max_tokens
        self.input_dim = input_dim


def one_hot(token, weight=1.0):
    """Distribution putting `weight` on token and the rest on EOS."""
    probs = np.zeros(VOCAB_SIZE)
    probs[token] = weight
    probs[EOS] += 1.0 - weight
    return probs


def tiny_member(seed=0, input_dim=N_SMALL_CHANNELS, hidden_dim=4, fold=0, attention=False):
    config = ModelConfig(input_dim=input_dim, hidden_dim=hidden_dim, embed_dim=3, attention=attention)
    model = Seq2SeqModel(config, seed=seed)
    model.eval()
    stats = NormalizationStats(mean=np.zeros(input_dim), std=np.ones(input_dim))
    return EnsembleMember(model=model, stats=stats, fold=fold)


