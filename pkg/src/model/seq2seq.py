"""
Encoder-decoder sequence model.

A bidirectional recurrent encoder reads a window (frames x channels) and its two
final states are projected to one context vector. A unidirectional recurrent
decoder starts from that context and emits one token per step over the
vocabulary of five primitive classes plus SOS and EOS.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from logging_config import setup_logger
from src.model.config import EOS, SOS, VOCAB_SIZE, ModelConfig


LOGGER = setup_logger()
DTYPE = torch.float64


class DecoderState(NamedTuple):
    hidden: torch.Tensor  # (B, hidden_dim)
    encoder_outputs: Optional[torch.Tensor] = None  # (B, T, 2 * hidden_dim), attention only


@dataclass(frozen=True)
class GradCheckResult:
    max_relative_error: float
    gradient_norm: float
    n_checked: int


def as_batch(frames) -> torch.Tensor:
    """numpy or tensor, (T, C) or (B, T, C) -> float64 tensor (B, T, C)."""
    if isinstance(frames, np.ndarray):
        frames = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float64))
    frames = frames.to(DTYPE)
    if frames.dim() == 2:
        frames = frames.unsqueeze(0)
    return frames


class Seq2SeqModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        hidden = config.hidden_dim
        encoder_cls = nn.GRU if config.cell == "gru" else nn.RNN
        decoder_cls = nn.GRUCell if config.cell == "gru" else nn.RNNCell

        self.encoder = encoder_cls(
            config.input_dim, hidden, num_layers=1, batch_first=True, bidirectional=True
        )
        self.context_projection = nn.Linear(2 * hidden, hidden)
        self.embedding = nn.Embedding(VOCAB_SIZE, config.embed_dim)
        self.decoder = decoder_cls(config.embed_dim, hidden)
        if config.attention:
            self.attention_projection = nn.Linear(hidden, 2 * hidden, bias=False)
            self.attention_combine = nn.Linear(3 * hidden, hidden)
        self.output_projection = nn.Linear(hidden, VOCAB_SIZE)
        self.to(DTYPE)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Uniform in [-1/sqrt(hidden_dim), 1/sqrt(hidden_dim)] from a seeded generator."""
        bound = 1.0 / math.sqrt(self.config.hidden_dim)
        generator = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        with torch.no_grad():
            for param in self.parameters():
                param.uniform_(-bound, bound, generator=generator)

    def encode(self, frames) -> DecoderState:
        frames = as_batch(frames)
        if frames.shape[-1] != self.config.input_dim:
            LOGGER.error(
                f"Window has {frames.shape[-1]} channels, model expects {self.config.input_dim}"
            )
            raise ValueError(
                f"shape mismatch: window has {frames.shape[-1]} channels, "
                f"model expects {self.config.input_dim}"
            )
        outputs, final = self.encoder(frames)
        context = torch.tanh(
            self.context_projection(torch.cat([final[0], final[1]], dim=-1))
        )
        return DecoderState(
            hidden=context, encoder_outputs=outputs if self.config.attention else None
        )

    def step_logits(self, state: DecoderState, prev_tokens: torch.Tensor):
        if prev_tokens.dim() == 0:
            prev_tokens = prev_tokens.unsqueeze(0)
        if torch.any(prev_tokens < 0) or torch.any(prev_tokens >= VOCAB_SIZE):
            raise ValueError(f"invalid token id in {prev_tokens.tolist()}")
        hidden = self.decoder(self.embedding(prev_tokens), state.hidden)
        features = hidden
        if self.config.attention:
            scores = torch.bmm(
                state.encoder_outputs, self.attention_projection(hidden).unsqueeze(2)
            ).squeeze(2)
            weights = torch.softmax(scores, dim=-1)
            attended = torch.bmm(weights.unsqueeze(1), state.encoder_outputs).squeeze(1)
            features = torch.tanh(self.attention_combine(torch.cat([hidden, attended], -1)))
        return self.output_projection(features), DecoderState(hidden, state.encoder_outputs)

    def decode_step(self, state: DecoderState, prev_token):
        """
        One decoder step.

        Args:
            state (DecoderState): From encode() or a previous step.
            prev_token (int | torch.Tensor): Token id(s) fed back into the decoder.

        Returns:
            tuple: (probabilities over the 7 tokens, new DecoderState)
        """
        if not torch.is_tensor(prev_token):
            prev_token = torch.as_tensor([int(prev_token)], dtype=torch.long)
        logits, new_state = self.step_logits(state, prev_token)
        return torch.softmax(logits, dim=-1), new_state

    def sequence_loss(self, frames, targets) -> torch.Tensor:
        """
        Cross-entropy with ground-truth tokens fed back, averaged per token then over the batch.

        Decoder inputs are SOS + target tokens; supervision is target tokens + EOS.
        """
        frames = as_batch(frames)
        targets = [[int(t) for t in target] for target in targets]
        if len(targets) != frames.shape[0]:
            raise ValueError("Need exactly one target sequence per window.")
        if any(len(target) == 0 for target in targets):
            raise ValueError("empty target sequence")

        batch = len(targets)
        lengths = torch.tensor([len(t) + 1 for t in targets], dtype=DTYPE)
        steps = int(lengths.max().item())
        inputs = torch.full((batch, steps), EOS, dtype=torch.long)
        expected = torch.full((batch, steps), -1, dtype=torch.long)
        inputs[:, 0] = SOS
        for row, target in enumerate(targets):
            inputs[row, 1 : len(target) + 1] = torch.tensor(target)
            expected[row, : len(target)] = torch.tensor(target)
            expected[row, len(target)] = EOS

        state = self.encode(frames)
        nll = torch.zeros(batch, dtype=DTYPE)
        for step in range(steps):
            logits, state = self.step_logits(state, inputs[:, step])
            log_probs = F.log_softmax(logits, dim=-1)
            mask = expected[:, step] >= 0
            picked = log_probs.gather(1, expected[:, step].clamp(min=0).unsqueeze(1))
            nll = nll - picked.squeeze(1) * mask
        return (nll / lengths).mean()

    @torch.inference_mode()
    def greedy_decode(self, frames) -> list[list[int]]:
        """Batched greedy decoding of one model; lists exclude SOS/EOS."""
        frames = as_batch(frames)
        batch = frames.shape[0]
        state = self.encode(frames)
        prev = torch.full((batch,), SOS, dtype=torch.long)
        finished = torch.zeros(batch, dtype=torch.bool)
        sequences = [[] for _ in range(batch)]
        for _ in range(self.config.max_decode_len):
            logits, state = self.step_logits(state, prev)
            logits[:, SOS] = -math.inf
            prev = torch.argmax(logits, dim=-1)
            for row in range(batch):
                if finished[row]:
                    continue
                token = int(prev[row])
                if token == EOS or len(sequences[row]) == self.config.max_tokens:
                    finished[row] = True
                else:
                    sequences[row].append(token)
            if bool(finished.all()):
                break
        return sequences


def grad_check(
    model: Seq2SeqModel,
    frames,
    targets,
    epsilon: float = 1e-5,
    n_params: int = 200,
    seed: int = 0,
) -> GradCheckResult:
    """
    Compare autograd gradients of sequence_loss with central finite differences.

    A seeded random subset of n_params scalar parameters is perturbed by
    +/- epsilon. The relative error is |a - n| / max(|a| + |n|, 1e-6).
    """
    frames = as_batch(frames)
    model.zero_grad()
    model.sequence_loss(frames, targets).backward()
    params = [p for p in model.parameters() if p.requires_grad]
    gradient_norm = math.sqrt(sum(float((p.grad**2).sum()) for p in params))

    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    total = int(offsets[-1])
    picks = np.sort(rng.choice(total, size=min(n_params, total), replace=False))

    worst = 0.0
    with torch.no_grad():
        for flat_index in picks:
            owner = int(np.searchsorted(offsets, flat_index, side="right") - 1)
            param = params[owner]
            position = int(flat_index - offsets[owner])
            view = param.data.view(-1)
            original = view[position].item()

            view[position] = original + epsilon
            loss_plus = model.sequence_loss(frames, targets).item()
            view[position] = original - epsilon
            loss_minus = model.sequence_loss(frames, targets).item()
            view[position] = original

            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            analytic = param.grad.view(-1)[position].item()
            error = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
            worst = max(worst, error)

    LOGGER.info(
        f"Gradient check over {len(picks)} parameters: max relative error {worst:.3e}, "
        f"gradient norm {gradient_norm:.3e}"
    )
    return GradCheckResult(
        max_relative_error=worst, gradient_norm=gradient_norm, n_checked=len(picks)
    )
