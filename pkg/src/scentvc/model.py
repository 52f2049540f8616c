"""Sequence-to-sequence conversion network.

Encoder (dense + bidirectional GRU) over source spectra concatenated with
upsampled bottleneck features; an autoregressive decoder with PreNet,
attention GRU, location-sensitive additive attention and decoder GRU; a
mixture-density output layer and stop predictor per frame; and a residual
convolutional PostNet.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .features import BottleneckTrack, FeatureTrack, upsample_repeat
from .recurrent import AttentionDecoderFunction, BiGruFunction

LOG_SIGMA_FLOOR = -7.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    feat_dim: int = 20
    bottleneck_dim: int = 16
    encoder_dim: int = 128
    attention_rnn_dim: int = 128
    decoder_rnn_dim: int = 128
    prenet_dims: tuple = (64, 64)
    prenet_dropout: float = 0.5
    attention_dim: int = 64
    location_filters: int = 8
    location_kernel: int = 15
    location_prior: float = 4.0
    location_lean: float = 0.3
    stop_prior: float = 0.02
    stop_end_gain: float = 6.0
    postnet_channels: int = 64
    postnet_layers: int = 3
    postnet_kernel: int = 5
    mdn_mixtures: int = 2
    max_decode_ratio: float = 3.0
    num_phonemes: int = 16
    num_tones: int = 5
    classifier_dropout: float = 0.5
    voicing_threshold_hz: float = 40.0

    def __post_init__(self):
        self.prenet_dims = tuple(int(d) for d in self.prenet_dims)
        sizes = [self.feat_dim, self.bottleneck_dim, self.encoder_dim, self.attention_rnn_dim,
                 self.decoder_rnn_dim, self.attention_dim, self.location_filters, self.postnet_channels,
                 self.postnet_layers, self.num_phonemes, self.num_tones, *self.prenet_dims]
        if min(sizes) < 1:
            raise ValueError("all model sizes must be >= 1")
        if self.mdn_mixtures < 1:
            raise ValueError("mdn_mixtures must be >= 1")
        if not 0 < self.stop_prior < 1:
            raise ValueError("stop_prior must be in (0, 1)")
        if self.max_decode_ratio <= 0:
            raise ValueError("max_decode_ratio must be positive")
        if self.encoder_dim % 2:
            raise ValueError("encoder_dim must be even (bidirectional encoder)")
        if self.feat_dim < 2:
            raise ValueError("feat_dim must include at least one spectral channel and the pitch channel")

    @property
    def tap_dim(self) -> int:
        """Width of the decoder-RNN input (attention context + attention-RNN output)."""
        return self.encoder_dim + self.attention_rnn_dim

    def to_dict(self):
        d = asdict(self)
        d["prenet_dims"] = list(self.prenet_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def dropout(x: Tensor, p: float, generator: Optional[torch.Generator]) -> Tensor:
    """Inverted dropout drawing its mask from ``generator``; identity when ``generator`` is None."""
    if generator is None or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def lengths_to_mask(lengths: Tensor, max_len: Optional[int] = None) -> Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len)[None, :] < lengths[:, None]


# --------------------------------------------------------------------------
# MDN
# --------------------------------------------------------------------------


@dataclass
class MdnParams:
    logits: Tensor  # [..., K]
    means: Tensor  # [..., K, D]
    log_sigmas: Tensor  # [..., K, D]

    @property
    def weights(self) -> Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def sigmas(self) -> Tensor:
        return torch.exp(self.log_sigmas.clamp(min=LOG_SIGMA_FLOOR))

    def __getitem__(self, idx):
        return MdnParams(self.logits[idx], self.means[idx], self.log_sigmas[idx])


def mdn_nll(mdn: MdnParams, target: Tensor) -> Tensor:
    """Negative log-likelihood of ``target [..., D]`` under a diagonal Gaussian mixture.

    Returns one value per frame (shape ``[...]``).
    """
    log_w = torch.log_softmax(mdn.logits, dim=-1)
    log_sigma = mdn.log_sigmas.clamp(min=LOG_SIGMA_FLOOR)
    z = (target.unsqueeze(-2) - mdn.means) * torch.exp(-log_sigma)
    log_comp = -0.5 * (z * z + LOG_2PI).sum(-1) - log_sigma.sum(-1)
    return -torch.logsumexp(log_w + log_comp, dim=-1)


def mdn_point(mdn: MdnParams) -> Tensor:
    """Mean of the highest-weight component; ties go to the lower index."""
    best = torch.argmax(mdn.logits, dim=-1)
    idx = best[..., None, None].expand(*best.shape, 1, mdn.means.shape[-1])
    return torch.gather(mdn.means, -2, idx).squeeze(-2)


# --------------------------------------------------------------------------
# network blocks
# --------------------------------------------------------------------------


class Encoder(nn.Module):
    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.proj = nn.Linear(in_dim, hidden)
        self.rnn = nn.GRU(hidden, hidden // 2, batch_first=True, bidirectional=True)

    def gru_weights(self):
        r = self.rnn
        return (r.weight_ih_l0, r.weight_hh_l0, r.bias_ih_l0, r.bias_hh_l0,
                r.weight_ih_l0_reverse, r.weight_hh_l0_reverse, r.bias_ih_l0_reverse, r.bias_hh_l0_reverse)

    def forward(self, x: Tensor, lengths: Tensor) -> Tensor:
        h = torch.relu(self.proj(x))
        return BiGruFunction.apply(h, lengths, *self.gru_weights())

    def forward_reference(self, x: Tensor, lengths: Tensor) -> Tensor:
        """Same computation through ``torch.nn.GRU`` and packed sequences."""
        h = torch.relu(self.proj(x))
        packed = pack_padded_sequence(h, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out


class PreNet(nn.Module):
    def __init__(self, in_dim: int, sizes, p: float):
        super().__init__()
        dims = [in_dim, *sizes]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.p = p

    def forward(self, x: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
        for layer in self.layers:
            x = dropout(torch.relu(layer(x)), self.p, generator)
        return x


class LocationAttention(nn.Module):
    """Additive attention with a convolutional feature of previous and cumulative weights."""

    def __init__(self, query_dim: int, memory_dim: int, attention_dim: int, filters: int, kernel: int,
                 prior: float = 0.0, lean: float = 0.0):
        super().__init__()
        self.query = nn.Linear(query_dim, attention_dim, bias=False)
        self.memory = nn.Linear(memory_dim, attention_dim)
        self.location_conv = nn.Conv1d(2, filters, kernel, padding=kernel // 2, bias=False)
        self.location = nn.Linear(filters, attention_dim, bias=False)
        self.v = nn.Linear(attention_dim, 1, bias=False)
        if prior > 0:
            self.init_forward_prior(prior, lean)

    @torch.no_grad()
    def init_forward_prior(self, gain: float, lean: float = 0.0, sharpness: float = 3.0):
        """Start location filters/attention units 0 and 1 as "advance one frame" and "stay" detectors.

        Only initial values change and every parameter stays trainable. Right
        after initialisation the frame under the previous focus and the one
        after it share the attention, every other frame sits ``~2 * gain``
        lower, and the query can tilt the balance between the two.
        """
        pad = self.location_conv.padding[0]
        if pad < 1 or self.location_conv.out_channels < 2 or self.v.in_features < 2:
            raise ValueError("forward prior needs >= 2 location filters, attention_dim >= 2 and kernel >= 3")
        for unit, tap in ((0, pad - 1), (1, pad)):  # previous weight one frame back -> advance; same frame -> stay
            self.location_conv.weight[unit].zero_()
            self.location_conv.weight[unit, 0, tap] = 1.0
            self.location.weight[unit].zero_()
            self.location.weight[unit, unit] = 2.0 * sharpness
            self.memory.weight[unit].zero_()
            self.memory.bias[unit] = -sharpness
            self.v.weight[0, unit] = gain * (1.0 + lean if unit == 0 else 1.0)

    def process_memory(self, memory: Tensor) -> Tensor:
        return self.memory(memory)

    def forward(self, query, memory, processed_memory, weights, cum_weights, mask):
        loc = self.location_conv(torch.stack([weights, cum_weights], dim=1)).transpose(1, 2)
        energies = self.v(torch.tanh(self.query(query)[:, None, :] + self.location(loc) + processed_memory))
        energies = energies.squeeze(-1).masked_fill(~mask, float("-inf"))
        new_weights = torch.softmax(energies, dim=-1)
        context = torch.bmm(new_weights[:, None, :], memory).squeeze(1)
        return context, new_weights


class PostNet(nn.Module):
    """Residual 1-D conv stack; the last layer starts at zero so the net starts as identity."""

    def __init__(self, dim: int, channels: int, layers: int, kernel: int):
        super().__init__()
        dims = [dim] + [channels] * max(layers - 1, 0) + [dim]
        self.convs = nn.ModuleList(
            nn.Conv1d(a, b, kernel, padding=kernel // 2) for a, b in zip(dims[:-1], dims[1:])
        )
        nn.init.zeros_(self.convs[-1].weight)
        nn.init.zeros_(self.convs[-1].bias)

    def forward(self, coarse: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        m = None if mask is None else mask[:, None, :].to(coarse.dtype)
        h = coarse.transpose(1, 2)
        if m is not None:
            h = h * m
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = torch.tanh(h)
            if m is not None:
                h = h * m
        return coarse + h.transpose(1, 2)


@dataclass
class DecoderState:
    memory: Tensor
    processed_memory: Tensor
    mask: Tensor
    att_h: Tensor
    dec_h: Tensor
    context: Tensor
    weights: Tensor
    cum_weights: Tensor


@dataclass
class StepOutput:
    mdn: MdnParams
    stop_logit: Tensor
    state: DecoderState
    attn_weights: Tensor
    tap: Tensor  # decoder-RNN input


@dataclass
class ForwardOutput:
    mdn: MdnParams  # [B, T', ...]
    coarse: Tensor  # [B, T', D]
    refined: Tensor  # [B, T', D]
    stop_logits: Tensor  # [B, T']
    attention: Tensor  # [B, T', T]
    memory: Tensor  # encoder output [B, T, H]
    dec_taps: Tensor  # [B, T', tap_dim]
    src_mask: Tensor
    tgt_mask: Tensor


class Scent(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        self.encoder = Encoder(c.feat_dim + c.bottleneck_dim, c.encoder_dim)
        self.prenet = PreNet(c.feat_dim, c.prenet_dims, c.prenet_dropout)
        self.attention_rnn = nn.GRUCell(c.prenet_dims[-1] + c.encoder_dim, c.attention_rnn_dim)
        self.attention = LocationAttention(c.attention_rnn_dim, c.encoder_dim, c.attention_dim,
                                           c.location_filters, c.location_kernel, c.location_prior,
                                           c.location_lean)
        self.decoder_rnn = nn.GRUCell(c.tap_dim, c.decoder_rnn_dim)
        out_in = c.decoder_rnn_dim + c.encoder_dim
        k, d = c.mdn_mixtures, c.feat_dim
        self.mdn_logits = nn.Linear(out_in, k)
        self.mdn_means = nn.Linear(out_in, k * d)
        self.mdn_log_sigmas = nn.Linear(out_in, k * d)
        # stop flag also sees how much attention sits on the final encoder frame (now and cumulated)
        self.stop = nn.Linear(out_in + 2, 1)
        self.postnet = PostNet(d, c.postnet_channels, c.postnet_layers, c.postnet_kernel)
        # feature normalisation, set from training data
        self.register_buffer("src_mean", torch.zeros(d))
        self.register_buffer("src_std", torch.ones(d))
        self.register_buffer("tgt_mean", torch.zeros(d))
        self.register_buffer("tgt_std", torch.ones(d))
        nn.init.zeros_(self.mdn_log_sigmas.weight)
        nn.init.zeros_(self.mdn_log_sigmas.bias)
        # one positive frame per utterance: start the stop flag at its base rate
        nn.init.constant_(self.stop.bias, math.log(c.stop_prior / (1.0 - c.stop_prior)))
        # ... and lean towards stopping once the attention has dwelt on the final encoder frame
        with torch.no_grad():
            self.stop.weight[0, -1] = c.stop_end_gain

    # -- encoder ---------------------------------------------------------

    def encode(self, inputs: Tensor, lengths: Optional[Tensor] = None) -> Tensor:
        """``inputs [B, T, D + D_b]`` (or ``[T, D + D_b]``) -> memory ``[B, T, H]``."""
        if inputs.dim() == 2:
            inputs = inputs[None]
        if not torch.isfinite(inputs).all():
            raise ValueError("encoder input contains NaN or inf")
        if lengths is None:
            lengths = torch.full((inputs.shape[0],), inputs.shape[1], dtype=torch.long)
        return self.encoder(inputs, lengths)

    # -- decoder ---------------------------------------------------------

    def init_state(self, memory: Tensor, lengths: Optional[Tensor] = None) -> DecoderState:
        b, t, _ = memory.shape
        if lengths is None:
            lengths = torch.full((b,), t, dtype=torch.long)
        mask = lengths_to_mask(lengths, t)
        weights = memory.new_zeros(b, t)
        weights[:, 0] = 1.0
        return DecoderState(
            memory=memory,
            processed_memory=self.attention.process_memory(memory),
            mask=mask,
            att_h=memory.new_zeros(b, self.config.attention_rnn_dim),
            dec_h=memory.new_zeros(b, self.config.decoder_rnn_dim),
            context=memory.new_zeros(b, self.config.encoder_dim),
            weights=weights,
            cum_weights=weights.clone(),
        )

    def _attend(self, pre: Tensor, s: DecoderState):
        att_h = self.attention_rnn(torch.cat([pre, s.context], -1), s.att_h)
        context, weights = self.attention(att_h, s.memory, s.processed_memory, s.weights, s.cum_weights, s.mask)
        tap = torch.cat([context, att_h], -1)
        dec_h = self.decoder_rnn(tap, s.dec_h)
        new = DecoderState(s.memory, s.processed_memory, s.mask, att_h, dec_h, context, weights,
                           s.cum_weights + weights)
        return new, tap

    def _project(self, dec_h: Tensor, context: Tensor, end_mass: Tensor):
        h = torch.cat([dec_h, context], -1)
        k, d = self.config.mdn_mixtures, self.config.feat_dim
        mdn = MdnParams(
            self.mdn_logits(h),
            self.mdn_means(h).unflatten(-1, (k, d)),
            self.mdn_log_sigmas(h).unflatten(-1, (k, d)),
        )
        return mdn, self.stop(torch.cat([h, end_mass.detach()], -1)).squeeze(-1)

    def decoder_step(self, prev_frame: Tensor, state: Optional[DecoderState],
                     generator: Optional[torch.Generator] = None) -> StepOutput:
        """One autoregressive step from the previous (normalised) frame ``[B, D]``."""
        if state is None:
            raise RuntimeError("decoder state is not initialised; call init_state(encode(...)) first")
        if prev_frame.dim() == 1:
            prev_frame = prev_frame[None]
        new, tap = self._attend(self.prenet(prev_frame, generator), state)
        last = new.mask.sum(1, keepdim=True) - 1
        end_mass = torch.cat([new.weights.gather(1, last), new.cum_weights.gather(1, last)], -1)
        mdn, stop = self._project(new.dec_h, new.context, end_mass)
        return StepOutput(mdn, stop, new, new.weights, tap)

    # -- full passes -----------------------------------------------------

    def decoder_weights(self):
        a, att, d = self.attention_rnn, self.attention, self.decoder_rnn
        return (a.weight_ih, a.weight_hh, a.bias_ih, a.bias_hh, att.query.weight, att.location_conv.weight,
                att.location.weight, att.v.weight, d.weight_ih, d.weight_hh, d.bias_ih, d.bias_hh)

    def forward_teacher_forced(self, inputs: Tensor, src_len: Tensor, targets: Tensor, tgt_len: Tensor,
                               generator: Optional[torch.Generator] = None,
                               reference: bool = False) -> ForwardOutput:
        """Decode with ground-truth previous frames. All features normalised.

        ``reference=True`` runs the recurrences through plain autograd
        instead of the hand-written kernels (slow; for testing).
        """
        if int(tgt_len.min()) < 1:
            raise ValueError("target of length 0")
        b, t_out, d = targets.shape
        if inputs.dim() == 2:
            inputs = inputs[None]
        if not torch.isfinite(inputs).all():
            raise ValueError("encoder input contains NaN or inf")
        memory = (self.encoder.forward_reference if reference else self.encoder)(inputs, src_len)
        src_mask = lengths_to_mask(src_len, memory.shape[1])
        prev = torch.cat([targets.new_zeros(b, 1, d), targets[:, :-1]], dim=1)
        pre = self.prenet(prev, generator)
        if reference:
            state = self.init_state(memory, src_len)
            taps, dec_hs, attn = [], [], []
            for t in range(t_out):
                state, tap = self._attend(pre[:, t], state)
                taps.append(tap)
                dec_hs.append(state.dec_h)
                attn.append(state.weights)
            taps, dec_h, attention = torch.stack(taps, 1), torch.stack(dec_hs, 1), torch.stack(attn, 1)
        else:
            pmem = self.attention.process_memory(memory)
            taps, dec_h, attention = AttentionDecoderFunction.apply(pre, memory, pmem, src_mask,
                                                                    *self.decoder_weights())
        context = taps[..., : self.config.encoder_dim]
        last = (src_len - 1).to(attention.device)
        w_end = attention.gather(2, last.view(b, 1, 1).expand(b, t_out, 1)).squeeze(-1)
        cum_end = w_end.cumsum(1) + (last == 0).to(w_end.dtype)[:, None]  # decoding starts focused on frame 0
        mdn, stop = self._project(dec_h, context, torch.stack([w_end, cum_end], -1))
        coarse = mdn_point(mdn)
        tgt_mask = lengths_to_mask(tgt_len, t_out)
        refined = self.postnet(coarse, tgt_mask)
        return ForwardOutput(mdn, coarse, refined, stop, attention, memory, taps, src_mask, tgt_mask)

    @torch.no_grad()
    def generate(self, inputs: Tensor, max_steps: int):
        """Free-running decode of a single utterance; returns ``(refined [T', D], attention [T', T])``."""
        memory = self.encode(inputs)
        state = self.init_state(memory)
        prev = memory.new_zeros(1, self.config.feat_dim)
        frames, attn = [], []
        for _ in range(max_steps):
            out = self.decoder_step(prev, state)
            state = out.state
            prev = mdn_point(out.mdn)
            frames.append(prev)
            attn.append(out.attn_weights)
            if torch.sigmoid(out.stop_logit).item() > 0.5:
                break
        coarse = torch.cat(frames, 0)[None]
        refined = self.postnet(coarse)[0]
        return refined, torch.cat(attn, 0)

    # -- normalisation -----------------------------------------------------

    def set_normalisation(self, src_mean, src_std, tgt_mean, tgt_std):
        for name, value in (("src_mean", src_mean), ("src_std", src_std),
                            ("tgt_mean", tgt_mean), ("tgt_std", tgt_std)):
            getattr(self, name).copy_(torch.as_tensor(np.asarray(value), dtype=getattr(self, name).dtype))


def per_sample_losses(out: ForwardOutput, targets: Tensor, tgt_len: Tensor, stop_pos_weight: float = 1.0):
    """Per-sample spectral and stop losses, each averaged over that sample's real frames.

    ``stop_pos_weight`` scales the BCE term of the single positive (final)
    frame. Returns ``(mel_per_sample, stop_per_sample, frame_counts)``; the
    batch loss is the frame-weighted mean, see :func:`spectral_losses`.
    """
    mask = out.tgt_mask.to(targets.dtype)
    nll = mdn_nll(out.mdn, targets)
    l1 = (out.refined - targets).abs().sum(-1)
    stop_target = F.one_hot(tgt_len - 1, targets.shape[1]).to(targets.dtype)
    pos_weight = None if stop_pos_weight == 1.0 else out.stop_logits.new_tensor(stop_pos_weight)
    bce = F.binary_cross_entropy_with_logits(out.stop_logits, stop_target, reduction="none", pos_weight=pos_weight)
    counts = mask.sum(1)
    mel = ((nll + l1) * mask).sum(1) / counts
    stop = (bce * mask).sum(1) / counts
    return mel, stop, counts


def spectral_losses(out: ForwardOutput, targets: Tensor, tgt_len: Tensor, stop_pos_weight: float = 1.0):
    """Batch ``(mel_loss, stop_loss)``: means over all real frames in the batch."""
    mel, stop, counts = per_sample_losses(out, targets, tgt_len, stop_pos_weight)
    total = counts.sum()
    return (mel * counts).sum() / total, (stop * counts).sum() / total


# --------------------------------------------------------------------------
# conversion
# --------------------------------------------------------------------------


def model_inputs(model: Scent, src: np.ndarray, bn: np.ndarray) -> Tensor:
    """Normalise source frames and concatenate the (already upsampled) bottleneck rows."""
    dtype = model.src_mean.dtype
    x = (torch.as_tensor(src, dtype=dtype) - model.src_mean) / model.src_std
    return torch.cat([x, torch.as_tensor(bn, dtype=dtype)], -1)


def convert(model: Scent, src: FeatureTrack, src_bn: BottleneckTrack) -> tuple[FeatureTrack, np.ndarray]:
    """Convert a source utterance; returns the converted track and its attention trace.

    Deterministic: dropout is off and auxiliary classifiers are not involved.
    """
    was_training = model.training
    model.eval()
    try:
        bn = upsample_repeat(src_bn, src_bn.rate_divisor, src.num_frames)
        inputs = model_inputs(model, src.frames, bn)
        max_steps = int(math.floor(model.config.max_decode_ratio * src.num_frames))
        refined, attn = model.generate(inputs, max(max_steps, 1))
        frames = (refined * model.tgt_std + model.tgt_mean).numpy().astype(np.float32)
    finally:
        model.train(was_training)
    pitch = frames[:, -1]
    pitch[pitch < model.config.voicing_threshold_hz] = 0.0
    return FeatureTrack(frames, hop_ms=src.hop_ms), attn.numpy()
