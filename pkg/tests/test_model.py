import math

import numpy as np
import pytest
import torch

from scentvc.features import FeatureTrack
from scentvc.model import (
    LocationAttention,
    MdnParams,
    ModelConfig,
    PostNet,
    Scent,
    convert,
    lengths_to_mask,
    mdn_nll,
    mdn_point,
    per_sample_losses,
)
from scentvc.training import TrainConfig, Trainer, make_batch

TINY = dict(feat_dim=4, bottleneck_dim=3, encoder_dim=8, attention_rnn_dim=8, decoder_rnn_dim=8,
            prenet_dims=(8, 8), attention_dim=8, location_filters=3, location_kernel=5,
            postnet_channels=8, num_phonemes=6, num_tones=5)


def gaussian_nll(x, mu, sigma):
    return 0.5 * np.sum(((x - mu) / sigma) ** 2 + np.log(2 * np.pi) + 2 * np.log(sigma))


def test_mdn_single_component_is_gaussian():
    rng = np.random.default_rng(0)
    x, mu, ls = rng.normal(size=4), rng.normal(size=4), 0.3 * rng.normal(size=4)
    mdn = MdnParams(torch.zeros(1), torch.tensor(mu)[None], torch.tensor(ls)[None])
    assert mdn_nll(mdn, torch.tensor(x)).item() == pytest.approx(gaussian_nll(x, mu, np.exp(ls)), rel=1e-12)


def test_mdn_two_components_closed_form():
    rng = np.random.default_rng(1)
    x = rng.normal(size=3)
    mu, ls, logits = rng.normal(size=(2, 3)), 0.2 * rng.normal(size=(2, 3)), rng.normal(size=2)
    w = np.exp(logits) / np.exp(logits).sum()
    like = sum(w[k] * np.exp(-gaussian_nll(x, mu[k], np.exp(ls[k]))) for k in range(2))
    mdn = MdnParams(torch.tensor(logits), torch.tensor(mu), torch.tensor(ls))
    assert mdn_nll(mdn, torch.tensor(x)).item() == pytest.approx(-math.log(like), rel=1e-10)
    # identical components collapse to one Gaussian whatever the weights
    same = MdnParams(torch.tensor(logits), torch.tensor(np.stack([mu[0], mu[0]])), torch.tensor(np.stack([ls[0], ls[0]])))
    assert mdn_nll(same, torch.tensor(x)).item() == pytest.approx(gaussian_nll(x, mu[0], np.exp(ls[0])), rel=1e-10)


def test_mdn_point_takes_heaviest_component_with_low_index_ties():
    means = torch.tensor([[[1.0, 1.0], [2.0, 2.0]], [[3.0, 3.0], [4.0, 4.0]], [[5.0, 5.0], [6.0, 6.0]]])
    logits = torch.tensor([[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]])
    point = mdn_point(MdnParams(logits, means, torch.zeros_like(means)))
    assert point.tolist() == [[2.0, 2.0], [3.0, 3.0], [5.0, 5.0]]


def test_postnet_starts_as_identity():
    net = PostNet(4, 8, 5, 5)
    x = torch.randn(2, 9, 4)
    assert torch.equal(net(x, lengths_to_mask(torch.tensor([9, 5]))), x)


def test_forward_prior_attention_advances_then_parks():
    att = LocationAttention(8, 8, 8, 3, 5, prior=4.0)
    memory = torch.zeros(1, 6, 8)
    pmem = att.process_memory(memory)
    mask = torch.ones(1, 6, dtype=torch.bool)
    w = torch.zeros(1, 6)
    w[0, 0] = 1.0
    cum = w.clone()
    with torch.no_grad():
        for step in range(10):
            query = torch.zeros(1, 8)
            _, w = att(query, memory, pmem, w, cum, mask)
            cum = cum + w
            # mass stays on the previous focus and the next frame
            assert w.max() > 0.4
    assert int(cum[0].argmax()) <= 5
    with pytest.raises(ValueError):
        LocationAttention(8, 8, 8, 1, 5, prior=4.0)


def test_stop_starts_at_prior():
    model = Scent(ModelConfig(**TINY, stop_prior=0.02))
    assert torch.sigmoid(model.stop.bias).item() == pytest.approx(0.02, rel=1e-6)


def test_teacher_forcing_equals_stepwise_decoding():
    torch.manual_seed(0)
    model = Scent(ModelConfig(**TINY)).double().eval()
    torch.nn.init.normal_(model.postnet.convs[-1].weight, std=0.1)
    x = torch.randn(1, 7, 7, dtype=torch.float64)
    y = torch.randn(1, 5, 4, dtype=torch.float64)
    out = model.forward_teacher_forced(x, torch.tensor([7]), y, torch.tensor([5]))
    state = model.init_state(model.encode(x))
    prev = torch.zeros(1, 4, dtype=torch.float64)
    for t in range(5):
        step = model.decoder_step(prev, state)
        state = step.state
        torch.testing.assert_close(step.mdn.means, out.mdn.means[:, t], rtol=1e-10, atol=1e-12)
        torch.testing.assert_close(step.stop_logit, out.stop_logits[:, t], rtol=1e-10, atol=1e-12)
        torch.testing.assert_close(step.attn_weights, out.attention[:, t], rtol=1e-10, atol=1e-12)
        torch.testing.assert_close(step.tap, out.dec_taps[:, t], rtol=1e-10, atol=1e-12)
        prev = y[:, t]
    with pytest.raises(RuntimeError):
        model.decoder_step(prev, None)


def test_padded_batch_matches_single_samples(pairs):
    trainer = Trainer(TrainConfig(seed=0, model=dict(encoder_dim=16, attention_rnn_dim=16, decoder_rnn_dim=16,
                                                     prenet_dims=(16, 16), attention_dim=8)), pairs[:4])
    model = trainer.model.eval()
    samples = [s.whole for s in trainer.samplers]
    assert len({s.src.shape[0] for s in samples}) > 1
    with torch.no_grad():
        batch = make_batch(samples)
        mel, stop, _ = per_sample_losses(model.forward_teacher_forced(batch.inputs, batch.src_len, batch.targets,
                                                                      batch.tgt_len), batch.targets, batch.tgt_len)
        for i, s in enumerate(samples):
            one = make_batch([s])
            m1, s1, _ = per_sample_losses(model.forward_teacher_forced(one.inputs, one.src_len, one.targets,
                                                                       one.tgt_len), one.targets, one.tgt_len)
            assert abs(mel[i].item() - m1.item()) <= 1e-5 * max(1.0, abs(m1.item()))
            assert abs(stop[i].item() - s1.item()) <= 1e-5 * max(1.0, abs(s1.item()))


def test_encoder_rejects_non_finite_input():
    model = Scent(ModelConfig(**TINY))
    x = torch.zeros(1, 4, 7)
    x[0, 2, 1] = float("nan")
    with pytest.raises(ValueError):
        model.encode(x)


def test_convert_is_deterministic_and_bounded(pairs):
    trainer = Trainer(TrainConfig(seed=0), pairs[:2])
    pair = pairs[0]
    a, ta = convert(trainer.model, pair.src, pair.src_bn)
    b, tb = convert(trainer.model, pair.src, pair.src_bn)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(ta, tb)
    assert isinstance(a, FeatureTrack) and a.dim == pair.src.dim
    assert 1 <= a.num_frames <= math.floor(trainer.model.config.max_decode_ratio * pair.src.num_frames)
    assert ta.shape == (a.num_frames, pair.src.num_frames)
    np.testing.assert_allclose(ta.sum(1), 1.0, rtol=1e-5)
    assert np.all((a.pitch == 0) | (a.pitch >= trainer.model.config.voicing_threshold_hz))
