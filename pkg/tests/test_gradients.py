"""Autograd (including the hand-written recurrent kernels) against central finite differences.

Everything runs in float64 on a tiny configuration (D=4, H=8).
"""

import time

import numpy as np
import pytest
import torch

from scentvc.features import CorpusConfig, generate_pairs, make_corpus
from scentvc.model import LocationAttention, MdnParams, ModelConfig, PostNet, Scent, mdn_nll
from scentvc.multitask import masked_cross_entropy
from scentvc.training import TrainConfig, Trainer, _step_generator, make_batch

STEP = 1e-4
RTOL = 1e-3
N_COORDS = 20

TINY = dict(feat_dim=4, bottleneck_dim=3, encoder_dim=8, attention_rnn_dim=8, decoder_rnn_dim=8,
            prenet_dims=(8, 8), attention_dim=8, location_filters=3, location_kernel=5,
            postnet_channels=8, num_phonemes=6, num_tones=5)


def fd_check(fn, tensors, rng, n=N_COORDS):
    """Compare autograd of scalar ``fn()`` w.r.t. each tensor with central differences at ``n`` of its
    coordinates (all of them when it has fewer)."""
    for t in tensors:
        t.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    picks = []
    for k, t in enumerate(tensors):
        picks += [(k, int(i)) for i in rng.choice(t.numel(), size=min(n, t.numel()), replace=False)]
    bad = []
    for k, i in picks:
        flat = tensors[k].data.view(-1)  # parameters are contiguous
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + STEP
            up = fn().item()
            flat[i] = orig - STEP
            down = fn().item()
            flat[i] = orig
        fd = (up - down) / (2 * STEP)
        ad = grads[k].reshape(-1)[i].item()
        if abs(fd - ad) > RTOL * max(abs(fd), abs(ad)) + 1e-8:
            bad.append((k, i, fd, ad))
    return bad, len(picks)


@pytest.fixture
def grng():
    torch.manual_seed(0)
    return np.random.default_rng(0)


def test_mdn_nll_gradient(grng):
    logits = torch.randn(5, 2, dtype=torch.float64, requires_grad=True)
    means = torch.randn(5, 2, 4, dtype=torch.float64, requires_grad=True)
    log_sig = (0.3 * torch.randn(5, 2, 4, dtype=torch.float64)).requires_grad_()
    target = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    fn = lambda: mdn_nll(MdnParams(logits, means, log_sig), target).sum()  # noqa: E731
    bad, n = fd_check(fn, [logits, means, log_sig, target], grng)
    assert n >= 20 and not bad, bad


def test_masked_cross_entropy_gradient(grng):
    logits = torch.randn(2, 7, 6, dtype=torch.float64, requires_grad=True)
    targets = torch.randint(0, 6, (2, 7))
    mask = torch.tensor([[1] * 7, [1] * 4 + [0] * 3], dtype=torch.bool)
    bad, n = fd_check(lambda: masked_cross_entropy(logits, targets, mask), [logits], grng)
    assert n >= 20 and not bad, bad
    # masked frames receive exactly zero gradient
    g = torch.autograd.grad(masked_cross_entropy(logits, targets, mask), logits)[0]
    assert torch.all(g[1, 4:] == 0)


def test_attention_step_gradient(grng):
    att = LocationAttention(8, 8, 8, 3, 5, prior=4.0).double()
    query = torch.randn(2, 8, dtype=torch.float64, requires_grad=True)
    memory = torch.randn(2, 9, 8, dtype=torch.float64, requires_grad=True)
    w = torch.softmax(torch.randn(2, 9, dtype=torch.float64), -1).requires_grad_()
    cum = (w.detach() + torch.rand(2, 9, dtype=torch.float64)).requires_grad_()
    mask = torch.tensor([[True] * 9, [True] * 6 + [False] * 3])

    def fn():
        ctx, weights = att(query, memory, att.process_memory(memory), w, cum, mask)
        return (ctx * torch.linspace(-1, 1, 8, dtype=torch.float64)).sum() + (weights[:, :4] ** 2).sum()

    bad, n = fd_check(fn, [query, memory, w, cum, *att.parameters()], grng)
    assert n >= 20 and not bad, bad


def test_postnet_gradient(grng):
    net = PostNet(4, 8, 3, 5).double()
    torch.nn.init.normal_(net.convs[-1].weight, std=0.3)  # zero start would hide earlier layers
    x = torch.randn(2, 11, 4, dtype=torch.float64, requires_grad=True)
    mask = torch.tensor([[True] * 11, [True] * 7 + [False] * 4])
    target = torch.randn(2, 11, 4, dtype=torch.float64)
    fn = lambda: ((net(x, mask) - target) ** 2 * mask[..., None]).sum()  # noqa: E731
    bad, n = fd_check(fn, [x, *net.parameters()], grng)
    assert n >= 20 and not bad, bad


def tiny_trainer(multitask=True, augment=False):
    corpus = make_corpus(CorpusConfig(feat_dim=4, bottleneck_dim=3, phonemes=("a", "b", "c", "d", "e"),
                                      phonemes_per_clause=(1, 2), silence_duration_ms=(20.0, 30.0)))
    pairs = generate_pairs(corpus, 4, seed=3)
    cfg = TrainConfig(seed=1, multitask=multitask, augment=augment, model=dict(TINY))
    return Trainer(cfg, pairs, num_phonemes=len(corpus.inventory), num_tones=5)


def test_full_one_step_loss_gradient(grng):
    tr = tiny_trainer()
    tr.model.double()
    tr.classifiers.double()
    torch.nn.init.normal_(tr.model.postnet.convs[-1].weight, std=0.1)
    with torch.no_grad():
        # the stop head reads end-of-input attention mass through a stop-gradient; with those two
        # weights at zero the loss is an ordinary function whose derivative autograd must reproduce
        tr.model.stop.weight[:, -2:] = 0.0
    batch = make_batch([s.whole for s in tr.samplers[:3]], dtype=torch.float64)

    def fn():
        gens = [_step_generator(1, 5, k) for k in range(3)]  # same dropout masks on every call
        parts, _ = tr.batch_losses(batch, gens[0], gens[1:])
        return parts["total"]

    params = [p for p in tr.params if p.requires_grad]
    start = time.perf_counter()
    bad, n = fd_check(fn, params, grng)
    assert n >= 20 and not bad, bad
    assert time.perf_counter() - start < 120


def test_kernels_match_reference_autograd():
    torch.manual_seed(3)
    cfg = ModelConfig(**TINY)
    model = Scent(cfg).double()
    torch.nn.init.normal_(model.postnet.convs[-1].weight, std=0.1)
    x = torch.randn(3, 7, 7, dtype=torch.float64)
    src_len = torch.tensor([7, 5, 3])
    y = torch.randn(3, 6, 4, dtype=torch.float64)
    tgt_len = torch.tensor([6, 4, 2])
    results = []
    for reference in (False, True):
        model.zero_grad()
        out = model.forward_teacher_forced(x, src_len, y, tgt_len, reference=reference)
        from scentvc.model import spectral_losses

        mel, stop = spectral_losses(out, y, tgt_len)
        loss = mel + stop + 0.1 * (out.memory ** 2).sum() + 0.1 * (out.dec_taps ** 2).sum()
        loss.backward()
        results.append((loss.item(), out.attention.detach().clone(),
                        {n: p.grad.clone() for n, p in model.named_parameters() if p.grad is not None}))
    (l0, a0, g0), (l1, a1, g1) = results
    assert l0 == pytest.approx(l1, rel=1e-12)
    torch.testing.assert_close(a0, a1, rtol=1e-10, atol=1e-12)
    assert g0.keys() == g1.keys()
    for name in g1:
        torch.testing.assert_close(g0[name], g1[name], rtol=1e-8, atol=1e-12, msg=name)
