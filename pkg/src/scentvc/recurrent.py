"""Hand-written forward/backward kernels for the recurrent parts of the model.

Per-step autograd bookkeeping dominates the cost of small recurrent nets on
CPU, so the bidirectional encoder GRU and the attention decoder recurrence
are unrolled here in numpy with explicit back-propagation through time.
Weight gradients are accumulated once per sequence from the stored per-step
gate gradients. Both kernels are exposed as ``torch.autograd.Function``
subclasses and work in whatever float dtype they are given.

GRU gates follow the ``torch.nn.GRU`` layout ``(r, z, n)``::

    r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - z) * n + z * h
"""

from __future__ import annotations

import numpy as np
import torch
from scipy.special import expit


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def gru_core(gi: np.ndarray, h: np.ndarray, w_hh: np.ndarray, b_hh: np.ndarray):
    """One GRU update given the input projection ``gi``; returns ``(h_new, cache)``."""
    size = h.shape[1]
    gh = h @ w_hh.T + b_hh
    r = expit(gi[:, :size] + gh[:, :size])
    z = expit(gi[:, size:2 * size] + gh[:, size:2 * size])
    ghn = gh[:, 2 * size:]
    n = np.tanh(gi[:, 2 * size:] + r * ghn)
    h_new = n + z * (h - n)
    return h_new, (h, r, z, n, ghn)


def gru_core_backward(dh_new: np.ndarray, cache, w_hh: np.ndarray):
    """Returns ``(d_gi, d_gh, d_h)`` for one :func:`gru_core` step."""
    h, r, z, n, ghn = cache
    dn_pre = dh_new * (1.0 - z) * (1.0 - n * n)
    dz_pre = dh_new * (h - n) * z * (1.0 - z)
    dr_pre = dn_pre * ghn * r * (1.0 - r)
    dgi = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
    dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
    return dgi, dgh, dh_new * z + dgh @ w_hh


# --------------------------------------------------------------------------
# bidirectional GRU over padded batches
# --------------------------------------------------------------------------


def _reverse_index(lengths: np.ndarray, steps: int) -> np.ndarray:
    """Per-sample time reversal within each length; padding positions stay put."""
    t = np.arange(steps)[None, :]
    lens = lengths[:, None]
    return np.where(t < lens, lens - 1 - t, t)


def _gru_sequence(x, w_ih, w_hh, b_ih, b_hh):
    b, steps, _ = x.shape
    size = w_hh.shape[1]
    gi_all = x @ w_ih.T + b_ih
    h = np.zeros((b, size), dtype=x.dtype)
    out = np.empty((b, steps, size), dtype=x.dtype)
    caches = []
    for t in range(steps):
        h, cache = gru_core(gi_all[:, t], h, w_hh, b_hh)
        out[:, t] = h
        caches.append(cache)
    return out, caches


def _gru_sequence_backward(dout, x, caches, w_ih, w_hh):
    b, steps, _ = dout.shape
    size = w_hh.shape[1]
    dgi_all = np.empty((b, steps, 3 * size), dtype=dout.dtype)
    dgh_all = np.empty_like(dgi_all)
    h_prev = np.empty((b, steps, size), dtype=dout.dtype)
    dh = np.zeros((b, size), dtype=dout.dtype)
    for t in range(steps - 1, -1, -1):
        dgi, dgh, dh = gru_core_backward(dout[:, t] + dh, caches[t], w_hh)
        dgi_all[:, t] = dgi
        dgh_all[:, t] = dgh
        h_prev[:, t] = caches[t][0]
    flat_gi = dgi_all.reshape(-1, 3 * size)
    flat_gh = dgh_all.reshape(-1, 3 * size)
    dx = dgi_all @ w_ih
    return (dx, flat_gi.T @ x.reshape(-1, x.shape[2]), flat_gh.T @ h_prev.reshape(-1, size),
            flat_gi.sum(0), flat_gh.sum(0))


class BiGruFunction(torch.autograd.Function):
    """Bidirectional single-layer GRU; outputs at padded positions are zero."""

    @staticmethod
    def forward(ctx, x, lengths, *weights):
        xs = _np(x)
        lens = lengths.cpu().numpy().astype(np.int64)
        b, steps, _ = xs.shape
        w = [_np(p) for p in weights]
        mask = (np.arange(steps)[None, :] < lens[:, None]).astype(xs.dtype)[..., None]
        rev = _reverse_index(lens, steps)
        rows = np.arange(b)[:, None]
        x_rev = xs[rows, rev]
        out_f, cache_f = _gru_sequence(xs, *w[:4])
        out_b, cache_b = _gru_sequence(x_rev, *w[4:])
        out = np.concatenate([out_f, out_b[rows, rev]], axis=2) * mask
        ctx.saved = (xs, x_rev, rev, mask, w, cache_f, cache_b)
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        xs, x_rev, rev, mask, w, cache_f, cache_b = ctx.saved
        g = _np(grad_out) * mask
        size = w[1].shape[1]
        rows = np.arange(g.shape[0])[:, None]
        dx_f, *gw_f = _gru_sequence_backward(np.ascontiguousarray(g[..., :size]), xs, cache_f, w[0], w[1])
        g_b = g[..., size:][rows, rev]
        dx_b, *gw_b = _gru_sequence_backward(np.ascontiguousarray(g_b), x_rev, cache_b, w[4], w[5])
        dx = dx_f + dx_b[rows, rev]
        grads = [torch.from_numpy(np.ascontiguousarray(a)) for a in (*gw_f, *gw_b)]
        return (torch.from_numpy(dx), None, *grads)


# --------------------------------------------------------------------------
# attention decoder recurrence
# --------------------------------------------------------------------------


class AttentionDecoderFunction(torch.autograd.Function):
    """Teacher-forced decoder recurrence (attention GRU -> location attention -> decoder GRU).

    Inputs: PreNet outputs ``[B, T', P]``, encoder memory ``[B, T, H]``,
    projected memory ``[B, T, A]``, boolean memory mask ``[B, T]`` and the
    weights (attention GRU w_ih, w_hh, b_ih, b_hh; query W; location conv W
    ``[F, 2, K]``; location dense W; energy vector v; decoder GRU w_ih, w_hh,
    b_ih, b_hh).

    Outputs: decoder-RNN inputs ``[B, T', H + H_att]`` (context then
    attention-RNN state), decoder-RNN states ``[B, T', H_dec]`` and attention
    weights ``[B, T', T]``.
    """

    @staticmethod
    def forward(ctx, pre, memory, pmem, mask, *weights):
        pre_n, mem, pm = _np(pre), _np(memory), _np(pmem)
        valid = mask.cpu().numpy().astype(bool)
        (a_wih, a_whh, a_bih, a_bhh, w_q, conv_w, w_loc, v, d_wih, d_whh, d_bih, d_bhh) = [_np(p) for p in weights]
        dtype = mem.dtype
        b, t_out, p_dim = pre_n.shape
        t_in, h_dim = mem.shape[1], mem.shape[2]
        h_att, h_dec = a_whh.shape[1], d_whh.shape[1]
        n_filters, _, kernel = conv_w.shape
        conv_flat = conv_w.reshape(n_filters, -1)
        loc_map = conv_flat.T @ w_loc.T  # location conv and projection folded: [2 * kernel, A]
        v_vec = v.reshape(-1)
        half = kernel // 2
        padded = np.zeros((b, 2, t_in + kernel - 1), dtype=dtype)
        a_w_pre, a_w_ctx = a_wih[:, :p_dim], a_wih[:, p_dim:]
        neg = np.where(valid, 0.0, -np.inf).astype(dtype)

        gi_pre = pre_n @ a_w_pre.T + a_bih
        ctx_v = np.zeros((b, h_dim), dtype=dtype)
        ah = np.zeros((b, h_att), dtype=dtype)
        dh = np.zeros((b, h_dec), dtype=dtype)
        w = np.zeros((b, t_in), dtype=dtype)
        w[:, 0] = 1.0
        cw = w.copy()

        taps = np.empty((b, t_out, h_dim + h_att), dtype=dtype)
        dec = np.empty((b, t_out, h_dec), dtype=dtype)
        att = np.empty((b, t_out, t_in), dtype=dtype)
        ctx_prev = np.empty((b, t_out, h_dim), dtype=dtype)
        steps = []
        for t in range(t_out):
            ctx_prev[:, t] = ctx_v
            ah, cache_a = gru_core(gi_pre[:, t] + ctx_v @ a_w_ctx.T, ah, a_whh, a_bhh)
            padded[:, 0, half:half + t_in] = w
            padded[:, 1, half:half + t_in] = cw
            win = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=2)
            win = win.transpose(0, 2, 1, 3).reshape(b, t_in, 2 * kernel)
            s = np.tanh((ah @ w_q.T)[:, None, :] + win @ loc_map + pm)
            e = s @ v_vec + neg
            e = np.exp(e - e.max(axis=1, keepdims=True))
            w = e / e.sum(axis=1, keepdims=True)
            ctx_v = np.matmul(w[:, None, :], mem)[:, 0]
            cw = cw + w
            tap = np.concatenate([ctx_v, ah], axis=1)
            dh, cache_d = gru_core(tap @ d_wih.T + d_bih, dh, d_whh, d_bhh)
            taps[:, t] = tap
            dec[:, t] = dh
            att[:, t] = w
            steps.append((cache_a, win, s, w, cache_d))

        ctx.saved = (pre_n, mem, p_dim, kernel, steps, taps, ctx_prev,
                     (a_wih, a_whh, w_q, conv_flat, w_loc, loc_map, v_vec, d_wih, d_whh))
        return torch.from_numpy(taps), torch.from_numpy(dec), torch.from_numpy(att)

    @staticmethod
    def backward(ctx, g_taps, g_dec, g_att):
        pre_n, mem, p_dim, kernel, steps, taps, ctx_prev, ws = ctx.saved
        a_wih, a_whh, w_q, conv_flat, w_loc, loc_map, v_vec, d_wih, d_whh = ws
        dtype = mem.dtype
        b, t_out, _ = taps.shape
        t_in, h_dim = mem.shape[1], mem.shape[2]
        h_att, h_dec = a_whh.shape[1], d_whh.shape[1]
        half = kernel // 2
        a_w_ctx = a_wih[:, p_dim:]

        def arr(g, shape):
            return np.zeros(shape, dtype=dtype) if g is None else _np(g).astype(dtype, copy=False)

        g_taps = arr(g_taps, taps.shape)
        g_dec = arr(g_dec, (b, t_out, h_dec))
        g_att = arr(g_att, (b, t_out, t_in))

        d_mem = np.zeros_like(mem)
        d_pm = np.zeros((b, t_in, w_loc.shape[0]), dtype=dtype)
        d_loc_map = np.zeros((w_loc.shape[0], loc_map.shape[0]), dtype=dtype)  # transposed
        d_v = np.zeros_like(v_vec)
        dgi_a = np.empty((b, t_out, 3 * h_att), dtype=dtype)
        dgh_a = np.empty_like(dgi_a)
        dgi_d = np.empty((b, t_out, 3 * h_dec), dtype=dtype)
        dgh_d = np.empty_like(dgi_d)
        dq_all = np.empty((b, t_out, w_q.shape[0]), dtype=dtype)
        ah_prev = np.empty((b, t_out, h_att), dtype=dtype)
        dh_prev = np.empty((b, t_out, h_dec), dtype=dtype)

        carry_dh = np.zeros((b, h_dec), dtype=dtype)
        carry_ah = np.zeros((b, h_att), dtype=dtype)
        carry_ctx = np.zeros((b, h_dim), dtype=dtype)
        carry_w = np.zeros((b, t_in), dtype=dtype)
        carry_cw = np.zeros((b, t_in), dtype=dtype)
        # d_win rows sit at offset kernel - 1 inside zero margins so the fold below stays in bounds
        spread = np.zeros((b, t_in + 2 * (kernel - 1), 2, kernel), dtype=dtype)
        base = spread[:, half:, :, kernel - 1:]
        sb, si, sc, sk = spread.strides
        # fold[b, j, c, m] = spread[b, half + j + m, c, kernel - 1 - m]: every window entry that read input j
        fold = np.lib.stride_tricks.as_strided(base, shape=(b, t_in, 2, kernel), strides=(sb, si, sc, si - sk),
                                               writeable=False)

        for t in range(t_out - 1, -1, -1):
            cache_a, win, s, w, cache_d = steps[t]
            dgi, dgh, carry_dh = gru_core_backward(g_dec[:, t] + carry_dh, cache_d, d_whh)
            dgi_d[:, t], dgh_d[:, t] = dgi, dgh
            dh_prev[:, t] = cache_d[0]
            dtap = g_taps[:, t] + dgi @ d_wih
            d_ctx = dtap[:, :h_dim] + carry_ctx
            d_ah = dtap[:, h_dim:] + carry_ah

            dw = g_att[:, t] + carry_w + carry_cw + np.matmul(mem, d_ctx[:, :, None])[..., 0]
            d_mem += w[:, :, None] * d_ctx[:, None, :]
            de = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
            d_v += np.einsum("bt,bta->a", de, s)
            d_pre = de[:, :, None] * v_vec * (1.0 - s * s)
            d_pm += d_pre
            dq = d_pre.sum(axis=1)
            dq_all[:, t] = dq
            d_loc_map += d_pre.reshape(-1, d_pre.shape[2]).T @ win.reshape(-1, win.shape[2])
            spread[:, kernel - 1:kernel - 1 + t_in] = (d_pre @ loc_map.T).reshape(b, t_in, 2, kernel)
            d_in = fold.sum(axis=3)
            carry_w = d_in[:, :, 0]
            carry_cw = carry_cw + d_in[:, :, 1]

            d_ah = d_ah + dq @ w_q
            dgi, dgh, carry_ah = gru_core_backward(d_ah, cache_a, a_whh)
            dgi_a[:, t], dgh_a[:, t] = dgi, dgh
            ah_prev[:, t] = cache_a[0]
            carry_ctx = dgi @ a_w_ctx

        def outer(d, x):
            return d.reshape(-1, d.shape[-1]).T @ x.reshape(-1, x.shape[-1])

        ah_all = taps[:, :, h_dim:]
        att_in = np.concatenate([pre_n, ctx_prev], axis=2)
        d_pre_in = dgi_a @ a_wih[:, :p_dim]
        grads = [
            outer(dgi_a, att_in), outer(dgh_a, ah_prev), dgi_a.sum((0, 1)), dgh_a.sum((0, 1)),
            outer(dq_all, ah_all), (w_loc.T @ d_loc_map).reshape(conv_flat.shape[0], 2, kernel), d_loc_map @ conv_flat.T, d_v[None, :],
            outer(dgi_d, taps), outer(dgh_d, dh_prev), dgi_d.sum((0, 1)), dgh_d.sum((0, 1)),
        ]
        out = [torch.from_numpy(np.ascontiguousarray(a)) for a in (d_pre_in, d_mem, d_pm)]
        return (*out, None, *[torch.from_numpy(np.ascontiguousarray(g)) for g in grads])
