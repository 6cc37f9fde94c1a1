"""Shared test factories and independent numpy oracles.

The oracles here deliberately re-derive results from definitions (dense
attention with a true -inf mask, plain loops, etc.) instead of calling
back into the library's computation paths.
"""

import numpy as np

from chunkctr.autodiff import Tensor
from chunkctr.attention import BlockParams
from chunkctr.interest import TargetAttentionParams


def rand_tensor(rng, rows, cols, scale=0.5):
    return Tensor(scale * rng.standard_normal((rows, cols)))


def make_block_params(rng, d, scale=0.4, zero_residual=False):
    def t(r, c):
        return Tensor(scale * rng.standard_normal((r, c)))

    def z(r, c):
        return Tensor(np.zeros((r, c)))

    def o(r, c):
        return Tensor(np.ones((r, c)))

    return BlockParams(
        w_q=t(d, d),
        w_k=t(d, d),
        w_v=t(d, d),
        w_o=z(d, d) if zero_residual else t(d, d),
        ln1_gain=o(1, d),
        ln1_bias=z(1, d),
        ln2_gain=o(1, d),
        ln2_bias=z(1, d),
        mlp_w1=t(d, 4 * d),
        mlp_b1=z(1, 4 * d),
        mlp_w2=z(4 * d, d) if zero_residual else t(4 * d, d),
        mlp_b2=z(1, d),
    )


def make_target_params(rng, target_dim, d, hidden, scale=0.4):
    def t(r, c):
        return Tensor(scale * rng.standard_normal((r, c)))

    def z(r, c):
        return Tensor(np.zeros((r, c)))

    return TargetAttentionParams(
        target_w=t(target_dim, d),
        target_b=z(1, d),
        score_w1=t(2 * d, hidden),
        score_b1=z(1, hidden),
        score_w2=t(hidden, 1),
        score_b2=z(1, 1),
    )


def block_values(params: BlockParams) -> dict:
    return {name: tensor.value.copy() for name, tensor in params.tensors()}


# ---------------------------------------------------------------- oracles


def masked_softmax_np(scores, visible):
    """Reference row softmax restricted to `visible` entries (true -inf)."""
    s = np.where(visible, scores, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def dense_masked_attention_np(x, w_q, w_k, w_v, w_o, visible, n_heads=1):
    """Reference masked attention over the full sequence at once."""
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    d = x.shape[1]
    head_dim = d // n_heads
    outs = []
    for h in range(n_heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(head_dim)
        probs = masked_softmax_np(scores, visible)
        outs.append(probs @ v[:, sl])
    return np.concatenate(outs, axis=1) @ w_o


def layer_norm_np(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def dense_block_np(x, bp, visible, n_heads=1, eps=1e-5):
    """Reference pre-norm transformer block with full-sequence attention."""
    h = layer_norm_np(x, bp["ln1_gain"], bp["ln1_bias"], eps)
    x = x + dense_masked_attention_np(h, bp["w_q"], bp["w_k"], bp["w_v"], bp["w_o"], visible, n_heads)
    h2 = layer_norm_np(x, bp["ln2_gain"], bp["ln2_bias"], eps)
    return x + np.maximum(h2 @ bp["mlp_w1"] + bp["mlp_b1"], 0.0) @ bp["mlp_w2"] + bp["mlp_b2"]


def visible_same_bucket(ids):
    """Reference bucket visibility: same real bucket, or the diagonal."""
    ids = np.asarray(ids)
    same = ids[:, None] == ids[None, :]
    real = ids >= 0
    vis = same & real[:, None] & real[None, :]
    np.fill_diagonal(vis, True)
    return vis


def pairwise_auc_np(preds, labels):
    """O(n^2) pairwise AUC with ties counted 0.5."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    pos = preds[labels == 1][:, None]
    neg = preds[labels == 0][None, :]
    wins = (pos > neg).sum()
    ties = (pos == neg).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)
