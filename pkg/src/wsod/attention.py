"""Spatial attention: a learned 1x1 projection of depth to a scalar per cell,
normalized by a softmax over all cells, then used to re-weight the map."""
import numpy as np


def compute_attention(fmap, weight, bias=0.0):
    """Attention weights summing to one over the spatial grid.

    ``fmap`` is (H, W, D) or (B, H, W, D); ``weight`` has length D.
    """
    scores = fmap @ weight + bias
    lead = scores.shape[:-2]
    flat = scores.reshape(*lead, -1)
    flat = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(flat)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(scores.shape)


def enhance(fmap, att):
    """X' = X + X * A, broadcasting A over the depth axis."""
    if att.shape != fmap.shape[:-1]:
        raise ValueError(f"attention {att.shape} does not match feature map grid {fmap.shape[:-1]}")
    return fmap * (1.0 + att[..., None])


def attention_backward(d_enhanced, fmap, att, weight, d_att_extra=None):
    """Backpropagate through ``enhance(fmap, compute_attention(fmap, weight, b))``.

    Returns (d_fmap, d_weight, d_bias). ``d_att_extra`` is an optional
    gradient arriving directly on the attention map from another consumer.
    """
    d_fmap = d_enhanced * (1.0 + att[..., None])
    d_att = np.sum(d_enhanced * fmap, axis=-1)
    if d_att_extra is not None:
        d_att = d_att + d_att_extra
    lead = att.shape[:-2]
    a = att.reshape(*lead, -1)
    g = d_att.reshape(*lead, -1)
    d_scores = (a * (g - np.sum(g * a, axis=-1, keepdims=True))).reshape(att.shape)
    d_fmap = d_fmap + d_scores[..., None] * weight
    d_weight = np.tensordot(d_scores, fmap, axes=(tuple(range(d_scores.ndim)), tuple(range(d_scores.ndim))))
    return d_fmap, d_weight, float(d_scores.sum())


def segmentation_mask(att):
    """Cells whose attention is at least the map mean."""
    return att >= att.mean(axis=(-2, -1), keepdims=True)
