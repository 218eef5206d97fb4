"""Pair discriminator, speaker-id head and the training objectives.

Every objective is written for maximisation.  Discriminator scores for the
BCE objective are handled as logits so the sigmoid is never materialised
before taking logs.
"""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .errors import DegenerateError, DimensionError, EmptyBatchError, InsufficientDataError

LOSSES = ("bce", "mine", "nce", "triplet")


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(value, name):
    return nc.Tensor(value, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Discriminator g: R^{2M} -> R
# ---------------------------------------------------------------------------
def init_discriminator(embedding_dim, hidden=256, seed=0):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    width = 2 * embedding_dim
    return {
        "disc.fc0.weight": _param(_uniform(rng, (hidden, width), width), "disc.fc0.weight"),
        "disc.fc0.bias": _param(np.zeros(hidden), "disc.fc0.bias"),
        "disc.out.weight": _param(_uniform(rng, (1, hidden), hidden), "disc.out.weight"),
        "disc.out.bias": _param(np.zeros(1), "disc.out.bias"),
    }


def _check_pair(z_a, z_b, params):
    width = params["disc.fc0.weight"].shape[1]
    if z_a.ndim != 2 or z_b.ndim != 2 or z_a.shape[1] + z_b.shape[1] != width or z_a.shape[1] != z_b.shape[1]:
        raise DimensionError(f"discriminator expects two [n, {width // 2}] inputs, got {z_a.shape} and {z_b.shape}")


def discriminate(z_a, z_b, params, head="raw"):
    """Score each row pair ``(z_a[i], z_b[i])``; returns shape [n].

    ``head='sigmoid'`` maps scores into (0, 1); ``'raw'`` leaves them unbounded.
    """
    z_a, z_b = nc.as_tensor(z_a), nc.as_tensor(z_b)
    _check_pair(z_a, z_b, params)
    h = nc.relu(nc.linear(nc.concat([z_a, z_b], axis=1), params["disc.fc0.weight"], params["disc.fc0.bias"]))
    score = nc.reshape(nc.linear(h, params["disc.out.weight"], params["disc.out.bias"]), (z_a.shape[0],))
    if head == "sigmoid":
        return nc.sigmoid(score)
    if head != "raw":
        raise ValueError(f"head must be 'raw' or 'sigmoid', got {head!r}")
    return score


def pairwise_scores(z_a, z_b, params):
    """Raw scores for every pair ``(z_a[i], z_b[j])``; returns [n_a, n_b].

    The first layer acts separately on the two halves of the concatenated
    input, so all pairs cost one hidden-layer evaluation per row.
    """
    z_a, z_b = nc.as_tensor(z_a), nc.as_tensor(z_b)
    _check_pair(z_a, z_b, params)
    m = z_a.shape[1]
    w = params["disc.fc0.weight"]
    left = nc.linear(z_a, w[:, :m], params["disc.fc0.bias"])
    right = nc.linear(z_b, w[:, m:])
    hidden = w.shape[0]
    h = nc.relu(nc.reshape(left, (z_a.shape[0], 1, hidden)) + nc.reshape(right, (1, z_b.shape[0], hidden)))
    out = nc.reshape(h, (z_a.shape[0] * z_b.shape[0], hidden))
    score = nc.linear(out, params["disc.out.weight"], params["disc.out.bias"])
    return nc.reshape(score, (z_a.shape[0], z_b.shape[0]))


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------
def _nonempty(*xs):
    for x in xs:
        if nc.as_tensor(x).size == 0:
            raise EmptyBatchError("objective needs non-empty score lists")


def bce_loss(pos, neg, logits=True):
    """mean(log g(pos)) + mean(log(1 - g(neg))); at most 0.

    With ``logits=True`` the inputs are pre-sigmoid scores and the logs are
    evaluated as ``-softplus(-x)`` and ``-softplus(x)``.
    """
    _nonempty(pos, neg)
    pos, neg = nc.as_tensor(pos), nc.as_tensor(neg)
    if logits:
        return -(nc.softplus(-pos).mean() + nc.softplus(neg).mean())
    return nc.log(pos).mean() + nc.log(1.0 - neg).mean()


def mine_loss(pos, neg):
    """Donsker-Varadhan bound: mean(pos) - log(mean(exp(neg))), in nats."""
    _nonempty(pos, neg)
    pos, neg = nc.as_tensor(pos), nc.as_tensor(neg)
    flat = nc.reshape(neg, (neg.size,))
    return pos.mean() - (nc.logsumexp(flat) - float(np.log(neg.size)))


def nce_loss(pos, neg, literal=False):
    """Log-softmax of each positive among its K candidates, batch-averaged.

    ``pos`` has shape [n] and ``neg`` [n, K-1].  The result never exceeds 0,
    so adding log K gives an estimate capped at log K.  It only stays above
    -log K when each positive beats its own candidates.
    ``literal=True`` evaluates ``pos - log(pos + sum(exp(neg)))`` instead,
    which needs ``pos + sum(exp(neg)) > 0``.
    """
    pos, neg = nc.as_tensor(pos), nc.as_tensor(neg)
    if neg.ndim == 2 and neg.shape[1] < 1:
        raise InsufficientDataError("nce_loss needs K >= 2 candidates")
    _nonempty(pos, neg)
    if neg.ndim == 1:
        neg = nc.reshape(neg, (1, neg.shape[0]))
    if pos.ndim == 0:
        pos = nc.reshape(pos, (1,))
    if neg.shape[0] != pos.shape[0]:
        raise DimensionError(f"nce_loss: {pos.shape[0]} positives but {neg.shape[0]} negative rows")
    if neg.shape[1] < 1:
        raise InsufficientDataError("nce_loss needs K >= 2 candidates")
    n = pos.shape[0]
    col = nc.reshape(pos, (n, 1))
    if literal:
        denom = pos + nc.exp(neg).sum(axis=1)
        return (pos - nc.log(denom)).mean()
    cands = nc.concat([col, neg], axis=1)
    return (pos - nc.logsumexp(cands, axis=1)).mean()


def cosine_similarity(a, b, eps=0.0):
    a, b = nc.as_tensor(a), nc.as_tensor(b)
    na = nc.sqrt((a * a).sum(axis=-1))
    nb = nc.sqrt((b * b).sum(axis=-1))
    if np.any(na.data <= eps) or np.any(nb.data <= eps):
        raise DegenerateError("cosine similarity of a zero-norm embedding")
    return (a * b).sum(axis=-1) / (na * nb)


def triplet_loss(anchor, positive, negative, margin=0.5):
    """-mean(max(0, margin - cos(a, p) + cos(a, n)))."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    anchor, positive, negative = (nc.as_tensor(t) for t in (anchor, positive, negative))
    if anchor.ndim == 1:
        anchor, positive, negative = (nc.reshape(t, (1, t.shape[0])) for t in (anchor, positive, negative))
    hinge = nc.relu(margin - cosine_similarity(anchor, positive) + cosine_similarity(anchor, negative))
    return -hinge.mean()


def lim_objective(loss, z1, z2, z_rnd, disc=None, margin=0.5):
    """Objective for one pair batch plus monitoring statistics.

    Returns ``(objective, stats)`` where ``stats['accuracy']`` is the
    fraction of positives scored above and negatives below the decision
    boundary.
    """
    if loss == "triplet":
        obj = triplet_loss(z1, z2, z_rnd, margin)
        with nc.no_grad():
            sp = cosine_similarity(z1, z2).data
            sn = cosine_similarity(z1, z_rnd).data
        return obj, {"accuracy": float(np.mean(sp > sn))}
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    n = z1.shape[0]
    if loss == "nce":
        # row i: z1[i] against z2[i] and the n - 1 other rows of z_rnd, so K = n
        scores = pairwise_scores(z1, z_rnd, disc)
        off = ~np.eye(n, dtype=bool)
        pos = discriminate(z1, z2, disc)
        obj = nce_loss(pos, nc.reshape(nc.take(scores, off), (n, n - 1)))
        neg_diag = np.diagonal(scores.data)
    else:
        both = discriminate(nc.concat([z1, z1], axis=0), nc.concat([z2, z_rnd], axis=0), disc)
        pos, neg = both[:n], both[n:]
        obj = bce_loss(pos, neg) if loss == "bce" else mine_loss(pos, neg)
        neg_diag = neg.data
    # MINE/NCE scores have no fixed threshold; compare against the batch's mean score
    cut = 0.0 if loss == "bce" else float(np.mean(np.concatenate([pos.data, neg_diag])))
    acc = float(np.mean(np.concatenate([pos.data > cut, neg_diag <= cut])))
    return obj, {"accuracy": acc}


# ---------------------------------------------------------------------------
# Speaker-id head
# ---------------------------------------------------------------------------
def init_speaker_head(embedding_dim, n_classes, hidden=256, seed=0):
    """MLP with one ReLU layer (``hidden > 0``) or a linear classifier."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = {}
    width = embedding_dim
    if hidden:
        p["head.fc0.weight"] = _param(_uniform(rng, (hidden, width), width), "head.fc0.weight")
        p["head.fc0.bias"] = _param(np.zeros(hidden), "head.fc0.bias")
        width = hidden
    p["head.out.weight"] = _param(_uniform(rng, (n_classes, width), width), "head.out.weight")
    p["head.out.bias"] = _param(np.zeros(n_classes), "head.out.bias")
    return p


def head_hidden(z, head):
    """Hidden ReLU activations of the head (the input itself for a linear head)."""
    z = nc.as_tensor(z)
    if "head.fc0.weight" not in head:
        return z
    return nc.relu(nc.linear(z, head["head.fc0.weight"], head["head.fc0.bias"]))


def speaker_logits(z, head):
    return nc.linear(head_hidden(z, head), head["head.out.weight"], head["head.out.bias"])


def speaker_objective(logits, labels):
    """Mean log-probability of the true class (negative cross-entropy)."""
    logits = nc.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.shape[0] == 0:
        raise EmptyBatchError("empty supervised batch")
    logp = nc.log_softmax(logits, axis=1)
    return logp[np.arange(len(labels)), labels].mean()
