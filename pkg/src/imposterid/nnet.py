"""Dense networks written directly in numpy: forward, backward and Adam.

Hosts the three learnable pieces of the imposter framework:

* an adapter that stands in for the speaker encoder (residual MLP on stored embeddings),
* the relation network scoring ``[query, centroid, query * centroid]``,
* the imposter detection network (IDN) scoring cyclic centroid products plus
  query-centroid products.

Everything is float64. ``rng=None`` means evaluation mode (no dropout); passing a
``numpy.random.Generator`` selects training mode with inverted dropout.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatchError, ShapeMismatchError, StaleTapeError, ZeroVectorError

ACTIVATIONS = ("relu", "identity", "sigmoid")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatchError(f"weight {self.weight.shape} / bias {self.bias.shape}")


@dataclass
class MlpModel:
    """Stack of dense layers. Dropout follows every hidden activation (training only).

    With ``residual=True`` the network computes ``x + f(x)`` and needs in == out;
    ``normalize_output=True`` rescales each output row to unit L2 norm.
    """

    layers: list
    dropout: float = 0.0
    residual: bool = False
    normalize_output: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ShapeMismatchError("model needs at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ShapeMismatchError(f"layer sizes do not chain: {a.weight.shape} -> {b.weight.shape}")
        if self.residual and self.in_dim != self.out_dim:
            raise ShapeMismatchError("residual model must map D -> D")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> list:
        """Parameter arrays in declared order: W0, b0, W1, b1, ..."""
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def architecture(self) -> dict:
        return {
            "sizes": [self.in_dim] + [layer.weight.shape[0] for layer in self.layers],
            "activations": [layer.activation for layer in self.layers],
            "dropout": self.dropout,
            "residual": self.residual,
            "normalize_output": self.normalize_output,
        }

    @classmethod
    def from_architecture(cls, arch: dict) -> "MlpModel":
        sizes = arch["sizes"]
        layers = [
            Layer(np.zeros((o, i)), np.zeros(o), act)
            for i, o, act in zip(sizes[:-1], sizes[1:], arch["activations"])
        ]
        return cls(layers, float(arch.get("dropout", 0.0)), bool(arch.get("residual", False)),
                   bool(arch.get("normalize_output", False)))

    @classmethod
    def init(cls, sizes: Sequence[int], activations: Sequence[str], rng, dropout=0.0,
             residual=False, zero_last=False, normalize_output=False) -> "MlpModel":
        """He-uniform weights (limit sqrt(6 / fan_in)), zero biases."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for k, (i, o, act) in enumerate(zip(sizes[:-1], sizes[1:], activations)):
            if zero_last and k == len(sizes) - 2:
                w = np.zeros((o, i))
            else:
                limit = np.sqrt(6.0 / i)
                w = rng.uniform(-limit, limit, size=(o, i))
            layers.append(Layer(w, np.zeros(o), act))
        return cls(layers, dropout, residual, normalize_output)


@dataclass
class Tape:
    """Activation cache from one forward pass, consumed by :func:`mlp_backward`."""

    squeeze: bool
    inputs: list = field(default_factory=list)  # what each layer saw (post-dropout)
    outputs: list = field(default_factory=list)  # post-activation, pre-dropout
    preacts: list = field(default_factory=list)
    masks: list = field(default_factory=list)  # per hidden layer, None when no dropout
    out_norm: Optional[np.ndarray] = None
    normalized: Optional[np.ndarray] = None


def mlp_forward(model: MlpModel, x, rng: Optional[np.random.Generator] = None):
    """Run the network on a vector (in,) or a batch (B, in).

    Returns ``(output, tape)``. Inverted dropout (scale 1/(1-p) at train time) keeps
    the expected activation equal to evaluation mode, which applies no scaling.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != model.in_dim:
        raise DimensionMismatchError(f"input shape {x.shape} does not match in_dim {model.in_dim}")
    tape = Tape(squeeze)
    train = rng is not None and model.dropout > 0.0
    last = len(model.layers) - 1
    for k, layer in enumerate(model.layers):
        tape.inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        if layer.activation == "relu":
            a = np.maximum(z, 0.0)
        elif layer.activation == "sigmoid":
            a = _sigmoid(z)
        else:
            a = z
        tape.preacts.append(z)
        tape.outputs.append(a)
        if k < last:
            if train:
                keep = 1.0 - model.dropout
                mask = (rng.random(a.shape) < keep) / keep
                a = a * mask
                tape.masks.append(mask)
            else:
                tape.masks.append(None)
        h = a
    if model.residual:
        h = h + tape.inputs[0]
    if model.normalize_output:
        norm = np.sqrt(np.sum(h * h, axis=1, keepdims=True))
        if np.any(norm < 1e-12):
            raise ZeroVectorError("network output has zero norm")
        h = h / norm
        tape.out_norm, tape.normalized = norm, h
    return (h[0] if squeeze else h), tape


def mlp_backward(model: MlpModel, tape: Tape, grad_output):
    """Reverse pass for ``sum(output * grad_output)``.

    Returns ``(param_grads, grad_input)`` where ``param_grads`` is a list of
    ``(dW, db)`` per layer.
    """
    g = np.asarray(grad_output, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    if len(tape.inputs) != len(model.layers) or g.shape != tape.outputs[-1].shape:
        raise StaleTapeError("tape does not match this model / gradient shape")
    for layer, inp in zip(model.layers, tape.inputs):
        if inp.shape[1] != layer.weight.shape[1]:
            raise StaleTapeError("tape was recorded with a different architecture")
    if model.normalize_output:
        if tape.normalized is None:
            raise StaleTapeError("tape was recorded without output normalization")
        y = tape.normalized
        g = (g - y * np.sum(y * g, axis=1, keepdims=True)) / tape.out_norm
    g_residual = g if model.residual else None
    grads = [None] * len(model.layers)
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if k < len(model.layers) - 1 and tape.masks[k] is not None:
            g = g * tape.masks[k]
        if layer.activation == "relu":
            g = g * (tape.preacts[k] > 0.0)
        elif layer.activation == "sigmoid":
            y = tape.outputs[k]
            g = g * y * (1.0 - y)
        grads[k] = (g.T @ tape.inputs[k], g.sum(axis=0))
        g = g @ layer.weight
    if g_residual is not None:
        g = g + g_residual
    return grads, (g[0] if tape.squeeze else g)


def zero_grads(model: MlpModel) -> list:
    return [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in model.layers]


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-5

    @classmethod
    def for_model(cls, model: MlpModel, lr=1e-3, **kwargs) -> "AdamState":
        zeros = [np.zeros_like(p) for p in model.params()]
        return cls([z.copy() for z in zeros], [z.copy() for z in zeros], lr=lr, **kwargs)


def adam_step(model: MlpModel, grads, state: AdamState):
    """One Adam update with bias correction and decoupled weight decay.

    Returns ``(new_model, new_state)``; the inputs are left untouched.
    """
    flat = [g for pair in grads for g in pair]
    params = model.params()
    if len(flat) != len(params) or len(state.m) != len(params):
        raise ShapeMismatchError("gradient / state structure does not match the model")
    for p, g, m in zip(params, flat, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatchError(f"shape {g.shape} does not match parameter {p.shape}")
    t = state.step + 1
    b1, b2, lr = state.beta1, state.beta2, state.lr
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, flat, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        p = p - lr * state.weight_decay * p
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params.append(p)
        new_m.append(m)
        new_v.append(v)
    layers = [
        Layer(new_params[2 * k], new_params[2 * k + 1], layer.activation)
        for k, layer in enumerate(model.layers)
    ]
    new_model = MlpModel(layers, model.dropout, model.residual, model.normalize_output)
    new_state = AdamState(new_m, new_v, t, lr, b1, b2, state.eps, state.weight_decay)
    return new_model, new_state


# --- architectures -----------------------------------------------------------

def make_adapter(dim: int, rng, hidden_mult: int = 2) -> MlpModel:
    """Residual D -> hidden_mult*D -> D adapter with unit-norm output. The output
    layer starts at zero so the untrained adapter only normalizes its input."""
    return MlpModel.init([dim, hidden_mult * dim, dim], ["relu", "identity"], rng,
                         residual=True, zero_last=True, normalize_output=True)


def make_relnet(dim: int, rng, hidden=(256, 64), dropout=0.1) -> MlpModel:
    sizes = [3 * dim, *hidden, 1]
    acts = ["relu"] * len(hidden) + ["sigmoid"]
    return MlpModel.init(sizes, acts, rng, dropout=dropout)


def make_idn(dim: int, m_train: int, rng, hidden=(256, 64), dropout=0.1) -> MlpModel:
    sizes = [2 * m_train * dim, *hidden, 1]
    acts = ["relu"] * len(hidden) + ["sigmoid"]
    return MlpModel.init(sizes, acts, rng, dropout=dropout)


# --- relation network ----------------------------------------------------------

def relation_input(query, centroid) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    c = np.asarray(centroid, dtype=np.float64)
    if q.shape != c.shape:
        raise DimensionMismatchError(f"query {q.shape} vs centroid {c.shape}")
    return np.concatenate([q, c, q * c], axis=-1)


def relation_forward(relnet: MlpModel, query_emb, centroid) -> float:
    x = relation_input(query_emb, centroid)
    if x.shape[-1] != relnet.in_dim:
        raise DimensionMismatchError(f"relation net expects {relnet.in_dim // 3}-dim embeddings")
    out, _ = mlp_forward(relnet, x)
    return float(out[0])


def relation_matrix(relnet: MlpModel, queries, centroids, rng=None):
    """Relation scores for all (query, centroid) pairs: ``(scores (Q, M), tape)``."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    c = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    if q.shape[1] != c.shape[1] or 3 * q.shape[1] != relnet.in_dim:
        raise DimensionMismatchError("embedding dimension does not match the relation net")
    nq, nc, d = q.shape[0], c.shape[0], q.shape[1]
    qq = np.broadcast_to(q[:, None, :], (nq, nc, d))
    cc = np.broadcast_to(c[None, :, :], (nq, nc, d))
    x = np.concatenate([qq, cc, qq * cc], axis=-1).reshape(nq * nc, 3 * d)
    out, tape = mlp_forward(relnet, x, rng)
    return out.reshape(nq, nc), tape


class RelationScorer:
    """Scorer backed by a trained relation network (inputs already adapted)."""

    name = "relnet"

    def __init__(self, relnet: MlpModel):
        self.relnet = relnet

    def __call__(self, a, b) -> float:
        return relation_forward(self.relnet, a, b)

    def matrix(self, a, b) -> np.ndarray:
        return relation_matrix(self.relnet, a, b)[0]


class SymmetricRelationScorer(RelationScorer):
    """Relation score averaged over both argument orders (for utterance-pair scoring)."""

    name = "relnet_sym"

    def __call__(self, a, b) -> float:
        return 0.5 * (relation_forward(self.relnet, a, b) + relation_forward(self.relnet, b, a))

    def matrix(self, a, b) -> np.ndarray:
        return 0.5 * (relation_matrix(self.relnet, a, b)[0] + relation_matrix(self.relnet, b, a)[0].T)


def relation_loss(scores, labels) -> float:
    """Mean squared error against the one-hot label matrix."""
    return relation_loss_and_grad(scores, labels)[0]


def relation_loss_and_grad(scores, labels):
    r = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if r.ndim != 2 or labels.shape != (r.shape[0],):
        raise ShapeMismatchError(f"scores {r.shape} vs labels {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= r.shape[1]):
        raise ShapeMismatchError("labels must index speaker columns")
    target = np.zeros_like(r)
    target[np.arange(r.shape[0]), labels] = 1.0
    resid = r - target
    return float(np.mean(resid ** 2)), 2.0 * resid / resid.size


# --- imposter detection network -----------------------------------------------

def idn_pair_indices(m_now: int, m_train: int, rng=None):
    """Index lists feeding the IDN input.

    Returns ``(ss_first, ss_second, qs)``, each of length ``m_train``: centroid
    product k of the inter-speaker block is ``C[ss_first[k]] * C[ss_second[k]]`` and
    query product k is ``q * C[qs[k]]``. The base lists are the cyclic successor
    pairs (j, (j+1) mod m_now) and the speakers j = 0..m_now-1. Shorter lists are
    repeated cyclically; longer ones are subsampled uniformly without replacement
    (one shared, sorted selection for both blocks, drawn from ``rng``).
    """
    if m_now < 1 or m_train < 1:
        raise ShapeMismatchError("need at least one enrolled speaker")
    if m_now > m_train:
        if rng is None:
            raise ValueError("an rng is required to subsample speakers")
        pos = np.sort(rng.choice(m_now, size=m_train, replace=False))
    else:
        pos = np.arange(m_train) % m_now
    return pos, (pos + 1) % m_now, pos.copy()


def _idn_rows(centroids, queries, indices):
    a, b, qs = indices
    c = centroids
    pss = (c[a] * c[b]).reshape(-1)
    pqs = (queries[:, None, :] * c[qs][None, :, :]).reshape(queries.shape[0], -1)
    return np.concatenate([np.broadcast_to(pss, (queries.shape[0], pss.size)), pqs], axis=1)


def idn_input(centroids, query_emb, m_train: int, rng=None) -> np.ndarray:
    """Flat IDN input ``[P_ss, P_qs]`` of length ``2 * m_train * D``."""
    c = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    q = np.asarray(query_emb, dtype=np.float64)
    if q.shape != (c.shape[1],):
        raise DimensionMismatchError(f"query {q.shape} vs centroids {c.shape}")
    indices = idn_pair_indices(c.shape[0], m_train, rng)
    return _idn_rows(c, q[None, :], indices)[0]


def idn_inputs(centroids, queries, m_train: int, rng=None) -> np.ndarray:
    """Batched :func:`idn_input`; all queries share one index selection."""
    c = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != c.shape[1]:
        raise DimensionMismatchError(f"queries {q.shape} vs centroids {c.shape}")
    return _idn_rows(c, q, idn_pair_indices(c.shape[0], m_train, rng))


def idn_forward(idn: MlpModel, x) -> float:
    out, _ = mlp_forward(idn, x)
    return float(np.ravel(out)[0])


def imposter_loss(scores, flags) -> float:
    return imposter_loss_and_grad(scores, flags)[0]


def imposter_loss_and_grad(scores, flags):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    f = np.asarray(flags, dtype=np.float64).reshape(-1)
    if s.shape != f.shape or s.size == 0:
        raise ShapeMismatchError(f"{s.size} scores vs {f.size} flags")
    resid = s - f
    return float(np.mean(resid ** 2)), 2.0 * resid / s.size


def total_loss(l_relation: float, l_imposter: float, lam: float = 1.0) -> float:
    return l_relation + lam * l_imposter


# --- the joint model -------------------------------------------------------------

NETWORKS = ("adapter", "relnet", "idn")


@dataclass
class Assembly:
    """Adapter plus (optionally) relation net and IDN, with the metadata a checkpoint carries."""

    adapter: MlpModel
    relnet: Optional[MlpModel] = None
    idn: Optional[MlpModel] = None
    m_train: int = 10
    seed: int = 0
    stage: str = "init"

    @property
    def dim(self) -> int:
        return self.adapter.in_dim

    def networks(self) -> dict:
        return {name: getattr(self, name) for name in NETWORKS if getattr(self, name) is not None}

    def copy(self) -> "Assembly":
        return copy.deepcopy(self)

    def adapt(self, embeddings) -> np.ndarray:
        """Pass stored embeddings through the adapter (evaluation mode)."""
        x = np.asarray(embeddings, dtype=np.float64)
        shape = x.shape
        out, _ = mlp_forward(self.adapter, x.reshape(-1, shape[-1]))
        return out.reshape(shape)


def init_assembly(dim: int, m_train: int, seed: int, relnet_hidden=(256, 64),
                  idn_hidden=(256, 64), dropout=0.1, adapter_mult=2) -> Assembly:
    rngs = [np.random.default_rng([seed, k]) for k in range(3)]
    return Assembly(
        adapter=make_adapter(dim, rngs[0], adapter_mult),
        relnet=make_relnet(dim, rngs[1], relnet_hidden, dropout),
        idn=make_idn(dim, m_train, rngs[2], idn_hidden, dropout),
        m_train=m_train,
        seed=seed,
    )


@dataclass
class EpisodeOutput:
    l_relation: float
    l_imposter: float
    l_total: float
    grads: dict  # network name -> [(dW, db), ...]
    relation_scores: Optional[np.ndarray] = None
    imposter_scores: Optional[np.ndarray] = None


def episode_objective(assembly: Assembly, support, queries, labels, lam: float = 1.0,
                      rng=None, relation: bool = True, imposter: bool = True,
                      with_grads: bool = True) -> EpisodeOutput:
    """Episode loss ``L_relation + lam * L_imposter`` and its gradients.

    ``support`` is (M, N, D) raw embeddings, ``queries`` (Q, D), ``labels`` (Q,)
    holds the support-speaker index of each query or -1 for an imposter. The
    relation loss covers the enrolled queries only; the imposter loss covers all.
    Gradients flow through both heads into the adapter.
    """
    support = np.asarray(support, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    labels = np.asarray(labels)
    m, n, d = support.shape
    if queries.shape[1] != d or d != assembly.dim:
        raise DimensionMismatchError("episode embeddings do not match the adapter dimension")

    raw = np.concatenate([support.reshape(m * n, d), queries])
    adapted, ad_tape = mlp_forward(assembly.adapter, raw, rng)
    s_ad = adapted[: m * n].reshape(m, n, d)
    q_ad = adapted[m * n:]
    cents = s_ad.mean(axis=1)

    g_cents = np.zeros_like(cents)
    g_q = np.zeros_like(q_ad)
    grads = {}
    l_rel = l_imp = 0.0
    rel_scores = imp_scores = None

    enrolled = labels >= 0
    if relation and enrolled.any():
        if assembly.relnet is None:
            raise ValueError("assembly has no relation network")
        qe = q_ad[enrolled]
        rel_scores, rtape = relation_matrix(assembly.relnet, qe, cents, rng)
        l_rel, g_r = relation_loss_and_grad(rel_scores, labels[enrolled])
        if with_grads:
            grads["relnet"], g_in = mlp_backward(assembly.relnet, rtape, g_r.reshape(-1, 1))
            g_in = g_in.reshape(qe.shape[0], m, 3 * d)
            g_qpart, g_cpart, g_prod = g_in[..., :d], g_in[..., d:2 * d], g_in[..., 2 * d:]
            g_q[enrolled] += g_qpart.sum(axis=1) + (g_prod * cents[None]).sum(axis=1)
            g_cents += g_cpart.sum(axis=0) + (g_prod * qe[:, None, :]).sum(axis=0)

    if imposter:
        if assembly.idn is None:
            raise ValueError("assembly has no imposter detection network")
        idx = idn_pair_indices(m, assembly.m_train, rng)
        x = _idn_rows(cents, q_ad, idx)
        out, itape = mlp_forward(assembly.idn, x, rng)
        imp_scores = out[:, 0]
        l_imp, g_i = imposter_loss_and_grad(imp_scores, labels < 0)
        if with_grads:
            grads["idn"], g_in = mlp_backward(assembly.idn, itape, lam * g_i[:, None])
            a, b, qs = idx
            k = len(qs)
            g_ss = g_in[:, : k * d].reshape(-1, k, d).sum(axis=0)
            g_qs = g_in[:, k * d:].reshape(-1, k, d)
            np.add.at(g_cents, a, g_ss * cents[b])
            np.add.at(g_cents, b, g_ss * cents[a])
            g_q += np.einsum("ikd,kd->id", g_qs, cents[qs])
            np.add.at(g_cents, qs, np.einsum("ikd,id->kd", g_qs, q_ad))

    if with_grads:
        g_support = np.broadcast_to(g_cents[:, None, :] / n, (m, n, d)).reshape(m * n, d)
        grads["adapter"], _ = mlp_backward(assembly.adapter, ad_tape, np.concatenate([g_support, g_q]))
    return EpisodeOutput(l_rel, l_imp, total_loss(l_rel, l_imp, lam), grads, rel_scores, imp_scores)


def relu_margin(assembly: Assembly, support, queries, labels) -> float:
    """Smallest |pre-activation| over every ReLU unit the episode loss touches.

    Finite-difference checks are only meaningful when this is well above the
    perturbation size; otherwise a step can cross a kink.
    """
    support = np.asarray(support, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    labels = np.asarray(labels)
    m, n, d = support.shape
    adapted, tape = mlp_forward(assembly.adapter, np.concatenate([support.reshape(m * n, d), queries]))
    tapes = [(assembly.adapter, tape)]
    cents = adapted[: m * n].reshape(m, n, d).mean(axis=1)
    q_ad = adapted[m * n:]
    if assembly.relnet is not None and (labels >= 0).any():
        tapes.append((assembly.relnet, relation_matrix(assembly.relnet, q_ad[labels >= 0], cents)[1]))
    if assembly.idn is not None:
        x = _idn_rows(cents, q_ad, idn_pair_indices(m, assembly.m_train, np.random.default_rng(0)))
        tapes.append((assembly.idn, mlp_forward(assembly.idn, x)[1]))
    margins = [np.abs(z).min() for model, t in tapes
               for layer, z in zip(model.layers, t.preacts) if layer.activation == "relu"]
    return float(min(margins)) if margins else float("inf")


def _param_refs(assembly: Assembly, names):
    for name in names:
        for k, layer in enumerate(getattr(assembly, name).layers):
            yield name, k, 0, layer.weight
            yield name, k, 1, layer.bias


def gradient_check(assembly: Assembly, support, queries, labels, lam: float = 1.0,
                   eps: float = 1e-5, floor: float = 1e-6, networks=NETWORKS) -> float:
    """Worst relative error between analytic gradients of the episode loss and
    central finite differences, over every parameter of the given networks.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Runs in evaluation mode.
    """
    names = [nm for nm in networks if getattr(assembly, nm) is not None]
    relation = assembly.relnet is not None
    imposter = assembly.idn is not None
    analytic = episode_objective(assembly, support, queries, labels, lam,
                                 relation=relation, imposter=imposter).grads
    probe = assembly.copy()

    def loss():
        return episode_objective(probe, support, queries, labels, lam, relation=relation,
                                 imposter=imposter, with_grads=False).l_total

    worst = 0.0
    for name, k, which, arr in _param_refs(probe, names):
        g = analytic[name][k][which]
        flat = arr.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = loss()
            flat[i] = keep - eps
            down = loss()
            flat[i] = keep
            num = (up - down) / (2.0 * eps)
            ana = g.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
