"""Higher-order CRF over super-voxels and its mean-field solver.

Energy per labeling x:

    E = w_u sum_i U_i(x_i) + w_p sum_{i<j} k_ij [x_i != x_j]
      + w_o sum_r psi_O(x_r) + w_c sum_r H(f_r) + w_r sum_{(r,q)} psi_R(x_r, x_q)

with psi_O the fraction of clique members whose label disagrees with the
clique's objectness flag, H the entropy of the clique label frequencies f_r,
and psi_R the co-occurrence cost between neighbouring cliques. The default
relation cost couples the two regions, -sum_{l,l'} f_r(l) f_q(l') log L(l,l');
the "separable" variant sums -log(f_r(l) f_q(l') L(l,l')) over all label pairs.
"""

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

LABEL_EPS = 0.01
LOG_EPS = 1e-6
_MAX_ENUM = 10 ** 6


@dataclass(frozen=True)
class LabelSpace:
    labels: tuple
    objects: frozenset

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ValueError("need at least two labels")
        obj = frozenset(int(i) for i in self.objects)
        if not obj or len(obj) >= len(self.labels):
            raise ValueError("object subset must be non-empty and proper")
        if min(obj) < 0 or max(obj) >= len(self.labels):
            raise ValueError("object id outside the label space")
        object.__setattr__(self, "objects", obj)

    def __len__(self):
        return len(self.labels)

    @property
    def object_mask(self):
        m = np.zeros(len(self.labels), dtype=bool)
        m[sorted(self.objects)] = True
        return m


@dataclass(frozen=True)
class CrfWeights:
    w_unary: float = 1.0
    w_pair: float = 1.0
    w_obj: float = 0.5
    w_cons: float = 0.5
    w_rel: float = 0.25
    theta_alpha: float = 0.2
    theta_beta: float = 0.5
    relation: str = "coupled"

    def __post_init__(self):
        if min(self.w_unary, self.w_pair, self.w_obj, self.w_cons, self.w_rel) < 0:
            raise ValueError("term weights must be non-negative")
        if not (self.theta_alpha > 0 and self.theta_beta > 0):
            raise ValueError("kernel bandwidths must be positive")
        if self.relation not in ("coupled", "separable"):
            raise ValueError(f"unknown relation form {self.relation!r}")

    @property
    def vector(self):
        return np.array([self.w_unary, self.w_pair, self.w_obj, self.w_cons, self.w_rel])


def predicted_distribution(label_hist, eps=LABEL_EPS):
    h = np.asarray(label_hist, dtype=np.float64) + eps
    return h / h.sum(axis=1, keepdims=True)


def build_unary(label_hist, prev_q=None, has_prev=None, tau=0.5, eps=LABEL_EPS):
    """Negative log of the blended label distribution, plus that distribution.

    Rows with ``has_prev`` set mix ``tau * predicted + (1 - tau) * prev_q``;
    the others use the prediction alone.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    prob = predicted_distribution(label_hist, eps)
    if prev_q is not None:
        prev_q = np.asarray(prev_q, dtype=np.float64)
        if has_prev is None:
            has_prev = np.ones(prob.shape[0], dtype=bool)
        mix = tau * prob + (1.0 - tau) * prev_q
        prob = np.where(np.asarray(has_prev)[:, None], mix, prob)
    with np.errstate(divide="ignore"):
        return -np.log(prob), prob


def pairwise_kernel(pos_a, pos_b, n_a, n_b, weights):
    dp = np.sum((np.asarray(pos_a, float) - pos_b) ** 2, axis=-1)
    dn = np.sum((np.asarray(n_a, float) - n_b) ** 2, axis=-1)
    return np.exp(-dp / (2 * weights.theta_alpha ** 2) - dn / (2 * weights.theta_beta ** 2))


def kernel_matrix(n, pairs, values):
    """Symmetric sparse kernel with zero diagonal from (i, j) pairs."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64)
    keep = pairs[:, 0] != pairs[:, 1]
    i, j, v = pairs[keep, 0], pairs[keep, 1], values[keep]
    k = sp.coo_matrix((np.r_[v, v], (np.r_[i, j], np.r_[j, i])), shape=(n, n)).tocsr()
    k.sum_duplicates()
    return k


class MeanFieldState:
    """Variables, graph and current marginals of one CRF instance.

    `clique_of` maps each node to a clique index or -1; `flags` holds y_r per
    clique and `clique_edges` the (r, q) pairs of neighbouring cliques. An
    optional boolean `allowed` (N, L) pins the probability of masked labels
    to zero.
    """

    def __init__(self, unary, kernel=None, clique_of=None, flags=None, clique_edges=None,
                 object_mask=None, cooccurrence=None, q=None, allowed=None):
        self.unary = np.asarray(unary, dtype=np.float64)
        self.allowed = None if allowed is None else np.asarray(allowed, dtype=bool)
        n, nl = self.unary.shape
        self.kernel = kernel if kernel is not None else sp.csr_matrix((n, n))
        self.kernel_rowsum = np.asarray(self.kernel.sum(axis=1)).ravel()
        self.clique_of = (np.full(n, -1, dtype=np.int64) if clique_of is None
                          else np.asarray(clique_of, dtype=np.int64))
        self.flags = np.zeros(0, dtype=np.int64) if flags is None else np.asarray(flags, np.int64)
        nr = self.flags.size
        if self.clique_of.size and self.clique_of.max(initial=-1) >= nr:
            raise ValueError("clique index without a flag")
        self.clique_edges = (np.zeros((0, 2), dtype=np.int64) if clique_edges is None
                             else np.asarray(clique_edges, dtype=np.int64).reshape(-1, 2))
        self.object_mask = (np.zeros(nl, dtype=bool) if object_mask is None
                            else np.asarray(object_mask, dtype=bool))
        self.cooccurrence = (np.ones((nl, nl)) if cooccurrence is None
                             else np.asarray(cooccurrence, dtype=np.float64))
        self.log_cooc = np.log(self.cooccurrence)
        inside = np.flatnonzero(self.clique_of >= 0)
        self.member = sp.csr_matrix(
            (np.ones(inside.size), (self.clique_of[inside], inside)), shape=(nr, n))
        self.sizes = np.bincount(self.clique_of[inside], minlength=nr).astype(np.float64)
        e = self.clique_edges
        self.clique_adj = sp.csr_matrix(
            (np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(nr, nr))
        self.clique_adj.sum_duplicates()
        self.clique_adj.data[:] = 1.0
        if q is None:
            q = softmax(self._mask(-self.unary))
        self.q = np.asarray(q, dtype=np.float64)
        self.f = self.frequencies(self.q)

    def _mask(self, logits):
        if self.allowed is not None:
            logits = np.where(self.allowed, logits, -np.inf)
        return logits

    @property
    def num_nodes(self):
        return self.unary.shape[0]

    @property
    def num_labels(self):
        return self.unary.shape[1]

    def frequencies(self, q):
        if self.flags.size == 0:
            return np.zeros((0, self.num_labels))
        return (self.member @ q) / np.maximum(self.sizes, 1.0)[:, None]


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _clique_messages(state, weights, f):
    """Per-clique messages (R, L) for the enabled higher-order terms."""
    nr, nl = f.shape
    msg = np.zeros((nr, nl))
    inv = 1.0 / np.maximum(state.sizes, 1.0)
    if weights.w_obj > 0:
        obj = state.object_mask.astype(np.float64)
        m_o = np.where(state.flags[:, None] == 1, 1.0 - obj[None, :], obj[None, :])
        msg += weights.w_obj * m_o * inv[:, None]
    if weights.w_cons > 0:
        msg += weights.w_cons * (-(np.log(f + LOG_EPS) + 1.0)) * inv[:, None]
    if weights.w_rel > 0 and state.clique_edges.size:
        if weights.relation == "coupled":
            m_r = -(state.clique_adj @ f) @ state.log_cooc.T
        else:
            deg = np.asarray(state.clique_adj.sum(axis=1)).ravel()
            m_r = -(nl * deg)[:, None] / (f + LOG_EPS)
        msg += weights.w_rel * m_r * inv[:, None]
    return msg


def mean_field_step(state, weights):
    """One synchronous update of every marginal; returns the state."""
    q = state.q
    logits = -weights.w_unary * state.unary
    if weights.w_pair > 0 and state.kernel.nnz:
        # sum_j k_ij (1 - Q_j(l))
        logits -= weights.w_pair * (state.kernel_rowsum[:, None] - state.kernel @ q)
    higher = weights.w_obj > 0 or weights.w_cons > 0 or weights.w_rel > 0
    if higher and state.flags.size:
        msg = _clique_messages(state, weights, state.f)
        inside = state.clique_of >= 0
        logits[inside] -= msg[state.clique_of[inside]]
    state.q = softmax(state._mask(logits))
    state.f = state.frequencies(state.q)
    return state


def infer(state, weights, iterations=1):
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    for _ in range(iterations):
        mean_field_step(state, weights)
    return np.argmax(state.q, axis=1), state.q


def _hard_frequencies(state, labelings):
    """Clique label frequencies (M, R, L) for a batch of labelings (M, N)."""
    m = labelings.shape[0]
    nr, nl = state.flags.size, state.num_labels
    out = np.zeros((m, nr, nl))
    inside = np.flatnonzero(state.clique_of >= 0)
    if inside.size == 0:
        return out
    r = np.broadcast_to(state.clique_of[inside], (m, inside.size))
    rows = np.broadcast_to(np.arange(m)[:, None], r.shape)
    np.add.at(out, (rows, r, labelings[:, inside]), 1.0)
    return out / np.maximum(state.sizes, 1.0)[None, :, None]


def term_energies(labelings, state, weights=None):
    """Energy terms (unary, pair, obj, cons, rel) for one labeling or a batch.

    Returns shape (5,) for a single labeling and (M, 5) for an (M, N) batch.
    """
    x = np.asarray(labelings, dtype=np.int64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    m, n = x.shape
    if n != state.num_nodes:
        raise ValueError("labeling length must equal node count")
    out = np.zeros((m, 5))
    out[:, 0] = state.unary[np.arange(n)[None, :], x].sum(axis=1)
    k = sp.triu(state.kernel, k=1).tocoo()
    if k.nnz:
        out[:, 1] = ((x[:, k.row] != x[:, k.col]) * k.data[None, :]).sum(axis=1)
    if state.flags.size:
        f = _hard_frequencies(state, x)
        obj = state.object_mask
        in_obj = f[:, :, obj].sum(axis=2)
        out[:, 2] = np.where(state.flags[None, :] == 1, 1.0 - in_obj, in_obj).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(f > 0, f * np.log(np.where(f > 0, f, 1.0)), 0.0)
        out[:, 3] = -plogp.sum(axis=(1, 2))
        e = state.clique_edges
        if e.size:
            fr, fq = f[:, e[:, 0]], f[:, e[:, 1]]
            if (weights is None or weights.relation == "coupled"):
                rel = -np.einsum("mei,ij,mej->me", fr, state.log_cooc, fq)
            else:
                nl = state.num_labels
                rel = -(nl * np.log(fr + LOG_EPS).sum(axis=2) + nl * np.log(fq + LOG_EPS).sum(axis=2)
                        + state.log_cooc.sum())
            out[:, 4] = rel.sum(axis=1)
    return out[0] if single else out


def total_energy(terms, weights):
    return np.asarray(terms) @ weights.vector


def brute_force_map(state, weights, chunk=4096):
    """Exhaustive minimum-energy labeling; ties go to the lexicographically smallest."""
    n, nl = state.num_nodes, state.num_labels
    if nl ** n > _MAX_ENUM:
        raise ValueError(f"{nl}^{n} labelings exceed the enumeration limit")
    best, best_e = None, np.inf
    it = itertools.product(range(nl), repeat=n)
    while True:
        block = np.array(list(itertools.islice(it, chunk)), dtype=np.int64).reshape(-1, n)
        if block.shape[0] == 0:
            break
        e = total_energy(term_energies(block, state, weights), weights)
        i = int(np.argmin(e))
        # product() yields labelings in lexicographic order, so strict < keeps the first
        if e[i] < best_e:
            best, best_e = block[i].copy(), float(e[i])
    return best, best_e


def learn_cooccurrence(num_labels, pairs=None, counts=None):
    """Co-occurrence matrix from adjacent-region label pairs or a count matrix.

    Off-diagonal entries are (count + 1) / (max count + 1), where the max is
    taken over distinct-label pairs; the diagonal is 1.
    """
    c = np.zeros((num_labels, num_labels))
    if counts is not None:
        c += np.asarray(counts, dtype=np.float64)
        c = np.maximum(c, c.T)
    if pairs is not None:
        p = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        p = p[p[:, 0] != p[:, 1]]
        np.add.at(c, (p[:, 0], p[:, 1]), 1.0)
        np.add.at(c, (p[:, 1], p[:, 0]), 1.0)
    np.fill_diagonal(c, 0.0)
    top = c.max()
    if top <= 0:
        return np.ones((num_labels, num_labels))
    lam = (c + 1.0) / (top + 1.0)
    np.fill_diagonal(lam, 1.0)
    return lam


def write_cooccurrence(lam, labels, path):
    with open(path, "w") as f:
        f.write(" ".join(labels) + "\n")
        for row in np.asarray(lam):
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_cooccurrence(path, labels=None):
    with open(path) as f:
        lines = [ln.split() for ln in f if ln.strip()]
    names = tuple(lines[0])
    lam = np.array([[float(v) for v in row] for row in lines[1:]])
    if lam.shape != (len(names), len(names)):
        raise ValueError(f"{path}: expected {len(names)}x{len(names)} matrix")
    if labels is not None and tuple(labels) != names:
        raise ValueError(f"{path}: label header does not match the label space")
    if np.any(lam <= 0) or np.any(lam > 1) or not np.allclose(lam, lam.T):
        raise ValueError(f"{path}: co-occurrence must be symmetric with values in (0, 1]")
    return lam
