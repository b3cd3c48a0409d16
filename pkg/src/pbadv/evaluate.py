"""Ensemble inference, the seen/unseen calibration sweep and top-k retrieval."""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .model import BRANCHES, forward_scores


@dataclass
class EvalReport:
    biases: list
    seen_curve: list
    unseen_curve: list
    auc: float
    best_hm: float
    best_seen: float
    best_unseen: float
    best_attr: float
    best_obj: float
    best_bias: float
    per_pair_accuracy: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def headline(self):
        return {
            "AUC": 100 * self.auc,
            "HM": 100 * self.best_hm,
            "Seen": 100 * self.best_seen,
            "Unseen": 100 * self.best_unseen,
            "Attr": 100 * self.best_attr,
            "Obj": 100 * self.best_obj,
        }


def candidate_pairs(vocab, world="closed", split="test"):
    """Candidate pairs in grid order.

    Closed world: seen pairs present in ``split`` plus that split's unseen
    pairs (``pairs_unseen`` for test, ``pairs_val_unseen`` for val). Falls
    back to all seen pairs when the split has no samples. Open world: the
    whole attribute x object grid.
    """
    if world == "open":
        return vocab.grid()
    if world != "closed":
        raise ContractError(f"world must be 'closed' or 'open', got {world!r}")
    seen = set(vocab.pairs_seen)
    observed = vocab.split_pairs.get(split) or []
    seen_part = {p for p in observed if p in seen} or seen
    unseen = set(vocab.pairs_val_unseen if split == "val" else vocab.pairs_unseen)
    keep = seen_part | unseen
    return [p for p in vocab.grid() if p in keep]


def candidate_set(vocab, world="closed", split="test"):
    """Boolean mask over the grid (``a * n + o``) marking candidate pairs."""
    mask = np.zeros(vocab.m * vocab.n, dtype=bool)
    for a, o in candidate_pairs(vocab, world, split):
        mask[a * vocab.n + o] = True
    return mask


def ensemble_scores(model, features, pairs, inv_tau, branches=BRANCHES, chunk=1024):
    """Sum of the selected branch scores for every candidate pair.

    ``features`` is (D,) or (N, D); returns (K,) or (N, K) float64.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ContractError("empty candidate set")
    unknown = set(branches) - set(BRANCHES)
    if unknown or not branches:
        raise ContractError(f"branches must be a non-empty subset of {BRANCHES}")
    features = np.asarray(features)
    single = features.ndim == 1
    rows = features.reshape(1, -1) if single else features
    parts = [branch_matrix(model, rows[i : i + chunk], pairs, inv_tau) for i in range(0, rows.shape[0], chunk)]
    per_branch = {b: np.concatenate([p[b] for p in parts], axis=0) for b in BRANCHES}
    out = combine_branches(per_branch, branches)
    return out[0] if single else out


def branch_matrix(model, features, pairs, inv_tau):
    """Eval-mode per-branch scores broadcast onto the candidate pairs."""
    g = ad.Graph()
    net = model.bind(g, requires_grad=False)
    s = forward_scores(net, features, pairs, inv_tau)["scores"]
    return {
        "p": s["p"].value.astype(np.float64),
        "a": s["a"].value.astype(np.float64)[:, pairs[:, 0]],
        "o": s["o"].value.astype(np.float64)[:, pairs[:, 1]],
        "cp": s["cp"].value.astype(np.float64),
    }


def combine_branches(per_branch, branches=BRANCHES):
    total = None
    for b in BRANCHES:
        if b in branches:
            total = per_branch[b].copy() if total is None else total + per_branch[b]
    return total


# ---------------------------------------------------------------------------
# calibration sweep


def _best(scores, mask):
    """Per-row max over the masked columns and its (lowest) column index."""
    cols = np.flatnonzero(mask)
    if cols.size == 0:
        return np.full(scores.shape[0], -np.inf), np.full(scores.shape[0], -1)
    sub = scores[:, cols]
    arg = np.argmax(sub, axis=1)
    return sub[np.arange(scores.shape[0]), arg], cols[arg]


def bias_grid(scores, seen_mask, size=200, margin=None):
    """Evenly spaced biases spanning every per-sample seen/unseen flip point."""
    scores = np.asarray(scores, dtype=np.float64)
    seen_mask = np.asarray(seen_mask, dtype=bool)
    if scores.shape[0] == 0 or seen_mask.all() or not seen_mask.any():
        return np.zeros(1)
    best_seen, _ = _best(scores, seen_mask)
    best_unseen, _ = _best(scores, ~seen_mask)
    gaps = best_seen - best_unseen
    lo, hi = float(gaps.min()), float(gaps.max())
    if margin is None:
        margin = 1e-3 + 0.01 * (hi - lo)
    return np.linspace(lo - margin, hi + margin, max(int(size), 2))


def calibration_sweep(scores, labels, pairs, seen_mask, grid=None, grid_size=200):
    """Seen/unseen accuracy trade-off as a bias is added to unseen-pair scores.

    ``scores`` is (N, K) over candidate ``pairs`` (K x 2); ``labels`` are the
    true (attr, obj) of each sample; ``seen_mask`` flags candidate columns
    that are seen pairs. Samples whose true pair is a seen candidate count
    toward seen accuracy, all others toward unseen accuracy.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1, 2)
    seen_mask = np.asarray(seen_mask, dtype=bool)
    if scores.ndim != 2 or scores.shape != (labels.shape[0], pairs.shape[0]):
        raise ContractError(f"scores {scores.shape} do not match {labels.shape[0]} samples x {pairs.shape[0]} pairs")
    if seen_mask.shape != (pairs.shape[0],):
        raise ContractError("seen_mask must flag every candidate pair")
    if grid is None:
        grid = bias_grid(scores, seen_mask, grid_size)
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise ContractError("bias grid is empty")

    col = {tuple(p): j for j, p in enumerate(pairs.tolist())}
    true_col = np.array([col.get(tuple(l), -1) for l in labels.tolist()], dtype=np.int64)
    is_seen = np.array([c >= 0 and seen_mask[c] for c in true_col], dtype=bool)
    is_unseen = ~is_seen
    n_seen, n_unseen = int(is_seen.sum()), int(is_unseen.sum())

    best_s, col_s = _best(scores, seen_mask)
    best_u, col_u = _best(scores, ~seen_mask)

    seen_acc, unseen_acc, attr_acc, obj_acc, preds = [], [], [], [], []
    for b in grid:
        shifted = best_u + b
        pick_u = (shifted > best_s) | ((shifted == best_s) & (col_u < col_s) & (col_u >= 0))
        pick_u &= col_u >= 0
        pred = np.where(pick_u, col_u, col_s)
        correct = pred == true_col
        seen_acc.append(correct[is_seen].mean() if n_seen else 0.0)
        unseen_acc.append(correct[is_unseen].mean() if n_unseen else 0.0)
        pp = pairs[pred]
        attr_acc.append((pp[is_unseen, 0] == labels[is_unseen, 0]).mean() if n_unseen else 0.0)
        obj_acc.append((pp[is_unseen, 1] == labels[is_unseen, 1]).mean() if n_unseen else 0.0)
        preds.append(pred)
    seen_acc = np.array(seen_acc, dtype=np.float64)
    unseen_acc = np.array(unseen_acc, dtype=np.float64)
    hm = harmonic_mean(seen_acc, unseen_acc)
    best = int(np.argmax(hm))

    pred = preds[best]
    per_pair = {}
    for j in np.unique(true_col[true_col >= 0]):
        rows = true_col == j
        a, o = pairs[j]
        per_pair[f"{a},{o}"] = float(np.mean(pred[rows] == j))

    return EvalReport(
        biases=grid.tolist(),
        seen_curve=seen_acc.tolist(),
        unseen_curve=unseen_acc.tolist(),
        auc=curve_auc(seen_acc, unseen_acc),
        best_hm=float(hm[best]),
        best_seen=float(seen_acc.max()),
        best_unseen=float(unseen_acc.max()),
        best_attr=float(max(attr_acc)),
        best_obj=float(max(obj_acc)),
        best_bias=float(grid[best]),
        per_pair_accuracy=per_pair,
    )


def harmonic_mean(s, u):
    s = np.asarray(s, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    denom = s + u
    return np.where(denom > 0, 2 * s * u / np.where(denom > 0, denom, 1.0), 0.0)


def curve_auc(seen, unseen):
    """Trapezoid area under unseen-vs-seen after dedup and sorting by seen."""
    pts = np.unique(np.stack([np.asarray(seen, float), np.asarray(unseen, float)], axis=1), axis=0)
    order = np.lexsort((-pts[:, 1], pts[:, 0]))
    x, y = pts[order, 0], pts[order, 1]
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def evaluate(model, dataset, inv_tau, world="closed", split="test", branches=BRANCHES, grid_size=200):
    """Score one split against its candidate set and run the sweep."""
    vocab = dataset.vocab
    rows = dataset.indices(split)
    if rows.size == 0:
        raise ContractError(f"no samples in split {split!r}")
    pairs = np.array(candidate_pairs(vocab, world, split), dtype=np.int64)
    seen = set(vocab.pairs_seen)
    seen_mask = np.array([tuple(p) in seen for p in pairs.tolist()], dtype=bool)
    scores = ensemble_scores(model, dataset.features[rows], pairs, inv_tau, branches)
    labels = np.stack([dataset.attrs[rows], dataset.objs[rows]], axis=1)
    return calibration_sweep(scores, labels, pairs, seen_mask, grid_size=grid_size)


# ---------------------------------------------------------------------------
# retrieval


def rank_topk(values, k):
    """Indices of the k largest values; ties go to the lower index."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ContractError("corpus is empty")
    if k < 1:
        raise ContractError("k must be >= 1")
    order = np.argsort(-values, kind="stable")[:k]
    return [(int(i), float(values[i])) for i in order]


def topk_retrieval(model, query, corpus, k, direction, pairs, inv_tau):
    """Rank items for one query.

    * ``image2text``: ``query`` is a feature vector; ranks ``pairs``.
    * ``text2image``: ``query`` is an (attr, obj) pair; ranks ``corpus`` images.
    * ``attr`` / ``obj``: ``query`` is a primitive index; ranks ``corpus``
      images by that primitive branch alone.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if direction == "image2text":
        return rank_topk(ensemble_scores(model, np.asarray(query), pairs, inv_tau), k)
    corpus = np.asarray(corpus)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise ContractError("corpus is empty")
    if direction == "text2image":
        q = np.asarray(query, dtype=np.int64).reshape(1, 2)
        return rank_topk(ensemble_scores(model, corpus, q, inv_tau)[:, 0], k)
    if direction in ("attr", "obj"):
        probe = np.array([[int(query), 0]] if direction == "attr" else [[0, int(query)]], dtype=np.int64)
        scores = np.concatenate(
            [branch_matrix(model, corpus[i : i + 1024], probe, inv_tau)[direction[0]] for i in range(0, corpus.shape[0], 1024)]
        )
        return rank_topk(scores[:, 0], k)
    raise ContractError(f"unknown retrieval direction {direction!r}")
