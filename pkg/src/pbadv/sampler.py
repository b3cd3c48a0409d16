"""Object-similarity oversampling of under-fit seen pairs."""

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DegenerateInputError

logger = logging.getLogger(__name__)


@dataclass
class OSPConfig:
    enabled: bool = True
    budget_ratio: float = 0.25
    alpha: float = 0.0

    def __post_init__(self):
        if self.budget_ratio < 0:
            raise ContractError("osp.budget_ratio must be >= 0")


class FitTracker:
    """Per-pair training accuracy from the previous epoch.

    Pairs never observed count as accuracy 0 so they are sampled most.
    """

    def __init__(self, num_pairs, alpha=0.0):
        self.alpha = float(alpha)
        self.acc = np.zeros(num_pairs)
        self._correct = np.zeros(num_pairs)
        self._total = np.zeros(num_pairs)

    def __len__(self):
        return self.acc.size

    def observe(self, pair_idx, correct):
        np.add.at(self._correct, np.asarray(pair_idx), np.asarray(correct, dtype=float))
        np.add.at(self._total, np.asarray(pair_idx), 1.0)

    def end_epoch(self):
        seen = self._total > 0
        self.acc = np.where(seen, self._correct / np.where(seen, self._total, 1.0), 0.0)
        self._correct[:] = 0.0
        self._total[:] = 0.0


def oversample_frequencies(acc, alpha=0.0):
    """softmax(alpha - acc) over the seen pairs."""
    if isinstance(acc, FitTracker):
        acc, alpha = acc.acc, acc.alpha
    acc = np.asarray(acc, dtype=np.float64)
    if acc.size == 0:
        raise ContractError("need at least one seen pair")
    z = alpha - acc
    z = np.exp(z - z.max())
    return z / z.sum()


def similarity_map(vectors, names=None):
    """Cosine similarity between every pair of object word vectors (n x n)."""
    w = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(w, axis=1)
    bad = np.flatnonzero(norms <= ad.NORM_FLOOR)
    if bad.size:
        who = names[bad[0]] if names is not None else int(bad[0])
        raise DegenerateInputError(f"object {who!r} has a zero-norm word vector")
    unit = w / norms[:, None]
    s = np.clip(unit @ unit.T, -1.0, 1.0)
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    assert np.allclose(s, s.T, atol=1e-6) and np.allclose(np.diag(s), 1.0, atol=1e-6)
    return s


def donor_distribution(S, target, eligible):
    """Row softmax of S[target] restricted to the eligible donor objects."""
    eligible = np.asarray(eligible, dtype=bool)
    if not eligible.any():
        raise ContractError(f"no eligible donor object for target object {target}")
    row = np.asarray(S, dtype=np.float64)[target]
    z = np.where(eligible, row, -np.inf)
    z = np.exp(z - z[eligible].max())
    return z / z.sum()


@dataclass
class VirtualPlan:
    pair_idx: np.ndarray  # index into the seen-pair list
    donor_idx: np.ndarray  # row of the attribute-source image
    object_idx: np.ndarray  # row of the object-source image


class OverSampler:
    """Draws virtual compositions for under-fit pairs.

    ``S`` is built once from the initial word vectors and never updated.
    """

    def __init__(self, dataset, train_rows, S, config=None):
        self.config = config or OSPConfig()
        self.vocab = dataset.vocab
        self.S = S
        self.pairs = list(self.vocab.pairs_seen)
        self.tracker = FitTracker(len(self.pairs), self.config.alpha)
        attrs = dataset.attrs[train_rows]
        objs = dataset.objs[train_rows]
        m, n = self.vocab.m, self.vocab.n
        self.by_pair = {}
        for row, a, o in zip(train_rows, attrs, objs):
            self.by_pair.setdefault((int(a), int(o)), []).append(int(row))
        self.by_obj = {}
        for row, o in zip(train_rows, objs):
            self.by_obj.setdefault(int(o), []).append(int(row))
        self.donors = np.zeros((m, n), dtype=bool)
        for a, o in self.by_pair:
            self.donors[a, o] = True

    def frequencies(self):
        return oversample_frequencies(self.tracker)

    def budget(self, batch_size):
        return int(round(self.config.budget_ratio * batch_size))

    def plan(self, count, rng):
        """Pick ``count`` targets by fit frequency and their source images."""
        if count <= 0:
            return VirtualPlan(*(np.zeros(0, dtype=np.int64) for _ in range(3)))
        targets = rng.choice(len(self.pairs), size=count, p=self.frequencies())
        pair_idx, donor_idx, object_idx = [], [], []
        for t in targets:
            a, o = self.pairs[int(t)]
            eligible = self.donors[a]
            if not eligible.any():
                logger.warning("no training image with attribute %s; skipping target", self.vocab.attributes[a])
                continue
            probs = donor_distribution(self.S, o, eligible)
            o_donor = int(rng.choice(probs.size, p=probs))
            donor_rows = self.by_pair[(a, o_donor)]
            obj_rows = self.by_obj.get(o)
            if not obj_rows:
                logger.warning("no training image with object %s; skipping target", self.vocab.objects[o])
                continue
            pair_idx.append(int(t))
            donor_idx.append(donor_rows[int(rng.integers(len(donor_rows)))])
            object_idx.append(obj_rows[int(rng.integers(len(obj_rows)))])
        return VirtualPlan(
            np.array(pair_idx, dtype=np.int64),
            np.array(donor_idx, dtype=np.int64),
            np.array(object_idx, dtype=np.int64),
        )


def draw_virtual_batch(net, features, plan):
    """Recompose virtual pair features from a plan: fuse(D_a(donor), D_o(object source))."""
    if plan.pair_idx.size == 0:
        return None
    f_a = net.decompose_attr(net.input(features[plan.donor_idx]))
    f_o = net.decompose_obj(net.input(features[plan.object_idx]))
    return net.fuse(f_a, f_o)
