"""Loss assembly, Adam and the epoch loop."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adversarial import consistency_loss, perturbed_forward
from .errors import ContractError, DegenerateInputError, NumericError
from .model import forward_scores
from .sampler import OverSampler, draw_virtual_batch, similarity_map

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr, weight_decay):
    """Bias-corrected Adam with L2 decay added to the gradient. Updates in place."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} does not match {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        theta = params[name].astype(np.float64)
        g = g.astype(np.float64) + weight_decay * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        params[name] = (theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params[name].dtype)
    return params, state


# ---------------------------------------------------------------------------
# losses


def base_loss(fw, attrs, objs, pair_labels):
    """L_p + L_a + L_o + L_cp, each a batch-mean cosine cross-entropy."""
    s = fw["scores"]
    parts = {
        "p": ad.softmax_cross_entropy(s["p"], pair_labels),
        "a": ad.softmax_cross_entropy(s["a"], attrs),
        "o": ad.softmax_cross_entropy(s["o"], objs),
        "cp": ad.softmax_cross_entropy(s["cp"], pair_labels),
    }
    return parts["p"] + parts["a"] + parts["o"] + parts["cp"], parts


def adv_loss(net, fw, attrs, objs, pair_labels, adv_config, rng, inv_tau, frozen=None):
    """L_a^adv + L_o^adv + L_cons on jittered-then-attacked primitives."""
    f_a_adv, f_o_adv, f_cp_adv, eps = perturbed_forward(
        net, fw["f_a"], fw["f_o"], attrs, objs, adv_config, rng, inv_tau, frozen
    )
    text = fw["text"]
    l_a = ad.softmax_cross_entropy(net.score("a", f_a_adv, text["a"], inv_tau), attrs)
    l_o = ad.softmax_cross_entropy(net.score("o", f_o_adv, text["o"], inv_tau), objs)
    cp_adv = net.score("cp", f_cp_adv, text["cp"], inv_tau)
    p_fixed = None if frozen is None else frozen.get("p_clean")
    cons, ce, kl, p_clean = consistency_loss(fw["scores"]["cp"], cp_adv, pair_labels, p_fixed)
    if frozen is not None:
        frozen["p_clean"] = p_clean
    parts = {"a_adv": l_a, "o_adv": l_o, "cp_adv": ce, "kl": kl}
    return l_a + l_o + cons, parts, eps, p_clean


def total_loss(base, adv=None, virtual=None, adv_weight=1.0):
    total = base
    if adv is not None:
        total = total + (adv if adv_weight == 1.0 else ad.scale(adv, adv_weight))
    if virtual is not None:
        total = total + virtual
    return total


@dataclass
class StepResult:
    graph: object
    net: object
    total: object
    base: object
    adv: object
    virtual: object
    parts: dict
    scores: dict
    eps: float = None
    p_clean: np.ndarray = None


def forward_step(model, features, attrs, objs, pair_labels, pairs, config, rng, train=True,
                 sampler=None, all_features=None, frozen=None):
    """Build one training graph and return every loss node.

    ``frozen`` pins the attack offsets and the KL target across calls (see
    ``perturbed_forward``); training leaves it as None.
    """
    inv_tau = config.train.inv_tau
    g = ad.Graph()
    net = model.bind(g, train=train, rng=rng)
    fw = forward_scores(net, features, pairs, inv_tau)
    base, parts = base_loss(fw, attrs, objs, pair_labels)
    adv = None
    eps = None
    p_clean = None
    if config.adv.enabled:
        adv, adv_parts, eps, p_clean = adv_loss(
            net, fw, attrs, objs, pair_labels, config.adv, rng, inv_tau, frozen
        )
        parts.update(adv_parts)
    virtual = None
    if sampler is not None:
        plan = sampler.plan(sampler.budget(len(attrs)), rng)
        f_cp_v = draw_virtual_batch(net, all_features, plan)
        if f_cp_v is not None:
            virtual = ad.softmax_cross_entropy(
                net.score("cp", f_cp_v, fw["text"]["cp"], inv_tau), plan.pair_idx
            )
            parts["osp"] = virtual
    total = total_loss(base, adv, virtual, config.train.adv_weight)
    scores = {k: v.value for k, v in fw["scores"].items()}
    return StepResult(g, net, total, base, adv, virtual, parts, scores, eps, p_clean)


def ensemble_predictions(scores, pairs):
    """Argmax over pairs of s_p + s_a[attr] + s_o[obj] + s_cp."""
    pairs = np.asarray(pairs)
    ens = (
        scores["p"].astype(np.float64)
        + scores["a"][:, pairs[:, 0]]
        + scores["o"][:, pairs[:, 1]]
        + scores["cp"]
    )
    return np.argmax(ens, axis=1)


class Trainer:
    """Owns the optimiser state, RNG and oversampler for one training run."""

    def __init__(self, dataset, model, config):
        config.validate()
        self.dataset = dataset
        self.model = model
        self.config = config
        self.vocab = dataset.vocab
        self.pairs = np.array(self.vocab.pairs_seen, dtype=np.int64).reshape(-1, 2)
        self.pair_index = {tuple(p): i for i, p in enumerate(self.vocab.pairs_seen)}
        self.train_rows = dataset.indices("train")
        if self.train_rows.size == 0:
            raise ContractError("dataset has no training samples")
        self.state = AdamState()
        self.rng = np.random.default_rng(config.train.seed)
        self.epoch = 0
        self.sampler = None
        if config.osp.enabled:
            S = similarity_map(model.params["words.obj"], self.vocab.objects)
            self.sampler = OverSampler(dataset, self.train_rows, S, config.osp)

    def labels(self, rows):
        a = self.dataset.attrs[rows]
        o = self.dataset.objs[rows]
        try:
            y = np.array([self.pair_index[(int(i), int(j))] for i, j in zip(a, o)], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"training label {exc.args[0]} is not a seen pair") from None
        return a, o, y

    def train_step(self, rows):
        a, o, y = self.labels(rows)
        res = forward_step(
            self.model, self.dataset.features[rows], a, o, y, self.pairs, self.config, self.rng,
            train=True, sampler=self.sampler, all_features=self.dataset.features,
        )
        total = float(res.total.value)
        if not np.isfinite(total):
            raise NumericError("total loss is not finite")
        res.graph.backward(res.total)
        grads = {
            name: res.graph.grad(node)
            for name, node in res.net.p.items()
            if node.requires_grad
        }
        adam_step(self.model.params, grads, self.state, self.config.train.lr, self.config.train.weight_decay)
        return res, a, o, y

    def train_epoch(self):
        bs = self.config.train.batch_size
        order = self.rng.permutation(self.train_rows)
        sums = {}
        counts = {}
        hits = {"p": 0, "a": 0, "o": 0, "cp": 0, "ensemble": 0}
        n_seen = 0
        for bi, start in enumerate(range(0, order.size, bs)):
            rows = order[start : start + bs]
            try:
                res, a, o, y = self.train_step(rows)
            except (NumericError, DegenerateInputError) as exc:
                raise type(exc)(f"epoch {self.epoch + 1}, batch {bi}: {exc}") from exc
            for key, node in [("total", res.total), ("base", res.base)] + list(res.parts.items()):
                sums[key] = sums.get(key, 0.0) + float(node.value) * len(rows)
                counts[key] = counts.get(key, 0) + len(rows)
            if res.adv is not None:
                sums["adv"] = sums.get("adv", 0.0) + float(res.adv.value) * len(rows)
                counts["adv"] = counts.get("adv", 0) + len(rows)
            s = res.scores
            hits["p"] += int(np.sum(np.argmax(s["p"], 1) == y))
            hits["a"] += int(np.sum(np.argmax(s["a"], 1) == a))
            hits["o"] += int(np.sum(np.argmax(s["o"], 1) == o))
            hits["cp"] += int(np.sum(np.argmax(s["cp"], 1) == y))
            pred = ensemble_predictions(s, self.pairs)
            hits["ensemble"] += int(np.sum(pred == y))
            if self.sampler is not None:
                self.sampler.tracker.observe(y, pred == y)
            n_seen += len(rows)
        if self.sampler is not None:
            self.sampler.tracker.end_epoch()
        self.epoch += 1
        stats = {"epoch": self.epoch}
        stats.update({f"loss_{k}": sums[k] / counts[k] for k in sums})
        stats.update({f"acc_{k}": v / n_seen for k, v in hits.items()})
        return stats

    def fit(self, epochs=None, callback=None):
        epochs = self.config.train.epochs if epochs is None else epochs
        history = []
        for _ in range(epochs):
            stats = self.train_epoch()
            history.append(stats)
            if callback is not None:
                callback(self, stats)
        return history
