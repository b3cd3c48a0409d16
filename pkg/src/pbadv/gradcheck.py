"""Central finite-difference checks of the autodiff engine.

The numerical side only ever evaluates forward values, so it stays
independent of every backward rule it checks.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adversarial import PerturbationConfig
from .config import Config
from .dataio import Vocabulary
from .model import Model, ModelConfig
from .trainer import forward_step


@dataclass
class CheckResult:
    name: str
    input: str
    rel_error: float
    tol: float
    skipped: int = 0

    @property
    def ok(self):
        return self.rel_error <= self.tol


def relative_error(analytic, numeric, floor=1e-6, keep=None):
    """Norm-wise ``|a - n| / max(|a|, |n|, floor)`` over the kept entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if keep is not None:
        keep = np.asarray(keep, dtype=bool).ravel()
        a, n = a[keep], n[keep]
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def pattern(graph):
    """Hashable activation pattern of every relu on ``graph``."""
    return b"".join(np.packbits(m).tobytes() for m in graph.kinks)


def numeric_grad(fn, inputs, name, h):
    """Central differences of ``fn(inputs)`` w.r.t. ``inputs[name]``.

    ``fn`` returns ``(value, pattern)``. Each step divides by the
    representable perturbation actually applied, which matters in float32.
    Returns the estimate and a mask of entries whose two probes saw the same
    relu pattern as the base point; the others straddle a kink, where a
    central difference is not a derivative estimate.
    """
    base = inputs[name]
    _, base_pat = fn(inputs)
    out = np.zeros(base.shape, dtype=np.float64)
    smooth = np.ones(base.shape, dtype=bool)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        up = flat.copy()
        dn = flat.copy()
        up[i] = orig + h
        dn[i] = orig - h
        step = float(up[i]) - float(dn[i])
        f_up, p_up = fn({**inputs, name: up.reshape(base.shape)})
        f_dn, p_dn = fn({**inputs, name: dn.reshape(base.shape)})
        out.reshape(-1)[i] = (f_up - f_dn) / step
        smooth.reshape(-1)[i] = p_up == base_pat and p_dn == base_pat
    return out, smooth


def _result(name, key, analytic, num, smooth, tol):
    return CheckResult(name, key, relative_error(analytic, num, keep=smooth), tol, int((~smooth).sum()))


def check(name, build, inputs, h=1e-3, tol=1e-3, wrt=None):
    """Compare backward() with finite differences for a scalar ``build``.

    ``build(graph, nodes)`` returns the scalar root; ``inputs`` maps names to
    arrays that become leaves requiring gradients.
    """
    inputs = {k: ad.as_array(v) for k, v in inputs.items()}
    wrt = list(inputs) if wrt is None else list(wrt)

    g = ad.Graph()
    nodes = {k: g.leaf(v, requires_grad=k in wrt) for k, v in inputs.items()}
    root = build(g, nodes)
    g.backward(root)
    analytic = {k: g.grad(nodes[k]) for k in wrt}

    def value(arrays):
        gg = ad.Graph()
        nn = {k: gg.leaf(v) for k, v in arrays.items()}
        return float(build(gg, nn).value), pattern(gg)

    results = []
    for k in wrt:
        num, smooth = numeric_grad(value, inputs, k, h)
        results.append(_result(name, k, analytic[k], num, smooth, tol))
    return results


# ---------------------------------------------------------------------------
# suite


def _op_cases(rng):
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    targets = rng.integers(0, 5, size=3)
    w = rng.standard_normal(7)
    cases = [
        ("add_mul_sum", lambda g, n: ad.sum(ad.mul(ad.add(n["x"], n["y"]), n["y"])), {"x": r(3, 4), "y": r(3, 4)}),
        ("bias_add", lambda g, n: ad.sum(ad.mul(ad.add(n["x"], n["b"]), ad.add(n["x"], n["b"]))), {"x": r(3, 4), "b": r(4)}),
        ("matmul", lambda g, n: ad.sum(ad.relu(ad.matmul(n["a"], n["b"]))), {"a": r(3, 5), "b": r(5, 4)}),
        ("matvec", lambda g, n: ad.sum(ad.mul(ad.matmul(n["v"], n["b"]), ad.matmul(n["v"], n["b"]))), {"v": r(5), "b": r(5, 4)}),
        ("layer_norm", lambda g, n: ad.sum(ad.mul(ad.layer_norm(n["x"], n["g"], n["b"]), g.constant(np.tile(np.linspace(-1, 1, 6), (4, 1))))), {"x": r(4, 6), "g": r(6), "b": r(6)}),
        ("dropout_eval", lambda g, n: ad.sum(ad.mul(ad.dropout(n["x"], 0.5, None, False), n["x"])), {"x": r(3, 3)}),
        ("concat", lambda g, n: ad.sum(ad.mul(ad.concat((n["x"], n["y"])), g.constant(np.arange(1.0, 8.0)))), {"x": r(3), "y": r(4)}),
        ("cosine", lambda g, n: ad.cosine(n["u"], n["v"]), {"u": r(6), "v": r(6)}),
        ("cosine_matrix", lambda g, n: ad.sum(ad.mul(ad.cosine_matrix(n["a"], n["b"]), g.constant(np.arange(12.0).reshape(3, 4) / 12))), {"a": r(3, 5), "b": r(4, 5)}),
        ("softmax_ce", lambda g, n: ad.softmax_cross_entropy(n["z"], targets), {"z": r(3, 5)}),
        ("kl_divergence", lambda g, n: ad.kl_divergence(np.exp(w) / np.exp(w).sum(), ad.softmax(n["z"])), {"z": r(7)}),
        ("mean_gather", lambda g, n: ad.mean(ad.mul(ad.gather_rows(n["t"], [2, 0, 2]), ad.gather_rows(n["t"], [1, 1, 0]))), {"t": r(3, 4)}),
    ]
    # 2-layer MLP + softmax-CE on an 8-d input
    x8 = r(8)
    cases.append(
        (
            "mlp_softmax_ce",
            lambda g, n: ad.softmax_cross_entropy(
                ad.matmul(ad.relu(ad.add(ad.matmul(g.constant(x8[None, :]), n["w1"]), n["b1"])), n["w2"]), [2]
            ),
            {"w1": r(8, 6), "b1": r(6), "w2": r(6, 4)},
        )
    )
    return cases


def _tiny_setup(seed):
    rng = np.random.default_rng(seed)
    m, n, D, W = 3, 3, 6, 5
    vocab = Vocabulary(
        [f"a{i}" for i in range(m)],
        [f"o{j}" for j in range(n)],
        [(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 2)],
        [(0, 2), (1, 0)],
    )
    mc = ModelConfig(feat_dim=D, num_attrs=m, num_objs=n, word_dim=W, hidden=6, embed_dim=10, dropout=0.0, seed=seed)
    model = Model(mc)
    feats = rng.standard_normal((4, D))
    pairs = np.array(vocab.pairs_seen)
    y = np.array([0, 2, 3, 5])
    return model, vocab, feats, pairs, y, rng


def _model_case(seed, adversarial, inv_tau=2.0):
    """Full composed loss as a function of a subset of model parameters."""
    model, _, feats, pairs, y, _ = _tiny_setup(seed)
    attrs, objs = pairs[y, 0], pairs[y, 1]
    config = Config()
    config.train.inv_tau = inv_tau
    config.adv = PerturbationConfig(epsilon_list=[0.05], noise_k=0.05, enabled=adversarial)
    config.osp.enabled = False
    names = ["dec_a.fc1.w", "dec_o.ln.g", "fuse.fc2.w", "vis_cp.w", "txt_a.w", "words.obj"]

    inputs = {k: model.params[k].copy() for k in names}
    return model, feats, attrs, objs, y, pairs, config, names, inputs


def composed_check(seed=0, adversarial=True, h=1e-3, tol=1e-3):
    """Finite-difference check of the whole training loss w.r.t. model parameters.

    With ``adversarial`` the path is decompose -> jitter -> attack -> fuse ->
    all losses; jitter and epsilon come from a fixed-seed RNG each call.
    """
    model, feats, attrs, objs, y, pairs, config, names, inputs = _model_case(seed, adversarial)

    # sign(grad) is piecewise constant and the KL target is a stop-gradient
    # constant, so both are recorded at the base point and replayed
    frozen = {}

    def loss_and_grads(arrays, with_grads):
        saved = {k: model.params[k] for k in names}
        model.params.update({k: ad.as_array(v) for k, v in arrays.items()})
        try:
            res = forward_step(
                model, feats, attrs, objs, y, pairs, config, np.random.default_rng(seed + 1), frozen=frozen
            )
            value = (float(res.total.value), pattern(res.graph))
            grads = None
            if with_grads:
                res.graph.backward(res.total)
                grads = {k: res.graph.grad(res.net.p[k]) for k in names}
        finally:
            model.params.update(saved)
        return value, grads

    _, analytic = loss_and_grads(inputs, True)
    name = "composed_adv" if adversarial else "composed_base"
    results = []
    for k in names:
        num, smooth = numeric_grad(lambda arrays: loss_and_grads(arrays, False)[0], inputs, k, h)
        results.append(_result(name, k, analytic[k], num, smooth, tol))
    return results


def run_suite(seed=0, h=1e-3, tol=1e-3):
    rng = np.random.default_rng(seed)
    results = []
    for name, build, inputs in _op_cases(rng):
        results.extend(check(name, build, inputs, h=h, tol=tol))
    results.extend(composed_check(seed, adversarial=False, h=h, tol=tol))
    results.extend(composed_check(seed, adversarial=True, h=h, tol=tol))
    return results
