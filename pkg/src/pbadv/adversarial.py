"""Primitive-level perturbation: Gaussian jitter, one-step sign-gradient attack,
recomposition of the perturbed primitives and the consistency loss."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericError

DEFAULT_EPSILONS = (0.0, 0.005, 0.05, 0.5)
DEFAULT_NOISE_K = 16 / 255


@dataclass
class PerturbationConfig:
    epsilon_list: list = field(default_factory=lambda: list(DEFAULT_EPSILONS))
    noise_k: float = DEFAULT_NOISE_K
    enabled: bool = True

    def __post_init__(self):
        self.epsilon_list = [float(e) for e in self.epsilon_list]
        if not self.epsilon_list:
            raise ContractError("epsilon_list must not be empty")
        if any(e < 0 for e in self.epsilon_list):
            raise ContractError("epsilon values must be non-negative")
        if self.noise_k < 0:
            raise ContractError("noise_k must be non-negative")


def gaussian_jitter(f, k, rng):
    f = np.asarray(f)
    if k < 0:
        raise ContractError("noise coefficient k must be >= 0")
    if k == 0:
        return f.copy()
    return (f + k * rng.standard_normal(f.shape)).astype(f.dtype)


def sample_epsilon(config, rng):
    return config.epsilon_list[int(rng.integers(len(config.epsilon_list)))]


def _clamp_step(f_adv, f_prime, eps):
    """Pull any coordinate whose rounded step overshoots ``eps`` back by one ulp."""
    for _ in range(8):
        over = np.abs(f_adv.astype(np.float64) - f_prime.astype(np.float64)) > eps
        if not over.any():
            break
        f_adv = np.where(over, np.nextafter(f_adv, f_prime), f_adv)
    return f_adv


def fgsm_attack(f_prime, labels, scorer, eps, branch="feature"):
    """``f_prime + eps * sign(grad_f CE(scorer(f), labels))``.

    ``scorer(graph, x_node)`` must return logits built on ``graph``; the
    gradient is taken with respect to the feature only, on a private graph,
    so no parameter is touched. sign(0) is 0.
    """
    f_prime = np.asarray(f_prime, dtype=ad.get_dtype())
    if eps == 0:
        return f_prime.copy()
    g = ad.Graph()
    x = g.leaf(f_prime, requires_grad=True, kind=f"{branch}_feature")
    try:
        loss = ad.softmax_cross_entropy(scorer(g, x), labels)
        g.backward(loss)
    except NumericError as exc:
        raise NumericError(f"attack on {branch} branch: {exc}") from exc
    grad = g.grad(x)
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"attack on {branch} branch: non-finite gradient")
    # step in float64 so eps itself is not rounded to the feature dtype
    f_adv = (f_prime.astype(np.float64) + eps * np.sign(grad).astype(np.float64)).astype(f_prime.dtype)
    return _clamp_step(f_adv, f_prime, eps)


def primitive_scorer(model, branch, inv_tau):
    """Attack objective for the attribute (``"a"``) or object (``"o"``) branch."""

    def scorer(graph, x):
        net = model.bind(graph, requires_grad=False)
        text = net.attr_text() if branch == "a" else net.obj_text()
        return net.score(branch, x, text, inv_tau)

    return scorer


def perturbed_forward(net, f_a, f_o, attr_labels, obj_labels, config, rng, inv_tau, frozen=None):
    """Jitter then attack both clean primitives and recompose them.

    ``f_a``/``f_o`` are nodes on ``net.graph``; the returned adversarial
    primitives keep a gradient path to them (the perturbation itself is a
    constant offset). One epsilon is drawn per call and shared by both
    primitives. Returns ``(f_a_adv, f_o_adv, f_cp_adv, eps)``.

    ``frozen`` is for finite-difference checks: offsets already in the dict
    are reused, missing ones are computed and stored.
    """
    eps = sample_epsilon(config, rng)
    out = []
    for branch, f, labels in (("a", f_a, attr_labels), ("o", f_o, obj_labels)):
        jittered = gaussian_jitter(f.value, config.noise_k, rng)
        key = f"offset_{branch}"
        if frozen is not None and key in frozen:
            adv = (f.value.astype(np.float64) + frozen[key]).astype(f.value.dtype)
        else:
            adv = fgsm_attack(jittered, labels, primitive_scorer(net.model, branch, inv_tau), eps, branch)
            if np.max(np.abs(adv.astype(np.float64) - jittered.astype(np.float64)), initial=0.0) > eps:
                raise NumericError(f"attack on {branch} branch exceeded the epsilon bound")
            if frozen is not None:
                frozen[key] = adv.astype(np.float64) - f.value.astype(np.float64)
        out.append(ad.offset_to(f, adv))
    f_a_adv, f_o_adv = out
    return f_a_adv, f_o_adv, net.fuse(f_a_adv, f_o_adv), eps


def consistency_loss(clean_logits, adv_logits, labels, p_clean=None):
    """CE on the perturbed composed logits plus KL(clean || perturbed).

    The clean distribution is a fixed target; no gradient reaches the clean
    path. ``p_clean`` overrides that target (finite-difference checks hold it
    fixed). Returns ``(total, ce, kl, p_clean)``.
    """
    if clean_logits.shape[-1] == 0:
        raise ContractError("empty candidate set")
    if clean_logits.shape != adv_logits.shape:
        raise ContractError(f"logit shapes differ: {clean_logits.shape} vs {adv_logits.shape}")
    ce = ad.softmax_cross_entropy(adv_logits, labels)
    if p_clean is None:
        z = clean_logits.value.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        p_clean = np.exp(z)
        p_clean /= p_clean.sum(axis=-1, keepdims=True)
    kl = ad.kl_divergence(p_clean, ad.softmax(adv_logits))
    return ce + kl, ce, kl, p_clean
