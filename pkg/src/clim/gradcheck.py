"""Randomised finite-difference checks for every loss and both composed step objectives."""

import numpy as np

from .core import grad_check, softmax
from .losses import LossConfig, domain_ce, info_nce, mi_loss, mi_terms, sentiment_ce, total_loss
from .model import ModelSpec, classify, domain_logits, encode, init_params, project

TOLERANCE = 1e-4

SMALL_SPEC = ModelSpec(
    input_dim=4, encoder_hidden=(5,), encoder_out=4, proj_hidden=4, proj_out=3,
    classifier_hidden=3, n_classes=2, domain_hidden=3, with_domain_head=True,
)


def _small_params(rng):
    params = init_params(SMALL_SPEC, int(rng.integers(2**31)))
    # non-zero biases so kinks are not aligned with the origin
    return {k: v + (0.1 * rng.normal(size=v.shape) if ".b" in k else 0.0)
            for k, v in params.tensors.items()}


def check_info_nce(rng, eps):
    n = int(rng.integers(2, 5))
    z = rng.normal(size=(2 * n, int(rng.integers(2, 6))))
    tau = float(rng.uniform(0.05, 1.0))
    return grad_check(lambda p: info_nce(p["z"], tau), {"z": z}, eps)


def check_sentiment_ce(rng, eps):
    m, c = int(rng.integers(1, 7)), int(rng.integers(2, 4))
    logits = 2.0 * rng.normal(size=(m, c))
    labels = rng.integers(0, c, size=m)
    return grad_check(lambda p: sentiment_ce(p["logits"], labels), {"logits": logits}, eps)


def check_domain_ce(rng, eps):
    m = int(rng.integers(1, 7))
    logits = 2.0 * rng.normal(size=(m, 2))
    labels = rng.integers(0, 2, size=m)
    return grad_check(lambda p: domain_ce(p["logits"], labels), {"logits": logits}, eps)


def _mi_logits(rng):
    m = int(rng.integers(2, 8))
    logits = 1.5 * rng.normal(size=(m, 2))
    # about half the instances are skewed so the marginal term is active
    if rng.random() < 0.5:
        logits[:, 0] += 2.5
    return logits


def check_mi_gated(rng, eps):
    cfg = LossConfig()
    logits = _mi_logits(rng)
    return grad_check(lambda p: mi_loss(softmax(p["logits"]), cfg), {"logits": logits}, eps)


def check_mi_ungated(rng, eps):
    cfg = LossConfig(mi_gate=False)
    logits = _mi_logits(rng)
    return grad_check(lambda p: mi_loss(softmax(p["logits"]), cfg), {"logits": logits}, eps)


def check_clim_step(rng, eps):
    cfg = LossConfig(temperature=float(rng.uniform(0.1, 1.0)), mi_gate=bool(rng.random() < 0.5))
    params = _small_params(rng)
    params = {k: v for k, v in params.items() if not k.startswith("dom.")}
    x_con = rng.normal(size=(4, SMALL_SPEC.input_dim))
    x_lab = rng.normal(size=(3, SMALL_SPEC.input_dim))
    y_lab = rng.integers(0, 2, size=3)
    x_unl = rng.normal(size=(4, SMALL_SPEC.input_dim))

    def objective(p):
        l_con = info_nce(project(p, encode(p, x_con)), cfg.temperature)
        l_sent = sentiment_ce(classify(p, encode(p, x_lab)), y_lab)
        l_mi = mi_loss(softmax(classify(p, encode(p, x_unl))), cfg)
        return total_loss(l_con, l_sent, l_mi, cfg)

    return grad_check(objective, params, eps)


def check_dann_step(rng, eps):
    """Tape gradient of the reversed objective against its min-max surrogate.

    Below the reversal the tape must equal the gradient of
    ``sent - lam * dom``; the domain head sees the plain ``dom`` gradient.
    """
    lam = float(rng.uniform(0.05, 1.0))
    params = _small_params(rng)
    x_lab = rng.normal(size=(3, SMALL_SPEC.input_dim))
    y_lab = rng.integers(0, 2, size=3)
    x_dom = rng.normal(size=(4, SMALL_SPEC.input_dim))
    d_lab = np.array([0, 0, 1, 1])

    def sent(p):
        return sentiment_ce(classify(p, encode(p, x_lab)), y_lab)

    def dom(p):
        return domain_ce(domain_logits(p, encode(p, x_dom), lam), d_lab)

    def objective(p):
        return total_loss(0.0, sent(p), dom(p), LossConfig(lambda_con=0.0))

    below = [k for k in params if not k.startswith("dom.")]
    head = [k for k in params if k.startswith("dom.")]
    e1 = grad_check(objective, params, eps, fd_fn=lambda p: sent(p) - lam * dom(p), wrt=below)
    e2 = grad_check(objective, params, eps, fd_fn=lambda p: sent(p) + dom(p), wrt=head)
    return max(e1, e2)


CHECKS = {
    "info_nce": check_info_nce,
    "sentiment_ce": check_sentiment_ce,
    "domain_ce": check_domain_ce,
    "mi_loss_gated": check_mi_gated,
    "mi_loss_ungated": check_mi_ungated,
    "clim_step": check_clim_step,
    "dann_step": check_dann_step,
}


def run_suite(seed=0, eps=1e-5, instances=20, names=None):
    """Max relative error per check over ``instances`` seeded random instances."""
    out = {}
    for i, name in enumerate(CHECKS if names is None else names):
        worst = 0.0
        for k in range(instances):
            rng = np.random.default_rng([seed, i, k])
            worst = max(worst, CHECKS[name](rng, eps))
        out[name] = worst
    return out


def gate_coverage(seed=0, instances=20):
    """How many gated-MI instances had the marginal term active."""
    cfg = LossConfig()
    i = list(CHECKS).index("mi_loss_gated")
    active = 0
    for k in range(instances):
        rng = np.random.default_rng([seed, i, k])
        logits = _mi_logits(rng)
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        active += mi_terms(p, cfg)[2]
    return active
