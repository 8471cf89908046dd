"""Accuracy, prediction-balance and margin diagnostics, plus the ablation grid."""

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import ContractError
from .data import Pool, pool_from_examples
from .model import predict_proba


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    loss_total: float
    loss_con: float
    loss_sent: float
    loss_mi: float
    lr: float
    dann_lambda: float = None
    dev_accuracy: float = None
    target_accuracy: float = None
    marginal_entropy: float = None
    mean_margin: float = None


def _features(examples):
    if isinstance(examples, Pool):
        return examples.X, examples.labels
    if isinstance(examples, tuple):
        X, y = examples
        return np.asarray(X, dtype=np.float64), (None if y is None else np.asarray(y))
    if not len(examples):
        raise ContractError("empty example set")
    pool = pool_from_examples(list(examples), domain=examples[0].domain)
    return pool.X, pool.labels


def _probs(params, examples):
    X, y = _features(examples)
    if X.shape[0] == 0:
        raise ContractError("empty example set")
    return predict_proba(params, X), y


def accuracy(params, examples):
    """Fraction of argmax-correct predictions; ties go to the lower class index."""
    p, y = _probs(params, examples)
    if y is None:
        raise ContractError("accuracy needs labeled examples")
    return float(np.mean(np.argmax(p, axis=1) == y))


def marginal_of(probs):
    pbar = probs.mean(axis=0)
    nz = pbar[pbar > 0]
    return pbar, float(-(nz * np.log(nz)).sum())


def prediction_marginal(params, examples):
    """Mean predicted class distribution and its entropy (nats)."""
    p, _ = _probs(params, examples)
    return marginal_of(p)


def margins_of(probs):
    if probs.shape[1] != 2:
        raise ContractError("margin is defined for two classes only")
    return np.abs(probs[:, 1] - probs[:, 0])


def margin_stats(params, examples):
    p, _ = _probs(params, examples)
    m = margins_of(p)
    return float(m.mean()), float(np.median(m))


ABLATION_GRID = (
    (False, "both-domain"),
    (True, "both-domain"),
    (False, "in-domain"),
    (True, "in-domain"),
)


def _ablation_run(args):
    from .training import train

    config, datasets, spec = args
    params, _ = train(config, datasets, spec=spec)
    return accuracy(params, datasets["target_test"])


def ablation_report(base_config, datasets, spec=None, jobs=1):
    """Target accuracy for the four MI on/off x contrastive-strategy runs.

    Row order follows the published ablation table: both-domain first, MI off
    before MI on within each strategy.
    """
    if "target_test" not in datasets:
        raise ContractError("ablation needs a labeled target test pool")
    runs = [
        (replace(base_config, system="clim", mi_enabled=mi, strategy=strategy), datasets, spec)
        for mi, strategy in ABLATION_GRID
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            accs = list(ex.map(_ablation_run, runs))
    else:
        accs = [_ablation_run(r) for r in runs]
    return [
        {"mi_loss": "on" if mi else "off", "cl_strategy": strategy, "accuracy": acc}
        for (mi, strategy), acc in zip(ABLATION_GRID, accs)
    ]


def entropy_gap(h, n_classes=2):
    return abs(math.log(n_classes) - h)
