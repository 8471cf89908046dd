"""Training loops for the source-only baseline, DANN, and CLIM."""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import AdamWState, ContractError, GradTape, adamw_step, lr_at, softmax
from .data import AugmentPolicy, make_contrastive_batch, split_dev
from .evaluation import MetricsRecord, accuracy, marginal_of, margins_of
from .losses import LossConfig, domain_ce, info_nce, mi_loss, mi_terms, sentiment_ce, total_loss
from .model import ModelParams, ModelSpec, classify, dann_lambda, domain_logits, encode, init_params, project, predict_proba

log = logging.getLogger(__name__)

SYSTEMS = ("base", "dann", "clim")
STRATEGIES = ("in-domain", "both-domain")


class NumericalError(ArithmeticError):
    def __init__(self, step, what):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    system: str = "clim"
    epochs: int = 10
    batch_size: int = 32
    labeled_batch_size: int = 32
    lr: float = 2e-5
    weight_decay: float = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_frac: float = 0.1
    strategy: str = "in-domain"
    dann_gamma: float = 1.0
    seed: int = 0
    mi_enabled: bool = True
    con_enabled: bool = True
    contrastive_labeled: bool = False
    n_dev: int = 400
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ContractError(f"system must be one of {SYSTEMS}")
        if self.strategy not in STRATEGIES:
            raise ContractError(f"strategy must be one of {STRATEGIES}")
        if self.epochs < 1 or self.batch_size < 1 or self.labeled_batch_size < 1:
            raise ContractError("epochs and batch sizes must be >= 1")
        if self.lr < 0 or self.dann_gamma <= 0:
            raise ContractError("lr must be >= 0 and dann_gamma > 0")

    @property
    def decay(self):
        if self.weight_decay is not None:
            return self.weight_decay
        return 1e-4 if self.system == "base" else 0.01

    @property
    def uses_con(self):
        return self.system == "clim" and self.con_enabled and self.loss.lambda_con > 0

    @property
    def uses_mi(self):
        return self.system == "clim" and self.mi_enabled


@dataclass
class TrainState:
    params: ModelParams
    opt: AdamWState
    t: int
    total_steps: int

    @property
    def progress(self):
        return self.t / self.total_steps


def _apply(state, tape, leaves, objective, lr):
    names = list(leaves)
    grads = dict(zip(names, tape.gradient(objective, [leaves[k] for k in names])))
    new_tensors, new_opt = adamw_step(state.opt, state.params.tensors, grads, lr)
    return TrainState(state.params.replace(new_tensors), new_opt, state.t + 1, state.total_steps), grads


def train_step_clim(state, labeled_batch, contrastive_batch, unlabeled_batch, cfg):
    """One joint update on the labeled, contrastive and unlabeled batches.

    Pass ``None`` for a batch to drop its objective (ablation). The
    contrastive batch is a ContrastiveBatch or a plain ``2N x d`` array in
    pair layout; the unlabeled batch is a feature array.
    """
    lr = lr_at(state.t, state.total_steps, cfg.lr, cfg.warmup_frac)
    tape = GradTape()
    leaves = {k: tape.leaf(v) for k, v in state.params.tensors.items()}

    X_l, y_l = labeled_batch
    l_sent = sentiment_ce(classify(leaves, encode(leaves, X_l)), y_l)

    l_con = 0.0
    if contrastive_batch is not None:
        Xc = getattr(contrastive_batch, "X", contrastive_batch)
        l_con = info_nce(project(leaves, encode(leaves, Xc)), cfg.loss.temperature)

    l_mi, h_marg = 0.0, float("nan")
    if unlabeled_batch is not None:
        probs = softmax(classify(leaves, encode(leaves, unlabeled_batch)))
        l_mi = mi_loss(probs, cfg.loss)
        _, h_marg, _ = mi_terms(probs.value, cfg.loss)

    objective = total_loss(l_con, l_sent, l_mi, cfg.loss)
    new_state, grads = _apply(state, tape, leaves, objective, lr)
    losses = {
        "total": float(objective.value),
        "con": float(getattr(l_con, "value", l_con)),
        "sent": float(l_sent.value),
        "mi": float(getattr(l_mi, "value", l_mi)),
        "lr": lr,
        "dann_lambda": None,
        "marginal_entropy": h_marg,
        "grad_norm": math.sqrt(sum(float((g * g).sum()) for g in grads.values())),
    }
    return new_state, losses


def train_step_dann(state, labeled_batch, mixed_domain_batch, cfg):
    """Sentiment CE plus domain CE behind a gradient reversal scaled by the schedule."""
    lr = lr_at(state.t, state.total_steps, cfg.lr, cfg.warmup_frac)
    lam = dann_lambda(state.progress, cfg.dann_gamma)
    tape = GradTape()
    leaves = {k: tape.leaf(v) for k, v in state.params.tensors.items()}

    X_l, y_l = labeled_batch
    l_sent = sentiment_ce(classify(leaves, encode(leaves, X_l)), y_l)
    X_d, d_labels = mixed_domain_batch
    l_dom = domain_ce(domain_logits(leaves, encode(leaves, X_d), lam), d_labels)
    objective = total_loss(0.0, l_sent, l_dom, replace(cfg.loss, lambda_con=0.0))
    new_state, grads = _apply(state, tape, leaves, objective, lr)
    losses = {
        "total": float(objective.value),
        "con": 0.0,
        "sent": float(l_sent.value),
        "mi": 0.0,
        "domain": float(l_dom.value),
        "lr": lr,
        "dann_lambda": lam,
        "marginal_entropy": float("nan"),
        "grad_norm": math.sqrt(sum(float((g * g).sum()) for g in grads.values())),
    }
    return new_state, losses


def _unlabeled_sample(pools, n, rng):
    parts = []
    for pool in pools:
        if n > len(pool):
            raise ContractError(f"batch size {n} exceeds {pool.domain} unlabeled pool size {len(pool)}")
        parts.append(pool.X[rng.choice(len(pool), n, replace=False)])
    return np.concatenate(parts)


def _contrastive_pools(cfg, datasets, train_labeled):
    src = datasets["source_unlabeled"]
    if cfg.contrastive_labeled:
        from .data import Pool

        src = Pool(
            ids=src.ids + train_labeled.ids,
            X=np.concatenate([src.X, train_labeled.X]),
            domain="source",
            texts=None if src.texts is None and train_labeled.texts is None else
            (src.texts or [None] * len(src)) + (train_labeled.texts or [None] * len(train_labeled)),
            aug={**src.aug, **train_labeled.aug},
        )
    return {"source": src, "target": datasets["target_unlabeled"]}


def train(config, datasets, spec=None, log_steps=False):
    """Run a full training job.

    ``datasets`` maps ``source_labeled``, ``source_unlabeled`` and
    ``target_unlabeled`` (plus optionally ``target_test``) to Pools. Returns
    ``(params, history)`` with one MetricsRecord per epoch; with ``log_steps``
    the history also holds per-step records (``dev_accuracy`` left empty).
    """
    for key in ("source_labeled", "source_unlabeled", "target_unlabeled"):
        if key not in datasets or len(datasets[key]) == 0:
            raise ContractError(f"dataset pool {key!r} is missing or empty")
    labeled = datasets["source_labeled"]
    if labeled.labels is None:
        raise ContractError("source_labeled pool has no labels")
    dim = labeled.X.shape[1]
    if spec is None:
        spec = ModelSpec(input_dim=dim)
    spec = replace(spec, with_domain_head=config.system == "dann")
    if spec.input_dim != dim:
        raise ContractError(f"model input_dim {spec.input_dim} != feature dim {dim}")

    train_set, dev_set = split_dev(labeled, config.n_dev, config.seed)
    policy = config.augment if config.augment.dim is not None else replace(config.augment, dim=dim)
    target_unl = datasets["target_unlabeled"]
    test = datasets.get("target_test")
    unl_pools = [datasets["source_unlabeled"], target_unl]
    con_pools = _contrastive_pools(config, datasets, train_set) if config.uses_con else None

    labeled_rng = np.random.default_rng([config.seed, 1])
    aux_rng = np.random.default_rng([config.seed, 2])

    n_train = len(train_set)
    steps_per_epoch = math.ceil(n_train / config.labeled_batch_size)
    total = config.epochs * steps_per_epoch
    params = init_params(spec, config.seed)
    opt = AdamWState.zeros_like(
        params.tensors, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps,
        weight_decay=config.decay)
    state = TrainState(params, opt, 0, total)

    history = []
    for epoch in range(1, config.epochs + 1):
        order = labeled_rng.permutation(n_train)
        sums = {"total": 0.0, "con": 0.0, "sent": 0.0, "mi": 0.0}
        last = None
        for b in range(steps_per_epoch):
            idx = order[b * config.labeled_batch_size:(b + 1) * config.labeled_batch_size]
            lab = (train_set.X[idx], train_set.labels[idx])
            if config.system == "dann":
                X_d = _unlabeled_sample(unl_pools, config.batch_size, aux_rng)
                d_lab = np.repeat(np.array([0, 1]), config.batch_size)
                state, last = train_step_dann(state, lab, (X_d, d_lab), config)
            else:
                cb = None
                if config.uses_con:
                    cb = make_contrastive_batch(
                        con_pools, config.strategy, config.batch_size, policy, aux_rng, batch_index=state.t)
                ub = _unlabeled_sample(unl_pools, config.batch_size, aux_rng) if config.uses_mi else None
                state, last = train_step_clim(state, lab, cb, ub, config)
            if not all(np.isfinite(last[k]) for k in sums):
                raise NumericalError(state.t, "loss")
            for k in sums:
                sums[k] += last[k]
            if log_steps:
                history.append(MetricsRecord(
                    epoch=epoch, step=state.t, loss_total=last["total"], loss_con=last["con"],
                    loss_sent=last["sent"], loss_mi=last["mi"], lr=last["lr"],
                    dann_lambda=last["dann_lambda"]))

        if not all(np.all(np.isfinite(v)) for v in state.params.tensors.values()):
            raise NumericalError(state.t, "parameters")
        p_tgt = predict_proba(state.params, target_unl.X)
        _, h = marginal_of(p_tgt)
        rec = MetricsRecord(
            epoch=epoch, step=state.t,
            loss_total=sums["total"] / steps_per_epoch, loss_con=sums["con"] / steps_per_epoch,
            loss_sent=sums["sent"] / steps_per_epoch, loss_mi=sums["mi"] / steps_per_epoch,
            lr=last["lr"], dann_lambda=last["dann_lambda"],
            dev_accuracy=accuracy(state.params, dev_set) if len(dev_set) else None,
            target_accuracy=None if test is None else accuracy(state.params, test),
            marginal_entropy=h, mean_margin=float(margins_of(p_tgt).mean()),
        )
        history.append(rec)
        log.info("epoch %d step %d loss %.4f dev %s target %s", epoch, state.t, rec.loss_total,
                 rec.dev_accuracy, rec.target_accuracy)
    return state.params, history


def train_base(config, datasets, spec=None, log_steps=False):
    return train(replace(config, system="base"), datasets, spec=spec, log_steps=log_steps)


def epoch_records(history):
    """Epoch-summary rows (the ones carrying evaluation metrics)."""
    return [r for r in history if r.mean_margin is not None]
