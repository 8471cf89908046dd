"""Encoder, projection head, sentiment classifier and DANN domain head."""

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .core import ContractError, affine, grad_reverse, relu, tensor_from_dict, tensor_to_dict, value_of


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int = 16
    encoder_hidden: tuple = (128,)
    encoder_out: int = 64
    proj_hidden: int = 64
    proj_out: int = 32
    classifier_hidden: int = 32
    n_classes: int = 2
    domain_hidden: int = 32
    with_domain_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        dims = [self.input_dim, *self.encoder_hidden, self.encoder_out, self.proj_hidden,
                self.proj_out, self.classifier_hidden, self.domain_hidden]
        if any(int(d) < 1 for d in dims):
            raise ContractError("all model dimensions must be >= 1")
        if self.n_classes < 2:
            raise ContractError("n_classes must be >= 2")

    def shapes(self):
        """Ordered ``name -> (rows, cols)`` for every parameter tensor."""
        out = {}
        widths = [self.input_dim, *self.encoder_hidden, self.encoder_out]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            out[f"enc.W{i}"] = (a, b)
            out[f"enc.b{i}"] = (1, b)
        for prefix, hidden, n_out in (
            ("proj", self.proj_hidden, self.proj_out),
            ("cls", self.classifier_hidden, self.n_classes),
        ):
            out[f"{prefix}.W0"] = (self.encoder_out, hidden)
            out[f"{prefix}.b0"] = (1, hidden)
            out[f"{prefix}.W1"] = (hidden, n_out)
            out[f"{prefix}.b1"] = (1, n_out)
        if self.with_domain_head:
            out["dom.W0"] = (self.encoder_out, self.domain_hidden)
            out["dom.b0"] = (1, self.domain_hidden)
            out["dom.W1"] = (self.domain_hidden, 2)
            out["dom.b1"] = (1, 2)
        return out

    def to_dict(self):
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown model spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    spec: ModelSpec
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.spec.shapes()
        if set(shapes) != set(self.tensors):
            missing = sorted(set(shapes) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(shapes))
            raise ContractError(f"tensor names do not match spec (missing={missing}, extra={extra})")
        for name, shape in shapes.items():
            if np.shape(self.tensors[name]) != shape:
                raise ContractError(f"{name} has shape {np.shape(self.tensors[name])}, spec says {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def replace(self, tensors):
        return ModelParams(self.spec, dict(tensors))


def init_params(spec, seed):
    """Normal weights with std ``1/sqrt(fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, (rows, cols) in spec.shapes().items():
        if ".b" in name:
            tensors[name] = np.zeros((rows, cols))
        else:
            tensors[name] = rng.normal(0.0, 1.0 / math.sqrt(rows), size=(rows, cols))
    return ModelParams(spec, tensors)


def _tensors(params):
    return params.tensors if isinstance(params, ModelParams) else params


def _check_cols(x, n, what):
    cols = np.shape(value_of(x))[-1]
    if cols != n:
        raise ContractError(f"{what} expects {n} columns, got {cols}")


def _mlp(t, prefix, x):
    hidden = relu(affine(x, t[f"{prefix}.W0"], t[f"{prefix}.b0"]))
    return affine(hidden, t[f"{prefix}.W1"], t[f"{prefix}.b1"])


def encode(params, x):
    t = _tensors(params)
    _check_cols(x, np.shape(value_of(t["enc.W0"]))[0], "encoder")
    h = x
    i = 0
    while f"enc.W{i}" in t:
        h = relu(affine(h, t[f"enc.W{i}"], t[f"enc.b{i}"]))
        i += 1
    return h


def project(params, h):
    t = _tensors(params)
    _check_cols(h, np.shape(value_of(t["proj.W0"]))[0], "projection head")
    return _mlp(t, "proj", h)


def classify(params, h):
    t = _tensors(params)
    _check_cols(h, np.shape(value_of(t["cls.W0"]))[0], "classifier")
    return _mlp(t, "cls", h)


def domain_logits(params, h, lam):
    t = _tensors(params)
    if "dom.W0" not in t:
        raise ContractError("model has no domain head")
    return _mlp(t, "dom", grad_reverse(h, lam))


def dann_lambda(p, gamma):
    if not 0 <= p <= 1:
        raise ContractError("progress must lie in [0, 1]")
    if gamma <= 0:
        raise ContractError("gamma must be positive")
    return 2.0 / (1.0 + math.exp(-gamma * p)) - 1.0


def predict_proba(params, x):
    logits = classify(params, encode(params, x))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def params_to_json(params):
    doc = {
        "spec": params.spec.to_dict(),
        "tensors": {name: tensor_to_dict(params.tensors[name]) for name in params.spec.shapes()},
    }
    return json.dumps(doc, indent=1) + "\n"


def params_from_json(text):
    try:
        doc = json.loads(text)
        spec = ModelSpec.from_dict(doc["spec"])
        raw = doc["tensors"]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ContractError(f"malformed model document: {exc}") from None
    return ModelParams(spec, {k: tensor_from_dict(v) for k, v in raw.items()})


def save_params(params, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(params_to_json(params))


def load_params(path):
    with open(path, encoding="utf-8") as f:
        return params_from_json(f.read())
