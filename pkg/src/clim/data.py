"""Examples, featurization, the synthetic two-domain benchmark, and batch assembly."""

import hashlib
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .core import ContractError

DOMAINS = ("source", "target")


class FormatError(ValueError):
    """A JSONL line does not follow the expected record layout."""


@dataclass
class Example:
    id: str
    domain: str
    text: str = None
    features: np.ndarray = None
    label: int = None
    aug_payload: object = None

    def __post_init__(self):
        if (self.text is None) == (self.features is None):
            raise ContractError(f"example {self.id!r} needs exactly one of text/features")
        if self.domain not in DOMAINS:
            raise ContractError(f"example {self.id!r} has unknown domain {self.domain!r}")
        if self.label is not None and self.label not in (0, 1):
            raise ContractError(f"example {self.id!r} label must be 0 or 1")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)


@dataclass(frozen=True)
class DomainPreset:
    name: str
    labeled: int
    unlabeled: int
    ratio: float

    def __post_init__(self):
        if self.labeled <= 0 or self.unlabeled <= 0 or self.ratio <= 0:
            raise ContractError("preset counts and ratio must be positive")
        if self.labeled % 2:
            raise ContractError("labeled count must be even (balanced classes)")

    @property
    def unlabeled_positive(self):
        return int(math.floor(self.unlabeled * self.ratio / (1.0 + self.ratio) + 0.5))

    @property
    def unlabeled_negative(self):
        return self.unlabeled - self.unlabeled_positive


PRESETS = {
    "books": DomainPreset("books", 2000, 6000, 6.43),
    "dvd": DomainPreset("dvd", 2000, 34741, 7.39),
    "electronics": DomainPreset("electronics", 2000, 13153, 3.65),
    "kitchen": DomainPreset("kitchen", 2000, 16785, 4.61),
    "airlines": DomainPreset("airlines", 2000, 39396, 1.15),
}


@dataclass(frozen=True)
class ShiftParams:
    rotation_deg: float = 30.0
    translation: float = 0.5
    scale: float = 1.0
    separation: float = 2.0
    sigma: float = 1.0
    dim: int = 16

    def __post_init__(self):
        if self.scale == 0:
            raise ContractError("shift scale 0 is not invertible")
        if self.dim < 2:
            raise ContractError("feature dim must be >= 2")
        if self.sigma < 0:
            raise ContractError("sigma must be non-negative")


@dataclass
class Pool:
    """Array view of a set of examples from one domain."""

    ids: list
    X: np.ndarray
    domain: str
    labels: np.ndarray = None
    texts: list = None
    aug: dict = field(default_factory=dict)
    latent_labels: np.ndarray = None

    def __len__(self):
        return len(self.ids)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return Pool(
            ids=[self.ids[i] for i in idx],
            X=self.X[idx],
            domain=self.domain,
            labels=None if self.labels is None else self.labels[idx],
            texts=None if self.texts is None else [self.texts[i] for i in idx],
            aug={self.ids[i]: self.aug[self.ids[i]] for i in idx if self.ids[i] in self.aug},
            latent_labels=None if self.latent_labels is None else self.latent_labels[idx],
        )


# ---------------------------------------------------------------------------
# featurization
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text):
    return _TOKEN.findall(text.lower())


def _hash_token(token, hash_seed):
    key = int(hash_seed).to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def hashed_counts(tokens, dim, hash_seed=0):
    """Signed bucket counts before normalisation."""
    if dim < 2:
        raise ContractError("dim must be >= 2")
    v = np.zeros(dim)
    for tok in tokens:
        h = _hash_token(tok, hash_seed)
        v[h % dim] += -1.0 if (h >> 63) & 1 else 1.0
    return v


def featurize(text, dim, hash_seed=0):
    v = hashed_counts(tokenize(text), dim, hash_seed)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

def _shift_transform(shift):
    d = shift.dim
    a = math.radians(shift.rotation_deg)
    rot = np.eye(d)
    rot[:2, :2] = [[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]
    t = np.zeros(d)
    t[:2] = shift.translation / math.sqrt(2.0)
    return shift.scale * rot, t


def _draw(rng, n_pos, n_neg, shift, transform=None):
    d = shift.dim
    labels = np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(n_neg, dtype=np.int64)])
    labels = labels[rng.permutation(labels.size)]
    means = np.zeros((labels.size, d))
    means[:, 0] = np.where(labels == 1, shift.separation / 2.0, -shift.separation / 2.0)
    X = means + shift.sigma * rng.normal(size=(labels.size, d))
    if transform is not None:
        A, t = transform
        X = X @ A.T + t
    return X, labels


def synth_generate(source, target, shift=None, seed=0):
    """Four pools: source labeled/unlabeled, target unlabeled, target test.

    Class means sit at +-separation/2 on the first axis. Target features are
    source-distributed draws mapped through ``x -> scale * R x + t`` where R
    rotates the first two axes and ``t`` points along their diagonal.
    """
    shift = ShiftParams() if shift is None else shift
    rng = np.random.default_rng(seed)
    transform = _shift_transform(shift)

    def pool(prefix, domain, n_pos, n_neg, labeled, tf):
        X, y = _draw(rng, n_pos, n_neg, shift, tf)
        ids = [f"{prefix}-{i:06d}" for i in range(len(y))]
        if labeled:
            return Pool(ids, X, domain, labels=y)
        return Pool(ids, X, domain, latent_labels=y)

    return {
        "source_labeled": pool("sl", "source", source.labeled // 2, source.labeled // 2, True, None),
        "source_unlabeled": pool(
            "su", "source", source.unlabeled_positive, source.unlabeled_negative, False, None),
        "target_unlabeled": pool(
            "tu", "target", target.unlabeled_positive, target.unlabeled_negative, False, transform),
        "target_test": pool("tt", "target", target.labeled // 2, target.labeled // 2, True, transform),
    }


def parse_preset(name):
    """Preset name from the table, or a custom ``labeled,unlabeled,ratio`` triple."""
    if name in PRESETS:
        return PRESETS[name]
    parts = name.split(",")
    if len(parts) == 3:
        try:
            return DomainPreset(name, int(parts[0]), int(parts[1]), float(parts[2]))
        except ValueError:
            pass
    raise ContractError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    kind: str = "jitter"
    sigma: float = 0.3
    drop_prob: float = 0.1
    dim: int = None
    hash_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("jitter", "token_dropout"):
            raise ContractError(f"unknown augmentation policy {self.kind!r}")
        if self.sigma < 0 or not 0 <= self.drop_prob <= 1:
            raise ContractError("sigma must be >= 0 and drop_prob in [0, 1]")


def _jitter(x, sigma, rng):
    noisy = x + sigma * rng.normal(size=x.shape)
    n0, n1 = np.linalg.norm(x), np.linalg.norm(noisy)
    if n0 == 0 or n1 == 0:
        return noisy
    return noisy * (n0 / n1)


def _augment(features, text, aug_payload, policy, rng):
    dim = policy.dim if policy.dim is not None else (None if features is None else features.size)
    if aug_payload is not None:
        if isinstance(aug_payload, str):
            if dim is None:
                raise ContractError("featurizing augmented text needs policy.dim")
            return featurize(aug_payload, dim, policy.hash_seed)
        return np.asarray(aug_payload, dtype=np.float64)
    if policy.kind == "token_dropout":
        if text is None:
            raise ContractError("token dropout needs a text payload")
        tokens = tokenize(text)
        keep = rng.random(len(tokens)) >= policy.drop_prob
        v = hashed_counts([t for t, k in zip(tokens, keep) if k], dim, policy.hash_seed)
        n = np.linalg.norm(v)
        return v / n if n > 0 else v
    if features is None:
        if text is None:
            raise ContractError("example has no payload to augment")
        features = featurize(text, dim, policy.hash_seed)
    return _jitter(features, policy.sigma, rng)


def augment(example, policy, rng):
    """Positive partner for one example; a precomputed payload wins over the policy."""
    if example.text is None and example.features is None and example.aug_payload is None:
        raise ContractError("example has no payload")
    return _augment(example.features, example.text, example.aug_payload, policy, rng)


def load_paired_augmentation(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or not isinstance(rec.get("id"), str):
                raise FormatError(f"line {lineno}: missing string field 'id'")
            extra = set(rec) - {"id", "aug_text", "aug_features"}
            has_text, has_feat = "aug_text" in rec, "aug_features" in rec
            if extra or has_text == has_feat:
                raise FormatError(f"line {lineno}: need exactly one of aug_text/aug_features")
            if rec["id"] in out:
                raise FormatError(f"line {lineno}: duplicate id {rec['id']!r}")
            if has_text:
                if not isinstance(rec["aug_text"], str):
                    raise FormatError(f"line {lineno}: aug_text must be a string")
                out[rec["id"]] = rec["aug_text"]
            else:
                out[rec["id"]] = _number_list(rec["aug_features"], lineno, "aug_features")
    return out


def attach_augmentation(pools, mapping):
    """Attach precomputed pairs to pools in place; ids not found anywhere are rejected."""
    remaining = dict(mapping)
    for pool in pools:
        for pid in pool.ids:
            if pid in remaining:
                pool.aug[pid] = remaining.pop(pid)
    if remaining:
        some = sorted(remaining)[:5]
        raise ContractError(f"{len(remaining)} augmentation ids match no example, e.g. {some}")


# ---------------------------------------------------------------------------
# batches and splits
# ---------------------------------------------------------------------------

@dataclass
class ContrastiveBatch:
    X: np.ndarray
    ids: list
    domains: list
    strategy: str
    originals: np.ndarray


def _augment_row(pool, i, policy, rng):
    text = None if pool.texts is None else pool.texts[i]
    return _augment(pool.X[i], text, pool.aug.get(pool.ids[i]), policy, rng)


def make_contrastive_batch(pools, strategy, n, policy, rng, batch_index=0):
    """Interleaved ``(x1, x1+, x2, x2+, ...)`` batch of ``2n`` rows.

    ``pools`` maps domain name to Pool. In-domain batches draw from a single
    domain, alternating by ``batch_index``; both-domain batches draw from the
    union. Sampling is without replacement inside a batch.
    """
    if n < 1:
        raise ContractError("batch size must be >= 1")
    if strategy == "in-domain":
        order = [d for d in DOMAINS if d in pools and len(pools[d]) > 0]
        if not order:
            raise ContractError("no non-empty pools")
        dom = order[batch_index % len(order)]
        if n > len(pools[dom]):
            raise ContractError(f"batch size {n} exceeds {dom} pool size {len(pools[dom])}")
        picks = [(pools[dom], int(i)) for i in rng.choice(len(pools[dom]), n, replace=False)]
    elif strategy == "both-domain":
        members = [pools[d] for d in DOMAINS if d in pools]
        total = sum(len(p) for p in members)
        if total == 0:
            raise ContractError("no non-empty pools")
        if n > total:
            raise ContractError(f"batch size {n} exceeds pooled size {total}")
        offsets = np.cumsum([0] + [len(p) for p in members])
        picks = []
        for j in rng.choice(total, n, replace=False):
            k = int(np.searchsorted(offsets, j, side="right")) - 1
            picks.append((members[k], int(j - offsets[k])))
    else:
        raise ContractError(f"unknown contrastive strategy {strategy!r}")

    dim = picks[0][0].X.shape[1]
    X = np.empty((2 * n, dim))
    ids, domains = [], []
    for k, (pool, i) in enumerate(picks):
        X[2 * k] = pool.X[i]
        X[2 * k + 1] = _augment_row(pool, i, policy, rng)
        ids += [pool.ids[i], pool.ids[i]]
        domains += [pool.domain, pool.domain]
    return ContrastiveBatch(X, ids, domains, strategy, X[0::2].copy())


def split_dev(labeled, n_dev=400, seed=0):
    """Random disjoint ``(train, dev)`` split; accepts a Pool or a list of examples."""
    size = len(labeled)
    if not 0 <= n_dev < size:
        raise ContractError(f"n_dev={n_dev} must be below the labeled size {size}")
    perm = np.random.default_rng(seed).permutation(size)
    dev_idx = np.sort(perm[:n_dev])
    train_idx = np.sort(perm[n_dev:])
    if isinstance(labeled, Pool):
        return labeled.subset(train_idx), labeled.subset(dev_idx)
    return [labeled[i] for i in train_idx], [labeled[i] for i in dev_idx]


# ---------------------------------------------------------------------------
# JSONL dataset files
# ---------------------------------------------------------------------------

def _number_list(v, lineno, key):
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise FormatError(f"line {lineno}: {key} must be a list of numbers")
    return np.asarray(v, dtype=np.float64)


def example_to_record(ex):
    rec = {"id": ex.id}
    if ex.text is not None:
        rec["text"] = ex.text
    else:
        rec["features"] = [float(x) for x in ex.features]
    rec["domain"] = ex.domain
    if ex.label is not None:
        rec["label"] = int(ex.label)
    return rec


def write_jsonl(examples, path):
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(example_to_record(ex)) + "\n")


def read_jsonl(path):
    examples = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or not isinstance(rec.get("id"), str):
                raise FormatError(f"line {lineno}: missing string field 'id'")
            extra = set(rec) - {"id", "text", "features", "domain", "label"}
            if extra:
                raise FormatError(f"line {lineno}: unknown fields {sorted(extra)}")
            if ("text" in rec) == ("features" in rec):
                raise FormatError(f"line {lineno}: need exactly one of text/features")
            if rec.get("domain") not in DOMAINS:
                raise FormatError(f"line {lineno}: domain must be 'source' or 'target'")
            label = rec.get("label")
            if label is not None and (label not in (0, 1) or isinstance(label, bool)):
                raise FormatError(f"line {lineno}: label must be 0 or 1")
            if rec["id"] in seen:
                raise FormatError(f"line {lineno}: duplicate id {rec['id']!r}")
            seen.add(rec["id"])
            if "text" in rec:
                if not isinstance(rec["text"], str):
                    raise FormatError(f"line {lineno}: text must be a string")
                examples.append(Example(rec["id"], rec["domain"], text=rec["text"], label=label))
            else:
                feats = _number_list(rec["features"], lineno, "features")
                examples.append(Example(rec["id"], rec["domain"], features=feats, label=label))
    return examples


def pool_to_examples(pool):
    out = []
    for i, pid in enumerate(pool.ids):
        label = None if pool.labels is None else int(pool.labels[i])
        if pool.texts is not None and pool.texts[i] is not None:
            out.append(Example(pid, pool.domain, text=pool.texts[i], label=label))
        else:
            out.append(Example(pid, pool.domain, features=pool.X[i], label=label))
    return out


def pool_from_examples(examples, dim=None, hash_seed=0, domain=None):
    """Featurize a list of examples into a Pool.

    Feature payloads must all share one width; ``dim`` is required when any
    example carries raw text.
    """
    if not examples:
        raise ContractError("cannot build a pool from zero examples")
    domains = {ex.domain for ex in examples}
    if domain is None:
        if len(domains) != 1:
            raise ContractError(f"examples span several domains: {sorted(domains)}")
        domain = domains.pop()
    if dim is None:
        widths = {ex.features.size for ex in examples if ex.features is not None}
        if len(widths) != 1 or any(ex.text is not None for ex in examples):
            raise ContractError("feature width is ambiguous; pass dim")
        dim = widths.pop()
    X = np.empty((len(examples), dim))
    texts = [ex.text for ex in examples]
    for i, ex in enumerate(examples):
        if ex.text is not None:
            X[i] = featurize(ex.text, dim, hash_seed)
        else:
            if ex.features.size != dim:
                raise ContractError(f"example {ex.id!r} has {ex.features.size} features, expected {dim}")
            X[i] = ex.features
    labels = [ex.label for ex in examples]
    has_labels = all(lab is not None for lab in labels)
    aug = {ex.id: ex.aug_payload for ex in examples if ex.aug_payload is not None}
    return Pool(
        ids=[ex.id for ex in examples],
        X=X,
        domain=domain,
        labels=np.asarray(labels, dtype=np.int64) if has_labels else None,
        texts=texts if any(t is not None for t in texts) else None,
        aug=aug,
    )
