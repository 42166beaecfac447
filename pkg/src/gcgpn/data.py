"""Dataset model, synthetic benchmark generator, and the episodic sampler.

A dataset is a set of classes, each holding feature-vector instances and an
optional class-level attribute vector, tagged with a split (train, novel_val,
novel_test). Train classes additionally carry per-instance holdout tags so a
portion of their data can serve as seen-class validation/test queries.

Episodes are N+-way K-shot tasks: a seen/novel partition of the label space,
K support vectors per novel class, and a mixed query set labeled in the joint
ordering seen_labels ++ novel_labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "novel_val", "novel_test")

# per-instance holdout codes for train-split classes
PORTION_TRAIN, PORTION_VAL, PORTION_TEST = 0, 1, 2


class SamplingError(RuntimeError):
    """Episode could not be sampled from the given dataset."""


class DatasetFormatError(ValueError):
    """Dataset files on disk are malformed or inconsistent."""


@dataclass
class Dataset:
    class_ids: list
    features: dict            # class id -> (n_i, d_in) float64
    splits: dict              # class id -> split tag
    attributes: dict | None   # class id -> (attr_dim,) float64
    holdout: dict = field(default_factory=dict)  # class id -> (n_i,) portion codes

    def __post_init__(self):
        for cid in self.class_ids:
            if cid not in self.features:
                raise DatasetFormatError(f"class {cid!r} has no feature rows")
            if self.splits.get(cid) not in SPLITS:
                raise DatasetFormatError(f"class {cid!r} has unknown split {self.splits.get(cid)!r}")
            if cid not in self.holdout:
                self.holdout[cid] = np.zeros(len(self.features[cid]), dtype=np.int64)
        if set(self.splits) != set(self.class_ids):
            raise DatasetFormatError("split tags do not partition the class ids")
        dims = {f.shape[1] for f in self.features.values()}
        if len(dims) != 1:
            raise DatasetFormatError(f"inconsistent feature dimensions: {sorted(dims)}")
        if self.attributes is not None:
            adims = {a.shape[-1] for a in self.attributes.values()}
            if len(adims) != 1:
                raise DatasetFormatError(f"inconsistent attribute dimensions: {sorted(adims)}")

    @property
    def d_in(self) -> int:
        return next(iter(self.features.values())).shape[1]

    @property
    def attr_dim(self):
        if self.attributes is None:
            return None
        return next(iter(self.attributes.values())).shape[-1]

    def classes_in_split(self, split: str) -> list:
        return [c for c in self.class_ids if self.splits[c] == split]

    @property
    def train_classes(self) -> list:
        return self.classes_in_split("train")

    def portion_indices(self, cid, portion: int) -> np.ndarray:
        return np.flatnonzero(self.holdout[cid] == portion)


@dataclass
class Episode:
    seen_labels: list
    novel_labels: list
    support: dict             # novel class id -> (K, d_in)
    queries: np.ndarray       # (q, d_in)
    query_labels: np.ndarray  # (q,) indices into seen_labels ++ novel_labels
    shot_count: int

    @property
    def n_seen(self) -> int:
        return len(self.seen_labels)

    @property
    def n_novel(self) -> int:
        return len(self.novel_labels)

    @property
    def joint_labels(self) -> list:
        return list(self.seen_labels) + list(self.novel_labels)

    def query_is_novel(self) -> np.ndarray:
        return self.query_labels >= self.n_seen


@dataclass
class EpisodeConfig:
    """Shape of one sampled episode: N-way K-shot with Q novel and B seen queries per class."""

    n_novel: int = 5
    k_shot: int = 1
    q_novel: int = 6
    b_seen: int = 1

    def __post_init__(self):
        if self.n_novel < 1 or self.k_shot < 1 or self.q_novel < 1 or self.b_seen < 0:
            raise ValueError(f"invalid episode shape {self}")


def _draw(rng: np.random.Generator, pool: np.ndarray, count: int) -> np.ndarray:
    return rng.choice(pool, size=count, replace=False)


def _sample_class_instances(ds, cid, pool, k_shot, q_novel, rng):
    if len(pool) < k_shot + q_novel:
        raise SamplingError(
            f"class {cid!r} has {len(pool)} sampleable instances, "
            f"needs K+Q = {k_shot + q_novel}"
        )
    support_idx = _draw(rng, pool, k_shot)
    rest = np.setdiff1d(pool, support_idx)
    query_idx = _draw(rng, rest, q_novel)
    feats = ds.features[cid]
    return feats[support_idx], feats[query_idx]


def _assemble(seen_labels, novel_labels, support, novel_queries, seen_queries, k_shot):
    n_seen = len(seen_labels)
    blocks, labels = [], []
    for i, cid in enumerate(novel_labels):
        blocks.append(novel_queries[cid])
        labels.extend([n_seen + i] * len(novel_queries[cid]))
    for j, cid in enumerate(seen_labels):
        blocks.append(seen_queries[cid])
        labels.extend([j] * len(seen_queries[cid]))
    queries = np.vstack(blocks) if blocks else np.zeros((0, 0))
    return Episode(
        seen_labels=list(seen_labels),
        novel_labels=list(novel_labels),
        support=support,
        queries=queries,
        query_labels=np.asarray(labels, dtype=np.int64),
        shot_count=k_shot,
    )


def sample_train_episode(ds: Dataset, cfg: EpisodeConfig, rng: np.random.Generator) -> Episode:
    """Sample a training episode: N fake-novel classes drawn from the train split.

    The remaining train classes form the episode's seen label space. Support
    and novel queries are disjoint draws from each fake-novel class; every
    seen class contributes b_seen queries. Only train-portion instances are
    touched, so holdout data never leaks into training.
    """
    train = ds.train_classes
    if len(train) < cfg.n_novel + 1:
        raise SamplingError(f"{len(train)} train classes cannot host N={cfg.n_novel} novel + seen")
    novel_pos = _draw(rng, np.arange(len(train)), cfg.n_novel)
    novel_labels = [train[i] for i in novel_pos]
    chosen = set(novel_labels)
    seen_labels = [c for c in train if c not in chosen]

    support, novel_queries = {}, {}
    for cid in novel_labels:
        pool = ds.portion_indices(cid, PORTION_TRAIN)
        support[cid], novel_queries[cid] = _sample_class_instances(
            ds, cid, pool, cfg.k_shot, cfg.q_novel, rng)

    seen_queries = {}
    for cid in seen_labels:
        pool = ds.portion_indices(cid, PORTION_TRAIN)
        if len(pool) < cfg.b_seen:
            raise SamplingError(f"class {cid!r} has {len(pool)} train instances, needs B = {cfg.b_seen}")
        seen_queries[cid] = ds.features[cid][_draw(rng, pool, cfg.b_seen)] if cfg.b_seen else \
            np.zeros((0, ds.d_in))

    return _assemble(seen_labels, novel_labels, support, novel_queries, seen_queries, cfg.k_shot)


def sample_test_episode(ds: Dataset, pool: str, cfg: EpisodeConfig, rng: np.random.Generator) -> Episode:
    """Sample a meta-test episode: the seen label space is all train classes.

    Novel classes come from the requested pool (novel_val or novel_test) and
    use all of their instances; seen queries are drawn from the matching
    held-out portion of each train class.
    """
    if pool not in ("novel_val", "novel_test"):
        raise ValueError(f"unknown novel pool {pool!r}")
    candidates = ds.classes_in_split(pool)
    if len(candidates) < cfg.n_novel:
        raise SamplingError(f"pool {pool!r} has {len(candidates)} classes, needs N = {cfg.n_novel}")
    novel_pos = _draw(rng, np.arange(len(candidates)), cfg.n_novel)
    novel_labels = [candidates[i] for i in novel_pos]
    seen_labels = ds.train_classes

    support, novel_queries = {}, {}
    for cid in novel_labels:
        all_idx = np.arange(len(ds.features[cid]))
        support[cid], novel_queries[cid] = _sample_class_instances(
            ds, cid, all_idx, cfg.k_shot, cfg.q_novel, rng)

    portion = PORTION_VAL if pool == "novel_val" else PORTION_TEST
    seen_queries = {}
    for cid in seen_labels:
        held = ds.portion_indices(cid, portion)
        if len(held) < cfg.b_seen:
            raise SamplingError(
                f"class {cid!r} holds out {len(held)} instances for {pool!r} queries, "
                f"needs B = {cfg.b_seen}")
        seen_queries[cid] = ds.features[cid][_draw(rng, held, cfg.b_seen)] if cfg.b_seen else \
            np.zeros((0, ds.d_in))

    return _assemble(seen_labels, novel_labels, support, novel_queries, seen_queries, cfg.k_shot)


def generate_synthetic(
    n_train: int = 64,
    n_novel_val: int = 16,
    n_novel_test: int = 20,
    d_attr: int = 16,
    d_in: int = 32,
    per_class: int = 50,
    noise_scale: float = 0.25,
    seed: int = 0,
    val_fraction: float = 0.10,
    test_fraction: float = 0.25,
) -> Dataset:
    """Generate a desk-scale benchmark with ground-truth class attributes.

    Every class is an attribute vector sampled on the unit sphere; instances
    are its image under one fixed random affine map into d_in dimensions plus
    isotropic Gaussian noise. Class attributes therefore carry exact side
    information about class geometry, which the operator builders can exploit.
    """
    if min(n_train, n_novel_val, n_novel_test, d_attr, d_in, per_class) <= 0:
        raise ValueError("all synthetic benchmark counts must be positive")
    rng = np.random.default_rng(seed)
    n_classes = n_train + n_novel_val + n_novel_test
    class_ids = [f"c{i:03d}" for i in range(n_classes)]
    splits = {}
    for i, cid in enumerate(class_ids):
        if i < n_train:
            splits[cid] = "train"
        elif i < n_train + n_novel_val:
            splits[cid] = "novel_val"
        else:
            splits[cid] = "novel_test"

    attrs = rng.standard_normal((n_classes, d_attr))
    attrs /= np.linalg.norm(attrs, axis=1, keepdims=True)
    affine = rng.standard_normal((d_attr, d_in)) / np.sqrt(d_attr)
    offset = 0.1 * rng.standard_normal(d_in)

    n_test = int(round(per_class * test_fraction))
    n_val = int(round(per_class * val_fraction))
    if n_test + n_val >= per_class:
        raise ValueError("holdout fractions leave no training instances")
    portions = np.array(
        [PORTION_TRAIN] * (per_class - n_val - n_test)
        + [PORTION_VAL] * n_val
        + [PORTION_TEST] * n_test,
        dtype=np.int64,
    )

    features, attributes, holdout = {}, {}, {}
    for i, cid in enumerate(class_ids):
        mean = attrs[i] @ affine + offset
        noise = noise_scale * rng.standard_normal((per_class, d_in))
        features[cid] = mean + noise
        attributes[cid] = attrs[i].copy()
        holdout[cid] = portions.copy() if splits[cid] == "train" else \
            np.zeros(per_class, dtype=np.int64)

    return Dataset(class_ids=class_ids, features=features, splits=splits,
                   attributes=attributes, holdout=holdout)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(ds: Dataset, path) -> None:
    """Write a dataset directory: meta.json, features.csv, attributes.csv."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "class_ids": list(ds.class_ids),
        "splits": {c: ds.splits[c] for c in ds.class_ids},
        "d_in": ds.d_in,
        "attr_dim": ds.attr_dim,
        "counts": {c: int(len(ds.features[c])) for c in ds.class_ids},
        "holdout": {c: [int(v) for v in ds.holdout[c]] for c in ds.class_ids},
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=1))
    with open(root / "features.csv", "w") as fh:
        for cid in ds.class_ids:
            for row in ds.features[cid]:
                fh.write(",".join([str(cid)] + [_fmt(v) for v in row]) + "\n")
    if ds.attributes is not None:
        with open(root / "attributes.csv", "w") as fh:
            for cid in ds.class_ids:
                fh.write(",".join([str(cid)] + [_fmt(v) for v in ds.attributes[cid]]) + "\n")


def _parse_numeric_row(line: str, lineno: int, path, expect: int):
    parts = line.rstrip("\n").split(",")
    if len(parts) != expect + 1:
        raise DatasetFormatError(
            f"{path}:{lineno}: expected {expect + 1} comma-separated fields, got {len(parts)}")
    try:
        values = [float(v) for v in parts[1:]]
    except ValueError as exc:
        raise DatasetFormatError(f"{path}:{lineno}: non-numeric value ({exc})") from exc
    return parts[0], values


def load_dataset(path) -> Dataset:
    """Load a dataset directory written by save_dataset; round-trips bit-exactly."""
    root = Path(path)
    meta_path = root / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{meta_path}: missing")
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{meta_path}:{exc.lineno}: malformed JSON ({exc.msg})")
    for key in ("class_ids", "splits", "d_in", "counts", "holdout"):
        if key not in meta:
            raise DatasetFormatError(f"{meta_path}: missing key {key!r}")
    class_ids = list(meta["class_ids"])
    d_in = int(meta["d_in"])
    for cid in class_ids:
        if meta["splits"].get(cid) not in SPLITS:
            raise DatasetFormatError(
                f"{meta_path}: class {cid!r} has unknown split {meta['splits'].get(cid)!r}")

    rows = {cid: [] for cid in class_ids}
    feat_path = root / "features.csv"
    with open(feat_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            cid, values = _parse_numeric_row(line, lineno, feat_path, d_in)
            if cid not in rows:
                raise DatasetFormatError(f"{feat_path}:{lineno}: unknown class {cid!r}")
            rows[cid].append(values)
    features = {}
    for cid in class_ids:
        if len(rows[cid]) != meta["counts"][cid]:
            raise DatasetFormatError(
                f"{feat_path}: class {cid!r} has {len(rows[cid])} rows, meta says {meta['counts'][cid]}")
        features[cid] = np.asarray(rows[cid], dtype=np.float64)

    attributes = None
    attr_path = root / "attributes.csv"
    if attr_path.exists():
        attributes = {}
        attr_dim = meta.get("attr_dim")
        with open(attr_path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                cid, values = _parse_numeric_row(line, lineno, attr_path, int(attr_dim))
                if cid not in rows:
                    raise DatasetFormatError(f"{attr_path}:{lineno}: unknown class {cid!r}")
                attributes[cid] = np.asarray(values, dtype=np.float64)
        missing = [c for c in class_ids if c not in attributes]
        if missing:
            raise DatasetFormatError(f"{attr_path}: no attribute row for class {missing[0]!r}")

    holdout = {cid: np.asarray(meta["holdout"][cid], dtype=np.int64) for cid in class_ids}
    return Dataset(class_ids=class_ids, features=features,
                   splits=dict(meta["splits"]), attributes=attributes, holdout=holdout)
