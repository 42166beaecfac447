"""Class-relation operators over the joint label space of an episode.

An operator is an (N_seen+N) x (N_seen+N) matrix whose entry (m, n) weights
how much class n's prototype contributes to class m's update during graph
convolution. Rows/columns follow the episode's joint ordering: seen block
first, novel block second.

Static operators come from side information (class attributes, a taxonomy,
or a similarity file) and are plain arrays permuted per episode. Dynamic
operators are rebuilt from the current prototypes (or learnable keys) inside
the tape so gradients flow through their construction.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Matrix

BLOCKS = ("ss", "sn", "ns", "nn")

SIDE_INFO_KINDS = ("semantic_file", "taxonomy_path", "attribute_cosine")
STRUCTURAL_KINDS = ("aux_seen_self", "aux_novel_self", "identity")
DYNAMIC_KINDS = ("proto_cosine", "proto_l2", "key_attention")
KINDS = SIDE_INFO_KINDS + STRUCTURAL_KINDS + DYNAMIC_KINDS


class SideInfoError(ValueError):
    """Side-information input (file or vectors) is unusable."""


@dataclass(frozen=True)
class OperatorSpec:
    """Declarative description of one operator in the model's operator set.

    normalize requests a row softmax with a learnable temperature (init 1.0).
    blocks, when given, keeps only the listed blocks of the (already
    normalized) matrix and zeroes the rest. source points at the backing file
    for file-based kinds.
    """

    kind: str
    normalize: bool = False
    blocks: tuple | None = None
    source: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.blocks is not None:
            bad = [b for b in self.blocks if b not in BLOCKS]
            if bad:
                raise ValueError(f"unknown blocks {bad} (choose from {BLOCKS})")
            object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.kind in STRUCTURAL_KINDS and (self.normalize or self.blocks is not None):
            raise ValueError(f"{self.kind} operators are never normalized or masked")
        if self.kind == "key_attention" and self.normalize:
            raise ValueError("key_attention normalizes its attention block internally")

    @property
    def dynamic(self) -> bool:
        return self.kind in DYNAMIC_KINDS

    @property
    def needs_temperature(self) -> bool:
        return self.normalize or self.kind == "key_attention"


def taxonomy_path_similarity(edges, classes) -> np.ndarray:
    """Similarity 1 / (1 + d) from unweighted shortest-path hop counts.

    edges lists undirected parent-child pairs over a node set that must
    include every requested class; internal taxonomy nodes are allowed.
    Pairs with no connecting path get similarity 0, the d -> inf limit.
    """
    adjacency = {}
    for parent, child in edges:
        adjacency.setdefault(parent, set()).add(child)
        adjacency.setdefault(child, set()).add(parent)
    for c in classes:
        if c not in adjacency:
            raise KeyError(f"class {c!r} does not appear in the taxonomy")

    index = {c: i for i, c in enumerate(classes)}
    sim = np.zeros((len(classes), len(classes)))
    for c in classes:
        dist = {c: 0}
        frontier = deque([c])
        while frontier:
            node = frontier.popleft()
            for nxt in adjacency[node]:
                if nxt not in dist:
                    dist[nxt] = dist[node] + 1
                    frontier.append(nxt)
        for other in classes:
            if other in dist:
                sim[index[c], index[other]] = 1.0 / (1.0 + dist[other])
    np.fill_diagonal(sim, 1.0)
    return sim


def attribute_cosine(attributes, classes) -> np.ndarray:
    """Pairwise cosine similarity between class-level attribute vectors."""
    vecs = []
    for c in classes:
        if c not in attributes:
            raise KeyError(f"class {c!r} has no attribute vector")
        v = np.asarray(attributes[c], dtype=np.float64).ravel()
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise SideInfoError(f"class {c!r} has a zero attribute vector")
        vecs.append(v / norm)
    stacked = np.stack(vecs)
    sim = stacked @ stacked.T
    np.fill_diagonal(sim, 1.0)
    return sim


def build_semantic(similarity: np.ndarray, global_ids, episode_ids) -> np.ndarray:
    """Permute a global class-similarity matrix to an episode's joint ordering."""
    similarity = np.asarray(similarity, dtype=np.float64)
    if similarity.shape != (len(global_ids), len(global_ids)):
        raise ValueError(
            f"similarity shape {similarity.shape} does not match {len(global_ids)} class ids")
    index = {c: i for i, c in enumerate(global_ids)}
    perm = []
    for c in episode_ids:
        if c not in index:
            raise KeyError(f"class {c!r} missing from the similarity matrix")
        perm.append(index[c])
    return similarity[np.ix_(perm, perm)]


def auxiliary_operators(n_seen: int, n_novel: int):
    """Block-identity pair: self-connections of the seen and of the novel block."""
    total = n_seen + n_novel
    seen_self = np.zeros((total, total))
    seen_self[:n_seen, :n_seen] = np.eye(n_seen)
    novel_self = np.zeros((total, total))
    novel_self[n_seen:, n_seen:] = np.eye(n_novel)
    return seen_self, novel_self


def block_mask(total: int, n_seen: int, keep) -> np.ndarray:
    """0/1 mask over the four seen/novel blocks; rows receive, columns send."""
    mask = np.zeros((total, total))
    spans = {"s": slice(0, n_seen), "n": slice(n_seen, total)}
    for name in keep:
        if name not in BLOCKS:
            raise ValueError(f"unknown block {name!r}")
        mask[spans[name[0]], spans[name[1]]] = 1.0
    return mask


def mask_blocks(b: np.ndarray, n_seen: int, keep) -> np.ndarray:
    """Zero every block of b not listed in keep."""
    b = np.asarray(b, dtype=np.float64)
    return b * block_mask(b.shape[0], n_seen, keep)


def split_blocks(b: np.ndarray, n_seen: int) -> dict:
    """Split into four one-block operators whose sum reconstructs b exactly."""
    return {name: mask_blocks(b, n_seen, (name,)) for name in BLOCKS}


def dynamic_prototype_operator(prototypes: Matrix, kind: str) -> Matrix:
    """Operator logits from the current prototypes, differentiable through them.

    cos gives pairwise cosine similarities; l2 gives negative squared
    Euclidean distances, the standard monotone similarity logits for a
    subsequent row softmax.
    """
    if kind == "cos":
        return ad.cosine_similarity(prototypes, prototypes)
    if kind == "l2":
        sq = ad.sum_rows(ad.mul(prototypes, prototypes))
        gram = ad.matmul(prototypes, ad.transpose(prototypes))
        return ad.sub(ad.mul(gram, 2.0), ad.add(sq, ad.transpose(sq)))
    raise ValueError(f"unknown prototype operator kind {kind!r}")


def key_attention_operator(keys: Matrix, novel_features: Matrix,
                           n_seen: int, n_novel: int, inv_temperature) -> Matrix:
    """Attention operator: novel rows attend over learnable seen-class keys.

    The novel-seen block holds a row softmax of temperature-scaled cosine
    similarities between (projected) novel support means and the keys; all
    other blocks are exactly zero.
    """
    if keys.cols != novel_features.cols:
        raise ad.ShapeError(
            f"key dim {keys.cols} does not match projected feature dim {novel_features.cols}")
    attention = ad.softmax_rows(ad.cosine_similarity(novel_features, keys), inv_temperature)
    total = n_seen + n_novel
    return ad.embed_block(attention, total, total, n_seen, 0)


def normalize_operator(b: Matrix, inv_temperature) -> Matrix:
    """Row softmax with the operator's learnable temperature."""
    return ad.softmax_rows(b, inv_temperature)


def save_similarity_csv(sim: np.ndarray, class_ids, path) -> None:
    sim = np.asarray(sim, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(",".join([""] + [str(c) for c in class_ids]) + "\n")
        for cid, row in zip(class_ids, sim):
            fh.write(",".join([str(cid)] + [repr(float(v)) for v in row]) + "\n")


def load_similarity_csv(path):
    """Read a class-similarity CSV; validates squareness, finiteness, symmetry."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise SideInfoError(f"{path}: empty similarity file")
    header = lines[0].split(",")[1:]
    n = len(header)
    if len(lines) - 1 != n:
        raise SideInfoError(f"{path}: {len(lines) - 1} data rows for {n} header columns")
    sim = np.zeros((n, n))
    row_ids = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != n + 1:
            raise SideInfoError(f"{path}:{i}: expected {n + 1} fields, got {len(parts)}")
        row_ids.append(parts[0])
        try:
            sim[i - 2] = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise SideInfoError(f"{path}:{i}: non-numeric entry ({exc})") from exc
    if row_ids != header:
        raise SideInfoError(f"{path}: row ids do not match column ids")
    if not np.all(np.isfinite(sim)):
        raise SideInfoError(f"{path}: non-finite similarity entries")
    if np.max(np.abs(sim - sim.T)) > 1e-9:
        raise SideInfoError(f"{path}: similarity matrix is not symmetric within 1e-9")
    return sim, row_ids


def load_taxonomy(path):
    """Read parent<TAB>child edges, one per line; blank lines are ignored."""
    path = Path(path)
    edges = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise SideInfoError(f"{path}:{lineno}: expected 'parent<TAB>child', got {line!r}")
        edges.append((parts[0], parts[1]))
    return edges


def materialize_static(spec: OperatorSpec, seen_ids, novel_ids,
                       similarity=None, similarity_ids=None) -> np.ndarray:
    """Raw (pre-normalization, pre-mask) matrix for a static operator spec."""
    n_seen, n_novel = len(seen_ids), len(novel_ids)
    total = n_seen + n_novel
    if spec.kind == "identity":
        return np.eye(total)
    if spec.kind == "aux_seen_self":
        return auxiliary_operators(n_seen, n_novel)[0]
    if spec.kind == "aux_novel_self":
        return auxiliary_operators(n_seen, n_novel)[1]
    if spec.kind in SIDE_INFO_KINDS:
        if similarity is None or similarity_ids is None:
            raise ValueError(f"{spec.kind} operator needs a global similarity matrix")
        return build_semantic(similarity, similarity_ids, list(seen_ids) + list(novel_ids))
    raise ValueError(f"{spec.kind} is not a static operator kind")
