"""Joint-prototype classifier with graph-convolution updates over class relations.

The forward pass for one episode:

1. extract features for all support and query vectors,
2. initialize novel prototypes as per-class averages of the normalized
   support features; look up the episode's seen prototypes (learnable rows),
3. update all prototypes jointly with a normalized graph-convolution block
   driven by the configured operator set,
4. classify queries by a temperature-scaled softmax over cosine similarities
   to every updated prototype in the joint label space.

Two special-case configurations reduce the block to known baselines: pn_plus
(single identity operator, everything else frozen at identity) and dfsl_avg
(the two block-identity operators with a learnable diagonal transform on the
novel block).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import operators as ops
from .autodiff import Matrix, Parameter
from .data import Dataset, Episode, PORTION_TRAIN
from .operators import OperatorSpec

EXTRACTORS = ("identity", "linear", "mlp")
RHOS = ("identity", "relu")
THETA_FORMS = ("diagonal", "full")
SPECIAL_CASES = ("none", "pn_plus", "dfsl_avg")


@dataclass
class ModelConfig:
    d_in: int
    d: int
    extractor: str = "mlp"
    hidden: tuple = (32,)
    layers: int = 1
    rho: str = "identity"
    theta_form: str = "diagonal"
    operator_specs: tuple = ()
    tau_init: float = 1.0
    special_case: str = "none"
    key_dim: int | None = None

    def __post_init__(self):
        if self.extractor not in EXTRACTORS:
            raise ValueError(f"unknown extractor {self.extractor!r}")
        if self.rho not in RHOS:
            raise ValueError(f"unknown nonlinearity {self.rho!r}")
        if self.theta_form not in THETA_FORMS:
            raise ValueError(f"unknown transform form {self.theta_form!r}")
        if self.special_case not in SPECIAL_CASES:
            raise ValueError(f"unknown special case {self.special_case!r}")
        if self.extractor == "identity" and self.d != self.d_in:
            raise ValueError("identity extractor requires d == d_in")
        if self.layers < 1:
            raise ValueError("need at least one graph-convolution layer")
        self.hidden = tuple(self.hidden)
        self.operator_specs = tuple(
            s if isinstance(s, OperatorSpec) else OperatorSpec(**s) for s in self.operator_specs)
        if self.special_case == "pn_plus":
            if not self.operator_specs:
                self.operator_specs = (OperatorSpec("identity"),)
            if tuple(s.kind for s in self.operator_specs) != ("identity",):
                raise ValueError("pn_plus uses exactly one identity operator")
            if self.rho != "identity":
                raise ValueError("pn_plus requires the identity nonlinearity")
        elif self.special_case == "dfsl_avg":
            if not self.operator_specs:
                self.operator_specs = (OperatorSpec("aux_seen_self"), OperatorSpec("aux_novel_self"))
            if tuple(s.kind for s in self.operator_specs) != ("aux_seen_self", "aux_novel_self"):
                raise ValueError("dfsl_avg uses exactly the two block-identity operators")
            if self.rho != "identity":
                raise ValueError("dfsl_avg requires the identity nonlinearity")
        if not self.operator_specs:
            raise ValueError("operator set must not be empty")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", ()))
        d["operator_specs"] = tuple(
            OperatorSpec(
                kind=s["kind"],
                normalize=s.get("normalize", False),
                blocks=tuple(s["blocks"]) if s.get("blocks") is not None else None,
                source=s.get("source"),
            )
            for s in d.get("operator_specs", ())
        )
        return cls(**d)


@dataclass
class _OperatorState:
    spec: OperatorSpec
    theta: Parameter
    scale: Parameter
    temperature: Parameter | None = None
    keys: Parameter | None = None
    projection: Parameter | None = None
    side_info: tuple | None = None  # (similarity ndarray, class ids)


@dataclass
class ForwardResult:
    probs: Matrix                 # queries x label-space
    loss: Matrix                  # 1x1
    prototypes_initial: Matrix    # C, (N_seen+N) x d
    prototypes_updated: Matrix    # C'


class GcGPN:
    """Graph-convolutional global prototypical network over a fixed train split.

    Seen prototypes cover every train class of the dataset; an episode picks
    out the rows for its own seen label space. All learnable state lives in
    Parameter objects returned by parameters(), in stable declaration order.
    """

    def __init__(self, config: ModelConfig, dataset: Dataset, seed: int = 0):
        self.config = config
        self.seen_class_ids = dataset.train_classes
        if not self.seen_class_ids:
            raise ValueError("dataset has no train classes")
        self._seen_index = {c: i for i, c in enumerate(self.seen_class_ids)}
        rng = np.random.default_rng(seed)

        self._layers = self._init_extractor(rng)
        protos = rng.standard_normal((len(self.seen_class_ids), config.d))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        self.prototypes = Parameter(protos, name="prototypes")
        self.operators = [
            self._init_operator(i, spec, dataset, rng)
            for i, spec in enumerate(config.operator_specs)
        ]
        self.log_tau = Parameter([[np.log(config.tau_init)]], name="log_tau")

    # ---- construction -----------------------------------------------------

    def _init_extractor(self, rng):
        cfg = self.config
        if cfg.extractor == "identity":
            return []
        widths = [cfg.d_in, cfg.d] if cfg.extractor == "linear" else \
            [cfg.d_in, *cfg.hidden, cfg.d]
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            gain = 2.0 if i < len(widths) - 2 else 1.0  # He for layers feeding ReLU
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
            # small positive bias: keeps dead-ReLU samples off the exact-zero
            # feature vector, where row normalization is discontinuous
            layers.append((Parameter(w, name=f"extractor.w{i}"),
                           Parameter(np.full((1, fan_out), 0.01), name=f"extractor.b{i}")))
        return layers

    def _init_operator(self, i, spec, dataset, rng):
        cfg = self.config
        special = cfg.special_case
        d = cfg.d

        theta_form = cfg.theta_form
        theta_trainable = True
        if special == "pn_plus":
            theta_form, theta_trainable = "diagonal", False
        elif special == "dfsl_avg":
            theta_form = "diagonal"
            theta_trainable = spec.kind == "aux_novel_self"
        theta_value = np.ones((1, d)) if theta_form == "diagonal" else np.eye(d)
        theta = Parameter(theta_value, trainable=theta_trainable, name=f"op{i}.theta")

        scale = Parameter([[1.0]], trainable=special != "pn_plus", name=f"op{i}.scale")

        temperature = None
        if spec.needs_temperature:
            temperature = Parameter([[0.0]], name=f"op{i}.log_temp")  # exp(0) = 1

        keys = projection = None
        if spec.kind == "key_attention":
            key_dim = cfg.key_dim or d
            kvals = rng.standard_normal((len(self.seen_class_ids), key_dim))
            kvals /= np.linalg.norm(kvals, axis=1, keepdims=True)
            keys = Parameter(kvals, name=f"op{i}.keys")
            pvals = np.eye(d) if key_dim == d else \
                rng.standard_normal((d, key_dim)) / np.sqrt(d)
            projection = Parameter(pvals, name=f"op{i}.projection")

        side_info = None
        if spec.kind == "attribute_cosine":
            if dataset.attributes is None:
                raise ValueError("attribute_cosine operator needs class attributes")
            side_info = (ops.attribute_cosine(dataset.attributes, dataset.class_ids),
                         list(dataset.class_ids))
        elif spec.kind == "taxonomy_path":
            if not spec.source:
                raise ValueError("taxonomy_path operator needs a source file")
            edges = ops.load_taxonomy(spec.source)
            side_info = (ops.taxonomy_path_similarity(edges, dataset.class_ids),
                         list(dataset.class_ids))
        elif spec.kind == "semantic_file":
            if not spec.source:
                raise ValueError("semantic_file operator needs a source file")
            side_info = ops.load_similarity_csv(spec.source)

        return _OperatorState(spec=spec, theta=theta, scale=scale, temperature=temperature,
                              keys=keys, projection=projection, side_info=side_info)

    # ---- parameters --------------------------------------------------------

    def named_parameters(self):
        out = []
        for w, b in self._layers:
            out.extend([(w.name, w), (b.name, b)])
        out.append((self.prototypes.name, self.prototypes))
        for state in self.operators:
            out.append((state.theta.name, state.theta))
            out.append((state.scale.name, state.scale))
            if state.temperature is not None:
                out.append((state.temperature.name, state.temperature))
            if state.keys is not None:
                out.append((state.keys.name, state.keys))
                out.append((state.projection.name, state.projection))
        out.append((self.log_tau.name, self.log_tau))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def snapshot(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def restore(self, state: dict):
        for name, p in self.named_parameters():
            p.data[...] = state[name]

    # ---- forward pieces ----------------------------------------------------

    def extract_features(self, x) -> Matrix:
        """Differentiable feature map; identity extractor passes input through."""
        h = x if isinstance(x, Matrix) else Matrix(np.asarray(x, dtype=np.float64))
        if h.cols != self.config.d_in:
            raise ad.ShapeError(f"expected {self.config.d_in}-dim inputs, got {h.cols}")
        for i, (w, b) in enumerate(self._layers):
            h = ad.add(ad.matmul(h, w), b)
            if i < len(self._layers) - 1:
                h = ad.relu(h)
        return h

    def init_novel_prototypes(self, episode: Episode) -> Matrix:
        """Average of the row-normalized support features, one row per novel class."""
        for cid in episode.novel_labels:
            if len(episode.support[cid]) == 0:
                raise ValueError(f"novel class {cid!r} has an empty support set")
        stacked = np.vstack([episode.support[c] for c in episode.novel_labels])
        z = ad.row_normalize(self.extract_features(stacked))
        k = episode.shot_count
        pool = np.kron(np.eye(episode.n_novel), np.full((1, k), 1.0 / k))
        return ad.matmul(Matrix(pool), z)

    def _episode_seen_prototypes(self, episode: Episode) -> Matrix:
        idx = [self._seen_index[c] for c in episode.seen_labels]
        return ad.gather_rows(self.prototypes, idx)

    def _materialized_operator(self, state: _OperatorState, episode: Episode,
                               normalized_protos: Matrix) -> Matrix:
        n_seen, n_novel = episode.n_seen, episode.n_novel
        total = n_seen + n_novel
        spec = state.spec
        if spec.kind in ("proto_cosine", "proto_l2"):
            kind = "cos" if spec.kind == "proto_cosine" else "l2"
            b = ops.dynamic_prototype_operator(normalized_protos, kind)
        elif spec.kind == "key_attention":
            novel = ad.slice_rows(normalized_protos, n_seen, total)
            projected = ad.matmul(novel, state.projection)
            keys = ad.gather_rows(state.keys, [self._seen_index[c] for c in episode.seen_labels])
            return ops.key_attention_operator(keys, projected, n_seen, n_novel,
                                              ad.exp(state.temperature))
        else:
            sim, sim_ids = state.side_info if state.side_info else (None, None)
            raw = ops.materialize_static(spec, episode.seen_labels, episode.novel_labels,
                                         similarity=sim, similarity_ids=sim_ids)
            b = Matrix(raw)
        if spec.normalize:
            b = ops.normalize_operator(b, ad.exp(state.temperature))
        if spec.blocks is not None:
            b = ad.mul(b, Matrix(ops.block_mask(total, n_seen, spec.blocks)))
        return b

    def graph_conv_block(self, prototypes: Matrix, episode: Episode) -> Matrix:
        """Stack of normalized graph-convolution layers over the operator set.

        Each layer renormalizes its input prototypes, pushes them through
        every operator's aggregate-transform-renormalize path, and combines
        the per-operator results with the learnable trade-off scalars.
        Dynamic operators are rebuilt from the current (normalized) layer
        input, so stacking layers re-estimates them.
        """
        c = prototypes
        for _ in range(self.config.layers):
            c_bar = ad.row_normalize(c)
            combined = None
            for state in self.operators:
                b = self._materialized_operator(state, episode, c_bar)
                transformed = ad.mul(c_bar, state.theta) if state.theta.rows == 1 else \
                    ad.matmul(c_bar, state.theta)
                term = ad.mul(ad.row_normalize(ad.matmul(b, transformed)), state.scale)
                combined = term if combined is None else ad.add(combined, term)
            c = ad.relu(combined) if self.config.rho == "relu" else combined
        return c

    def classify(self, query_features: Matrix, prototypes: Matrix) -> Matrix:
        """Softmax over temperature-scaled cosine similarities to the prototypes."""
        logits = ad.cosine_similarity(query_features, prototypes)
        return ad.softmax_rows(logits, inv_temperature=ad.exp(self.log_tau))

    # ---- full passes ---------------------------------------------------------

    def _prototype_pass(self, episode: Episode):
        seen = self._episode_seen_prototypes(episode)
        novel = self.init_novel_prototypes(episode)
        c = ad.concat_rows(seen, novel)
        return c, self.graph_conv_block(c, episode)

    def forward_episode(self, episode: Episode) -> ForwardResult:
        """Joint-label-space pass: probabilities and cross-entropy over all queries."""
        c, updated = self._prototype_pass(episode)
        zq = self.extract_features(episode.queries)
        probs = self.classify(zq, updated)
        loss = ad.cross_entropy(ad.log(probs), episode.query_labels)
        return ForwardResult(probs=probs, loss=loss, prototypes_initial=c,
                             prototypes_updated=updated)

    def forward_fsl(self, episode: Episode) -> ForwardResult:
        """Novel-only pass: the classifier softmax is restricted to novel prototypes.

        The loss uses only novel-class queries (seen queries carry no label in
        the restricted space); probabilities are returned for every query.
        """
        c, updated = self._prototype_pass(episode)
        novel_protos = ad.slice_rows(updated, episode.n_seen, episode.n_seen + episode.n_novel)
        zq = self.extract_features(episode.queries)
        probs = self.classify(zq, novel_protos)
        novel_rows = np.flatnonzero(episode.query_is_novel())
        if novel_rows.size == 0:
            raise ValueError("episode has no novel-class queries for the novel-only objective")
        picked = ad.gather_rows(probs, novel_rows)
        labels = episode.query_labels[novel_rows] - episode.n_seen
        loss = ad.cross_entropy(ad.log(picked), labels)
        return ForwardResult(probs=probs, loss=loss, prototypes_initial=c,
                             prototypes_updated=updated)

    def predict_probs(self, episode: Episode, rng=None) -> np.ndarray:
        """Inference-mode joint probabilities for every query (no recording)."""
        return self.forward_episode(episode).probs.data.copy()

    def set_seen_prototypes_from_data(self, dataset: Dataset):
        """Replace each seen prototype with its class's average normalized feature.

        This is the classical construction for extending a novel-only-trained
        prototype model to the joint label space: the per-class mean over all
        available training instances stands in for a learned prototype.
        """
        for cid in self.seen_class_ids:
            idx = dataset.portion_indices(cid, PORTION_TRAIN)
            feats = dataset.features[cid][idx]
            z = ad.row_normalize(self.extract_features(feats)).data
            self.prototypes.data[self._seen_index[cid]] = z.mean(axis=0)

    # ---- checkpointing --------------------------------------------------------

    def save_checkpoint(self, path):
        """Write config echo plus every parameter as decimal text (round-trip exact)."""
        lines = ["gcgpn checkpoint 1"]
        lines.append(json.dumps({"config": self.config.to_dict(),
                                 "seen_class_ids": list(self.seen_class_ids)}))
        for name, p in self.named_parameters():
            lines.append(f"param {name} {p.rows} {p.cols}")
            for row in p.data:
                lines.append(" ".join(repr(float(v)) for v in row))
        Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path, dataset: Dataset) -> GcGPN:
    """Rebuild a model from a checkpoint file against the dataset it was trained on."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "gcgpn checkpoint 1":
        raise ValueError(f"{path}: not a recognized checkpoint file")
    header = json.loads(lines[1])
    config = ModelConfig.from_dict(header["config"])
    model = GcGPN(config, dataset, seed=0)
    if list(model.seen_class_ids) != list(header["seen_class_ids"]):
        raise ValueError(f"{path}: checkpoint seen classes do not match the dataset's train split")

    values = {}
    i = 2
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        tag, name, rows, cols = lines[i].split()
        if tag != "param":
            raise ValueError(f"{path}: malformed checkpoint near line {i + 1}")
        rows, cols = int(rows), int(cols)
        block = [[float(v) for v in lines[i + 1 + r].split()] for r in range(rows)]
        values[name] = np.asarray(block, dtype=np.float64).reshape(rows, cols)
        i += 1 + rows
    for name, p in model.named_parameters():
        if name not in values:
            raise ValueError(f"{path}: checkpoint is missing parameter {name!r}")
        if values[name].shape != p.shape:
            raise ValueError(f"{path}: parameter {name!r} has shape {values[name].shape}, "
                             f"expected {p.shape}")
        p.data[...] = values[name]
    return model
