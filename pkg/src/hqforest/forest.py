"""Hierarchical random forest over a patch pyramid.

Each tree consumes the coarsest layer at its root and one layer per level
below it. A decision node at layer ``r >= 2`` sends the eight octant
children of every training patch to the branch of the class it assigned to
that patch. At layer 1 nodes route the patches themselves, so several
decision levels may share the layer. Leaves summarise the voxels of the
layer-1 patches they receive.

Trees differ in their disjoint basic-feature subsets and in the SMOTE
interpolation weight. Predictions average accuracy-weighted node
probabilities over trees and pass them through a softmax.
"""
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .core_stats import partition_gini_from_counts
from .discriminant import assign_with_offsets, fit_discriminant, reference_margins
from .errors import (BadConfig, DegenerateDataWarning, HQForestError, SchemaMismatch)
from .features import (FeatureSchema, apply_normalizer, default_schema, evaluate_terms,
                       features_per_tree, fit_normalizer, global_squared_index, global_term,
                       layer_features, n_squared, square_features, squared_feature_name,
                       squared_terms, tree_feature_sets)
from .io import atomic_write_text, dumps_canonical, read_json
from .pyramid import LabeledVolume, Pyramid, build_pyramid, voxel_children
from .smote import plan_balancing, smote_balance

MODEL_FORMAT = "hqforest-model"
MODEL_VERSION = 1
D1_RANGE = (1, 10)
GTREE_RANGE = (1e-6, 1e-1)
LAMBDA_RANGE = (0.01, 0.99)


@dataclass
class Hyperparams:
    """``lambdas[r - 1]`` is the group-Lasso weight used at layer ``r``."""

    d1: int = 4
    g_tree: float = 1e-3
    lambdas: List[float] = field(default_factory=lambda: [0.18, 0.27, 0.52, 0.38, 0.15])
    n_lay: int = 5
    seed: int = 0

    def __post_init__(self):
        self.lambdas = [float(v) for v in self.lambdas]
        if len(self.lambdas) != self.n_lay:
            raise BadConfig(f"need {self.n_lay} lambdas, got {len(self.lambdas)}")
        if not D1_RANGE[0] <= self.d1 <= D1_RANGE[1]:
            raise BadConfig(f"d1={self.d1} outside {D1_RANGE}")
        if not GTREE_RANGE[0] * (1 - 1e-9) <= self.g_tree <= GTREE_RANGE[1] * (1 + 1e-9):
            raise BadConfig(f"g_tree={self.g_tree} outside {GTREE_RANGE}")
        for lam in self.lambdas:
            if not LAMBDA_RANGE[0] - 1e-12 <= lam <= LAMBDA_RANGE[1] + 1e-12:
                raise BadConfig(f"lambda={lam} outside {LAMBDA_RANGE}")
        if self.n_lay < 1:
            raise BadConfig("n_lay must be >= 1")

    @property
    def d_tree(self):
        return (self.n_lay - 1) + self.d1

    def lam(self, r):
        return self.lambdas[r - 1]

    def to_dict(self):
        return {"d1": int(self.d1), "g_tree": float(self.g_tree),
                "lambdas": list(self.lambdas), "n_lay": int(self.n_lay), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["d1"]), float(d["g_tree"]), list(d["lambdas"]),
                   int(d.get("n_lay", len(d["lambdas"]))), int(d.get("seed", 0)))


@dataclass
class Node:
    """Stored parameters of one tree node.

    Decision nodes carry the discriminant over the squared features of the
    tree's basic-feature subset: pre-squaring and post-squaring
    normalisation statistics, directions ``theta`` and projecting
    coefficients ``betas`` (rows follow ``classes``), class means, log
    priors and thresholds. ``selected`` lists the squared-feature indices
    (local to the tree) with a nonzero direction. Leaves carry only
    voxelwise statistics.
    """

    id: int
    kind: str
    layer: int
    depth: int
    probs: np.ndarray
    accuracy: float
    difficulty: float
    n_samples: int
    classes: List[int] = field(default_factory=list)
    selected: List[int] = field(default_factory=list)
    selected_global: List[int] = field(default_factory=list)
    theta: Optional[np.ndarray] = None
    betas: Optional[np.ndarray] = None
    class_means: Optional[np.ndarray] = None
    log_priors: Optional[np.ndarray] = None
    thresholds: Optional[np.ndarray] = None
    pre_mean: Optional[np.ndarray] = None
    pre_std: Optional[np.ndarray] = None
    post_mean: Optional[np.ndarray] = None
    post_std: Optional[np.ndarray] = None
    partition_counts: Optional[np.ndarray] = None
    children: Dict[int, int] = field(default_factory=dict)
    pruned: List[int] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    @property
    def is_leaf(self):
        return self.kind == "leaf"

    def to_dict(self):
        d = {"id": self.id, "kind": self.kind, "layer": self.layer, "depth": self.depth,
             "probs": _fl(self.probs), "accuracy": float(self.accuracy),
             "difficulty": float(self.difficulty), "n_samples": int(self.n_samples)}
        if self.kind == "decision":
            d.update({
                "classes": [int(c) for c in self.classes],
                "selected": [int(h) for h in self.selected],
                "selected_global": [int(h) for h in self.selected_global],
                "theta": _fl(self.theta), "betas": _fl(self.betas),
                "class_means": _fl(self.class_means), "log_priors": _fl(self.log_priors),
                "thresholds": _fl(self.thresholds),
                "pre_mean": _fl(self.pre_mean), "pre_std": _fl(self.pre_std),
                "post_mean": _fl(self.post_mean), "post_std": _fl(self.post_std),
                "partition_counts": np.asarray(self.partition_counts).astype(int).tolist(),
                "children": {str(k): int(v) for k, v in sorted(self.children.items())},
                "pruned": [int(c) for c in self.pruned],
                "flags": list(self.flags),
            })
        return d

    @classmethod
    def from_dict(cls, d):
        node = cls(int(d["id"]), d["kind"], int(d["layer"]), int(d["depth"]),
                   np.asarray(d["probs"], dtype=np.float64), float(d["accuracy"]),
                   float(d["difficulty"]), int(d["n_samples"]))
        if node.kind == "decision":
            node.classes = [int(c) for c in d["classes"]]
            node.selected = [int(h) for h in d["selected"]]
            node.selected_global = [int(h) for h in d["selected_global"]]
            for key in ("theta", "betas", "class_means", "log_priors", "thresholds",
                        "pre_mean", "pre_std", "post_mean", "post_std"):
                setattr(node, key, np.asarray(d[key], dtype=np.float64))
            k = len(node.classes)
            for key in ("theta", "betas", "class_means"):
                setattr(node, key, getattr(node, key).reshape(k, -1))
            node.partition_counts = np.asarray(d["partition_counts"], dtype=np.int64)
            node.children = {int(k): int(v) for k, v in d["children"].items()}
            node.pruned = [int(c) for c in d["pruned"]]
            node.flags = list(d["flags"])
        return node


def _fl(a):
    return np.asarray(a, dtype=np.float64).tolist()


@dataclass
class Tree:
    index: int
    seed: int
    features: List[int]
    nodes: List[Node]

    @property
    def root(self):
        return self.nodes[0]

    def to_dict(self):
        return {"index": self.index, "seed": int(self.seed), "features": list(self.features),
                "nodes": [n.to_dict() for n in self.nodes]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["index"]), int(d["seed"]), [int(v) for v in d["features"]],
                   [Node.from_dict(n) for n in d["nodes"]])


@dataclass
class ForestModel:
    n_clas: int
    schema: FeatureSchema
    hyper: Hyperparams
    trees: List[Tree]
    feature_seed: int

    @property
    def n_weak(self):
        return len(self.trees)

    @property
    def n_lay(self):
        return self.hyper.n_lay

    def to_dict(self):
        return {"format": MODEL_FORMAT, "version": MODEL_VERSION, "n_clas": self.n_clas,
                "schema": {"id": self.schema.schema_id, "n_chan": self.schema.n_chan,
                           "names": self.schema.names},
                "hyperparams": self.hyper.to_dict(), "feature_seed": int(self.feature_seed),
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise SchemaMismatch("not a version-1 hqforest model")
        schema = default_schema(int(d["schema"]["n_chan"]))
        if schema.schema_id != d["schema"]["id"] or schema.names != d["schema"]["names"]:
            raise SchemaMismatch(f"unknown feature schema {d['schema']['id']!r}")
        return cls(int(d["n_clas"]), schema, Hyperparams.from_dict(d["hyperparams"]),
                   [Tree.from_dict(t) for t in d["trees"]], int(d["feature_seed"]))


def dumps_model(model: ForestModel) -> str:
    return dumps_canonical(model.to_dict()) + "\n"


def save_model(model: ForestModel, path):
    atomic_write_text(path, dumps_model(model))


def load_model(path) -> ForestModel:
    return ForestModel.from_dict(read_json(path))


# ---------------------------------------------------------------- preparation

@dataclass
class PreparedVolume:
    """Pyramid plus the basic feature matrix of every layer ``r >= 1``."""

    volume: LabeledVolume
    pyramid: Pyramid
    features: Dict[int, np.ndarray]


def prepare_volume(volume: LabeledVolume, n_lay, n_clas=None, timings=None) -> PreparedVolume:
    t0 = time.perf_counter()
    pyr = build_pyramid(volume, n_lay, n_clas)
    t1 = time.perf_counter()
    feats = {r: layer_features(volume, pyr.layers[r]) for r in range(1, n_lay + 1)}
    t2 = time.perf_counter()
    if timings is not None:
        timings["pyramid"] = timings.get("pyramid", 0.0) + (t1 - t0)
        timings["features"] = timings.get("features", 0.0) + (t2 - t1)
    return PreparedVolume(volume, pyr, feats)


@dataclass
class _TrainingPool:
    """Training patches of all volumes, concatenated per layer."""

    features: Dict[int, np.ndarray]
    labels: Dict[int, np.ndarray]
    heterogeneity: Dict[int, np.ndarray]
    histograms: Dict[int, np.ndarray]
    children: Dict[int, np.ndarray]
    n_lay: int


def _pool(prepared: List[PreparedVolume]) -> _TrainingPool:
    n_lay = prepared[0].pyramid.n_lay
    feats, labels, het, hist, kids = {}, {}, {}, {}, {}
    for r in range(1, n_lay + 1):
        feats[r] = np.vstack([p.features[r] for p in prepared])
        layers = [p.pyramid.layers[r] for p in prepared]
        if any(lay.histograms is None for lay in layers):
            raise BadConfig("training volumes must carry labels")
        hist[r] = np.vstack([lay.histograms for lay in layers])
        labels[r] = np.argmax(hist[r], axis=1) + 1
        het[r] = np.concatenate([lay.heterogeneity for lay in layers]).astype(np.float64)
    for r in range(2, n_lay + 1):
        offs = np.cumsum([0] + [p.pyramid.layers[r - 1].n_patches for p in prepared])
        kids[r] = np.vstack([p.pyramid.children[r] + offs[i] for i, p in enumerate(prepared)])
    return _TrainingPool(feats, labels, het, hist, kids, n_lay)


# ---------------------------------------------------------------- training

def _probs(labels, n_clas):
    counts = np.bincount(labels, minlength=n_clas + 1)[1:].astype(np.float64)
    return counts / counts.sum()


def _gini_of_labels(labels):
    counts = np.bincount(labels)[None, :]
    return float(partition_gini_from_counts(counts))


def _fit_decision_node(node: Node, x_sel, labels, het, lam, w, n_weak, rng, n_clas,
                       tree_features, n_tot, timings):
    """Fit the node discriminant; return the class assigned to each realistic sample."""
    n_sel = x_sel.shape[1]
    n_feat = n_squared(n_sel)
    node.probs = _probs(labels, n_clas)
    node.difficulty = float(het.mean())
    present = np.unique(labels)
    if present.size == 1:
        c = int(present[0])
        node.classes = [c]
        node.theta = np.zeros((1, n_feat))
        node.betas = np.zeros((1, n_feat))
        node.class_means = np.zeros((1, n_feat))
        node.log_priors = np.zeros(1)
        node.thresholds = np.zeros(0)
        node.pre_mean, node.pre_std = np.zeros(n_sel), np.ones(n_sel)
        node.post_mean, node.post_std = np.zeros(n_feat), np.ones(n_feat)
        node.partition_counts = np.array([[labels.size]])
        node.accuracy = 1.0
        node.flags.append("single_class")
        return np.full(labels.size, c, dtype=np.int64)
    t0 = time.perf_counter()
    bal = smote_balance(x_sel, labels, het, plan_balancing(labels), w, n_weak, rng, warn=False)
    if bal.duplicated:
        node.flags.append("smote_duplicated")
    timings["smote"] = timings.get("smote", 0.0) + (time.perf_counter() - t0)
    node.pre_mean, node.pre_std = fit_normalizer(bal.features)
    sq = square_features(apply_normalizer(bal.features, node.pre_mean, node.pre_std))
    node.post_mean, node.post_std = fit_normalizer(sq)
    sq = apply_normalizer(sq, node.post_mean, node.post_std)
    disc, gini, counts = fit_discriminant(sq, bal.labels, lam)
    node.classes = list(disc.classes)
    node.theta, node.betas = disc.theta, disc.betas
    node.class_means, node.log_priors = disc.class_means, disc.log_priors
    node.thresholds = disc.thresholds
    node.selected = list(disc.selected_indices)
    terms = squared_terms(n_sel)
    node.selected_global = [global_squared_index(tree_features[terms[h, 0]],
                                                 tree_features[terms[h, 1]]
                                                 if terms[h, 1] >= 0 else -1, n_tot)
                            for h in node.selected]
    node.partition_counts = counts
    node.accuracy = float(min(1.0, max(0.0, 1.0 - gini)))
    node.flags.extend(disc.flags)
    return np.asarray(node.classes)[disc.classify_index(sq[:labels.size])]


def grow_tree(pool: _TrainingPool, w, n_weak, tree_features, hyper: Hyperparams, seed,
              n_clas, n_tot, timings=None) -> Tree:
    """Grow tree ``w`` (1-based) breadth first from the coarsest layer."""
    timings = {} if timings is None else timings
    n_lay = pool.n_lay
    feats_idx = np.asarray(tree_features, dtype=np.int64)
    nodes: List[Node] = []
    root_samples = np.arange(pool.labels[n_lay].size)
    if root_samples.size == 0:
        raise BadConfig("no coarsest-layer training samples")
    queue = [(n_lay, root_samples, 0, 1)]
    nodes.append(None)
    ids = [0]
    head = 0
    while head < len(queue):
        r, samples, k_r1, depth = queue[head]
        nid = ids[head]
        head += 1
        labels = pool.labels[r][samples]
        if r == 1 and (k_r1 >= hyper.d1 or (k_r1 >= 1 and _gini_of_labels(labels) < hyper.g_tree)):
            counts = pool.histograms[1][samples].sum(axis=0).astype(np.float64)
            probs = counts / counts.sum()
            gini0 = float(partition_gini_from_counts(counts[None, :]))
            nodes[nid] = Node(nid, "leaf", 0, depth, probs, 1.0 - gini0, 0.0,
                              int(counts.sum()))
            continue
        node = Node(nid, "decision", r, depth, None, 0.0, 0.0, int(samples.size))
        rng = np.random.default_rng([int(seed), nid])
        assigned = _fit_decision_node(
            node, pool.features[r][samples][:, feats_idx], labels,
            pool.heterogeneity[r][samples], hyper.lam(r), w, n_weak, rng, n_clas,
            feats_idx, n_tot, timings)
        nodes[nid] = node
        for c in range(1, n_clas + 1):
            mine = samples[assigned == c]
            if mine.size == 0:
                node.pruned.append(c)
                continue
            if r >= 2:
                child = (r - 1, pool.children[r][mine].ravel(), 0, depth + 1)
            else:
                child = (1, mine, k_r1 + 1, depth + 1)
            node.children[c] = len(nodes)
            ids.append(len(nodes))
            nodes.append(None)
            queue.append(child)
    return Tree(w, int(seed), [int(v) for v in feats_idx], nodes)


def tree_seeds(master_seed, n_weak):
    return [int(np.random.SeedSequence(master_seed, spawn_key=(w,)).generate_state(1)[0])
            for w in range(1, n_weak + 1)]


def feature_seed(master_seed):
    return int(np.random.SeedSequence(master_seed, spawn_key=(0,)).generate_state(1)[0])


@dataclass
class TrainReport:
    timings: Dict[str, float]
    n_trees: int
    failed_trees: Dict[int, str]
    flags: List[str]
    n_nodes: int

    def to_dict(self):
        return {"timings": {k: float(v) for k, v in sorted(self.timings.items())},
                "n_trees": self.n_trees, "failed_trees": {str(k): v for k, v in
                                                          self.failed_trees.items()},
                "flags": sorted(set(self.flags)), "n_nodes": self.n_nodes}


def train_forest(volumes, hyper: Hyperparams, n_clas, threads=1, prepared=None):
    """Grow ``n_weak = floor(sqrt(n_tot))`` trees; return ``(model, report)``.

    ``prepared`` may supply already prepared volumes to skip pyramid and
    feature construction.
    """
    timings = {"pyramid": 0.0, "features": 0.0, "smote": 0.0, "trees": 0.0}
    if prepared is None:
        prepared = [prepare_volume(v, hyper.n_lay, n_clas, timings) for v in volumes]
    if not prepared:
        raise BadConfig("no training volumes")
    n_chan = prepared[0].volume.n_chan
    if any(p.volume.n_chan != n_chan for p in prepared):
        raise SchemaMismatch("training volumes disagree on channel count")
    schema = default_schema(n_chan)
    pool = _pool(prepared)
    n_tot = schema.n_tot
    n_weak = features_per_tree(n_tot)
    fseed = feature_seed(hyper.seed)
    sets = tree_feature_sets(n_tot, fseed, n_weak)
    seeds = tree_seeds(hyper.seed, n_weak)

    def grow(w):
        local = {}
        try:
            tree = grow_tree(pool, w, n_weak, sets[w - 1], hyper, seeds[w - 1], n_clas,
                             n_tot, local)
            return tree, local, None
        except HQForestError as exc:
            return None, local, f"{type(exc).__name__}: {exc}"

    t0 = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(grow, range(1, n_weak + 1)))
    else:
        results = [grow(w) for w in range(1, n_weak + 1)]
    timings["trees"] = time.perf_counter() - t0
    trees, failed, flags = [], {}, []
    for w, (tree, local, err) in enumerate(results, start=1):
        timings["smote"] += local.get("smote", 0.0)
        if err is not None:
            failed[w] = err
        else:
            trees.append(tree)
            for n in tree.nodes:
                flags.extend(n.flags)
    if not trees:
        raise HQForestError(f"every tree failed: {failed}")
    timings["trees"] = max(0.0, timings["trees"] - timings["smote"])
    if np.unique(pool.labels[1]).size == 1:
        flags.append("single_class_training_data")
    model = ForestModel(n_clas, schema, hyper, trees, fseed)
    report = TrainReport(timings, len(trees), failed, flags,
                         sum(len(t.nodes) for t in trees))
    return model, report


# ---------------------------------------------------------------- prediction

@dataclass
class LayerPrediction:
    probs: np.ndarray
    labels: np.ndarray
    reliability: np.ndarray


@dataclass
class VolumePrediction:
    layers: Dict[int, LayerPrediction]
    prepared: PreparedVolume = field(repr=False)


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def aggregate(probs, accuracy, difficulty):
    """Combine per-tree node outputs for a batch of patches.

    ``probs`` is ``(n_trees, n, n_clas)``; ``accuracy`` and ``difficulty`` are
    ``(n_trees, n)``. Returns ``(a, labels, reliability)`` with 1-based labels.
    """
    probs = np.asarray(probs, dtype=np.float64)
    acc = np.asarray(accuracy, dtype=np.float64)
    diff = np.asarray(difficulty, dtype=np.float64)
    weighted = np.mean(acc[..., None] * probs, axis=0)
    a = softmax(weighted)
    return a, np.argmax(a, axis=-1) + 1, np.exp(-np.mean(diff, axis=0))


def _node_classify(node: Node, tree: Tree, x_basic, batch_normalize):
    if len(node.classes) == 1:
        return np.full(x_basic.shape[0], node.classes[0], dtype=np.int64)
    n_sel = len(tree.features)
    terms = squared_terms(n_sel)
    active = np.asarray(node.selected, dtype=np.int64)
    x_sel = x_basic[:, tree.features]
    if batch_normalize and x_sel.shape[0] >= 2:
        pre_mean, pre_std = fit_normalizer(x_sel)
    else:
        pre_mean, pre_std = node.pre_mean, node.pre_std
    z = apply_normalizer(x_sel, pre_mean, pre_std)
    sq = evaluate_terms(z, terms[active])
    if batch_normalize and x_sel.shape[0] >= 2:
        post_mean, post_std = fit_normalizer(sq)
    else:
        post_mean, post_std = node.post_mean[active], node.post_std[active]
    sq = apply_normalizer(sq, post_mean, post_std)
    margins = reference_margins(sq, node.theta[:, active], node.class_means[:, active],
                                node.log_priors)
    return np.asarray(node.classes)[assign_with_offsets(margins, node.thresholds)]


def route_tree(tree: Tree, prepared: PreparedVolume, batch_normalize=False):
    """Node id whose statistics apply to each patch, per layer ``0..n_lay``.

    A patch at layer ``r`` applies the deepest layer-``r`` node on its path;
    if its path ended at a pruned branch further up, it applies the last
    node reached. Voxels apply the leaf (or last node) of their layer-1 patch.
    """
    pyr = prepared.pyramid
    n_lay = pyr.n_lay
    nodes = tree.nodes
    node_layer = np.array([n.layer if n.kind == "decision" else -1 for n in nodes])
    applied = {}
    at = np.zeros(pyr.layers[n_lay].n_patches, dtype=np.int64)
    for r in range(n_lay, 0, -1):
        feats = prepared.features[r]
        cur, last = at.copy(), at.copy()
        live = node_layer[cur] == r
        while live.any():
            for nid in np.unique(cur[live]):
                rows = np.flatnonzero(live & (cur == nid))
                node = nodes[nid]
                cls = _node_classify(node, tree, feats[rows], batch_normalize)
                child = np.array([node.children.get(int(c), -1) for c in cls], dtype=np.int64)
                last[rows] = nid
                cur[rows] = np.where(child >= 0, child, nid)
                live[rows[child < 0]] = False
            if r >= 2:
                break
            live &= node_layer[cur] == 1
        applied[r] = last
        if r >= 2:
            at = cur[pyr.parents[r - 1]]
        else:
            applied[0] = cur[pyr.parents[0]]
    return applied


def predict(volume_or_prepared, model: ForestModel, batch_normalize=False, threads=1):
    """Per-layer aggregated predictions for every patch of a volume."""
    if isinstance(volume_or_prepared, PreparedVolume):
        prepared = volume_or_prepared
    else:
        if volume_or_prepared.n_chan != model.schema.n_chan:
            raise SchemaMismatch(f"model expects {model.schema.n_chan} channels, volume has "
                                 f"{volume_or_prepared.n_chan}")
        prepared = prepare_volume(volume_or_prepared, model.n_lay)
    if prepared.features[prepared.pyramid.n_lay].shape[1] != model.schema.n_tot:
        raise SchemaMismatch("feature matrix does not match the model schema")

    def run(tree):
        return route_tree(tree, prepared, batch_normalize)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            routes = list(ex.map(run, model.trees))
    else:
        routes = [run(t) for t in model.trees]
    out = {}
    for r in range(model.n_lay + 1):
        p = np.stack([np.stack([t.nodes[i].probs for i in rt[r]]) if rt[r].size else
                      np.zeros((0, model.n_clas)) for t, rt in zip(model.trees, routes)])
        acc = np.stack([np.array([t.nodes[i].accuracy for i in rt[r]])
                        for t, rt in zip(model.trees, routes)])
        diff = np.stack([np.array([t.nodes[i].difficulty for i in rt[r]])
                         for t, rt in zip(model.trees, routes)])
        a, lab, rel = aggregate(p, acc, diff)
        out[r] = LayerPrediction(a, lab, rel)
    return VolumePrediction(out, prepared)


def voxel_label_grid(prediction: VolumePrediction):
    """Layer-0 labels reshaped to the ``(x, y, z)`` grid."""
    dims = prediction.prepared.pyramid.dims
    return prediction.layers[0].labels.reshape(dims, order="F")


# ---------------------------------------------------------------- consolidation

def _decision_nodes(model):
    for tree in model.trees:
        for node in tree.nodes:
            if node.kind == "decision":
                yield tree, node


def consolidate_resolution_specific(model: ForestModel, r) -> List[int]:
    """Sorted union of the global squared-feature indices selected at layer ``r``."""
    out = sorted({h for _, n in _decision_nodes(model) if n.layer == r for h in n.selected_global})
    if not out:
        warnings.warn(f"no selected features at layer {r}", DegenerateDataWarning, stacklevel=2)
    return out


def coefficient_scores(model: ForestModel) -> Dict[int, float]:
    """Largest absolute projecting coefficient of every selected global index."""
    scores: Dict[int, float] = {}
    for _, node in _decision_nodes(model):
        for h_local, h_glob in zip(node.selected, node.selected_global):
            s = float(np.max(np.abs(node.betas[:, h_local])))
            scores[h_glob] = max(scores.get(h_glob, 0.0), s)
    return scores


def select_above_median(scores: Dict[int, float]):
    """Indices scoring strictly above the median; ``(indices, fell_back)``."""
    if not scores:
        return [], True
    med = float(np.median(list(scores.values())))
    keep = sorted(h for h, s in scores.items() if s > med)
    if not keep:
        return sorted(scores), True
    return keep, False


def consolidate_resolution_independent(model: ForestModel) -> List[int]:
    keep, fell_back = select_above_median(coefficient_scores(model))
    if fell_back:
        warnings.warn("no index scores above the median; using the full union",
                      DegenerateDataWarning, stacklevel=2)
    return keep


# ---------------------------------------------------------------- export

def squared_values(basic, indices, n_tot):
    """Raw values of global squared-feature indices for rows of basic features."""
    terms = np.array([global_term(h, n_tot) for h in indices], dtype=np.int64).reshape(-1, 2)
    return evaluate_terms(basic, terms)


def export_graph_records(prediction: VolumePrediction, model: ForestModel, volume_name=""):
    """Yield one header and then one record per patch of every layer.

    Layer-0 records carry no feature values because the squared-feature
    indices refer to the patch schema.
    """
    prepared = prediction.prepared
    pyr = prepared.pyramid
    n_tot = model.schema.n_tot
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDataWarning)
        specific = {r: consolidate_resolution_specific(model, r)
                    for r in range(1, model.n_lay + 1)}
        independent = consolidate_resolution_independent(model)
    yield {"type": "header", "volume": volume_name, "n_lay": model.n_lay,
           "n_clas": model.n_clas,
           "specific_indices": {str(r): v for r, v in specific.items()},
           "independent_indices": independent,
           "feature_names": {str(h): squared_feature_name(h, model.schema.names)
                             for h in sorted(set(independent).union(*specific.values()))}}
    vox_children = voxel_children(pyr.layers[1])
    for r in range(model.n_lay, -1, -1):
        lay = pyr.layers[r]
        pred = prediction.layers[r]
        if r >= 1:
            fs = squared_values(prepared.features[r], specific[r], n_tot)
            fi = squared_values(prepared.features[r], independent, n_tot)
        nb = lay.neighbors
        for j in range(lay.n_patches):
            if r == model.n_lay:
                parent = None
            else:
                parent = int(pyr.parents[r][j])
            if r >= 2:
                kids = pyr.children[r][j].tolist()
            elif r == 1:
                kids = vox_children[j].tolist()
            else:
                kids = []
            yield {"type": "patch", "volume": volume_name, "layer": r, "id": j,
                   "priors": pred.probs[j].tolist(),
                   "reliability": float(pred.reliability[j]),
                   "label": int(pred.labels[j]),
                   "f_specific": fs[j].tolist() if r >= 1 else [],
                   "f_independent": fi[j].tolist() if r >= 1 else [],
                   "neighbors": [int(v) for v in nb[j] if v >= 0],
                   "parent": parent, "children": kids}
