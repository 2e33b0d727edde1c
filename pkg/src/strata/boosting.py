"""Second-order gradient-boosted trees for binary log-loss.

Trees are grown level-wise by exact greedy search over the sorted distinct
non-sentinel values of each feature.  The sentinel is never a threshold:
sentinel rows are routed as a block to whichever side gives the larger
gain, and that side is stored as the node's default direction.

Leaf weights are ``-T(G) / (H + reg_lambda)`` with ``T`` soft-thresholding
the gradient sum by ``reg_alpha``; split gain is
``0.5 * [S(L) + S(R) - S(L+R)]`` with ``S = T(G)^2 / (H + reg_lambda)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict, field, fields

import numba
import numpy as np
from scipy.special import gammaln

from . import _kernels as K

logger = logging.getLogger(__name__)

FORMAT = "strata-gbdt"
VERSION = 1


class TrainingError(ValueError):
    pass


@dataclass
class GBDTParams:
    n_estimators: int = 200
    max_depth: int = 6
    learning_rate: float = 0.05
    subsample: float = 0.8
    colsample_bytree: float = 0.8
    reg_alpha: float = 0.0
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    base_score: float = 0.5
    sentinel: float = 999_999
    seed: int = 0

    def validate(self) -> "GBDTParams":
        if int(self.n_estimators) != self.n_estimators or self.n_estimators < 1:
            raise TrainingError("n_estimators must be a positive integer")
        if int(self.max_depth) != self.max_depth or self.max_depth < 1:
            raise TrainingError("max_depth must be a positive integer")
        if not 0 < self.learning_rate <= 1:
            raise TrainingError("learning_rate must lie in (0, 1]")
        if not 0 < self.subsample <= 1 or not 0 < self.colsample_bytree <= 1:
            raise TrainingError("subsample and colsample_bytree must lie in (0, 1]")
        if min(self.reg_alpha, self.reg_lambda, self.gamma, self.min_child_weight) < 0:
            raise TrainingError("reg_alpha, reg_lambda, gamma and min_child_weight must be >= 0")
        if not 0 < self.base_score < 1:
            raise TrainingError("base_score must lie in (0, 1)")
        return self

    def replace(self, **changes) -> "GBDTParams":
        known = {f.name for f in fields(self)}
        bad = set(changes) - known
        if bad:
            raise TrainingError(f"unknown parameter(s): {sorted(bad)}")
        d = asdict(self)
        d.update(changes)
        d["n_estimators"] = int(d["n_estimators"])
        d["max_depth"] = int(d["max_depth"])
        return GBDTParams(**d)


@dataclass
class Tree:
    """Flattened tree; node 0 is the root and leaves have ``feature == -1``.

    ``value`` holds the leaf weight (also filled for internal nodes with the
    weight the node would have had as a leaf), ``cover`` the hessian mass of
    the training rows that reached the node and ``gain`` the realized loss
    reduction of the node's split (0 for leaves).
    """

    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def expected_values(self) -> np.ndarray:
        """Cover-weighted mean leaf weight below every node."""
        e = self.value.astype(np.float64).copy()
        for i in range(self.n_nodes - 1, -1, -1):
            if self.feature[i] >= 0:
                cl, cr = self.cover[self.left[i]], self.cover[self.right[i]]
                e[i] = (cl * e[self.left[i]] + cr * e[self.right[i]]) / (cl + cr)
        return e

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "default_left": [int(b) for b in self.default_left],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
            "gain": self.gain.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Tree":
        return cls(np.array(d["feature"], dtype=np.int64),
                   np.array(d["threshold"], dtype=np.float64),
                   np.array(d["default_left"], dtype=np.bool_),
                   np.array(d["left"], dtype=np.int64),
                   np.array(d["right"], dtype=np.int64),
                   np.array(d["value"], dtype=np.float64),
                   np.array(d["cover"], dtype=np.float64),
                   np.array(d["gain"], dtype=np.float64))


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -np.asarray(z, dtype=np.float64)))


def log_loss(y, margin) -> float:
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(margin, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, m) - y * m))


@dataclass
class GBDTModel:
    trees: list[Tree]
    params: GBDTParams
    n_features: int
    feature_names: list[str] | None = None
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def base_margin(self) -> float:
        return _logit(self.params.base_score)

    def _pack(self):
        if self._packed is None:
            trees = self.trees
            offsets = np.zeros(len(trees) + 1, dtype=np.int64)
            for t, tree in enumerate(trees):
                offsets[t + 1] = offsets[t] + tree.n_nodes

            def cat(attr, dtype):
                if not trees:
                    return np.zeros(1, dtype=dtype)
                return np.ascontiguousarray(np.concatenate([getattr(t, attr) for t in trees]),
                                            dtype=dtype)

            expected = np.concatenate([t.expected_values() for t in trees]) if trees \
                else np.zeros(1)
            self._packed = (cat("feature", np.int64), cat("threshold", np.float64),
                            cat("default_left", np.bool_), cat("left", np.int64),
                            cat("right", np.int64), cat("value", np.float64), offsets, expected)
        return self._packed

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} feature columns, got shape {X.shape}")
        return X

    def predict_margin(self, X) -> np.ndarray:
        X = self._check(X)
        feat, thr, dl, left, right, value, offsets, _ = self._pack()
        return K.predict_margin(X, feat, thr, dl, left, right, value, offsets,
                                self.base_margin, float(self.params.learning_rate),
                                float(self.params.sentinel))

    def predict_proba(self, X) -> np.ndarray:
        """Probability of the positive class for every row."""
        return sigmoid(self.predict_margin(X))

    def staged_margins(self, X):
        """Yield the margin after each boosting round."""
        X = self._check(X)
        margin = np.full(X.shape[0], self.base_margin)
        lr = float(self.params.learning_rate)
        for tree in self.trees:
            margin = margin + lr * tree_leaf_values(tree, X, self.params.sentinel)
            yield margin

    def gain_importance(self) -> np.ndarray:
        """Total realized split gain per feature, summed over all trees."""
        out = np.zeros(self.n_features)
        for tree in self.trees:
            internal = tree.feature >= 0
            np.add.at(out, tree.feature[internal], tree.gain[internal])
        return out

    def path_contributions(self, X):
        """Per-row additive attribution along the decision path.

        Returns ``(bias, contributions)`` with ``contributions`` of shape
        (rows, features) and ``bias + contributions.sum(1)`` equal to the
        margin.  Each split on a row's path credits the change in
        cover-weighted expected leaf value to the split feature.
        """
        X = self._check(X)
        feat, thr, dl, left, right, _, offsets, expected = self._pack()
        for tree in self.trees:
            if not np.all(tree.cover[tree.feature >= 0] > 0):
                raise ValueError("model lacks node covers; attribution unavailable")
        lr = float(self.params.learning_rate)
        bias = self.base_margin + sum(lr * expected[o] for o in offsets[:-1])
        contrib = K.path_contributions(X, feat, thr, dl, left, right, expected, offsets, lr,
                                       float(self.params.sentinel), self.n_features)
        return bias, contrib

    def interventional_contributions(self, X, background):
        """Interventional TreeSHAP values against a background sample.

        Exact Shapley values of the margin where absent features take their
        background values, averaged over the rows of ``background``.  Returns
        ``(bias, contributions)`` with ``bias`` the mean background margin, so
        ``bias + contributions.sum(1)`` again equals the margin.  Cost grows
        with rows x background rows x leaves, so keep both samples small.
        """
        X = self._check(X)
        Z = self._check(background)
        if Z.shape[0] == 0:
            raise ValueError("background sample is empty")
        feat, thr, dl, _, _, value, offsets, _ = self._pack()
        leaf_node, path_ptr, path_node, path_left = self._leaf_paths()
        depth = int(np.max(np.diff(path_ptr))) if len(path_ptr) > 1 else 0
        a = np.arange(depth + 1)
        s, t = np.meshgrid(a, a, indexing="ij")
        weights = np.exp(gammaln(s + 1) + gammaln(t + 1) - gammaln(s + t + 2))
        contrib = K.interventional_shap(X, Z, feat, thr, dl, value, leaf_node, path_ptr,
                                        path_node, path_left, float(self.params.learning_rate),
                                        float(self.params.sentinel), self.n_features, weights)
        return float(self.predict_margin(Z).mean()), contrib

    def _leaf_paths(self):
        """Root-to-leaf paths of every tree as global node ids and turn directions."""
        _, _, _, left, right, _, offsets, _ = self._pack()
        leaf_node, ptr, nodes, turns = [], [0], [], []
        for t, tree in enumerate(self.trees):
            o = int(offsets[t])
            stack = [(0, [], [])]
            while stack:
                node, path, dirs = stack.pop()
                if tree.feature[node] < 0:
                    leaf_node.append(o + node)
                    nodes.extend(path)
                    turns.extend(dirs)
                    ptr.append(len(nodes))
                    continue
                stack.append((int(tree.right[node]), path + [o + node], dirs + [False]))
                stack.append((int(tree.left[node]), path + [o + node], dirs + [True]))
        return (np.array(leaf_node, dtype=np.int64), np.array(ptr, dtype=np.int64),
                np.array(nodes, dtype=np.int64), np.array(turns, dtype=np.bool_))

    def to_json(self) -> str:
        return json.dumps({
            "format": FORMAT,
            "version": VERSION,
            "params": asdict(self.params),
            "n_features": self.n_features,
            "feature_names": self.feature_names,
            "trees": [t.to_dict() for t in self.trees],
        })

    @classmethod
    def from_json(cls, text: str) -> "GBDTModel":
        d = json.loads(text)
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise ValueError("not a strata-gbdt v1 model file")
        return cls([Tree.from_dict(t) for t in d["trees"]], GBDTParams(**d["params"]),
                   int(d["n_features"]), d["feature_names"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "GBDTModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def tree_leaf_values(tree: Tree, X, sentinel=999_999) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    idx = K.leaf_index(X, tree.feature, tree.threshold, tree.default_left, tree.left,
                       tree.right, 0, float(sentinel))
    return tree.value[idx]


_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def row_uniforms(seed: int, tree_index: int, row_ids) -> np.ndarray:
    """Counter-based uniforms in [0, 1) keyed by (seed, tree, row id)."""
    key = _splitmix(_splitmix(np.array([seed], dtype=np.uint64)) ^ np.uint64(tree_index))
    ids = np.asarray(row_ids).astype(np.uint64)
    return (_splitmix(ids ^ key[0]) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def presort(X: np.ndarray, sentinel):
    """Per-feature non-sentinel row positions sorted by (value, row)."""
    n, p = X.shape
    ptr = np.zeros(p + 1, dtype=np.int64)
    rows, vals = [], []
    for j in range(p):
        col = X[:, j]
        nz = np.flatnonzero(col != sentinel)
        order = nz[np.argsort(col[nz], kind="stable")]
        rows.append(order)
        vals.append(col[order])
        ptr[j + 1] = ptr[j] + len(order)
    cat = (lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt))
    return ptr, cat(rows, np.int64), cat(vals, np.float64)


def _set_threads(workers):
    if workers is None:
        return
    numba.set_num_threads(max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS)))


def _build_tree(X, sorted_cols, feats, sampled, g, h, params: GBDTParams) -> Tree:
    col_ptr, col_rows, col_vals = sorted_cols
    lam, alpha, mcw = float(params.reg_lambda), float(params.reg_alpha), \
        float(params.min_child_weight)
    sentinel = float(params.sentinel)
    feature, threshold, dleft, left, right, value, cover, gain = ([] for _ in range(8))

    def new_node(G, H):
        feature.append(-1)
        threshold.append(0.0)
        dleft.append(False)
        left.append(-1)
        right.append(-1)
        value.append(K.leaf_weight(G, H, lam, alpha))
        cover.append(H)
        gain.append(0.0)
        return len(feature) - 1

    row_node = np.where(sampled, 0, -1).astype(np.int64)
    G0, H0 = float(g[sampled].sum()), float(h[sampled].sum())
    level = [new_node(G0, H0)]
    for _depth in range(params.max_depth):
        n_level = len(level)
        active = row_node >= 0
        if not active.any():
            break
        nodes = row_node[active]
        Gt = np.bincount(nodes, weights=g[active], minlength=n_level)
        Ht = np.bincount(nodes, weights=h[active], minlength=n_level)
        Ct = np.bincount(nodes, minlength=n_level).astype(np.int64)
        bg, bf, bt, bd = K.level_splits(col_ptr, col_rows, col_vals, feats, row_node, g, h,
                                        n_level, Gt, Ht, Ct, lam, alpha, mcw, sentinel)
        split = (bf >= 0) & (bg > params.gamma)
        if not split.any():
            break
        split_feat = np.where(split, bf, -1)
        left_pos = np.full(n_level, -1, dtype=np.int64)
        right_pos = np.full(n_level, -1, dtype=np.int64)
        next_level = []
        # children are created in level order; their stats come from the routing below
        for k, node in enumerate(level):
            if not split[k]:
                continue
            feature[node] = int(bf[k])
            threshold[node] = float(bt[k])
            dleft[node] = bool(bd[k])
            gain[node] = float(bg[k])
            left[node] = new_node(0.0, 0.0)
            right[node] = new_node(0.0, 0.0)
            left_pos[k] = len(next_level)
            next_level.append(left[node])
            right_pos[k] = len(next_level)
            next_level.append(right[node])
        K.route_rows(X, row_node, split_feat, bt, bd, left_pos, right_pos, sentinel)
        active = row_node >= 0
        nodes = row_node[active]
        Gc = np.bincount(nodes, weights=g[active], minlength=len(next_level))
        Hc = np.bincount(nodes, weights=h[active], minlength=len(next_level))
        for k, node in enumerate(next_level):
            value[node] = K.leaf_weight(Gc[k], Hc[k], lam, alpha)
            cover[node] = float(Hc[k])
        level = next_level
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                np.array(dleft, dtype=np.bool_), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(value, dtype=np.float64),
                np.array(cover, dtype=np.float64), np.array(gain, dtype=np.float64))


def train(X, y=None, params: GBDTParams | None = None, row_ids=None, feature_names=None,
          workers=None) -> GBDTModel:
    """Fit a boosted ensemble.

    ``X`` is a dense array (sentinel marks absent values) or a
    :class:`~strata.featurize.RecencyFeatureMatrix`, in which case labels,
    row ids and feature names default to the matrix's own.  Rows are
    processed in ``row_ids`` order, so the fitted model does not depend on
    the order rows are supplied in.
    """
    params = (params or GBDTParams()).validate()
    if hasattr(X, "to_dense"):
        y = X.labels if y is None else y
        row_ids = X.person_ids if row_ids is None else row_ids
        feature_names = list(X.codes) if feature_names is None else feature_names
        X = X.to_dense()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise TrainingError("training matrix is empty")
    if len(y) != X.shape[0]:
        raise TrainingError("labels and rows differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise TrainingError("labels must be 0/1")
    if y.min() == y.max():
        raise TrainingError("training data contains a single class")
    if not np.all(np.isfinite(X)):
        raise TrainingError("feature matrix contains non-finite values")
    if row_ids is None:
        row_ids = np.arange(X.shape[0])
    row_ids = np.asarray(row_ids)
    order = np.argsort(row_ids, kind="stable")
    X = np.asfortranarray(X[order])
    y = y[order]
    row_ids = row_ids[order]
    _set_threads(workers)

    n, p = X.shape
    sorted_cols = presort(X, params.sentinel)
    model = GBDTModel([], params, p, None if feature_names is None else list(feature_names))
    margin = np.full(n, model.base_margin)
    n_cols = max(1, int(params.colsample_bytree * p))
    lr = float(params.learning_rate)
    for t in range(params.n_estimators):
        prob = sigmoid(margin)
        g = prob - y
        h = prob * (1.0 - prob)
        if params.subsample < 1.0:
            sampled = row_uniforms(params.seed, t, row_ids) < params.subsample
            if not sampled.any():
                sampled[np.argmin(row_uniforms(params.seed, t, row_ids))] = True
        else:
            sampled = np.ones(n, dtype=bool)
        if n_cols < p:
            rng = np.random.default_rng([params.seed, t, 1])
            feats = np.sort(rng.choice(p, size=n_cols, replace=False)).astype(np.int64)
        else:
            feats = np.arange(p, dtype=np.int64)
        tree = _build_tree(X, sorted_cols, feats, sampled, g, h, params)
        model.trees.append(tree)
        margin = margin + lr * tree_leaf_values(tree, X, params.sentinel)
    return model


@dataclass
class SplitCandidate:
    gain: float
    threshold: float
    default_left: bool


def find_best_split(values, g, h, params: GBDTParams | None = None) -> SplitCandidate | None:
    """Best split of a single feature over one node holding all given rows.

    Returns ``None`` when no split is valid (e.g. every value is the
    sentinel).  ``gain`` already has ``params.gamma`` subtracted.
    """
    params = params or GBDTParams()
    values = np.asarray(values, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if len(values) < 2:
        return None
    ptr, rows, vals = presort(values[:, None], params.sentinel)
    row_node = np.zeros(len(values), dtype=np.int64)
    Gt, Ht = np.array([g.sum()]), np.array([h.sum()])
    Ct = np.array([len(values)], dtype=np.int64)
    bg, bf, bt, bd = K.level_splits(ptr, rows, vals, np.zeros(1, dtype=np.int64), row_node, g, h,
                                    1, Gt, Ht, Ct, float(params.reg_lambda),
                                    float(params.reg_alpha), float(params.min_child_weight),
                                    float(params.sentinel))
    if bf[0] < 0:
        return None
    return SplitCandidate(float(bg[0]) - params.gamma, float(bt[0]), bool(bd[0]))
