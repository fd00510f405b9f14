"""Gradient-boosted decision trees with second-order (Newton) objective.

Multiclass boosting over raw margins: each round computes per-class gradients
g = p - onehot and diagonal Hessians h = p * (1 - p) from the softmax of the
current margins, then grows one tree per class in class order against that
snapshot. Split gain is the exact-greedy second-order formula

    gain = 1/2 * [ GL^2/(HL+lambda) + GR^2/(HR+lambda) - (GL+GR)^2/(HL+HR+lambda) ] - gamma

and a leaf outputs -eta * G / (H + lambda) (shrinkage folded into the leaf).

Candidate thresholds are midpoints between consecutive distinct sorted feature
values, clamped to the left value when float rounding would land the midpoint
on the right value (keeps the training partition identical to `x <= t` routing
at predict time). A split must strictly improve (gain > 0) and leave both
children with Hessian mass >= min_child_weight. Ties break toward the lowest
feature index, then the lowest threshold.

Features are handled in float32, the canonical precision of persisted feature
matrices; thresholds and leaf weights are float64. Everything is deterministic:
stable sorts, fixed scan order, first-occurrence argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class GBDTConfig:
    """Boosting hyperparameters.

    budget_mode reads max_trees either as the total tree count across all
    classes ("total_trees", the default: 20 means two full 10-class rounds)
    or as the number of boosting rounds ("rounds": 20 means 20 * n_classes
    trees).
    """

    n_classes: int = 10
    max_trees: int = 20
    max_depth: int = 10
    learning_rate: float = 0.3
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    budget_mode: str = "total_trees"
    base_score: float = 0.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.max_trees < 0:
            raise ValueError(f"max_trees must be >= 0, got {self.max_trees}")
        if self.max_depth < 0:
            raise ValueError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("reg_lambda, gamma and min_child_weight must be >= 0")
        if self.budget_mode not in ("total_trees", "rounds"):
            raise ValueError(
                f"budget_mode must be 'total_trees' or 'rounds', got "
                f"{self.budget_mode!r}"
            )

    @property
    def total_tree_budget(self) -> int:
        if self.budget_mode == "total_trees":
            return self.max_trees
        return self.max_trees * self.n_classes


@dataclass
class TreeNode:
    """One node; leaves carry weight, internal nodes carry the split."""

    is_leaf: bool
    weight: float = 0.0
    feature: int = -1
    threshold: float = 0.0
    default_direction: str = "left"
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def node_counts(self) -> tuple[int, int]:
        """(internal nodes, leaves)."""
        if self.is_leaf:
            return 0, 1
        li, ll = self.left.node_counts()
        ri, rl = self.right.node_counts()
        return 1 + li + ri, ll + rl


@dataclass
class TreeEnsemble:
    """Ordered (class_id, tree) pairs plus per-class base scores.

    ``n_features`` records the training feature count (None when unknown) so
    downstream consumers can reject inputs of the wrong width.
    """

    config: GBDTConfig
    trees: list[tuple[int, TreeNode]] = field(default_factory=list)
    base_score: np.ndarray | None = None
    n_features: int | None = None

    def __post_init__(self):
        if self.base_score is None:
            self.base_score = np.full(self.config.n_classes, self.config.base_score)


def softmax_grad_hess(
    margins: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gradient and diagonal Hessian of softmax log-loss.

    Args:
        margins: [N, K] raw scores.
        labels: [N] integer class ids in [0, K).

    Returns:
        (g, h) both [N, K]: g = p - onehot(labels), h = p * (1 - p), with p
        the row-stabilized softmax.
    """
    margins = np.asarray(margins, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = margins.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = margins - margins.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    h = p * (1.0 - p)
    return g, h


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float


def _midpoint(a: float, b: float) -> float:
    """Midpoint of adjacent distinct values, clamped so threshold < b."""
    t = (a + b) / 2.0
    if not t < b:
        t = a
    return t


def best_split(x: np.ndarray, g: np.ndarray, h: np.ndarray, cfg: GBDTConfig) -> Split | None:
    """Exact-greedy best split over all features of one node.

    Args:
        x: [m, F] node feature rows (float32 canonical).
        g, h: [m] gradient / Hessian for this node's samples and class.
        cfg: hyperparameters (reg_lambda, gamma, min_child_weight).

    Returns:
        The best Split, or None when no candidate has gain > 0 (also when
        m < 2 or every candidate violates min_child_weight).
    """
    x = np.asarray(x, dtype=np.float32)
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    m, nf = x.shape
    if m < 2:
        return None
    lam = cfg.reg_lambda
    gt = g.sum()
    ht = h.sum()
    parent = gt * gt / (ht + lam)

    order = np.argsort(x, axis=0, kind="stable")
    xs = np.take_along_axis(x, order, axis=0)
    gl = np.cumsum(g[order], axis=0)[:-1]
    hl = np.cumsum(h[order], axis=0)[:-1]
    gr = gt - gl
    hr = ht - hl
    gains = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent) - cfg.gamma
    valid = (xs[1:] != xs[:-1]) & (hl >= cfg.min_child_weight) & (hr >= cfg.min_child_weight)
    gains = np.where(valid, gains, -np.inf)

    # row-major over [F, m-1]: first max = lowest feature, then lowest threshold
    flat = np.ascontiguousarray(gains.T).reshape(-1)
    idx = int(np.argmax(flat))
    best_gain = float(flat[idx])
    if not best_gain > 0.0:
        return None
    f, i = divmod(idx, m - 1)
    thr = _midpoint(float(xs[i, f]), float(xs[i + 1, f]))
    return Split(feature=f, threshold=thr, gain=best_gain)


def _leaf(g_sum: float, h_sum: float, cfg: GBDTConfig) -> TreeNode:
    w = -cfg.learning_rate * g_sum / (h_sum + cfg.reg_lambda)
    return TreeNode(is_leaf=True, weight=float(w))


def grow_tree(x: np.ndarray, g: np.ndarray, h: np.ndarray, cfg: GBDTConfig) -> TreeNode:
    """Grow one regression tree by recursive exact-greedy partitioning.

    Depth is counted in split levels: max_depth = 0 yields a single leaf.
    """
    x = np.asarray(x, dtype=np.float32)
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-d [m, F], got ndim={x.ndim}")
    if not (np.isfinite(x).all() and np.isfinite(g).all() and np.isfinite(h).all()):
        raise ValueError("training features and grad/hess must be finite")

    def build(idx: np.ndarray, depth: int) -> TreeNode:
        gs = float(g[idx].sum())
        hs = float(h[idx].sum())
        if depth >= cfg.max_depth or idx.size < 2:
            return _leaf(gs, hs, cfg)
        sp = best_split(x[idx], g[idx], h[idx], cfg)
        if sp is None:
            return _leaf(gs, hs, cfg)
        go_left = x[idx, sp.feature] <= sp.threshold
        node = TreeNode(
            is_leaf=False, feature=sp.feature, threshold=sp.threshold,
            default_direction="left",
            left=build(idx[go_left], depth + 1),
            right=build(idx[~go_left], depth + 1),
        )
        return node

    return build(np.arange(x.shape[0]), 0)


def _tree_predict(node: TreeNode, x32: np.ndarray) -> np.ndarray:
    """Route all rows of x32 [N, F] through one tree; returns [N] weights."""
    n = x32.shape[0]
    out = np.empty(n)
    stack = [(node, np.arange(n))]
    while stack:
        nd, idx = stack.pop()
        if idx.size == 0:
            continue
        if nd.is_leaf:
            out[idx] = nd.weight
            continue
        col = x32[idx, nd.feature]
        go_left = col <= nd.threshold
        if nd.default_direction == "left":
            go_left |= np.isnan(col)
        stack.append((nd.left, idx[go_left]))
        stack.append((nd.right, idx[~go_left]))
    return out


def train_ensemble(
    x: np.ndarray, labels: np.ndarray, cfg: GBDTConfig
) -> TreeEnsemble:
    """Boost cfg.total_tree_budget trees, one per class in class order.

    Gradients and Hessians are computed once per round from the margins at
    round start; margins accumulate each new tree's predictions.
    """
    x = np.asarray(x, dtype=np.float32)
    labels = np.asarray(labels)
    n = x.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if n == 0:
        raise ValueError("cannot train on an empty feature matrix")
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise ValueError(f"labels must lie in [0, {cfg.n_classes})")
    if not np.isfinite(x).all():
        raise ValueError("training features must be finite")

    ens = TreeEnsemble(config=cfg, n_features=x.shape[1])
    margins = np.tile(ens.base_score, (n, 1))
    built = 0
    budget = cfg.total_tree_budget
    while built < budget:
        g, h = softmax_grad_hess(margins, labels)
        for k in range(cfg.n_classes):
            if built >= budget:
                break
            tree = grow_tree(x, g[:, k], h[:, k], cfg)
            margins[:, k] += _tree_predict(tree, x)
            ens.trees.append((k, tree))
            built += 1
    return ens


def predict_margins(ens: TreeEnsemble, x: np.ndarray) -> np.ndarray:
    """Raw class margins [N, K]; input is cast to float32 (the canonical
    persisted feature precision) before routing."""
    x32 = np.asarray(x, dtype=np.float32)
    if x32.ndim != 2:
        raise ValueError(f"features must be 2-d [N, F], got ndim={x32.ndim}")
    if ens.n_features is not None and x32.shape[1] != ens.n_features:
        raise ValueError(
            f"feature width {x32.shape[1]} != ensemble n_features {ens.n_features}"
        )
    n = x32.shape[0]
    margins = np.tile(ens.base_score, (n, 1))
    for k, tree in ens.trees:
        margins[:, k] += _tree_predict(tree, x32)
    return margins


def predict_class(ens: TreeEnsemble, x: np.ndarray) -> np.ndarray:
    """Argmax class ids; ties break toward the lowest class index."""
    return np.argmax(predict_margins(ens, x), axis=1)


def round_losses(ens: TreeEnsemble, x: np.ndarray, labels: np.ndarray):
    """Mean multiclass log-loss before boosting and after each round.

    Replays the ensemble in boosting order (trees grouped per round, one
    tree per class); entry 0 is the base-score loss, entry r the loss after
    round r. The final margins equal predict_margins exactly.
    """
    x32 = np.asarray(x, dtype=np.float32)
    labels = np.asarray(labels)
    n, k = x32.shape[0], ens.config.n_classes
    margins = np.tile(ens.base_score, (n, 1))

    def mean_loss():
        z = margins - margins.max(axis=1, keepdims=True)
        logp = z[np.arange(n), labels] - np.log(np.exp(z).sum(axis=1))
        return float(-logp.mean())

    losses = [mean_loss()]
    for start in range(0, len(ens.trees), k):
        for cls, tree in ens.trees[start:start + k]:
            margins[:, cls] += _tree_predict(tree, x32)
        losses.append(mean_loss())
    return losses


# --- text serialization ------------------------------------------------------

_HEADER = "RXGB-GBDT v1"
_CONFIG_KEYS = (
    "n_classes", "max_trees", "max_depth", "learning_rate", "reg_lambda",
    "gamma", "min_child_weight", "budget_mode", "base_score",
)


def _fmt(v: float) -> str:
    return repr(float(v))


def _node_sexpr(node: TreeNode) -> str:
    if node.is_leaf:
        return f"(leaf w={_fmt(node.weight)})"
    return (
        f"(split f={node.feature} t={_fmt(node.threshold)} "
        f"d={node.default_direction} {_node_sexpr(node.left)} "
        f"{_node_sexpr(node.right)})"
    )


def serialize(ens: TreeEnsemble) -> str:
    """Deterministic UTF-8 text encoding of an ensemble.

    Format: header line, key=value config block, base_scores line with one
    shortest-round-trip decimal per class, trees count, then one
    `(tree class=K ...)` s-expression per line in boosting order.
    """
    cfg = ens.config
    lines = [_HEADER]
    for key in _CONFIG_KEYS:
        if key == "base_score":
            continue
        lines.append(f"{key}={getattr(cfg, key)}")
    lines.append("base_scores=" + " ".join(_fmt(v) for v in ens.base_score))
    lines.append(f"n_features={ens.n_features or 0}")
    lines.append(f"trees={len(ens.trees)}")
    for k, tree in ens.trees:
        lines.append(f"(tree class={k} {_node_sexpr(tree)})")
    return "\n".join(lines) + "\n"


class FormatError(ValueError):
    """Malformed GBDT model text."""


class _Tokens:
    def __init__(self, text: str):
        self.toks: list[str] = []
        cur = []
        for ch in text:
            if ch in "()":
                if cur:
                    self.toks.append("".join(cur))
                    cur = []
                self.toks.append(ch)
            elif ch.isspace():
                if cur:
                    self.toks.append("".join(cur))
                    cur = []
            else:
                cur.append(ch)
        if cur:
            self.toks.append("".join(cur))
        self.pos = 0

    def next(self) -> str:
        if self.pos >= len(self.toks):
            raise FormatError("unexpected end of tree expression")
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def expect(self, want: str) -> None:
        got = self.next()
        if got != want:
            raise FormatError(f"expected {want!r} at token {self.pos - 1}, got {got!r}")

    def done(self) -> bool:
        return self.pos >= len(self.toks)


def _take_kv(toks: _Tokens, key: str) -> str:
    tok = toks.next()
    if not tok.startswith(key + "="):
        raise FormatError(f"expected {key}=... at token {toks.pos - 1}, got {tok!r}")
    return tok[len(key) + 1:]


def _parse_float(s: str, what: str) -> float:
    try:
        return float(s)
    except ValueError as e:
        raise FormatError(f"bad {what} value {s!r}") from e


def _parse_node(toks: _Tokens) -> TreeNode:
    toks.expect("(")
    kind = toks.next()
    if kind == "leaf":
        w = _parse_float(_take_kv(toks, "w"), "leaf weight")
        toks.expect(")")
        return TreeNode(is_leaf=True, weight=w)
    if kind == "split":
        f = _take_kv(toks, "f")
        try:
            feature = int(f)
        except ValueError as e:
            raise FormatError(f"bad feature index {f!r}") from e
        thr = _parse_float(_take_kv(toks, "t"), "threshold")
        d = _take_kv(toks, "d")
        if d not in ("left", "right"):
            raise FormatError(f"bad default direction {d!r}")
        left = _parse_node(toks)
        right = _parse_node(toks)
        toks.expect(")")
        return TreeNode(
            is_leaf=False, feature=feature, threshold=thr,
            default_direction=d, left=left, right=right,
        )
    raise FormatError(f"unknown node kind {kind!r}")


def deserialize(text: str) -> TreeEnsemble:
    """Parse serialize() output; raises FormatError on any malformation."""
    lines = text.splitlines()
    if not lines or lines[0] != _HEADER:
        raise FormatError(f"bad header: expected {_HEADER!r}")
    kv = {}
    i = 1
    for key in _CONFIG_KEYS:
        if key == "base_score":
            continue
        if i >= len(lines) or not lines[i].startswith(key + "="):
            raise FormatError(f"missing config line {key}=...")
        kv[key] = lines[i].split("=", 1)[1]
        i += 1
    try:
        cfg = GBDTConfig(
            n_classes=int(kv["n_classes"]),
            max_trees=int(kv["max_trees"]),
            max_depth=int(kv["max_depth"]),
            learning_rate=float(kv["learning_rate"]),
            reg_lambda=float(kv["reg_lambda"]),
            gamma=float(kv["gamma"]),
            min_child_weight=float(kv["min_child_weight"]),
            budget_mode=kv["budget_mode"],
        )
    except ValueError as e:
        raise FormatError(f"bad config value: {e}") from e

    if i >= len(lines) or not lines[i].startswith("base_scores="):
        raise FormatError("missing base_scores line")
    parts = lines[i].split("=", 1)[1].split()
    if len(parts) != cfg.n_classes:
        raise FormatError(
            f"base_scores has {len(parts)} values, expected {cfg.n_classes}"
        )
    base = np.array([_parse_float(p, "base score") for p in parts])
    i += 1

    if i >= len(lines) or not lines[i].startswith("n_features="):
        raise FormatError("missing n_features line")
    try:
        n_features = int(lines[i].split("=", 1)[1])
    except ValueError as e:
        raise FormatError("bad n_features value") from e
    if n_features < 0:
        raise FormatError(f"negative n_features {n_features}")
    i += 1

    if i >= len(lines) or not lines[i].startswith("trees="):
        raise FormatError("missing trees= line")
    try:
        n_trees = int(lines[i].split("=", 1)[1])
    except ValueError as e:
        raise FormatError("bad trees count") from e
    i += 1

    trees: list[tuple[int, TreeNode]] = []
    for j in range(n_trees):
        if i + j >= len(lines):
            raise FormatError(f"expected {n_trees} tree records, found {j}")
        toks = _Tokens(lines[i + j])
        toks.expect("(")
        toks.expect("tree")
        cls = _take_kv(toks, "class")
        try:
            k = int(cls)
        except ValueError as e:
            raise FormatError(f"bad tree class {cls!r}") from e
        if not 0 <= k < cfg.n_classes:
            raise FormatError(f"tree class {k} out of range [0, {cfg.n_classes})")
        node = _parse_node(toks)
        toks.expect(")")
        if not toks.done():
            raise FormatError(f"trailing tokens after tree record {j}")
        trees.append((k, node))
    if i + n_trees != len(lines) and any(
        line.strip() for line in lines[i + n_trees:]
    ):
        raise FormatError("trailing content after final tree record")
    return TreeEnsemble(
        config=cfg,
        trees=trees,
        base_score=base,
        n_features=n_features or None,
    )
