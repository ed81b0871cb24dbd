"""Character-CNN + graph-convolution node classifier over query-click graphs.

The model embeds node text at the character level, applies parallel
convolutions (one per window size) with max-pooling, then three graph
convolutions over the symmetric normalized adjacency (with self-loops),
and a final linear layer with sigmoid output. Training is full-batch
gradient descent with patience-based early stopping; all tensors are
float64 numpy, with hand-rolled backprop verified by finite differences.

Small graphs are first pretrained to regress smoothed seed-walk ranks
(targets 1 - rank/K for the top-K nodes), stopping once rank correlation
on held-out target nodes reaches the configured level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .annotations import LabelStore
from .ppr import PprScores
from .qcgraph import NODE_URL, QueryClickGraph
from .stats import auc_score, child_seed, spearman

logger = logging.getLogger(__name__)

PAD_IDX = 0
OOV_IDX = 96
VOCAB_SIZE = 97  # pad + printable ASCII (32..126) + OOV


@dataclass
class ModelConfig:
    embed_dim: int = 16
    conv_windows: tuple[int, ...] = (3, 5)
    conv_filters: int = 32
    gcn_dims: tuple[int, ...] = (64, 64, 32)
    max_chars: int = 60
    optimizer: str = "gd"  # "gd" (fixed-step gradient descent) or "adam"
    learning_rate: float = 0.5
    max_epochs: int = 400
    patience: int = 25
    pretrain: bool | None = None  # None: auto, by node-count threshold
    pretrain_node_threshold: int = 5_000_000
    pretrain_correlation_stop: float = 0.8
    pretrain_max_epochs: int = 300
    pretrain_learning_rate: float = 0.2
    precision_floor: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.pretrain_correlation_stop < 1.0:
            raise ValueError("pretrain_correlation_stop must be in (0, 1)")
        if self.embed_dim <= 0 or self.conv_filters <= 0 or any(d <= 0 for d in self.gcn_dims):
            raise ValueError("layer widths must be positive")


def encode_text(text: str, max_chars: int) -> np.ndarray:
    idx = np.zeros(max_chars, dtype=np.int32)
    for i, ch in enumerate(text[:max_chars]):
        o = ord(ch)
        idx[i] = o - 31 if 32 <= o <= 126 else OOV_IDX
    return idx


@dataclass
class PretrainTarget:
    k: int
    targets: dict[int, float]  # node index -> regression target in [0, 1]

    @classmethod
    def from_ppr(cls, scores: PprScores) -> "PretrainTarget":
        from .stats import rankdata

        g = scores.graph
        ranks = scores.node_ranks()
        seed_ranks = [ranks[g.query_index[q]] for q in scores.seeds]
        q_max = max(seed_ranks) + 1
        k = max(1000, q_max)
        # tied scores share a target: average 0-based rank over the tie group.
        # Normalizing by the realized rank range keeps targets spread over
        # [0, 1] on graphs smaller than k (same as rank/k otherwise).
        avg_rank = rankdata(-scores.scores) - 1.0
        denom = float(min(k, g.n_nodes))
        targets = {}
        for node, rank in ranks.items():
            if rank < k and g.node_kinds[node] == NODE_URL:
                targets[node] = min(max(1.0 - avg_rank[node] / denom, 0.0), 1.0)
        return cls(k=k, targets=targets)


@dataclass
class PretrainInfo:
    ran: bool = False
    epochs: int = 0
    correlation: float | None = None
    hit_target: bool = False
    degenerate: bool = False


@dataclass
class TrialResult:
    trial: int
    split: dict[str, str]  # url -> train/val/test
    auc: float
    tpr: float
    fpr: float
    t_med: float
    t_prec: float | None
    threshold_ok: bool
    scores: dict[str, float]  # every URL node
    epochs: int = 0
    pretrain: PretrainInfo = field(default_factory=PretrainInfo)

    @property
    def threshold(self) -> float:
        if self.t_prec is None:
            return self.t_med
        return max(self.t_med, self.t_prec)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class _Optimizer:
    """Parameter updater: fixed-step GD or Adam, per config."""

    def __init__(self, kind: str, lr: float):
        if kind not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.kind == "gd":
            for k in params:
                params[k] -= self.lr * grads[k]
            return
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.t += 1
        for k in params:
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = b1 * self.m[k] + (1 - b1) * grads[k]
            self.v[k] = b2 * self.v[k] + (1 - b2) * grads[k] ** 2
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + eps)


class GnnModel:
    """Classifier bound to one query-click graph."""

    def __init__(self, graph: QueryClickGraph, config: ModelConfig | None = None):
        self.graph = graph
        self.config = config or ModelConfig()
        cfg = self.config
        n = graph.n_nodes
        if n == 0:
            raise ValueError("empty graph")
        char_idx = np.stack([encode_text(t, cfg.max_chars) for t in graph.node_texts])
        self.char_idx = char_idx.astype(np.int64)
        self.flat_chars = self.char_idx.ravel()
        # fixed scatter plan for the embedding gradient (sorted segments)
        perm = np.argsort(self.flat_chars, kind="stable")
        sorted_chars = self.flat_chars[perm]
        starts = np.flatnonzero(np.r_[True, sorted_chars[1:] != sorted_chars[:-1]])
        self._scatter = (perm, starts, sorted_chars[starts])
        for w in cfg.conv_windows:
            if cfg.max_chars - w + 1 <= 0:
                raise ValueError(f"window {w} larger than max_chars")
        # symmetric normalized adjacency with self-loops
        a = np.zeros((n, n), dtype=np.float64)
        for (src, dst), wgt in graph.edges.items():
            a[src, dst] += wgt
            a[dst, src] += wgt
        a[np.diag_indices(n)] += 1.0
        d = a.sum(axis=1)
        dis = 1.0 / np.sqrt(d)
        self.adj = a * dis[:, None] * dis[None, :]
        self.text_dim = cfg.conv_filters * len(cfg.conv_windows)
        self.url_nodes = np.array(sorted(graph.url_index.values()), dtype=np.int64)

    # -- parameters ---------------------------------------------------------

    def param_keys(self) -> list[str]:
        cfg = self.config
        keys = ["embed"]
        for w in cfg.conv_windows:
            keys += [f"conv_w{w}", f"conv_b{w}"]
        for l in range(len(cfg.gcn_dims)):
            keys += [f"gcn_w{l}", f"gcn_b{l}"]
        keys += ["out_w", "out_b"]
        return keys

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        cfg = self.config
        params = {"embed": rng.normal(0.0, 0.1, size=(VOCAB_SIZE, cfg.embed_dim))}
        for w in cfg.conv_windows:
            fan = w * cfg.embed_dim
            params[f"conv_w{w}"] = rng.normal(0.0, np.sqrt(2.0 / fan), size=(fan, cfg.conv_filters))
            params[f"conv_b{w}"] = np.zeros(cfg.conv_filters)
        prev = self.text_dim
        for l, dim in enumerate(cfg.gcn_dims):
            params[f"gcn_w{l}"] = rng.normal(0.0, np.sqrt(2.0 / prev), size=(prev, dim))
            params[f"gcn_b{l}"] = np.zeros(dim)
            prev = dim
        params["out_w"] = rng.normal(0.0, np.sqrt(1.0 / prev), size=prev)
        params["out_b"] = np.zeros(1)
        return params

    # -- forward / backward -------------------------------------------------

    def _forward(self, params: dict[str, np.ndarray]):
        cfg = self.config
        de = cfg.embed_dim
        emb = params["embed"][self.flat_chars].reshape(
            self.char_idx.shape[0], cfg.max_chars, de)
        cache: dict = {"conv": {}, "emb": emb}
        feats = []
        for w in cfg.conv_windows:
            p = cfg.max_chars - w + 1
            # convolution as a sum of shifted matmuls (avoids im2col)
            wc = params[f"conv_w{w}"]
            pre = np.broadcast_to(params[f"conv_b{w}"],
                                  (emb.shape[0], p, cfg.conv_filters)).copy()
            for o in range(w):
                pre += emb[:, o:o + p, :] @ wc[o * de:(o + 1) * de, :]
            act = np.maximum(pre, 0.0)
            amax = act.argmax(axis=1)
            pooled = np.take_along_axis(act, amax[:, None, :], axis=1)[:, 0, :]
            cache["conv"][w] = (pre, amax)
            feats.append(pooled)
        h = np.concatenate(feats, axis=1)
        cache["hs"] = [h]
        cache["us"] = []
        for l in range(len(cfg.gcn_dims)):
            m = h @ params[f"gcn_w{l}"] + params[f"gcn_b{l}"]
            u = self.adj @ m
            h = np.maximum(u, 0.0)
            cache["us"].append(u)
            cache["hs"].append(h)
        z = h @ params["out_w"] + params["out_b"][0]
        cache["z"] = z
        return z, cache

    def forward(self, params: dict[str, np.ndarray]) -> np.ndarray:
        """Scores in [0, 1] for every node."""
        z, _ = self._forward(params)
        return _sigmoid(z)

    def _backward(self, params, cache, dz) -> dict[str, np.ndarray]:
        cfg = self.config
        grads = {}
        h_last = cache["hs"][-1]
        grads["out_w"] = h_last.T @ dz
        grads["out_b"] = np.array([dz.sum()])
        dh = np.outer(dz, params["out_w"])
        for l in reversed(range(len(cfg.gcn_dims))):
            du = dh * (cache["us"][l] > 0.0)
            dm = self.adj @ du  # adjacency is symmetric
            h_prev = cache["hs"][l]
            grads[f"gcn_w{l}"] = h_prev.T @ dm
            grads[f"gcn_b{l}"] = dm.sum(axis=0)
            dh = dm @ params[f"gcn_w{l}"].T
        emb = cache["emb"]
        de = cfg.embed_dim
        demb = np.zeros_like(emb)
        off = 0
        for w in cfg.conv_windows:
            dpool = dh[:, off:off + cfg.conv_filters]
            off += cfg.conv_filters
            pre, amax = cache["conv"][w]
            p = pre.shape[1]
            dact = np.zeros_like(pre)
            np.put_along_axis(dact, amax[:, None, :], dpool[:, None, :], axis=1)
            dpre = dact * (pre > 0.0)
            wc = params[f"conv_w{w}"]
            gw = np.empty_like(wc)
            dpre_flat = dpre.reshape(-1, cfg.conv_filters)
            for o in range(w):
                seg = emb[:, o:o + p, :].reshape(-1, de)
                gw[o * de:(o + 1) * de, :] = seg.T @ dpre_flat
                demb[:, o:o + p, :] += dpre @ wc[o * de:(o + 1) * de, :].T
            grads[f"conv_w{w}"] = gw
            grads[f"conv_b{w}"] = dpre.sum(axis=(0, 1))
        perm, starts, uniq = self._scatter
        seg_sums = np.add.reduceat(demb.reshape(-1, de)[perm], starts, axis=0)
        grads["embed"] = np.zeros_like(params["embed"])
        grads["embed"][uniq] = seg_sums
        return grads

    def loss_and_grads(self, params, node_idx, targets, kind: str = "bce",
                       loss_scale: float = 1.0):
        """Loss over the given nodes plus gradients for every parameter."""
        node_idx = np.asarray(node_idx, dtype=np.int64)
        y = np.asarray(targets, dtype=np.float64)
        z, cache = self._forward(params)
        zl = z[node_idx]
        p = _sigmoid(zl)
        m = len(node_idx)
        if kind == "bce":
            loss = float(np.mean(np.maximum(zl, 0.0) - zl * y + np.log1p(np.exp(-np.abs(zl)))))
            dzl = (p - y) / m
        elif kind == "mse":
            loss = float(np.mean((p - y) ** 2))
            dzl = 2.0 * (p - y) * p * (1.0 - p) / m
        else:
            raise ValueError(f"unknown loss kind {kind!r}")
        loss *= loss_scale
        dz = np.zeros_like(z)
        np.add.at(dz, node_idx, dzl * loss_scale)
        return loss, self._backward(params, cache, dz)

    def loss_only(self, params, node_idx, targets, kind: str = "bce") -> float:
        z, _ = self._forward(params)
        zl = z[np.asarray(node_idx, dtype=np.int64)]
        y = np.asarray(targets, dtype=np.float64)
        if kind == "bce":
            return float(np.mean(np.maximum(zl, 0.0) - zl * y + np.log1p(np.exp(-np.abs(zl)))))
        return float(np.mean((_sigmoid(zl) - y) ** 2))

    # -- training -----------------------------------------------------------

    def pretrain(self, params, target: PretrainTarget, rng: np.random.Generator):
        """Regress seed-walk rank targets until held-out rank correlation
        reaches the configured stop level (or epochs run out)."""
        cfg = self.config
        info = PretrainInfo(ran=True)
        nodes = np.array(sorted(target.targets), dtype=np.int64)
        y = np.array([target.targets[i] for i in nodes])
        if len(nodes) < 4 or np.all(y == y[0]):
            info.degenerate = True
            logger.warning("pretrain targets degenerate (constant or too few); skipping")
            return params, info
        perm = rng.permutation(len(nodes))
        n_val = max(1, len(nodes) // 4)
        val_idx, train_idx = nodes[perm[:n_val]], nodes[perm[n_val:]]
        val_y, train_y = y[perm[:n_val]], y[perm[n_val:]]
        best_corr = -2.0
        best = {k: v.copy() for k, v in params.items()}
        opt = _Optimizer(cfg.optimizer, cfg.pretrain_learning_rate)
        for epoch in range(1, cfg.pretrain_max_epochs + 1):
            _, grads = self.loss_and_grads(params, train_idx, train_y, kind="mse")
            opt.step(params, grads)
            preds = self.forward(params)[val_idx]
            corr = spearman(preds, val_y)
            info.epochs = epoch
            if corr is None:
                info.degenerate = True
                logger.warning("pretrain validation correlation undefined; stopping")
                return params, info
            if corr > best_corr:
                best_corr = corr
                best = {k: v.copy() for k, v in params.items()}
            if corr >= cfg.pretrain_correlation_stop:
                info.correlation = corr
                info.hit_target = True
                return params, info
        info.correlation = best_corr
        logger.warning("pretrain never reached correlation %.2f (best %.3f); keeping best params",
                       cfg.pretrain_correlation_stop, best_corr)
        return best, info

    def _split_labels(self, labels: LabelStore, rng: np.random.Generator):
        pos = sorted(u for u in labels.positives() if u in self.graph.url_index)
        neg = sorted(u for u in labels.negatives() if u in self.graph.url_index)
        if len(pos) < 2 or len(neg) < 2:
            raise ValueError(f"need >=2 labels per class on the graph, got {len(pos)}+/{len(neg)}-")
        split: dict[str, str] = {}
        for group in (pos, neg):  # stratified 60/15/25
            order = rng.permutation(len(group))
            n_train = max(1, round(0.6 * len(group)))
            n_val = max(1, round(0.15 * len(group)))
            for j, oi in enumerate(order):
                if j < n_train:
                    split[group[oi]] = "train"
                elif j < n_train + n_val:
                    split[group[oi]] = "val"
                else:
                    split[group[oi]] = "test"
        if not any(v == "test" for v in split.values()):
            raise ValueError("label set too small to form a test split")
        return split, set(pos)

    def train(self, labels: LabelStore, split_seed: int,
              pretrain_target: PretrainTarget | None = None,
              trial: int = 0) -> TrialResult:
        cfg = self.config
        rng = np.random.default_rng(child_seed(cfg.seed, trial, split_seed))
        split, pos_set = self._split_labels(labels, rng)
        params = self.init_params(rng)
        do_pretrain = cfg.pretrain
        if do_pretrain is None:
            do_pretrain = self.graph.n_nodes < cfg.pretrain_node_threshold
        pre_info = PretrainInfo()
        if do_pretrain and pretrain_target is not None:
            params, pre_info = self.pretrain(params, pretrain_target, rng)

        def idx_y(part: str):
            urls = sorted(u for u, s in split.items() if s == part)
            idx = np.array([self.graph.url_index[u] for u in urls], dtype=np.int64)
            y = np.array([1.0 if u in pos_set else 0.0 for u in urls])
            return idx, y

        tr_idx, tr_y = idx_y("train")
        va_idx, va_y = idx_y("val")
        te_idx, te_y = idx_y("test")
        best_val = np.inf
        best = {k: v.copy() for k, v in params.items()}
        stale = 0
        epochs = 0
        opt = _Optimizer(cfg.optimizer, cfg.learning_rate)
        for epoch in range(1, cfg.max_epochs + 1):
            epochs = epoch
            _, grads = self.loss_and_grads(params, tr_idx, tr_y, kind="bce")
            opt.step(params, grads)
            val_loss = self.loss_only(params, va_idx, va_y, kind="bce")
            if val_loss < best_val - 1e-12:
                best_val = val_loss
                best = {k: v.copy() for k, v in params.items()}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        scores_all = self.forward(best)
        te_scores = scores_all[te_idx]
        te_bool = te_y > 0.5
        auc = auc_score(te_bool, te_scores)
        t_med = float(np.median(te_scores[te_bool]))
        t_prec = self._precision_threshold(te_scores, te_bool)
        t = t_med if t_prec is None else max(t_med, t_prec)
        tpr = float(np.mean(te_scores[te_bool] > t))
        fpr = float(np.mean(te_scores[~te_bool] > t))
        url_scores = {u: float(scores_all[i]) for u, i in self.graph.url_index.items()}
        return TrialResult(trial=trial, split=split, auc=auc, tpr=tpr, fpr=fpr,
                           t_med=t_med, t_prec=t_prec, threshold_ok=t_prec is not None,
                           scores=url_scores, epochs=epochs, pretrain=pre_info)

    def _precision_threshold(self, scores: np.ndarray, y: np.ndarray) -> float | None:
        """Smallest threshold with precision >= the floor on held-out data."""
        floor = self.config.precision_floor
        for theta in [0.0] + sorted(np.unique(scores)):
            pred = scores > theta
            if pred.sum() == 0:
                return None
            if (pred & y).sum() / pred.sum() >= floor:
                return float(theta)
        return None

    def gradient_check(self, node_idx, targets, kind: str = "bce",
                       eps: float = 1e-6, seed: int = 0) -> float:
        """Max relative error between analytic and central-difference grads."""
        rng = np.random.default_rng(seed)
        params = self.init_params(rng)
        _, grads = self.loss_and_grads(params, node_idx, targets, kind=kind)
        worst = 0.0
        for key in self.param_keys():
            arr = params[key]
            flat = arr.ravel()
            gflat = grads[key].ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                lp = self.loss_only(params, node_idx, targets, kind=kind)
                flat[i] = orig - eps
                lm = self.loss_only(params, node_idx, targets, kind=kind)
                flat[i] = orig
                fd = (lp - lm) / (2.0 * eps)
                err = abs(fd - gflat[i]) / max(1e-6, abs(fd), abs(gflat[i]))
                if err > worst:
                    worst = err
        return worst


def run_trials(graph: QueryClickGraph, labels: LabelStore, config: ModelConfig,
               ppr_scores: PprScores | None = None, n_trials: int = 10) -> list[TrialResult]:
    """Retrain with reshuffled splits; one result per trial."""
    model = GnnModel(graph, config)
    target = PretrainTarget.from_ppr(ppr_scores) if ppr_scores is not None else None
    results = []
    for trial in range(n_trials):
        results.append(model.train(labels, split_seed=trial, pretrain_target=target, trial=trial))
    return results


@dataclass
class Expansion:
    included: list[str]
    pass_counts: dict[str, dict[str, int]]  # url -> {"t_med": k, "t_prec": k, "both": k}
    n_trials: int
    aborted_trials: int


def expand_urls(trials: list[TrialResult], candidate_urls: set[str],
                labels: LabelStore, min_passes: int = 6) -> Expansion:
    """Promote unlabeled URLs that clear both thresholds in enough trials.

    Trials where the precision threshold was unattainable count as failed
    passes for every URL. Already-labeled URLs are never re-emitted.
    """
    eligible = sorted(u for u in candidate_urls if u not in labels.url_labels)
    counts = {u: {"t_med": 0, "t_prec": 0, "both": 0} for u in eligible}
    aborted = 0
    for tr in trials:
        if not tr.threshold_ok:
            aborted += 1
            continue
        for u in eligible:
            s = tr.scores.get(u)
            if s is None:
                continue
            med_ok = s > tr.t_med
            prec_ok = s > tr.t_prec
            counts[u]["t_med"] += med_ok
            counts[u]["t_prec"] += prec_ok
            counts[u]["both"] += med_ok and prec_ok
    included = [u for u in eligible if counts[u]["both"] >= min_passes]
    return Expansion(included=included, pass_counts=counts,
                     n_trials=len(trials), aborted_trials=aborted)
