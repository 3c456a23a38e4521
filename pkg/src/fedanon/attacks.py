"""Deanonymization attacks over parameter deltas.

The adversary trains on shadow-device deltas (its prior knowledge) and is
evaluated on anonymous-device deltas from the same federated run. Attacks
come in two flavors: re-identification (score every known user for a given
delta) and matching (probability that two deltas share an author). The
open-world variants add an explicit `unseen` class trained on a held-out
user set, and the data-space attack applies the same classifier recipe to
raw examples instead of deltas.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .deltastore import ReprConfig, filter_records, represent_delta
from .federated import ROLE_ANONYMOUS, ROLE_SHADOW, DeltaRecord
from .metrics import (
    ScoredPredictions,
    average_precision,
    chance_level,
    increase_over_chance,
    mean_ap,
    topk_accuracy,
)
from .nn import ModelSpec, ParamVector
from .seeding import rng_from, seed_from
from .world import DatasetBundle, features_of

REID_METHODS = ("chance", "knn", "svm", "mlp")
MATCH_METHODS = ("chance", "mlp_product", "siamese")

KNN_K = 10

SVM_LR = 0.01
SVM_EPOCHS = 200
SVM_WEIGHT_DECAY = 1e-4

MLP_HIDDEN = 128
MLP_LR = 0.01
MLP_MOMENTUM = 0.9
MLP_LR_DECAY = 1e-6
MLP_EPOCHS = 100
MLP_BATCH = 32

SIAMESE_EMBED = 128
SIAMESE_LR = 1e-3
SIAMESE_EPOCHS = 50
# kept small on purpose: with a handful of training identities the metric
# memorizes them long before 50 epochs and stops transferring to new users
SIAMESE_PAIRS_PER_EPOCH = 64
SIAMESE_BATCH = 32

UNSEEN_LABEL = -1  # sentinel class id for the open-world `unseen` bucket


@dataclass
class AttackDataset:
    """Shadow rows become the train side, anonymous rows the test side."""

    train_x: np.ndarray
    train_users: np.ndarray
    test_x: np.ndarray
    test_users: np.ndarray
    users: tuple[int, ...]  # sorted distinct train users

    def encode(self, user_ids: np.ndarray, classes: Sequence[int]) -> np.ndarray:
        lookup = {u: i for i, u in enumerate(classes)}
        return np.asarray([lookup[int(u)] for u in user_ids], dtype=np.int64)

    def rows_by_user(self, side: str = "train") -> dict[int, np.ndarray]:
        x, users = (
            (self.train_x, self.train_users) if side == "train" else (self.test_x, self.test_users)
        )
        return {int(u): x[users == u] for u in np.unique(users)}


def build_attack_dataset(
    records: Sequence[DeltaRecord],
    repr_cfg: ReprConfig,
    *,
    train_epoch_range: tuple[int, int] | None = None,
    test_epoch_range: tuple[int, int] | None = None,
    max_train_per_user: int | None = None,
    max_test_per_user: int | None = None,
    seed: int = 0,
    require_closed_world: bool = True,
) -> AttackDataset:
    train_recs = filter_records(
        records,
        epoch_range=train_epoch_range,
        roles=(ROLE_SHADOW,),
        max_per_user=max_train_per_user,
        seed=seed_from(seed, "train-side"),
    )
    test_recs = filter_records(
        records,
        epoch_range=test_epoch_range,
        roles=(ROLE_ANONYMOUS,),
        max_per_user=max_test_per_user,
        seed=seed_from(seed, "test-side"),
    )
    if not train_recs or not test_recs:
        raise ValueError("attack dataset needs at least one record on each side")
    train_x = np.stack([represent_delta(r, repr_cfg) for r in train_recs])
    test_x = np.stack([represent_delta(r, repr_cfg) for r in test_recs])
    train_users = np.asarray([r.user_id for r in train_recs], dtype=np.int64)
    test_users = np.asarray([r.user_id for r in test_recs], dtype=np.int64)
    users = tuple(sorted(set(train_users.tolist())))
    if require_closed_world:
        missing = sorted(set(test_users.tolist()) - set(users))
        if missing:
            raise ValueError(
                f"closed-world violation: test users {missing} have no training rows"
            )
    return AttackDataset(
        train_x=train_x,
        train_users=train_users,
        test_x=test_x,
        test_users=test_users,
        users=users,
    )


# ---------------------------------------------------------------------------
# re-identification


class ChanceReid:
    """Uninformed baseline: uniform score over the known users."""

    method = "chance"

    def __init__(self, classes: Sequence[int]):
        self.classes = tuple(classes)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.full((x.shape[0], len(self.classes)), 1.0 / len(self.classes))


class KnnReid:
    """K nearest neighbors by Euclidean distance; scores are vote fractions,
    distance ties resolved toward the lower training index."""

    method = "knn"

    def __init__(self, train_x: np.ndarray, train_y: np.ndarray, classes: Sequence[int], k: int):
        self.train_x = train_x
        self.train_y = train_y
        self.classes = tuple(classes)
        self.k = min(k, train_x.shape[0])

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        d2 = (
            (x**2).sum(axis=1, keepdims=True)
            - 2.0 * x @ self.train_x.T
            + (self.train_x**2).sum(axis=1)
        )
        nearest = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
        votes = self.train_y[nearest]
        scores = np.zeros((x.shape[0], len(self.classes)))
        for c in range(len(self.classes)):
            scores[:, c] = (votes == c).sum(axis=1) / self.k
        return scores


class SvmReid:
    """One-vs-rest linear scorers fit by full-batch hinge-loss gradient
    descent with L2 weight decay; scores are softmax over the margins."""

    method = "svm"

    def __init__(self, w: np.ndarray, b: np.ndarray, classes: Sequence[int]):
        self.w = w
        self.b = b
        self.classes = tuple(classes)

    @staticmethod
    def fit(train_x: np.ndarray, train_y: np.ndarray, classes: Sequence[int], seed: int) -> "SvmReid":
        n, dim = train_x.shape
        n_cls = len(classes)
        rng = rng_from(seed, "svm-init")
        w = nn.glorot_uniform(rng, (n_cls, dim))
        b = np.zeros(n_cls)
        signs = -np.ones((n, n_cls))
        signs[np.arange(n), train_y] = 1.0
        for _ in range(SVM_EPOCHS):
            margins = train_x @ w.T + b
            active = (1.0 - signs * margins) > 0.0
            g = -(signs * active) / n
            w = w - SVM_LR * (g.T @ train_x + 2.0 * SVM_WEIGHT_DECAY * w)
            b = b - SVM_LR * g.sum(axis=0)
        return SvmReid(w, b, classes)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return nn.softmax(x @ self.w.T + self.b)


class MlpReid:
    """Single-hidden-layer (128 unit) softmax classifier over delta vectors,
    trained with momentum SGD."""

    method = "mlp"

    def __init__(self, spec: ModelSpec, params: ParamVector, classes: Sequence[int]):
        self.spec = spec
        self.params = params
        self.classes = tuple(classes)

    @staticmethod
    def fit(train_x: np.ndarray, train_y: np.ndarray, classes: Sequence[int], seed: int) -> "MlpReid":
        spec = ModelSpec(
            kind="mlp1",
            input_dim=train_x.shape[1],
            output_dim=len(classes),
            hidden_dim=MLP_HIDDEN,
            head="softmax_ce",
        )
        params = nn.init_params(spec, seed_from(seed, "mlp-init"))
        params = nn.train(
            spec,
            params,
            (train_x, train_y),
            epochs=MLP_EPOCHS,
            batch_size=MLP_BATCH,
            config=nn.sgd(MLP_LR, momentum=MLP_MOMENTUM, lr_decay=MLP_LR_DECAY),
            seed=seed_from(seed, "mlp-train"),
        )
        return MlpReid(spec, params, classes)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return nn.predict_proba(self.spec, self.params, np.atleast_2d(x))


ReidModel = ChanceReid | KnnReid | SvmReid | MlpReid


def train_reid(ds: AttackDataset, method: str, seed: int = 0) -> ReidModel:
    if method not in REID_METHODS:
        raise ValueError(f"unknown reid method {method!r}; expected one of {REID_METHODS}")
    classes = ds.users
    if method == "chance":
        return ChanceReid(classes)
    y = ds.encode(ds.train_users, classes)
    present = set(y.tolist())
    missing = [classes[i] for i in range(len(classes)) if i not in present]
    if missing:
        raise ValueError(f"users {missing} have no training rows")
    if method == "knn":
        return KnnReid(ds.train_x, y, classes, KNN_K)
    if method == "svm":
        return SvmReid.fit(ds.train_x, y, classes, seed)
    return MlpReid.fit(ds.train_x, y, classes, seed)


def predict_reid(model: ReidModel, features: np.ndarray) -> np.ndarray:
    """Score matrix over the model's classes for one or more feature rows."""
    return model.predict(features)


@dataclass
class ReidEvaluation:
    preds: ScoredPredictions
    mean_ap: float
    chance_ap: float
    ioc: float
    top1: float
    top5: float
    skipped: tuple[int, ...]


def evaluate_reid(model: ReidModel, ds: AttackDataset) -> ReidEvaluation:
    scores = model.predict(ds.test_x)
    labels = ds.encode(ds.test_users, model.classes)
    preds = ScoredPredictions(scores=scores, labels=labels)
    result = mean_ap(preds)
    _, chance = chance_level(labels, len(model.classes))
    return ReidEvaluation(
        preds=preds,
        mean_ap=result.mean_ap,
        chance_ap=chance,
        ioc=increase_over_chance(result.mean_ap, chance),
        top1=topk_accuracy(preds, 1),
        top5=topk_accuracy(preds, 5),
        skipped=result.skipped,
    )


# ---------------------------------------------------------------------------
# matching


class ChanceMatcher:
    """Seeded uniform match probability, independent of the inputs."""

    method = "chance"

    def __init__(self, seed: int = 0):
        self._rng = rng_from(seed, "chance-matcher")

    def predict_pairs(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(a).shape[0]
        return self._rng.uniform(size=n)


class MlpProductMatcher:
    """Match probability max_u P[i=u] * P[j=u] from a trained reid MLP."""

    method = "mlp_product"

    def __init__(self, reid: MlpReid):
        self.reid = reid

    def predict_pairs(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        pa = self.reid.predict(np.atleast_2d(a))
        pb = self.reid.predict(np.atleast_2d(b))
        return (pa * pb).max(axis=1)


class SiameseMatcher:
    """Shared dense encoder (128 units, ReLU) per branch, elementwise
    absolute difference, then a single sigmoid output; trained with BCE and
    RMSProp on balanced pairs that are resampled every epoch."""

    method = "siamese"

    def __init__(self, params: ParamVector):
        self.params = params

    @staticmethod
    def init_params(input_dim: int, seed: int) -> ParamVector:
        rng = rng_from(seed, "siamese-init")
        return ParamVector(
            [
                ("enc_W", nn.glorot_uniform(rng, (SIAMESE_EMBED, input_dim))),
                ("enc_b", np.zeros(SIAMESE_EMBED)),
                ("out_w", nn.glorot_uniform(rng, (1, SIAMESE_EMBED))),
                ("out_b", np.zeros(1)),
            ]
        )

    @staticmethod
    def forward(params: ParamVector, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        ea = np.maximum(a @ params.get("enc_W").T + params.get("enc_b"), 0.0)
        eb = np.maximum(b @ params.get("enc_W").T + params.get("enc_b"), 0.0)
        z = np.abs(ea - eb) @ params.get("out_w").T + params.get("out_b")
        return nn.sigmoid(z[:, 0])

    @staticmethod
    def loss_and_grad(
        params: ParamVector, a: np.ndarray, b: np.ndarray, y: np.ndarray
    ) -> tuple[float, ParamVector]:
        w1, b1 = params.get("enc_W"), params.get("enc_b")
        w2, b2 = params.get("out_w"), params.get("out_b")
        n = a.shape[0]
        z1a = a @ w1.T + b1
        z1b = b @ w1.T + b1
        ea = np.maximum(z1a, 0.0)
        eb = np.maximum(z1b, 0.0)
        diff = ea - eb
        dist = np.abs(diff)
        z = dist @ w2.T + b2
        p = nn.sigmoid(z[:, 0])
        pc = np.clip(p, nn.PROB_EPS, 1.0 - nn.PROB_EPS)
        loss = float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean())
        dz = ((p - y) / n)[:, None]
        g_w2 = dz.T @ dist
        g_b2 = dz.sum(axis=0)
        ddist = dz @ w2
        dea = ddist * np.sign(diff)
        dz1a = dea * (z1a > 0.0)
        dz1b = -dea * (z1b > 0.0)
        g_w1 = dz1a.T @ a + dz1b.T @ b
        g_b1 = dz1a.sum(axis=0) + dz1b.sum(axis=0)
        grad = ParamVector([("enc_W", g_w1), ("enc_b", g_b1), ("out_w", g_w2), ("out_b", g_b2)])
        return loss, grad

    @staticmethod
    def fit(rows_by_user: dict[int, np.ndarray], seed: int) -> "SiameseMatcher":
        eligible = {u: r for u, r in rows_by_user.items() if r.shape[0] >= 1}
        if len(eligible) < 2:
            raise ValueError("siamese training needs rows from at least 2 users")
        dim = next(iter(eligible.values())).shape[1]
        params = SiameseMatcher.init_params(dim, seed)
        state = None
        config = nn.rmsprop(SIAMESE_LR)
        iteration = 0
        for epoch in range(SIAMESE_EPOCHS):
            rng = rng_from(seed, "siamese-pairs", epoch)
            a, b, y = sample_balanced_pairs(eligible, eligible, SIAMESE_PAIRS_PER_EPOCH, rng)
            for start in range(0, a.shape[0], SIAMESE_BATCH):
                sl = slice(start, start + SIAMESE_BATCH)
                _, grad = SiameseMatcher.loss_and_grad(params, a[sl], b[sl], y[sl])
                params, state = nn.optimizer_step(state, params, grad, config, iteration)
                iteration += 1
        return SiameseMatcher(params)

    def predict_pairs(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return SiameseMatcher.forward(self.params, np.atleast_2d(a), np.atleast_2d(b))


MatchModel = ChanceMatcher | MlpProductMatcher | SiameseMatcher


def sample_balanced_pairs(
    side_a: dict[int, np.ndarray],
    side_b: dict[int, np.ndarray],
    n_pairs: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half positive (same user), half negative (distinct users) pairs.

    When both sides are the same collection, positive pairs use two distinct
    rows, so a user needs at least 2 rows to occur as a positive.
    """
    same_side = side_a is side_b
    users_a = sorted(side_a)
    users_b = sorted(side_b)
    if same_side:
        pos_users = [u for u in users_a if side_a[u].shape[0] >= 2]
    else:
        pos_users = [u for u in users_a if u in side_b]
    if not pos_users:
        raise ValueError("no user can form a positive pair")
    if len(users_a) < 2 or len(users_b) < 2:
        raise ValueError("need at least 2 users on each side for negative pairs")
    n_pos = n_pairs // 2
    n_neg = n_pairs - n_pos
    rows_a, rows_b, labels = [], [], []
    for _ in range(n_pos):
        u = pos_users[rng.integers(len(pos_users))]
        if same_side:
            i, j = rng.choice(side_a[u].shape[0], size=2, replace=False)
            rows_a.append(side_a[u][i])
            rows_b.append(side_a[u][j])
        else:
            rows_a.append(side_a[u][rng.integers(side_a[u].shape[0])])
            rows_b.append(side_b[u][rng.integers(side_b[u].shape[0])])
        labels.append(1.0)
    for _ in range(n_neg):
        while True:
            u = users_a[rng.integers(len(users_a))]
            v = users_b[rng.integers(len(users_b))]
            if u != v:
                break
        rows_a.append(side_a[u][rng.integers(side_a[u].shape[0])])
        rows_b.append(side_b[v][rng.integers(side_b[v].shape[0])])
        labels.append(0.0)
    return np.stack(rows_a), np.stack(rows_b), np.asarray(labels)


def train_matcher(ds: AttackDataset, method: str, seed: int = 0) -> MatchModel:
    if method not in MATCH_METHODS:
        raise ValueError(f"unknown match method {method!r}; expected one of {MATCH_METHODS}")
    if len(ds.users) < 2:
        raise ValueError("matching needs at least 2 users")
    if method == "chance":
        return ChanceMatcher(seed)
    if method == "mlp_product":
        reid = train_reid(ds, "mlp", seed)
        return MlpProductMatcher(reid)
    return SiameseMatcher.fit(ds.rows_by_user("train"), seed)


def match_pair(model: MatchModel, f_i: np.ndarray, f_j: np.ndarray) -> float:
    return float(model.predict_pairs(np.atleast_2d(f_i), np.atleast_2d(f_j))[0])


@dataclass
class MatchEvaluation:
    ap: float
    chance_ap: float
    ioc: float
    n_pairs: int


def evaluate_matching(
    model: MatchModel,
    side_a: dict[int, np.ndarray],
    side_b: dict[int, np.ndarray],
    n_pairs: int = 2000,
    seed: int = 0,
) -> MatchEvaluation:
    """AP over a balanced set of evaluation pairs; chance is the positive
    prevalence (0.5 by construction)."""
    rng = rng_from(seed, "match-eval")
    a, b, y = sample_balanced_pairs(side_a, side_b, n_pairs, rng)
    scores = model.predict_pairs(a, b)
    ap = average_precision(scores, y > 0.5)
    chance = float(y.mean())
    return MatchEvaluation(
        ap=ap, chance_ap=chance, ioc=increase_over_chance(ap, chance), n_pairs=n_pairs
    )


# ---------------------------------------------------------------------------
# open world


@dataclass(frozen=True)
class OpenWorldSplit:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]
    holdout: tuple[int, ...]


def open_world_split(users: Sequence[int], seen_fraction: float, seed: int = 0) -> OpenWorldSplit:
    """Hold out round(U/3) users to train the `unseen` class; split the rest
    into seen/unseen by `seen_fraction`."""
    if not 0.0 <= seen_fraction <= 1.0:
        raise ValueError("seen_fraction must be in [0, 1]")
    users = sorted(set(int(u) for u in users))
    if len(users) < 3:
        raise ValueError("open-world split needs at least 3 users")
    n_hold = max(1, int(round(len(users) / 3)))
    perm = rng_from(seed, "open-world").permutation(len(users))
    holdout = tuple(sorted(users[i] for i in perm[:n_hold]))
    rest = [users[i] for i in perm[n_hold:]]
    n_seen = int(round(len(rest) * seen_fraction))
    seen = tuple(sorted(rest[:n_seen]))
    unseen = tuple(sorted(rest[n_seen:]))
    return OpenWorldSplit(seen=seen, unseen=unseen, holdout=holdout)


def train_reid_openworld(ds: AttackDataset, split: OpenWorldSplit, seed: int = 0) -> MlpReid:
    """MLP over |seen|+1 classes; holdout users' rows train the `unseen`
    class (sentinel id -1 in the class list)."""
    if not split.holdout:
        raise ValueError("open-world training needs a non-empty holdout")
    classes = list(split.seen) + [UNSEEN_LABEL]
    unseen_idx = len(split.seen)
    rows, labels = [], []
    seen_index = {u: i for i, u in enumerate(split.seen)}
    for x, u in zip(ds.train_x, ds.train_users):
        u = int(u)
        if u in seen_index:
            rows.append(x)
            labels.append(seen_index[u])
        elif u in split.holdout:
            rows.append(x)
            labels.append(unseen_idx)
    labels_arr = np.asarray(labels, dtype=np.int64)
    if not np.any(labels_arr == unseen_idx):
        raise ValueError("holdout users have no training rows")
    for u in split.seen:
        if u not in set(int(v) for v in ds.train_users):
            raise ValueError(f"seen user {u} has no training rows")
    return MlpReid.fit(np.stack(rows), labels_arr, classes, seed)


def evaluate_reid_openworld(
    model: MlpReid, ds: AttackDataset, split: OpenWorldSplit
) -> ReidEvaluation:
    """Test on anonymous rows of seen and unseen users; unseen users' target
    is the `unseen` class. Holdout users stay out of the evaluation."""
    seen_index = {u: i for i, u in enumerate(split.seen)}
    unseen_idx = len(split.seen)
    rows, labels = [], []
    for x, u in zip(ds.test_x, ds.test_users):
        u = int(u)
        if u in seen_index:
            rows.append(x)
            labels.append(seen_index[u])
        elif u in split.unseen:
            rows.append(x)
            labels.append(unseen_idx)
    if not rows:
        raise ValueError("no evaluation rows for this split")
    scores = model.predict(np.stack(rows))
    preds = ScoredPredictions(scores=scores, labels=np.asarray(labels, dtype=np.int64))
    result = mean_ap(preds)
    _, chance = chance_level(preds.labels, len(model.classes))
    return ReidEvaluation(
        preds=preds,
        mean_ap=result.mean_ap,
        chance_ap=chance,
        ioc=increase_over_chance(result.mean_ap, chance),
        top1=topk_accuracy(preds, 1),
        top5=topk_accuracy(preds, 5),
        skipped=result.skipped,
    )


# ---------------------------------------------------------------------------
# data-space attack


def train_dataspace_model(bundle: DatasetBundle, seed: int = 0) -> MlpReid:
    """Same classifier recipe as the delta-space MLP, but on raw prior
    example features labeled by user."""
    users = bundle.user_ids()
    rows = [features_of(bundle.prior[u]) for u in users]
    labels = np.concatenate(
        [np.full(r.shape[0], i, dtype=np.int64) for i, r in enumerate(rows)]
    )
    return MlpReid.fit(np.concatenate(rows), labels, users, seed)


def dataspace_sets(
    bundle: DatasetBundle, set_size: int, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Per-user private subsets aggregated by the feature mean.

    set_size 1 reproduces the single-example evaluation exactly. If a user
    holds fewer than set_size examples, one subset is drawn with
    replacement instead.
    """
    if set_size < 1:
        raise ValueError("set_size must be >= 1")
    feats, labels = [], []
    for i, u in enumerate(bundle.user_ids()):
        x = features_of(bundle.private[u])
        n = x.shape[0]
        rng = rng_from(seed, "dataspace-sets", u)
        if set_size > n:
            groups = [rng.choice(n, size=set_size, replace=True)]
        else:
            perm = rng.permutation(n)
            groups = [perm[s : s + set_size] for s in range(0, n, set_size)]
        for g in groups:
            feats.append(x[g].mean(axis=0))
            labels.append(i)
    return np.stack(feats), np.asarray(labels, dtype=np.int64)


def dataspace_reid(
    bundle: DatasetBundle, mode: str, set_size: int = 1, seed: int = 0
) -> tuple[MlpReid, ReidEvaluation]:
    """Re-identification from raw examples: classify single private
    examples, or the mean feature of same-user subsets."""
    if mode not in ("single", "set"):
        raise ValueError(f"mode must be 'single' or 'set', got {mode!r}")
    model = train_dataspace_model(bundle, seed)
    if mode == "single":
        set_size = 1
    x, labels = dataspace_sets(bundle, set_size, seed)
    scores = model.predict(x)
    preds = ScoredPredictions(scores=scores, labels=labels)
    result = mean_ap(preds)
    _, chance = chance_level(labels, len(model.classes))
    return model, ReidEvaluation(
        preds=preds,
        mean_ap=result.mean_ap,
        chance_ap=chance,
        ioc=increase_over_chance(result.mean_ap, chance),
        top1=topk_accuracy(preds, 1),
        top5=topk_accuracy(preds, 5),
        skipped=result.skipped,
    )


# ---------------------------------------------------------------------------
# class-bias profiles


def class_bias_profile(delta_matrix: np.ndarray) -> np.ndarray:
    """Column L2 norms of a (weights_per_class, classes) delta matrix."""
    m = np.asarray(delta_matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d delta matrix, got shape {m.shape}")
    return np.linalg.norm(m, axis=0)


def bias_consistency(profile_a: np.ndarray, profile_b: np.ndarray) -> float:
    """Cosine similarity between two class-bias profiles."""
    a = np.asarray(profile_a, dtype=np.float64)
    b = np.asarray(profile_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("profiles must have equal shapes")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def user_bias_profiles(
    records: Iterable[DeltaRecord], layer_name: str
) -> dict[tuple[int, str], np.ndarray]:
    """Mean final-layer delta per (user, role), reduced to per-class norms.

    The stored layer has shape (classes, inputs); its transpose is the
    (weights_per_class, classes) matrix the profile is defined over.
    """
    sums: dict[tuple[int, str], np.ndarray] = {}
    counts: dict[tuple[int, str], int] = {}
    for r in records:
        key = (r.user_id, r.role)
        layer = r.delta.get(layer_name)
        if key in sums:
            sums[key] = sums[key] + layer
            counts[key] += 1
        else:
            sums[key] = layer.copy()
            counts[key] = 1
    return {key: class_bias_profile(sums[key].T / counts[key]) for key in sums}
