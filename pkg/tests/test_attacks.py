"""Attack mechanics on synthetic delta logs.

Fixtures put each user's deltas in a well-separated cluster, so any working
attack must approach AP 1.0 there and collapse under a label permutation;
the matching heads are additionally pinned by hand values and symmetry."""

import numpy as np
import pytest

from fedanon.attacks import (
    KNN_K,
    UNSEEN_LABEL,
    AttackDataset,
    ChanceMatcher,
    ChanceReid,
    KnnReid,
    MlpProductMatcher,
    MlpReid,
    SiameseMatcher,
    SvmReid,
    bias_consistency,
    build_attack_dataset,
    class_bias_profile,
    dataspace_reid,
    dataspace_sets,
    evaluate_matching,
    evaluate_reid,
    evaluate_reid_openworld,
    match_pair,
    open_world_split,
    sample_balanced_pairs,
    train_matcher,
    train_reid,
    train_reid_openworld,
    user_bias_profiles,
)
from fedanon.deltastore import ReprConfig
from fedanon.federated import ROLE_ANONYMOUS, ROLE_SHADOW, DeltaRecord
from fedanon.nn import ParamVector
from fedanon.world import gen_world

from test_world import small_cfg

LAYER_SHAPE = (2, 4)  # flattens to 8-dim attack vectors
REPR = ReprConfig("W2", normalize=True)


def cluster_records(n_users=4, shadow_rows=10, anon_rows=5, noise=0.05, seed=0):
    """One tight delta cluster per user, both roles drawn from it."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_users, *LAYER_SHAPE))
    records = []
    for u in range(n_users):
        for role, count, id_base in (
            (ROLE_SHADOW, shadow_rows, n_users),
            (ROLE_ANONYMOUS, anon_rows, 0),
        ):
            for t in range(1, count + 1):
                delta = centers[u] + rng.normal(0.0, noise, size=LAYER_SHAPE)
                records.append(
                    DeltaRecord(
                        round_t=t,
                        device_id=id_base + u,
                        user_id=u,
                        role=role,
                        delta=ParamVector([("W2", delta)]),
                        n_k=20,
                    )
                )
    return records


@pytest.fixture(scope="module")
def cluster_ds():
    return build_attack_dataset(cluster_records(), REPR)


# ------------------------------------------------------------ dataset build


def test_build_dataset_routes_roles(cluster_ds):
    assert cluster_ds.train_x.shape == (40, 8)
    assert cluster_ds.test_x.shape == (20, 8)
    assert cluster_ds.users == (0, 1, 2, 3)
    assert set(cluster_ds.train_users.tolist()) == {0, 1, 2, 3}


def test_build_dataset_epoch_ranges_per_side():
    ds = build_attack_dataset(
        cluster_records(), REPR, train_epoch_range=(1, 6), test_epoch_range=(3, 5)
    )
    assert ds.train_x.shape[0] == 4 * 5
    assert ds.test_x.shape[0] == 4 * 2


def test_build_dataset_max_train_per_user():
    ds = build_attack_dataset(cluster_records(), REPR, max_train_per_user=3)
    counts = {u: int((ds.train_users == u).sum()) for u in ds.users}
    assert all(v == 3 for v in counts.values())


def test_build_dataset_closed_world_violation():
    # drop user 3's shadow rows: its anonymous rows become unattributable
    records = [
        r for r in cluster_records() if not (r.role == ROLE_SHADOW and r.user_id == 3)
    ]
    with pytest.raises(ValueError, match="closed-world"):
        build_attack_dataset(records, REPR)
    ds = build_attack_dataset(records, REPR, require_closed_world=False)
    assert ds.users == (0, 1, 2)
    assert 3 in set(ds.test_users.tolist())


def test_build_dataset_needs_both_sides():
    only_shadow = [r for r in cluster_records() if r.role == ROLE_SHADOW]
    with pytest.raises(ValueError):
        build_attack_dataset(only_shadow, REPR)


def test_rows_by_user_grouping(cluster_ds):
    rows = cluster_ds.rows_by_user("train")
    assert set(rows) == {0, 1, 2, 3}
    assert all(v.shape == (10, 8) for v in rows.values())
    rows_test = cluster_ds.rows_by_user("test")
    assert all(v.shape == (5, 8) for v in rows_test.values())


# -------------------------------------------------------- re-identification


def test_chance_reid_uniform(cluster_ds):
    model = train_reid(cluster_ds, "chance")
    scores = model.predict(cluster_ds.test_x[:3])
    np.testing.assert_array_equal(scores, np.full((3, 4), 0.25))


@pytest.mark.parametrize("method", ["knn", "svm", "mlp"])
def test_separable_clusters_are_reidentified(cluster_ds, method):
    model = train_reid(cluster_ds, method, seed=0)
    ev = evaluate_reid(model, cluster_ds)
    assert ev.mean_ap > 0.95
    assert ev.top1 > 0.95
    assert ev.ioc == pytest.approx(ev.mean_ap / ev.chance_ap)
    assert ev.chance_ap == pytest.approx(0.25)


@pytest.mark.parametrize("method", ["svm", "mlp"])
def test_label_permutation_breaks_the_attack(cluster_ds, method):
    rng = np.random.default_rng(5)
    shuffled = AttackDataset(
        train_x=cluster_ds.train_x,
        train_users=rng.permutation(cluster_ds.train_users),
        test_x=cluster_ds.test_x,
        test_users=cluster_ds.test_users,
        users=cluster_ds.users,
    )
    ev = evaluate_reid(train_reid(shuffled, method, seed=0), shuffled)
    assert ev.mean_ap < 0.55  # near the 0.25 chance line, far below separable


def test_knn_votes_and_tie_break():
    model = KnnReid(
        np.array([[0.0], [0.0], [10.0], [10.0]]),
        np.array([0, 0, 1, 1]),
        classes=(0, 1),
        k=2,
    )
    np.testing.assert_array_equal(model.predict(np.array([[0.1]])), [[1.0, 0.0]])
    np.testing.assert_array_equal(model.predict(np.array([[9.9]])), [[0.0, 1.0]])
    # equidistant training rows: stable sort prefers the lower index
    tie = KnnReid(np.array([[0.0], [0.0]]), np.array([0, 1]), classes=(0, 1), k=1)
    np.testing.assert_array_equal(tie.predict(np.array([[0.0]])), [[1.0, 0.0]])


def test_knn_k_capped_at_train_size():
    model = KnnReid(np.zeros((3, 2)), np.zeros(3, dtype=int), classes=(0,), k=KNN_K)
    assert model.k == 3


def test_svm_scores_are_softmax_rows(cluster_ds):
    model = train_reid(cluster_ds, "svm", seed=0)
    assert isinstance(model, SvmReid)
    scores = model.predict(cluster_ds.test_x)
    np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-12)


def test_reid_determinism(cluster_ds):
    a = evaluate_reid(train_reid(cluster_ds, "mlp", seed=4), cluster_ds)
    b = evaluate_reid(train_reid(cluster_ds, "mlp", seed=4), cluster_ds)
    np.testing.assert_array_equal(a.preds.scores, b.preds.scores)


def test_train_reid_rejects_unknown_method(cluster_ds):
    with pytest.raises(ValueError):
        train_reid(cluster_ds, "oracle")


def test_train_reid_rejects_userless_class(cluster_ds):
    crippled = AttackDataset(
        train_x=cluster_ds.train_x,
        train_users=cluster_ds.train_users,
        test_x=cluster_ds.test_x,
        test_users=cluster_ds.test_users,
        users=(0, 1, 2, 3, 99),
    )
    with pytest.raises(ValueError, match="99"):
        train_reid(crippled, "knn")


# ------------------------------------------------------------------ matching


def test_sample_balanced_pairs_cross_side():
    rng = np.random.default_rng(0)
    # user id sits in the first coordinate, so authorship is observable
    side_a = {u: np.array([[u, 0.0], [u, 1.0]]) for u in range(4)}
    side_b = {u: np.array([[u, 2.0], [u, 3.0]]) for u in range(4)}
    a, b, y = sample_balanced_pairs(side_a, side_b, 100, rng)
    assert y.sum() == 50
    same_author = a[:, 0] == b[:, 0]
    np.testing.assert_array_equal(same_author, y > 0.5)


def test_sample_balanced_pairs_same_side_distinct_rows():
    rng = np.random.default_rng(1)
    side = {u: np.stack([[u, i] for i in range(3)]).astype(float) for u in range(3)}
    a, b, y = sample_balanced_pairs(side, side, 60, rng)
    pos = y > 0.5
    assert (a[pos, 0] == b[pos, 0]).all()
    assert (a[pos, 1] != b[pos, 1]).all()  # never the same row twice
    assert (a[~pos, 0] != b[~pos, 0]).all()


def test_sample_balanced_pairs_error_cases():
    rng = np.random.default_rng(2)
    singles = {u: np.zeros((1, 2)) for u in range(3)}
    with pytest.raises(ValueError, match="positive"):
        sample_balanced_pairs(singles, singles, 10, rng)
    lonely = {0: np.zeros((2, 2))}
    with pytest.raises(ValueError, match="2 users"):
        sample_balanced_pairs(lonely, lonely, 10, rng)


def test_chance_matcher_seeded():
    a = ChanceMatcher(seed=0).predict_pairs(np.zeros((5, 2)), np.zeros((5, 2)))
    b = ChanceMatcher(seed=0).predict_pairs(np.zeros((5, 2)), np.zeros((5, 2)))
    np.testing.assert_array_equal(a, b)
    assert ((a >= 0) & (a <= 1)).all()


class _StubReid:
    """Fixed posteriors, for pinning the product-matcher arithmetic."""

    def __init__(self, rows):
        self.rows = {tuple(r) for r in rows}  # noqa: unused, documents intent
        self._out = np.asarray(rows)

    def predict(self, x):
        return self._out[: np.atleast_2d(x).shape[0]]


def test_mlp_product_matcher_hand_values():
    pa = _StubReid([[0.6, 0.4]])
    matcher = MlpProductMatcher(pa)
    # same stub on both branches: max(0.6*0.6, 0.4*0.4) = 0.36
    assert match_pair(matcher, np.zeros(2), np.zeros(2)) == pytest.approx(0.36)
    mixed = MlpProductMatcher(_StubReid([[1.0, 0.0], [0.0, 1.0]]))
    scores = mixed.predict_pairs(np.zeros((2, 2)), np.zeros((2, 2)))
    # both rows come from the same stub; row products are [1, 1]
    np.testing.assert_allclose(scores, [1.0, 1.0])


def test_mlp_product_on_clusters(cluster_ds):
    matcher = train_matcher(cluster_ds, "mlp_product", seed=0)
    ev = evaluate_matching(
        matcher, cluster_ds.rows_by_user("train"), cluster_ds.rows_by_user("test"),
        n_pairs=400, seed=0,
    )
    assert ev.ap > 0.95
    assert ev.chance_ap == pytest.approx(0.5)
    assert ev.n_pairs == 400


def test_siamese_is_symmetric_and_constant_on_self():
    params = SiameseMatcher.init_params(8, seed=3)
    model = SiameseMatcher(params)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    np.testing.assert_allclose(
        model.predict_pairs(a, b), model.predict_pairs(b, a), atol=1e-12
    )
    # distance 0 collapses the head to sigmoid(out_b), whatever the input
    self_scores = [match_pair(model, row, row) for row in a]
    expect = 1.0 / (1.0 + np.exp(-float(params.get("out_b")[0])))
    np.testing.assert_allclose(self_scores, expect, atol=1e-12)


def test_siamese_learns_cluster_matching(cluster_ds):
    matcher = train_matcher(cluster_ds, "siamese", seed=0)
    ev = evaluate_matching(
        matcher, cluster_ds.rows_by_user("train"), cluster_ds.rows_by_user("test"),
        n_pairs=400, seed=0,
    )
    assert ev.ap > 0.9


def test_siamese_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    params = SiameseMatcher.init_params(5, seed=1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    y = np.array([1.0, 0.0, 1.0, 0.0])
    _, grad = SiameseMatcher.loss_and_grad(params, a, b, y)
    eps = 1e-6
    flat = params.flat()
    num = np.zeros_like(flat)
    for i in range(flat.size):
        for sign, store in ((1.0, 0), (-1.0, 1)):
            bumped = flat.copy()
            bumped[i] += sign * eps
            p = ParamVector.from_flat(params, bumped)
            loss, _ = SiameseMatcher.loss_and_grad(p, a, b, y)
            if store == 0:
                hi = loss
            else:
                num[i] = (hi - loss) / (2 * eps)
    np.testing.assert_allclose(grad.flat(), num, atol=1e-5)


def test_train_matcher_validation(cluster_ds):
    with pytest.raises(ValueError):
        train_matcher(cluster_ds, "psychic")
    one_user = AttackDataset(
        train_x=cluster_ds.train_x[:10],
        train_users=np.zeros(10, dtype=np.int64),
        test_x=cluster_ds.test_x[:5],
        test_users=np.zeros(5, dtype=np.int64),
        users=(0,),
    )
    with pytest.raises(ValueError):
        train_matcher(one_user, "siamese")


# ---------------------------------------------------------------- open world


def test_open_world_split_arithmetic():
    split = open_world_split(range(9), seen_fraction=0.5, seed=0)
    assert len(split.holdout) == 3
    assert len(split.seen) == 3
    assert len(split.unseen) == 3
    combined = sorted(split.seen + split.unseen + split.holdout)
    assert combined == list(range(9))
    again = open_world_split(range(9), seen_fraction=0.5, seed=0)
    assert split == again
    assert open_world_split(range(9), 0.5, seed=1) != split


def test_open_world_split_extremes():
    all_seen = open_world_split(range(9), 1.0, seed=0)
    assert all_seen.unseen == ()
    none_seen = open_world_split(range(9), 0.0, seed=0)
    assert none_seen.seen == ()
    assert len(none_seen.unseen) == 6
    with pytest.raises(ValueError):
        open_world_split(range(9), 1.5)
    with pytest.raises(ValueError):
        open_world_split([1, 2], 0.5)


def test_open_world_reid_classes_and_eval():
    records = cluster_records(n_users=9, shadow_rows=8, anon_rows=4)
    ds = build_attack_dataset(records, REPR)
    split = open_world_split(ds.users, seen_fraction=0.5, seed=0)
    model = train_reid_openworld(ds, split, seed=0)
    assert model.classes == tuple(split.seen) + (UNSEEN_LABEL,)
    ev = evaluate_reid_openworld(model, ds, split)
    # seen + unseen users contribute their anonymous rows; holdout stays out
    assert ev.preds.labels.shape[0] == 4 * (len(split.seen) + len(split.unseen))
    assert ev.preds.scores.shape[1] == len(split.seen) + 1
    assert ev.ioc > 0.0


def test_open_world_training_validation(cluster_ds):
    from fedanon.attacks import OpenWorldSplit

    with pytest.raises(ValueError, match="holdout"):
        train_reid_openworld(cluster_ds, OpenWorldSplit(seen=(0,), unseen=(1,), holdout=()))
    with pytest.raises(ValueError, match="no training rows"):
        train_reid_openworld(
            cluster_ds, OpenWorldSplit(seen=(0,), unseen=(1,), holdout=(77,))
        )


# ---------------------------------------------------------------- data space


def test_dataspace_sets_singletons_cover_pool():
    bundle = gen_world(small_cfg())
    x, labels = dataspace_sets(bundle, set_size=1, seed=0)
    total_private = sum(len(bundle.private[u]) for u in bundle.user_ids())
    assert x.shape[0] == total_private == labels.shape[0]
    for i, u in enumerate(bundle.user_ids()):
        mine = x[labels == i]
        assert mine.shape[0] == len(bundle.private[u])


def test_dataspace_sets_partition_sizes():
    bundle = gen_world(small_cfg())
    n0 = len(bundle.private[0])
    set_size = 7
    x, labels = dataspace_sets(bundle, set_size=set_size, seed=0)
    per_user_groups = int((labels == 0).sum())
    assert per_user_groups == -(-n0 // set_size)  # ceil division
    big, big_labels = dataspace_sets(bundle, set_size=10_000, seed=0)
    assert int((big_labels == 0).sum()) == 1
    with pytest.raises(ValueError):
        dataspace_sets(bundle, set_size=0)


def test_dataspace_single_equals_set_size_one():
    bundle = gen_world(small_cfg())
    _, single = dataspace_reid(bundle, "single", set_size=99, seed=0)
    _, explicit = dataspace_reid(bundle, "set", set_size=1, seed=0)
    assert single.mean_ap == explicit.mean_ap
    assert single.top1 == explicit.top1
    with pytest.raises(ValueError):
        dataspace_reid(bundle, "telepathy")


# ------------------------------------------------------------- bias profiles


def test_class_bias_profile_column_norms():
    np.testing.assert_allclose(
        class_bias_profile(np.array([[3.0, 0.0], [4.0, 0.0]])), [5.0, 0.0]
    )
    with pytest.raises(ValueError):
        class_bias_profile(np.zeros(3))


def test_bias_consistency_cosine():
    assert bias_consistency([1.0, 2.0], [2.0, 4.0]) == pytest.approx(1.0)
    assert bias_consistency([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)
    assert bias_consistency([0.0, 0.0], [1.0, 1.0]) == 0.0
    with pytest.raises(ValueError):
        bias_consistency([1.0], [1.0, 2.0])


def test_user_bias_profiles_average_then_reduce():
    w_a = np.array([[1.0, 0.0], [0.0, 2.0]])
    w_b = np.array([[3.0, 0.0], [0.0, 4.0]])
    records = [
        DeltaRecord(1, 0, 0, ROLE_ANONYMOUS, ParamVector([("W2", w_a)]), 5),
        DeltaRecord(2, 0, 0, ROLE_ANONYMOUS, ParamVector([("W2", w_b)]), 5),
        DeltaRecord(1, 4, 0, ROLE_SHADOW, ParamVector([("W2", w_a)]), 5),
    ]
    profiles = user_bias_profiles(records, "W2")
    assert set(profiles) == {(0, ROLE_ANONYMOUS), (0, ROLE_SHADOW)}
    # anonymous mean is [[2, 0], [0, 3]]; transposed column norms are the
    # per-class magnitudes [2, 3]
    np.testing.assert_allclose(profiles[(0, ROLE_ANONYMOUS)], [2.0, 3.0])
    np.testing.assert_allclose(profiles[(0, ROLE_SHADOW)], [1.0, 2.0])
