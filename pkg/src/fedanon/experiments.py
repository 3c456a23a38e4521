"""Experiment families: generate world, federate, attack, report.

Each family is a function from an ExperimentConfig to result tables; all
randomness derives from the config seed, so identical configs reproduce
identical tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import __version__
from .attacks import (
    AttackDataset,
    SiameseMatcher,
    bias_consistency,
    build_attack_dataset,
    dataspace_reid,
    evaluate_matching,
    evaluate_reid,
    evaluate_reid_openworld,
    open_world_split,
    train_matcher,
    train_reid,
    train_reid_openworld,
    user_bias_profiles,
)
from .config import EXPERIMENT_FAMILIES, ExperimentConfig, config_hash, snapshot
from .deltastore import ReprConfig
from .federated import ROLE_ANONYMOUS, ROLE_SHADOW, FederatedRun, RoundConfig, run_federated
from .mitigation import MitigationConfig, tradeoff_curve
from .nn import ModelSpec
from .reporting import Report, Table
from .seeding import seed_from
from .world import (
    DatasetBundle,
    WorldConfig,
    gen_world,
    intra_inter_distances,
    limit_prior,
    make_iid_control,
)


def world_config_from(cfg: ExperimentConfig) -> WorldConfig:
    return WorldConfig(
        users=cfg.users,
        classes=cfg.classes,
        feature_dim=cfg.feature_dim,
        n_per_user=cfg.n_per_user,
        concentration=cfg.beta,
        feature_noise=cfg.sigma_x,
        drift=cfg.drift,
        albums_per_user=cfg.albums_per_user,
        test_fraction=cfg.test_fraction,
        background_size=cfg.background_size,
        prior_kind=cfg.prior_kind,
        prior_fraction=cfg.prior_fraction,
        profile_class=cfg.profile_class if cfg.profile_class >= 0 else None,
        seed=cfg.seed,
    )


def model_spec_from(cfg: ExperimentConfig) -> ModelSpec:
    return ModelSpec(
        kind=cfg.model_kind,
        input_dim=cfg.feature_dim,
        output_dim=cfg.classes,
        hidden_dim=cfg.hidden_dim if cfg.model_kind == "mlp1" else 0,
        head="softmax_ce",
    )


def round_config_from(cfg: ExperimentConfig) -> RoundConfig:
    return RoundConfig(
        fraction_c=cfg.client_fraction,
        local_epochs=cfg.local_epochs,
        batch_size=cfg.batch_size,
        eta=cfg.eta,
        rounds=cfg.rounds,
        seed=cfg.seed,
    )


def repr_config_from(cfg: ExperimentConfig) -> ReprConfig:
    return ReprConfig(layer_name=cfg.attack_layer, normalize=cfg.normalize)


@dataclass
class PipelineArtifacts:
    bundle: DatasetBundle
    spec: ModelSpec
    fed_cfg: RoundConfig
    run: FederatedRun


def run_pipeline(cfg: ExperimentConfig, bundle: DatasetBundle | None = None) -> PipelineArtifacts:
    """World generation plus the federated run every family starts from."""
    if bundle is None:
        bundle = gen_world(world_config_from(cfg))
    spec = model_spec_from(cfg)
    fed_cfg = round_config_from(cfg)
    run = run_federated(bundle, spec, fed_cfg)
    return PipelineArtifacts(bundle=bundle, spec=spec, fed_cfg=fed_cfg, run=run)


def attack_dataset_from(cfg: ExperimentConfig, arts: PipelineArtifacts, **kwargs) -> AttackDataset:
    return build_attack_dataset(arts.run.records, repr_config_from(cfg), **kwargs)


def _f(value: float) -> float:
    return float(value)


def _reid_closed(cfg: ExperimentConfig) -> list[Table]:
    arts = run_pipeline(cfg)
    ds = attack_dataset_from(cfg, arts)
    rows = []
    for method in cfg.attack_methods:
        model = train_reid(ds, method, seed_from(cfg.seed, "attack", method))
        ev = evaluate_reid(model, ds)
        rows.append(
            [method, _f(ev.mean_ap), _f(ev.chance_ap), _f(ev.ioc), _f(ev.top1), _f(ev.top5),
             len(ev.skipped)]
        )
    table = Table(
        name="reid",
        columns=["method", "ap", "chance_ap", "ioc", "top1", "top5", "skipped_labels"],
        rows=rows,
    )
    utility = Table(
        name="utility",
        columns=["round", "task_score"],
        rows=[[t + 1, _f(s)] for t, s in enumerate(arts.run.utility)],
    )
    return [table, utility]


def _matching_closed(cfg: ExperimentConfig) -> list[Table]:
    arts = run_pipeline(cfg)
    ds = attack_dataset_from(cfg, arts)
    shadow_rows = ds.rows_by_user("train")
    anon_rows = ds.rows_by_user("test")
    rows = []
    for method in cfg.match_methods:
        model = train_matcher(ds, method, seed_from(cfg.seed, "match", method))
        ev = evaluate_matching(
            model, shadow_rows, anon_rows, seed=seed_from(cfg.seed, "match-eval", method)
        )
        rows.append([method, _f(ev.ap), _f(ev.chance_ap), _f(ev.ioc), ev.n_pairs])
    return [Table(name="matching", columns=["method", "ap", "chance_ap", "ioc", "n_pairs"], rows=rows)]


def _open_world(cfg: ExperimentConfig) -> list[Table]:
    arts = run_pipeline(cfg)
    ds = attack_dataset_from(cfg, arts, require_closed_world=False)
    rows = []
    for fraction in cfg.seen_fractions:
        split = open_world_split(ds.users, fraction, seed_from(cfg.seed, "ow-split"))
        if split.seen:
            model = train_reid_openworld(ds, split, seed_from(cfg.seed, "ow-reid", repr(fraction)))
            ev = evaluate_reid_openworld(model, ds, split)
            reid_ap, reid_chance, reid_ioc = ev.mean_ap, ev.chance_ap, ev.ioc
        else:
            reid_ap = reid_chance = reid_ioc = float("nan")
        # the matcher trains on shadow rows of holdout + seen users only
        train_rows = ds.rows_by_user("train")
        known = set(split.holdout) | set(split.seen)
        matcher_rows = {u: r for u, r in train_rows.items() if u in known}
        matcher = SiameseMatcher.fit(matcher_rows, seed_from(cfg.seed, "ow-siamese", repr(fraction)))
        eval_users = set(split.seen) | set(split.unseen)
        anon_rows = {u: r for u, r in ds.rows_by_user("test").items() if u in eval_users}
        ev_match = evaluate_matching(
            matcher, anon_rows, anon_rows, seed=seed_from(cfg.seed, "ow-match", repr(fraction))
        )
        rows.append(
            [
                _f(fraction), len(split.seen), len(split.unseen), len(split.holdout),
                _f(reid_ap), _f(reid_chance), _f(reid_ioc),
                _f(ev_match.ap), _f(ev_match.chance_ap), _f(ev_match.ioc),
            ]
        )
    return [
        Table(
            name="open_world",
            columns=[
                "seen_fraction", "n_seen", "n_unseen", "n_holdout",
                "reid_ap", "reid_chance_ap", "reid_ioc",
                "match_ap", "match_chance_ap", "match_ioc",
            ],
            rows=rows,
        )
    ]


def _prior_amount(cfg: ExperimentConfig) -> list[Table]:
    """Shrink every user's prior data before the run (the shadow devices see
    fewer examples) and re-attack."""
    base = gen_world(world_config_from(cfg))
    rows = []
    for m in cfg.prior_grid:
        bundle = limit_prior(base, m, seed_from(cfg.seed, "prior-amount", m))
        arts = run_pipeline(cfg, bundle=bundle)
        ds = attack_dataset_from(cfg, arts)
        model = train_reid(ds, "mlp", seed_from(cfg.seed, "prior-attack", m))
        ev = evaluate_reid(model, ds)
        rows.append([m, _f(ev.mean_ap), _f(ev.chance_ap), _f(ev.ioc)])
    return [
        Table(name="prior_amount", columns=["prior_examples", "ap", "chance_ap", "ioc"], rows=rows)
    ]


def _train_amount(cfg: ExperimentConfig) -> list[Table]:
    """Cap the number of shadow deltas per user available to the attack."""
    arts = run_pipeline(cfg)
    rows = []
    for k in cfg.train_grid:
        ds = attack_dataset_from(
            cfg, arts, max_train_per_user=k, seed=seed_from(cfg.seed, "train-amount", k)
        )
        model = train_reid(ds, "mlp", seed_from(cfg.seed, "train-attack", k))
        ev = evaluate_reid(model, ds)
        rows.append([k, ds.train_x.shape[0], _f(ev.mean_ap), _f(ev.chance_ap), _f(ev.ioc)])
    return [
        Table(
            name="train_amount",
            columns=["deltas_per_user", "train_rows", "ap", "chance_ap", "ioc"],
            rows=rows,
        )
    ]


def _layer_sweep(cfg: ExperimentConfig) -> list[Table]:
    arts = run_pipeline(cfg)
    rows = []
    for layer, shape in arts.spec.layout():
        repr_cfg = ReprConfig(layer_name=layer, normalize=cfg.normalize)
        ds = build_attack_dataset(arts.run.records, repr_cfg)
        model = train_reid(ds, "mlp", seed_from(cfg.seed, "layer", layer))
        ev = evaluate_reid(model, ds)
        rows.append(
            [layer, int(np.prod(shape)), _f(ev.mean_ap), _f(ev.chance_ap), _f(ev.ioc)]
        )
    return [Table(name="layers", columns=["layer", "dim", "ap", "chance_ap", "ioc"], rows=rows)]


def epoch_ranges(rounds: int, n_ranges: int) -> list[tuple[int, int]]:
    """Partition rounds 1..T into contiguous half-open ranges."""
    if n_ranges < 1 or n_ranges > rounds:
        raise ValueError("need 1 <= n_ranges <= rounds")
    bounds = np.linspace(1, rounds + 1, n_ranges + 1).astype(int)
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(n_ranges)]


def _epoch_grid(cfg: ExperimentConfig) -> list[Table]:
    """Train the attack on one round range of shadow deltas, evaluate on
    another range of anonymous deltas, for every range pair."""
    arts = run_pipeline(cfg)
    ranges = epoch_ranges(cfg.rounds, cfg.epoch_ranges)
    rows = []
    for train_range in ranges:
        for eval_range in ranges:
            ds = attack_dataset_from(
                cfg, arts, train_epoch_range=train_range, test_epoch_range=eval_range
            )
            model = train_reid(ds, "mlp", seed_from(cfg.seed, "grid", train_range[0], eval_range[0]))
            ev = evaluate_reid(model, ds)
            rows.append(
                [
                    train_range[0], train_range[1], eval_range[0], eval_range[1],
                    _f(ev.mean_ap), _f(ev.chance_ap), _f(ev.ioc),
                ]
            )
    return [
        Table(
            name="epoch_grid",
            columns=["train_lo", "train_hi", "eval_lo", "eval_hi", "ap", "chance_ap", "ioc"],
            rows=rows,
        )
    ]


def _iid_control(cfg: ExperimentConfig) -> list[Table]:
    rows = []
    for variant in ("biased", "iid"):
        bundle = gen_world(world_config_from(cfg))
        if variant == "iid":
            bundle = make_iid_control(bundle, seed_from(cfg.seed, "iid-control"))
        arts = run_pipeline(cfg, bundle=bundle)
        ds = attack_dataset_from(cfg, arts)
        model = train_reid(ds, "mlp", seed_from(cfg.seed, "iid-attack", variant))
        ev = evaluate_reid(model, ds)
        rows.append([variant, _f(ev.mean_ap), _f(ev.chance_ap), _f(ev.ioc)])
    return [Table(name="iid_control", columns=["world", "ap", "chance_ap", "ioc"], rows=rows)]


def _dataspace(cfg: ExperimentConfig) -> list[Table]:
    """Raw-example attack next to the delta-space baseline."""
    arts = run_pipeline(cfg)
    ds = attack_dataset_from(cfg, arts)
    model = train_reid(ds, "mlp", seed_from(cfg.seed, "dataspace-delta"))
    ev = evaluate_reid(model, ds)
    rows = [["delta", 0, _f(ev.mean_ap), _f(ev.chance_ap), _f(ev.ioc)]]
    for size in cfg.dataspace_set_sizes:
        mode = "single" if size == 1 else "set"
        _, ev = dataspace_reid(arts.bundle, mode, size, seed_from(cfg.seed, "dataspace"))
        rows.append([f"data_{mode}", size, _f(ev.mean_ap), _f(ev.chance_ap), _f(ev.ioc)])
    return [
        Table(name="dataspace", columns=["input", "set_size", "ap", "chance_ap", "ioc"], rows=rows)
    ]


def _bias_profile(cfg: ExperimentConfig) -> list[Table]:
    arts = run_pipeline(cfg)
    profiles = user_bias_profiles(arts.run.records, cfg.attack_layer)
    users = arts.bundle.user_ids()
    rows, cons_self = [], {}
    for u in users:
        own = bias_consistency(profiles[(u, ROLE_SHADOW)], profiles[(u, ROLE_ANONYMOUS)])
        cross = [
            bias_consistency(profiles[(u, ROLE_SHADOW)], profiles[(v, ROLE_ANONYMOUS)])
            for v in users
            if v != u
        ]
        cons_self[u] = own
        rows.append([u, _f(own), _f(float(np.mean(cross)))])
    consistency = Table(
        name="consistency", columns=["user", "self_consistency", "mean_cross_consistency"], rows=rows
    )
    dist = intra_inter_distances(arts.bundle, seed=seed_from(cfg.seed, "distances"))
    distance_rows = [[u, _f(dist[u][0]), _f(dist[u][1])] for u in users]
    distances = Table(name="distances", columns=["user", "intra_median", "inter_median"], rows=distance_rows)
    profile_rows = []
    for (u, role) in sorted(profiles):
        profile_rows.append([u, role] + [_f(v) for v in profiles[(u, role)]])
    profile_table = Table(
        name="profiles",
        columns=["user", "role"] + [f"class_{c}" for c in range(cfg.classes)],
        rows=profile_rows,
    )
    return [consistency, distances, profile_table]


def _mitigation(cfg: ExperimentConfig) -> list[Table]:
    bundle = gen_world(world_config_from(cfg))
    grid = [MitigationConfig("noise", sigma2=0.0, seed=cfg.seed)]
    if "noise" in cfg.mitigation_strategies:
        grid += [MitigationConfig("noise", sigma2=s, seed=cfg.seed) for s in cfg.noise_grid]
    if "bkg_repl" in cfg.mitigation_strategies:
        grid += [
            MitigationConfig("bkg_repl", alpha=a, seed=cfg.seed) for a in cfg.repl_grid if a > 0
        ]
    for strategy in ("rand_aug", "mm_aug"):
        if strategy in cfg.mitigation_strategies:
            grid += [
                MitigationConfig(strategy, alpha=a, clusters_m=cfg.clusters_m, seed=cfg.seed)
                for a in cfg.aug_grid
                if a > 0
            ]
    points = tradeoff_curve(
        bundle,
        model_spec_from(cfg),
        round_config_from(cfg),
        repr_config_from(cfg),
        grid,
        attack_seed=seed_from(cfg.seed, "tradeoff"),
    )
    rows = [
        [
            p.strategy, _f(p.value), _f(p.attacker_ap), _f(p.chance_ap), _f(p.privacy_ioc),
            _f(p.task_score), _f(p.utility),
        ]
        for p in points
    ]
    return [
        Table(
            name="tradeoff",
            columns=["strategy", "value", "attacker_ap", "chance_ap", "privacy_ioc",
                     "task_score", "utility"],
            rows=rows,
        )
    ]


_FAMILY_FUNCS = {
    "reid_closed": _reid_closed,
    "matching_closed": _matching_closed,
    "open_world": _open_world,
    "prior_amount": _prior_amount,
    "train_amount": _train_amount,
    "layer_sweep": _layer_sweep,
    "epoch_grid": _epoch_grid,
    "iid_control": _iid_control,
    "dataspace": _dataspace,
    "bias_profile": _bias_profile,
    "mitigation": _mitigation,
}

assert set(_FAMILY_FUNCS) == set(EXPERIMENT_FAMILIES)


def run_experiment(cfg: ExperimentConfig, family: str) -> Report:
    if family not in _FAMILY_FUNCS:
        raise ValueError(f"unknown experiment family {family!r}; expected one of {EXPERIMENT_FAMILIES}")
    tables = _FAMILY_FUNCS[family](cfg)
    return Report(
        experiment=family,
        config=snapshot(cfg),
        seed=cfg.seed,
        version=__version__,
        config_hash=config_hash(cfg),
        tables=tables,
    )
