"""FederatedAveraging over the synthetic world.

Every user contributes two devices to the same run: an anonymous device
holding the private split and a shadow device holding the adversary's prior
split. The server samples devices per round, each runs local minibatch SGD,
and the global model moves by the data-weighted average of the local
parameter deltas (delta = local minus global; the weights are normalized
over the sampled subset).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import nn
from .metrics import average_precision
from .nn import ModelSpec, ParamVector
from .seeding import rng_from, seed_from
from .world import DatasetBundle, Example, features_of, labels_of

ROLE_ANONYMOUS = "anonymous"
ROLE_SHADOW = "shadow_prior"

# hook applied by a device to its outgoing delta (mitigations plug in here);
# the aggregation path itself never branches on it
DeltaHook = Callable[[int, "DeviceState", ParamVector], ParamVector]


@dataclass(frozen=True)
class RoundConfig:
    """Server-side schedule. The reference defaults are device fraction 0.1
    with one local epoch; desk-scale experiments typically override the
    fraction to 1.0 to densify the delta log."""

    fraction_c: float = 0.1
    local_epochs: int = 1
    batch_size: int = 4
    eta: float = 0.8
    rounds: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.fraction_c <= 1.0:
            raise ValueError("fraction_c must be in (0, 1]")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eta <= 0.0:
            raise ValueError("eta must be > 0")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass
class DeviceState:
    device_id: int
    user_id: int
    role: str
    examples: list[Example]

    def __post_init__(self) -> None:
        if self.role not in (ROLE_ANONYMOUS, ROLE_SHADOW):
            raise ValueError(f"unknown device role {self.role!r}")
        if not self.examples:
            raise ValueError(f"device {self.device_id} has no data")
        self.x = features_of(self.examples)
        self.y = labels_of(self.examples)

    @property
    def n_k(self) -> int:
        return len(self.examples)


@dataclass
class DeltaRecord:
    round_t: int
    device_id: int
    user_id: int
    role: str
    delta: ParamVector
    n_k: int


@dataclass
class FederatedRun:
    final_params: ParamVector
    records: list[DeltaRecord]
    utility: list[float]  # per-round held-out task score
    seconds: float = 0.0


def build_devices(bundle: DatasetBundle) -> list[DeviceState]:
    """Two devices per user: anonymous ids 0..U-1, shadow ids U..2U-1."""
    order = bundle.user_ids()
    devices = []
    for i, u in enumerate(order):
        devices.append(DeviceState(device_id=i, user_id=u, role=ROLE_ANONYMOUS,
                                   examples=bundle.private[u]))
    for i, u in enumerate(order):
        devices.append(DeviceState(device_id=len(order) + i, user_id=u, role=ROLE_SHADOW,
                                   examples=bundle.prior[u]))
    return devices


def device_update(
    spec: ModelSpec,
    device: DeviceState,
    global_params: ParamVector,
    cfg: RoundConfig,
    round_t: int,
    delta_hook: Optional[DeltaHook] = None,
) -> DeltaRecord:
    """Local epochs of plain minibatch SGD from the global model; the delta
    is local-minus-global."""
    local = nn.train(
        spec,
        global_params,
        (device.x, device.y),
        epochs=cfg.local_epochs,
        batch_size=min(cfg.batch_size, device.n_k),
        config=nn.sgd(cfg.eta),
        seed=seed_from(cfg.seed, "device-update", round_t, device.device_id),
    )
    delta = local - global_params
    if delta_hook is not None:
        delta = delta_hook(round_t, device, delta)
    return DeltaRecord(
        round_t=round_t,
        device_id=device.device_id,
        user_id=device.user_id,
        role=device.role,
        delta=delta,
        n_k=device.n_k,
    )


def aggregate(global_params: ParamVector, records: list[DeltaRecord]) -> ParamVector:
    """Apply the data-weighted average of the deltas to the global model.
    Weights n_k / sum(n_k) are normalized over the participating records."""
    if not records:
        raise ValueError("cannot aggregate zero records")
    total = float(sum(r.n_k for r in records))
    update = records[0].delta.scale(records[0].n_k / total)
    for r in records[1:]:
        update = update + r.delta.scale(r.n_k / total)
    return global_params + update


def server_round(
    spec: ModelSpec,
    global_params: ParamVector,
    devices: list[DeviceState],
    cfg: RoundConfig,
    round_t: int,
    delta_hook: Optional[DeltaHook] = None,
) -> tuple[ParamVector, list[DeltaRecord]]:
    """Sample max(1, round(C*K)) devices without replacement, collect their
    updates in ascending device id order, and aggregate."""
    k = len(devices)
    if k == 0:
        raise ValueError("no devices")
    m = max(1, int(round(cfg.fraction_c * k)))
    rng = rng_from(cfg.seed, "sample", round_t)
    chosen = np.sort(rng.choice(k, size=m, replace=False))
    records = [
        device_update(spec, devices[i], global_params, cfg, round_t, delta_hook) for i in chosen
    ]
    return aggregate(global_params, records), records


def evaluate_task(spec: ModelSpec, params: ParamVector, x: np.ndarray, y: np.ndarray) -> float:
    """Held-out task score: top-1 accuracy (softmax head), mean one-vs-rest
    AP (sigmoid head), or negative mean absolute error (mse head)."""
    scores = nn.predict_proba(spec, params, x)
    if spec.head == "softmax_ce":
        return float((scores.argmax(axis=1) == np.asarray(y)).mean())
    if spec.head == "sigmoid_bce":
        y = np.asarray(y, dtype=np.float64)
        aps = [
            average_precision(scores[:, c], y[:, c] > 0.5)
            for c in range(spec.output_dim)
            if (y[:, c] > 0.5).any()
        ]
        return float(np.mean(aps))
    return float(-np.abs(scores - np.asarray(y, dtype=np.float64)).mean())


def run_federated(
    bundle: DatasetBundle,
    spec: ModelSpec,
    cfg: RoundConfig,
    delta_hook: Optional[DeltaHook] = None,
) -> FederatedRun:
    """Full run: T rounds over the bundle's device population, evaluating on
    the global test split each round and logging every delta."""
    started = time.perf_counter()
    devices = build_devices(bundle)
    params = nn.init_params(spec, seed_from(cfg.seed, "init"))
    test_x = features_of(bundle.test)
    test_y = labels_of(bundle.test)
    records: list[DeltaRecord] = []
    utility: list[float] = []
    for round_t in range(1, cfg.rounds + 1):
        params, round_records = server_round(spec, params, devices, cfg, round_t, delta_hook)
        params.validate_finite()
        records.extend(round_records)
        utility.append(evaluate_task(spec, params, test_x, test_y))
    return FederatedRun(
        final_params=params,
        records=records,
        utility=utility,
        seconds=time.perf_counter() - started,
    )
